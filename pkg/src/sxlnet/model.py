"""Two-stream self-attention encoder.

Pretraining runs two streams through the same pre-norm transformer blocks:

* the content stream ``H`` starts from the projected frames and may attend
  to itself and every earlier-ranked position;
* the query stream ``G`` starts from a learned seed vector ``w`` plus the
  position encoding and attends only to the *content* states of strictly
  earlier-ranked positions, so it never sees the frame it predicts.

Finetuning keeps only the content stream, with full bidirectional
visibility, and puts a frame classifier on top.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .features import FeatureSequence
from .permutation import AttentionMasks
from .tensor import Tensor


@dataclass
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 64
    d_inner: int = 256
    dropout_p: float = 0.1
    huber_delta: float = 1.0
    F_in: int = 40
    C_out: int = 6
    pos_encoding: str = "sinusoidal"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "d_model", "d_inner", "F_in", "C_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.pos_encoding != "sinusoidal":
            raise ValueError(f"unsupported pos_encoding {self.pos_encoding!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "toy": ModelConfig(),
    "tiny": ModelConfig(num_layers=2, num_heads=2, d_model=16, d_inner=32, F_in=8, C_out=4, dropout_p=0.0),
    "hybrid_timit": ModelConfig(num_layers=6, num_heads=8, d_model=512, d_inner=2048, dropout_p=0.1, F_in=40),
    "e2e_wsj": ModelConfig(num_layers=12, num_heads=4, d_model=256, d_inner=2048, dropout_p=0.1, F_in=120,
                           C_out=32),
}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape, in the canonical (serialization) order."""
    d, di = cfg.d_model, cfg.d_inner
    shapes: dict[str, tuple[int, ...]] = {"input_proj.W": (cfg.F_in, d), "input_proj.b": (d,)}
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.Wq": (d, d), p + "attn.Wk": (d, d), p + "attn.Wv": (d, d), p + "attn.Wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.W1": (d, di), p + "ffn.b1": (di,), p + "ffn.W2": (di, d), p + "ffn.b2": (d,),
        })
    shapes.update({
        "ln_f.gain": (d,), "ln_f.bias": (d,),
        "query_seed": (d,),
        "reg_head.W": (d, cfg.F_in), "reg_head.b": (cfg.F_in,),
        "cls_head.W": (d, cfg.C_out), "cls_head.b": (cfg.C_out,),
    })
    return shapes


def is_norm_param(name: str) -> bool:
    return ".ln" in name or name.startswith("ln_f.")


class ParamSet:
    """Ordered name -> Tensor map bound to its :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            missing = [n for n in expected if n not in tensors]
            extra = [n for n in tensors if n not in expected]
            raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n,
                                                dtype=t.dtype) for n, t in self.tensors.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.config, {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=n,
                                                dtype=dtype) for n, t in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.tensors.items()}


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> ParamSet:
    """Uniform +-sqrt(6/(fan_in+fan_out)) for matrices and ``w``; LN gains 1, biases 0.

    The classifier matrix uses the same bound divided by sqrt(d_model).
    """
    dtype = np.dtype(dtype or tc.get_default_dtype())
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            if name == "cls_head.W":
                # keeps fresh logits near uniform (CE close to ln C) despite the unit-variance ln_f output
                bound /= math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif name == "query_seed":
            bound = math.sqrt(6.0 / (1 + shape[0]))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name, dtype=dtype)
    return ParamSet(config, tensors)


@lru_cache(maxsize=64)
def _sinusoid(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def positional_encoding(T: int, d: int) -> np.ndarray:
    return _sinusoid(T, d)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class StreamStates:
    content: list[np.ndarray]  # per layer, B x T x d (layer 0 = embeddings)
    query: list[np.ndarray] | None


@dataclass
class ForwardOutput:
    output: Tensor  # predictions (N x F_in) or logits (N x C_out)
    states: StreamStates
    attention: list[dict[str, np.ndarray]]  # per layer: stream -> B x heads x T x T
    target_index: tuple[np.ndarray, np.ndarray]  # (batch, time) of each output row


class _Block:
    """One pre-norm transformer block applied to one or two streams."""

    def __init__(self, params: ParamSet, layer: int):
        p = f"layers.{layer}."
        self.g = {k: params[p + k] for k in ("ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias", "attn.Wq",
                                            "attn.Wk", "attn.Wv", "attn.Wo", "ffn.W1", "ffn.b1", "ffn.W2",
                                            "ffn.b2")}
        self.cfg = params.config

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        h = self.cfg.num_heads
        return tc.transpose(tc.reshape(x, (b, t, h, self.cfg.d_model // h)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, _, t, _ = x.shape
        return tc.reshape(tc.transpose(x, (0, 2, 1, 3)), (b, t, self.cfg.d_model))

    def norm1(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.g["ln1.gain"], self.g["ln1.bias"], self.cfg.ln_eps)

    def attend(self, q_normed: Tensor, k: Tensor, v: Tensor, mask: np.ndarray):
        g = self.g
        q = self._heads(q_normed @ g["attn.Wq"])
        scale = 1.0 / math.sqrt(self.cfg.d_model // self.cfg.num_heads)
        scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))) * scale
        probs = tc.masked_softmax(scores, mask[:, None, :, :])
        return self._merge(probs @ v) @ g["attn.Wo"], probs

    def ffn(self, x: Tensor) -> Tensor:
        g = self.g
        hn = tc.layer_norm(x, g["ln2.gain"], g["ln2.bias"], self.cfg.ln_eps)
        return tc.relu(hn @ g["ffn.W1"] + g["ffn.b1"]) @ g["ffn.W2"] + g["ffn.b2"]

    def __call__(self, h: Tensor, gq: Tensor | None, content_mask, query_mask, drop):
        g = self.g
        hn = self.norm1(h)
        k = self._heads(hn @ g["attn.Wk"])
        v = self._heads(hn @ g["attn.Wv"])
        att_h, p_h = self.attend(hn, k, v, content_mask)
        probs = {"content": p_h.data}
        h = h + drop(att_h)
        h = h + drop(self.ffn(h))
        if gq is not None:
            # query stream reads keys/values of the previous content layer
            att_g, p_g = self.attend(self.norm1(gq), k, v, query_mask)
            probs["query"] = p_g.data
            gq = gq + drop(att_g)
            gq = gq + drop(self.ffn(gq))
        return h, gq, probs


def _as_frames(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, FeatureSequence):
        x = x.frames
    return Tensor(np.asarray(x), dtype=dtype)


def pad_batch(frames: list, dtype) -> tuple[Tensor, np.ndarray]:
    """Stack T_b x F matrices (or a single B x T x F tensor) into B x Tmax x F plus a validity mask."""
    if isinstance(frames, Tensor):
        if frames.ndim == 2:
            frames = tc.reshape(frames, (1,) + frames.shape)
        return frames, np.ones(frames.shape[:2], dtype=bool)
    arrs = [f.frames if isinstance(f, FeatureSequence) else np.asarray(f) for f in frames]
    lengths = [a.shape[0] for a in arrs]
    tmax = max(lengths)
    x = np.zeros((len(arrs), tmax, arrs[0].shape[1]), dtype=dtype)
    valid = np.zeros((len(arrs), tmax), dtype=bool)
    for i, a in enumerate(arrs):
        x[i, :len(a)] = a
        valid[i, :len(a)] = True
    return Tensor(x, dtype=dtype), valid


def _dropper(p: float, rng, train: bool):
    def drop(x: Tensor) -> Tensor:
        return tc.dropout(x, p, rng, train)
    return drop


def _embed(params: ParamSet, x: Tensor, T: int) -> Tensor:
    pe = positional_encoding(T, params.config.d_model).astype(params.dtype)
    return x @ params["input_proj.W"] + params["input_proj.b"] + pe


def encode(params: ParamSet, x: Tensor, content_mask: np.ndarray, query_mask: np.ndarray | None = None,
           train: bool = False, rng: np.random.Generator | None = None):
    """Run all blocks. ``x`` is B x T x F_in; masks are B x T x T booleans.

    Returns final-normed content states, final-normed query states (or
    None), the per-layer states and the per-layer attention probabilities.
    """
    cfg = params.config
    b, t, f = x.shape
    if f != cfg.F_in:
        raise ValueError(f"input dim {f} != F_in {cfg.F_in}")
    drop = _dropper(cfg.dropout_p, rng, train)
    h = drop(_embed(params, x, t))
    gq = None
    if query_mask is not None:
        pe = positional_encoding(t, cfg.d_model).astype(params.dtype)
        gq = drop(tc.add(tc.reshape(params["query_seed"], (1, 1, cfg.d_model)), pe[None]))
        # every batch row starts from the same seed; broadcast explicitly for the per-row residual
        gq = tc.add(gq, np.zeros((b, t, cfg.d_model), dtype=params.dtype))
    hs, gs, attn = [h.data], ([gq.data] if gq is not None else None), []
    for l in range(cfg.num_layers):
        h, gq, probs = _Block(params, l)(h, gq, content_mask, query_mask, drop)
        hs.append(h.data)
        if gs is not None:
            gs.append(gq.data)
        attn.append(probs)
    h_out = tc.layer_norm(h, params["ln_f.gain"], params["ln_f.bias"], cfg.ln_eps)
    g_out = tc.layer_norm(gq, params["ln_f.gain"], params["ln_f.bias"], cfg.ln_eps) if gq is not None else None
    return h_out, g_out, StreamStates(hs, gs), attn


def _check_masks(masks: list[AttentionMasks], lengths: list[int]) -> None:
    for i, (m, n) in enumerate(zip(masks, lengths)):
        if m.length != n:
            raise ValueError(f"sequence {i}: masks built for T={m.length} but sequence has T={n}")


def pretrain_forward_batch(params: ParamSet, frames, masks: list[AttentionMasks], train: bool = False,
                           rng: np.random.Generator | None = None) -> ForwardOutput:
    x, valid = pad_batch(frames, params.dtype)
    lengths = valid.sum(axis=1).tolist()
    _check_masks(masks, lengths)
    b, t = valid.shape
    content = np.zeros((b, t, t), dtype=bool)
    query = np.zeros((b, t, t), dtype=bool)
    bi, ti = [], []
    for i, (m, n) in enumerate(zip(masks, lengths)):
        content[i, :n, :n] = m.content
        query[i, :n, :n] = m.query
        bi.append(np.full(len(m.targets), i))
        ti.append(m.targets)
    index = (np.concatenate(bi), np.concatenate(ti))
    _, g_out, states, attn = encode(params, x, content, query, train, rng)
    g_tgt = tc.gather_rows(g_out, index)
    pred = g_tgt @ params["reg_head.W"] + params["reg_head.b"]
    return ForwardOutput(pred, states, attn, index)


def pretrain_forward(params: ParamSet, seq, masks: AttentionMasks, train: bool = False,
                     rng: np.random.Generator | None = None) -> ForwardOutput:
    """Predict the target frames of one sequence (rows follow ``masks.targets``)."""
    x = _as_frames(seq, params.dtype)
    t = x.shape[0] if x.ndim == 2 else x.shape[1]
    if masks.length != t:
        raise ValueError(f"masks built for T={masks.length} but sequence has T={t}")
    return pretrain_forward_batch(params, x, [masks], train, rng)


def finetune_forward_batch(params: ParamSet, frames, train: bool = False,
                           rng: np.random.Generator | None = None) -> ForwardOutput:
    x, valid = pad_batch(frames, params.dtype)
    mask = valid[:, None, :] & valid[:, :, None]
    h_out, _, states, attn = encode(params, x, mask, None, train, rng)
    index = np.nonzero(valid)
    h_valid = tc.gather_rows(h_out, index)
    logits = h_valid @ params["cls_head.W"] + params["cls_head.b"]
    return ForwardOutput(logits, states, attn, index)


def finetune_forward(params: ParamSet, seq, train: bool = False,
                     rng: np.random.Generator | None = None) -> ForwardOutput:
    """Frame logits (T x C_out) from the content stream with full visibility."""
    return finetune_forward_batch(params, _as_frames(seq, params.dtype), train, rng)


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    return tc.huber_loss(pred, target, delta)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return tc.cross_entropy(logits, labels)


def gather_targets(frames: list[np.ndarray], index: tuple[np.ndarray, np.ndarray], dtype) -> np.ndarray:
    """Regression targets matching the row order of a pretrain forward."""
    return np.stack([np.asarray(frames[b])[t] for b, t in zip(*index)]).astype(dtype)
