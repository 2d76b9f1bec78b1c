"""Batching, the pretraining and finetuning loops, and checkpoint files."""

from __future__ import annotations

import csv
import fnmatch
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tc
from .features import FeatureSequence, LabeledCorpus
from .model import (ModelConfig, ParamSet, cross_entropy, finetune_forward_batch, gather_targets, huber_loss,
                    init_params, is_norm_param, param_shapes, pretrain_forward_batch)
from .optim import AdamState, GradAccumulator, Schedule, adam_step, clip_global_norm, init_adam_state
from .permutation import PERM_MODES, build_masks, permutation_rng, sample_permutation
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SXCK"
CKPT_VERSION = 1


class NumericalError(FloatingPointError):
    def __init__(self, step: int, utterances: list[str], value: float):
        super().__init__(f"non-finite loss {value} at step {step} (utterances: {', '.join(utterances)})")
        self.step = step
        self.utterances = utterances


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None, names: list[str] | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
        self.names = names or []


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    perm_mode: str = "random"
    tail_fraction: float = 0.2
    batch_frames: int = 600
    accum_steps: int = 1
    total_steps: int = 200
    schedule: Schedule = field(default_factory=lambda: Schedule("linear_warmup_decay", 20, 200, 1e-3))
    seed: int = 0
    init_from: str | None = None
    freeze: list[str] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 0.0
    eval_every: int = 50
    dev_fraction: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = Schedule.from_dict(self.schedule)
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.perm_mode not in PERM_MODES:
            raise ValueError(f"unknown perm_mode {self.perm_mode!r}")
        if not 0 < self.tail_fraction <= 1:
            raise ValueError("tail_fraction must lie in (0, 1]")
        if self.total_steps < 1 or self.accum_steps < 1 or self.batch_frames < 1:
            raise ValueError("total_steps, accum_steps and batch_frames must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        self.freeze = list(self.freeze)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ParamSet
    step: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None
    history: list[list] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _sequences(corpus) -> list[FeatureSequence]:
    return corpus.sequences if isinstance(corpus, LabeledCorpus) else list(corpus)


def batch_by_frames(corpus, budget: int, seed: int, epoch: int) -> list[list[int]]:
    """Greedily pack a seeded shuffle of the corpus into batches of at most ``budget`` frames."""
    seqs = _sequences(corpus)
    for s in seqs:
        if s.num_frames > budget:
            raise ValueError(f"utterance {s.utterance_id!r} has {s.num_frames} frames, over the budget of {budget}")
    order = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(len(seqs))
    batches: list[list[int]] = []
    cur: list[int] = []
    used = 0
    for i in order.tolist():
        n = seqs[i].num_frames
        if cur and used + n > budget:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        batches.append(cur)
    return batches


class _BatchStream:
    """Endless epoch-by-epoch iteration over ``batch_by_frames``."""

    def __init__(self, corpus, budget: int, seed: int):
        self.corpus, self.budget, self.seed = corpus, budget, seed
        self.epoch = 0
        self._pending = batch_by_frames(corpus, budget, seed, 0)
        self._pos = 0

    def next(self) -> tuple[int, list[int]]:
        if self._pos == len(self._pending):
            self.epoch += 1
            self._pending = batch_by_frames(self.corpus, self.budget, self.seed, self.epoch)
            self._pos = 0
        batch = self._pending[self._pos]
        self._pos += 1
        return self.epoch, batch


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _matches(name: str, patterns) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


class _Optimizer:
    def __init__(self, params: ParamSet, cfg: TrainConfig, frozen: set[str]):
        self.params, self.cfg = params, cfg
        self.arrays = params.arrays()
        self.state = init_adam_state(self.arrays)
        self.acc = GradAccumulator(cfg.accum_steps)
        self.frozen = frozen
        self.no_decay = {n for n in params.names() if is_norm_param(n) or n == "query_seed"}
        self.step = 0

    def micro_step(self) -> bool:
        """Collect the gradients just computed; True once an update was applied."""
        avg = self.acc.add(self.params.grads())
        self.params.zero_grad()
        if avg is None:
            return False
        if self.cfg.clip_norm > 0:
            clip_global_norm(avg, self.cfg.clip_norm)
        self.step += 1
        lr = self.cfg.schedule(self.step)
        adam_step(self.arrays, avg, self.state, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps,
                  self.cfg.weight_decay, no_decay=self.no_decay, frozen=self.frozen)
        self.lr = lr
        return True


def _check_finite(loss: Tensor, step: int, ids: list[str]) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(step, ids, value)
    return value


def pretrain_loss(params: ParamSet, seqs: list[FeatureSequence], perm_mode: str, tail_fraction: float, seed: int,
                  epoch: int, indices: list[int], train: bool, rng=None) -> Tensor:
    """Mean tail Huber loss of one micro-batch under freshly sampled orders."""
    frames = [s.frames for s in seqs]
    masks = [build_masks(sample_permutation(len(f), perm_mode, permutation_rng(seed, epoch, i)), tail_fraction)
             for f, i in zip(frames, indices)]
    out = pretrain_forward_batch(params, frames, masks, train=train, rng=rng)
    target = gather_targets(frames, out.target_index, params.dtype)
    return huber_loss(out.output, target, params.config.huber_delta)


def pretrain(corpus, config: TrainConfig, model_config: ModelConfig, callback=None) -> Checkpoint:
    """Minimize the tail-frame Huber loss over dynamically sampled factorization orders."""
    seqs = _sequences(corpus)
    if not seqs:
        raise ValueError("pretrain: empty corpus")
    if config.mode != "pretrain":
        raise ValueError("pretrain needs config.mode == 'pretrain'")
    if model_config.F_in != seqs[0].dim:
        raise ValueError(f"model F_in={model_config.F_in} but features have dim {seqs[0].dim}")
    dtype = np.dtype(config.dtype)
    params = init_params(model_config, config.seed, dtype)
    frozen = {n for n in params.names() if _matches(n, config.freeze)}
    opt = _Optimizer(params, config, frozen)
    stream = _BatchStream(seqs, config.batch_frames, config.seed)
    drop_rng = np.random.default_rng([config.seed, 0xD70])
    history: list[list] = []
    micro_losses: list[float] = []
    with tc.precision(dtype):
        while opt.step < config.total_steps:
            epoch, batch = stream.next()
            loss = pretrain_loss(params, [seqs[i] for i in batch], config.perm_mode, config.tail_fraction,
                                 config.seed, epoch, batch, train=True, rng=drop_rng)
            micro_losses.append(_check_finite(loss, opt.step + 1, [seqs[i].utterance_id for i in batch]))
            loss.backward()
            if opt.micro_step():
                value = float(np.mean(micro_losses))
                micro_losses = []
                history.append([opt.step, "train", "huber", value])
                history.append([opt.step, "train", "lr", opt.lr])
                if callback is not None:
                    callback(opt.step, value)
                if opt.step % max(config.eval_every, 1) == 0:
                    log.info("pretrain step %d huber %.5f", opt.step, value)
    return Checkpoint(model_config, params, opt.step, opt.state, drop_rng.bit_generator.state, history,
                      {"mode": "pretrain", "train_config": config.to_dict()})


def split_dev(corpus: LabeledCorpus, fraction: float, seed: int) -> tuple[LabeledCorpus, LabeledCorpus]:
    n = len(corpus)
    n_dev = max(1, round(fraction * n)) if n > 1 else 0
    order = np.random.default_rng([seed, 0xDE5]).permutation(n)
    dev_idx = sorted(order[:n_dev].tolist())
    train_idx = sorted(order[n_dev:].tolist())
    return corpus.subset(train_idx), corpus.subset(dev_idx)


def evaluate_ce(params: ParamSet, corpus: LabeledCorpus, batch_frames: int = 4000) -> dict[str, float]:
    """Frame-weighted CE and frame accuracy, dropout off."""
    view = ParamSet(params.config, {n: Tensor(t.data, dtype=t.dtype) for n, t in params.items()})
    total_ce, correct, frames = 0.0, 0, 0
    budget = max(batch_frames, max(s.num_frames for s in corpus.sequences))
    for batch in batch_by_frames(corpus, budget, 0, 0):
        out = finetune_forward_batch(view, [corpus.sequences[i].frames for i in batch])
        logits = out.output.data.astype(np.float64)
        labels = np.concatenate([corpus.labels[i] for i in batch])
        m = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
        total_ce += float((lse - logits[np.arange(len(labels)), labels]).sum())
        correct += int((logits.argmax(axis=1) == labels).sum())
        frames += len(labels)
    return {"ce": total_ce / frames, "frame_accuracy": correct / frames}


def load_encoder(params: ParamSet, ckpt: Checkpoint, skip=("cls_head.*",)) -> None:
    """Copy every checkpoint tensor except ``skip`` patterns into ``params``."""
    src = ckpt.params
    bad = [n for n in params.names() if not _matches(n, skip)
           and (n not in src.tensors or src[n].shape != params[n].shape)]
    if bad:
        detail = ", ".join(f"{n} {src[n].shape if n in src.tensors else 'missing'} vs {params[n].shape}"
                           for n in bad)
        raise CheckpointError(f"checkpoint does not fit the model: {detail}", names=bad)
    for n in params.names():
        if not _matches(n, skip):
            params[n].data[...] = src[n].data.astype(params.dtype)


def finetune_init(model_config: ModelConfig, config: TrainConfig, init: Checkpoint | None = None) -> ParamSet:
    """Starting point of a finetune run: seeded init, encoder overwritten from ``init`` when given."""
    params = init_params(model_config, config.seed, np.dtype(config.dtype))
    if init is not None:
        load_encoder(params, init)
    return params


def finetune(corpus: LabeledCorpus, config: TrainConfig, model_config: ModelConfig, dev: LabeledCorpus | None = None,
             init: Checkpoint | None = None, callback=None) -> tuple[Checkpoint, dict]:
    """Frame-level CE training of the content stream; encoder optionally initialized from ``init``."""
    if config.mode != "finetune":
        raise ValueError("finetune needs config.mode == 'finetune'")
    if len(corpus) == 0:
        raise ValueError("finetune: empty corpus")
    if init is None and config.init_from not in (None, "", "none"):
        init = load_checkpoint(config.init_from)
    if dev is None:
        corpus, dev = split_dev(corpus, config.dev_fraction, config.seed)
    if model_config.C_out < corpus.num_classes:
        raise ValueError(f"C_out={model_config.C_out} < {corpus.num_classes} classes")
    params = finetune_init(model_config, config, init)
    dtype = params.dtype
    frozen = {n for n in params.names() if _matches(n, config.freeze)}
    # never trained at finetune time
    frozen |= {"query_seed", "reg_head.W", "reg_head.b"}
    opt = _Optimizer(params, config, frozen)
    seqs = corpus.sequences
    stream = _BatchStream(seqs, config.batch_frames, config.seed)
    drop_rng = np.random.default_rng([config.seed, 0xD71])
    history: list[list] = []
    micro_losses: list[float] = []

    def record_eval(step):
        if dev is None or len(dev) == 0:
            return None
        m = evaluate_ce(params, dev, config.batch_frames)
        history.append([step, "dev", "ce", m["ce"]])
        history.append([step, "dev", "frame_accuracy", m["frame_accuracy"]])
        log.info("finetune step %d dev ce %.4f acc %.4f", step, m["ce"], m["frame_accuracy"])
        return m

    with tc.precision(dtype):
        last = record_eval(0)
        while opt.step < config.total_steps:
            epoch, batch = stream.next()
            out = finetune_forward_batch(params, [seqs[i].frames for i in batch], train=True, rng=drop_rng)
            labels = np.concatenate([corpus.labels[i] for i in batch])
            loss = cross_entropy(out.output, labels)
            micro_losses.append(_check_finite(loss, opt.step + 1, [seqs[i].utterance_id for i in batch]))
            loss.backward()
            if opt.micro_step():
                value = float(np.mean(micro_losses))
                micro_losses = []
                history.append([opt.step, "train", "ce", value])
                if callback is not None:
                    callback(opt.step, value)
                if opt.step % max(config.eval_every, 1) == 0 or opt.step == config.total_steps:
                    last = record_eval(opt.step)
    metrics = dict(last or {})
    train_rows = [r[3] for r in history if r[1] == "train"]
    metrics["train_ce"] = train_rows[-1] if train_rows else float("nan")
    ckpt = Checkpoint(model_config, params, opt.step, opt.state, drop_rng.bit_generator.state, history,
                      {"mode": "finetune", "train_config": config.to_dict(),
                       "init_from": config.init_from or "none"})
    return ckpt, metrics


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def _checkpoint_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(n, t.data) for n, t in ckpt.params.items()]
    if ckpt.adam is not None:
        out += [(f"adam.m/{n}", a) for n, a in ckpt.adam.m.items()]
        out += [(f"adam.v/{n}", a) for n, a in ckpt.adam.v.items()]
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    table, payload, offset = [], [], 0
    for name, arr in _checkpoint_arrays(ckpt):
        dt = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype="<" + dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "step": ckpt.step,
        "adam_t": ckpt.adam.t if ckpt.adam is not None else None,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "meta": ckpt.meta,
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<II", ckpt.version, len(blob)) + blob + b"".join(payload))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not an SXCK checkpoint", 0)
    if len(buf) < 12:
        raise CheckpointError("truncated header", len(buf))
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})", 4)
    if 12 + hlen > len(buf):
        raise CheckpointError(f"truncated header: {hlen} bytes declared, {len(buf) - 12} present", 12)
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}", 12) from None
    base = 12 + hlen
    cfg = ModelConfig.from_dict(header["model_config"])
    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header["tensors"]:
        name, shape, dt = entry["name"], tuple(entry["shape"]), entry["dtype"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * (8 if dt == "f8" else 4)
        if entry["offset"] != expected_offset or entry["nbytes"] != nbytes:
            raise CheckpointError(f"corrupt length table at tensor {name!r}", base + expected_offset)
        start = base + entry["offset"]
        if start + nbytes > len(buf):
            raise CheckpointError(f"truncated payload for tensor {name!r}", len(buf))
        arrays[name] = np.frombuffer(buf, dtype="<" + dt, count=nbytes // (8 if dt == "f8" else 4),
                                     offset=start).reshape(shape).astype(dt)
        expected_offset += nbytes
    if base + expected_offset != len(buf):
        raise CheckpointError(f"{len(buf) - base - expected_offset} trailing bytes", base + expected_offset)

    check_cfg = expected_config or cfg
    shapes = param_shapes(check_cfg)
    for name, shape in shapes.items():
        if name not in arrays or arrays[name].shape != shape:
            got = arrays[name].shape if name in arrays else "missing"
            raise CheckpointError(f"tensor {name!r}: checkpoint has {got}, model expects {shape}", names=[name])
    params = ParamSet(cfg, {n: Tensor(arrays[n], requires_grad=True, name=n, dtype=arrays[n].dtype)
                            for n in shapes})
    adam = None
    if header.get("adam_t") is not None:
        adam = AdamState({n: arrays[f"adam.m/{n}"].copy() for n in shapes},
                         {n: arrays[f"adam.v/{n}"].copy() for n in shapes}, int(header["adam_t"]))
    return Checkpoint(cfg, params, int(header["step"]), adam, header.get("rng_state"), header.get("history", []),
                      header.get("meta", {}), version)


def write_metrics_csv(history: list[list], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "split", "metric", "value"])
        for step, split, metric, value in history:
            w.writerow([step, split, metric, repr(float(value))])
