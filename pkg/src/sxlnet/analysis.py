"""Loss curves along the init -> trained direction and attention-score dumps."""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .features import FeatureSequence, LabeledCorpus
from .model import ParamSet, finetune_forward_batch, pretrain_forward, finetune_forward
from .permutation import AttentionMasks, build_masks, permutation_rng, sample_permutation
from .tensor import Tensor
from .trainer import Checkpoint, batch_by_frames, evaluate_ce, gather_targets, pretrain_forward_batch


class LandscapeError(ValueError):
    pass


@dataclass
class LandscapeCurve:
    alphas: list[float]
    losses: list[float]
    metadata: dict = field(default_factory=dict)


def alpha_grid(alpha_min: float = -4.0, alpha_max: float = 4.0, n_points: int = 40) -> np.ndarray:
    if n_points < 2:
        raise LandscapeError("n_points must be >= 2")
    if not alpha_min < alpha_max:
        raise LandscapeError("alpha_min must be < alpha_max")
    return np.linspace(alpha_min, alpha_max, n_points)


def interpolate(theta0: ParamSet, theta1: ParamSet, alpha: float, frozen: set[str]) -> ParamSet:
    """``(1-a)*theta0 + a*theta1`` on free tensors; frozen tensors keep their ``theta1`` value.

    Written in this form (rather than ``theta0 + a*(theta1-theta0)``) so
    that a=0 and a=1 reproduce the endpoints bit for bit.
    """
    out = {}
    for name, t1 in theta1.items():
        a1 = t1.data.astype(np.float64)
        if name in frozen:
            arr = a1
        else:
            arr = (1.0 - alpha) * theta0[name].data.astype(np.float64) + alpha * a1
        out[name] = Tensor(arr.astype(t1.dtype), name=name, dtype=t1.dtype)
    return ParamSet(theta1.config, out)


def _huber_sum(pred: np.ndarray, target: np.ndarray, delta: float) -> float:
    a = np.abs(pred.astype(np.float64) - target)
    return float(np.where(a < delta, a * a / (2 * delta), a - delta / 2).sum())


def dataset_loss(params: ParamSet, dataset, tail_fraction: float = 0.2, perm_mode: str = "random",
                 seed: int = 0, batch_frames: int = 4000) -> float:
    """CE for a labelled corpus, otherwise tail Huber under fixed seeded orders. Dropout off."""
    if isinstance(dataset, LabeledCorpus):
        return evaluate_ce(params, dataset, batch_frames)["ce"]
    seqs: list[FeatureSequence] = list(dataset)
    view = ParamSet(params.config, {n: Tensor(t.data, dtype=t.dtype) for n, t in params.items()})
    total, count = 0.0, 0
    budget = max(batch_frames, max(s.num_frames for s in seqs))
    for batch in batch_by_frames(seqs, budget, seed, 0):
        frames = [seqs[i].frames for i in batch]
        masks = [build_masks(sample_permutation(len(f), perm_mode, permutation_rng(seed, 0, i)), tail_fraction)
                 for f, i in zip(frames, batch)]
        out = pretrain_forward_batch(view, frames, masks)
        target = gather_targets(frames, out.target_index, np.float64)
        total += _huber_sum(out.output.data, target, params.config.huber_delta)
        count += target.size
    return total / count


def _check_compatible(p0: ParamSet, p1: ParamSet) -> None:
    if p0.names() != p1.names():
        raise LandscapeError("checkpoints have different parameter names")
    for n in p0.names():
        if p0[n].shape != p1[n].shape:
            raise LandscapeError(f"tensor {n!r}: shapes {p0[n].shape} vs {p1[n].shape}")


def loss_landscape(ckpt0: Checkpoint, ckpt1: Checkpoint, dataset, alpha_min: float = -4.0,
                   alpha_max: float = 4.0, n_points: int = 40, frozen_patterns=("cls_head.*",),
                   alphas=None, **loss_kw) -> LandscapeCurve:
    """Evaluate ``f(a) = J((1-a)*theta0 + a*theta1)`` over an evenly spaced grid of ``a``."""
    p0, p1 = ckpt0.params, ckpt1.params
    _check_compatible(p0, p1)
    grid = alpha_grid(alpha_min, alpha_max, n_points) if alphas is None else np.asarray(alphas, dtype=np.float64)
    if np.any(np.diff(grid) <= 0):
        raise LandscapeError("alphas must be strictly increasing")
    frozen = {n for n in p1.names() if any(fnmatch.fnmatchcase(n, p) for p in frozen_patterns)}
    losses = []
    with tc.precision(p1.dtype):
        for a in grid:
            losses.append(dataset_loss(interpolate(p0, p1, float(a), frozen), dataset, **loss_kw))
    if not np.all(np.isfinite(losses)):
        raise LandscapeError("non-finite loss on the interpolation grid")
    meta = {
        "ckpt0_step": ckpt0.step, "ckpt1_step": ckpt1.step,
        "ckpt0_meta": ckpt0.meta.get("mode"), "ckpt1_meta": ckpt1.meta.get("mode"),
        "loss": "ce" if isinstance(dataset, LabeledCorpus) else "huber",
        "dataset_size": len(dataset),
        "frozen": sorted(frozen),
    }
    return LandscapeCurve([float(a) for a in grid], [float(v) for v in losses], meta)


def write_landscape(curve: LandscapeCurve, path, meta_path=None) -> None:
    lines = ["alpha,loss"] + [f"{a!r},{v!r}" for a, v in zip(curve.alphas, curve.losses)]
    Path(path).write_text("\n".join(lines) + "\n")
    if meta_path is not None:
        Path(meta_path).write_text(json.dumps(curve.metadata, indent=2, sort_keys=True) + "\n")


def read_landscape(path) -> LandscapeCurve:
    rows = Path(path).read_text().strip().splitlines()[1:]
    pairs = [tuple(map(float, r.split(","))) for r in rows]
    return LandscapeCurve([a for a, _ in pairs], [v for _, v in pairs])


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionDump:
    scores: dict[tuple[str, int, int], np.ndarray]  # (stream, layer, head) -> T x T
    masks: dict[str, np.ndarray]  # stream -> T x T visibility
    metadata: dict = field(default_factory=dict)


def dump_attention(ckpt: Checkpoint, seq, mode: str = "finetune", masks: AttentionMasks | None = None) -> AttentionDump:
    """Post-softmax attention probabilities of every layer and head for one sequence.

    ``mode="pretrain"`` needs ``masks`` and reports both streams;
    ``mode="finetune"`` reports the content stream with full visibility.
    """
    params = ckpt.params
    view = ParamSet(params.config, {n: Tensor(t.data, dtype=t.dtype) for n, t in params.items()})
    frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq)
    t = frames.shape[0]
    with tc.precision(params.dtype):
        if mode == "pretrain":
            if masks is None:
                raise ValueError("pretrain mode needs attention masks")
            out = pretrain_forward(view, frames, masks)
            vis = {"content": masks.content, "query": masks.query}
        elif mode == "finetune":
            out = finetune_forward(view, frames)
            vis = {"content": np.ones((t, t), dtype=bool)}
        else:
            raise ValueError(f"unknown mode {mode!r}")
    scores = {}
    for layer, probs in enumerate(out.attention):
        for stream, p in probs.items():
            for head in range(p.shape[1]):
                scores[(stream, layer, head)] = np.array(p[0, head], dtype=np.float64)
    meta = {"mode": mode, "T": t, "num_layers": params.config.num_layers, "num_heads": params.config.num_heads,
            "utterance_id": getattr(seq, "utterance_id", "")}
    if masks is not None and mode == "pretrain":
        meta["targets"] = masks.targets.tolist()
    return AttentionDump(scores, vis, meta)


def attention_stats(probs: np.ndarray) -> dict[str, float]:
    """Mean row entropy and mean |argmax(row) - row index| over rows with any mass."""
    live = probs.sum(axis=1) > 0
    if not live.any():
        return {"row_entropy": 0.0, "diagonal_offset": 0.0, "rows": 0}
    p = probs[live]
    ent = -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum(axis=1)
    offset = np.abs(p.argmax(axis=1) - np.flatnonzero(live))
    return {"row_entropy": float(ent.mean()), "diagonal_offset": float(offset.mean()), "rows": int(live.sum())}


def mask_baseline(mask: np.ndarray) -> np.ndarray:
    """Uniform attention over each row's visible set."""
    m = mask.astype(np.float64)
    z = m.sum(axis=1, keepdims=True)
    return np.divide(m, z, out=np.zeros_like(m), where=z > 0)


def write_attention_dump(dump: AttentionDump, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stats = {}
    for (stream, layer, head), p in sorted(dump.scores.items()):
        path = out_dir / f"{stream}_layer{layer}_head{head}.txt"
        rows = [" ".join(repr(float(v)) for v in row) for row in p]
        path.write_text(f"{p.shape[0]}\n" + "\n".join(rows) + "\n")
        written.append(path)
        s = attention_stats(p)
        s["mask_baseline"] = attention_stats(mask_baseline(dump.masks[stream]))
        stats[path.name] = s
    meta = dict(dump.metadata)
    meta["files"] = stats
    side = out_dir / "attention.json"
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(side)
    return written


def read_attention_file(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    t = int(lines[0])
    arr = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if arr.shape != (t, t):
        raise ValueError(f"{path}: expected {t}x{t}, got {arr.shape}")
    return arr
