"""Feature containers, SXLF/SXLL file I/O, global CMVN, frame stacking and
a synthetic labelled corpus."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"SXLF"
LABEL_MAGIC = b"SXLL"
FORMAT_VERSION = 1


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureSequence:
    frames: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.utterance_id!r}: frames must be T x F with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.utterance_id!r}: non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class CmvnStats:
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "variance": self.variance.tolist(), "frame_count": self.frame_count}

    @classmethod
    def from_dict(cls, d: dict) -> "CmvnStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["variance"], dtype=np.float64),
                   int(d["frame_count"]))


@dataclass
class LabeledCorpus:
    sequences: list[FeatureSequence]
    labels: list[np.ndarray]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.sequences) != len(self.labels):
            raise ValueError("one label array per sequence required")
        for seq, lab in zip(self.sequences, self.labels):
            if len(lab) != seq.num_frames:
                raise ValueError(f"{seq.utterance_id}: {len(lab)} labels for {seq.num_frames} frames")

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, indices) -> "LabeledCorpus":
        idx = list(indices)
        return LabeledCorpus([self.sequences[i] for i in idx], [self.labels[i] for i in idx],
                             self.num_classes, dict(self.meta))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_features(seqs: list[FeatureSequence], path) -> None:
    parts = [FEATURE_MAGIC, struct.pack("<II", FORMAT_VERSION, len(seqs))]
    for seq in seqs:
        uid = seq.utterance_id.encode("utf-8")
        t, f = seq.frames.shape
        parts.append(struct.pack("<I", len(uid)))
        parts.append(uid)
        parts.append(struct.pack("<II", t, f))
        parts.append(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FeatureFormatError(
                f"truncated file: {what} needs {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def header(self, magic: bytes) -> int:
        if self.buf[:4] != magic:
            raise FeatureFormatError(f"bad magic: expected {magic.decode()}", 0)
        self.pos = 4
        version = self.u32("version")
        if version != FORMAT_VERSION:
            raise FeatureFormatError(f"unsupported format version {version}", 4)
        return self.u32("utterance count")


def load_features(path) -> list[FeatureSequence]:
    r = _Reader(Path(path).read_bytes())
    count = r.header(FEATURE_MAGIC)
    seqs = []
    for _ in range(count):
        uid = r.take(r.u32("id length"), "utterance id").decode("utf-8")
        t = r.u32("frame count")
        f = r.u32("feature dim")
        if t < 1 or f < 1:
            raise FeatureFormatError(f"{uid}: empty matrix {t}x{f}", r.pos - 8)
        start = r.pos
        frames = np.frombuffer(r.take(4 * t * f, f"{uid} payload ({t}x{f} floats)"), dtype="<f4")
        bad = np.flatnonzero(~np.isfinite(frames))
        if bad.size:
            raise FeatureFormatError(f"{uid}: non-finite feature value", start + 4 * int(bad[0]))
        seqs.append(FeatureSequence(frames.reshape(t, f).astype(np.float32), uid))
    if r.pos != len(r.buf):
        raise FeatureFormatError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return seqs


def save_labels(labels: list[np.ndarray], path) -> None:
    parts = [LABEL_MAGIC, struct.pack("<II", FORMAT_VERSION, len(labels))]
    for lab in labels:
        lab = np.asarray(lab)
        parts.append(struct.pack("<I", len(lab)))
        parts.append(np.ascontiguousarray(lab, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_labels(path) -> list[np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    count = r.header(LABEL_MAGIC)
    out = []
    for i in range(count):
        n = r.u32("label count")
        out.append(np.frombuffer(r.take(4 * n, f"labels of utterance {i}"), dtype="<u4").astype(np.int64))
    if r.pos != len(r.buf):
        raise FeatureFormatError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return out


def load_corpus(features_path, labels_path, num_classes: int | None = None) -> LabeledCorpus:
    seqs = load_features(features_path)
    labels = load_labels(labels_path)
    if num_classes is None:
        num_classes = int(max(int(lab.max()) for lab in labels if len(lab))) + 1
    return LabeledCorpus(seqs, labels, num_classes)


# ---------------------------------------------------------------------------
# normalization and stacking
# ---------------------------------------------------------------------------


def compute_global_cmvn(corpus) -> CmvnStats:
    """Corpus-wide per-dimension mean and biased variance."""
    seqs = corpus.sequences if isinstance(corpus, LabeledCorpus) else list(corpus)
    if not seqs:
        raise ValueError("compute_global_cmvn: empty corpus")
    dim = seqs[0].dim
    total = np.zeros(dim)
    total_sq = np.zeros(dim)
    n = 0
    # shifted sums keep the single-pass variance accurate
    shift = seqs[0].frames[0].astype(np.float64)
    for seq in seqs:
        if seq.dim != dim:
            raise ValueError(f"{seq.utterance_id}: dim {seq.dim} != {dim}")
        x = seq.frames.astype(np.float64) - shift
        total += x.sum(axis=0)
        total_sq += (x * x).sum(axis=0)
        n += seq.num_frames
    m = total / n
    var = np.maximum(total_sq / n - m * m, 0.0)
    return CmvnStats(m + shift, var, n)


def apply_cmvn(seq: FeatureSequence, stats: CmvnStats, variance_floor: float = 1e-10) -> FeatureSequence:
    if seq.dim != stats.mean.shape[0]:
        raise ValueError(f"apply_cmvn: sequence dim {seq.dim} vs stats dim {stats.mean.shape[0]}")
    scale = 1.0 / np.sqrt(np.maximum(stats.variance, variance_floor))
    y = (seq.frames.astype(np.float64) - stats.mean) * scale
    return FeatureSequence(y.astype(seq.frames.dtype), seq.utterance_id)


def stack_frames(seq: FeatureSequence, stack: int = 3, skip: int = 3) -> FeatureSequence:
    """Concatenate ``stack`` consecutive frames every ``skip`` frames.

    Frames past the end are filled by repeating the last frame, so the output
    has ``ceil(T / skip)`` rows of width ``stack * F``.
    """
    if stack < 1 or skip < 1:
        raise ValueError("stack and skip must be >= 1")
    t = seq.num_frames
    starts = np.arange(0, t, skip)
    idx = np.minimum(starts[:, None] + np.arange(stack)[None, :], t - 1)
    out = seq.frames[idx].reshape(len(starts), stack * seq.dim)
    return FeatureSequence(out, seq.utterance_id)


def stack_labels(labels: np.ndarray, skip: int) -> np.ndarray:
    """Labels of the first frame in each stacked window."""
    return np.asarray(labels)[::skip]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def emission_means(num_classes: int, dim: int, world_seed: int = 0, spread: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng([world_seed, num_classes, dim])
    return rng.normal(0.0, spread, size=(num_classes, dim))


def gen_synthetic(num_utts: int, T_range=(20, 60), F: int = 40, num_classes: int = 6, seed: int = 0, *,
                  world_seed: int = 0, stay_prob: float = 0.9, noise: float = 1.5,
                  speaker_scale: float = 0.0, smooth: float = 0.0) -> LabeledCorpus:
    """Generate a labelled corpus from a sticky hidden-state process.

    Each class owns a Gaussian mean vector (fixed by ``world_seed`` so
    corpora drawn with different ``seed`` share one emission model). A state
    persists with probability ``stay_prob`` per frame, which makes adjacent
    frames correlated. ``speaker_scale`` adds a per-utterance offset and
    ``smooth`` low-pass filters the noise over time.
    """
    if num_utts < 1:
        raise ValueError("num_utts must be >= 1")
    lo, hi = T_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad T_range {T_range}")
    if num_classes < 1 or F < 1:
        raise ValueError("num_classes and F must be >= 1")
    means = emission_means(num_classes, F, world_seed)
    rng = np.random.default_rng(seed)
    seqs, labels = [], []
    for u in range(num_utts):
        t = int(rng.integers(lo, hi + 1))
        states = np.empty(t, dtype=np.int64)
        states[0] = rng.integers(num_classes)
        for i in range(1, t):
            if num_classes > 1 and rng.random() >= stay_prob:
                # jump to a different state
                nxt = rng.integers(num_classes - 1)
                states[i] = nxt + (nxt >= states[i - 1])
            else:
                states[i] = states[i - 1]
        eps = rng.normal(0.0, noise, size=(t, F))
        if smooth > 0:
            for i in range(1, t):
                eps[i] = smooth * eps[i - 1] + math.sqrt(1 - smooth * smooth) * eps[i]
        offset = rng.normal(0.0, speaker_scale, size=F) if speaker_scale > 0 else 0.0
        frames = means[states] + eps + offset
        seqs.append(FeatureSequence(frames.astype(np.float32), f"syn{seed}-{u:05d}"))
        labels.append(states)
    return LabeledCorpus(seqs, labels, num_classes,
                         {"seed": seed, "world_seed": world_seed, "stay_prob": stay_prob, "noise": noise})
