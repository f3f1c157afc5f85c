"""Synthetic speech-like corpus, its binary file format, and padded batching.

Each utterance alternates silence gaps (low-level noise) with noisy
renderings of per-symbol prototype patterns, so a good intermediate CTC
emits blanks over most frames.

File layout (little-endian): b"KFC1", u32 num_utterances, u32 feat_dim, then
per utterance u32 T0, u32 U, T0*feat_dim f32 features, U u32 label ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

MAGIC = b"KFC1"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 9
    feat_dim: int = 16
    pattern_len: int = 4
    silence_range: Tuple[int, int] = (2, 10)
    label_len_range: Tuple[int, int] = (3, 10)
    noise_sigma: float = 0.1
    num_utterances: int = 2200
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be >= 3 (blank plus at least two symbols)")
        g_min, g_max = self.silence_range
        u_min, u_max = self.label_len_range
        if g_min < 1 or g_max < g_min:
            raise ValueError(f"bad silence_range {self.silence_range}: need 1 <= min <= max")
        if u_min < 1 or u_max < u_min:
            raise ValueError(f"bad label_len_range {self.label_len_range}: need 1 <= min <= max")
        if self.pattern_len < 1 or self.feat_dim < 1 or self.num_utterances < 0:
            raise ValueError("pattern_len and feat_dim must be positive, num_utterances non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Utterance:
    id: str
    features: np.ndarray    # (T0, F) float32
    labels: Tuple[int, ...]

    @property
    def T0(self) -> int:
        return self.features.shape[0]

    @property
    def U(self) -> int:
        return len(self.labels)

    def __eq__(self, other):
        # ids are positional in the file format, so they do not take part
        return (isinstance(other, Utterance) and self.labels == other.labels
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


def make_prototypes(spec: SyntheticTaskSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(size=(spec.vocab_size - 1, spec.pattern_len, spec.feat_dim)).astype(np.float32)


def generate_synthetic(spec: SyntheticTaskSpec) -> List[Utterance]:
    rng = np.random.default_rng(spec.seed)
    protos = make_prototypes(spec, rng)
    g_min, g_max = spec.silence_range
    u_min, u_max = spec.label_len_range
    out = []
    for n in range(spec.num_utterances):
        U = int(rng.integers(u_min, u_max + 1))
        labels = rng.integers(1, spec.vocab_size, size=U)
        gaps = rng.integers(g_min, g_max + 1, size=U + 1)
        pieces = []
        for i in range(U + 1):
            pieces.append(np.zeros((gaps[i], spec.feat_dim), dtype=np.float32))
            if i < U:
                pieces.append(protos[labels[i] - 1])
        feats = np.concatenate(pieces)
        if spec.noise_sigma > 0:
            feats = feats + (spec.noise_sigma * rng.normal(size=feats.shape)).astype(np.float32)
        out.append(Utterance(f"utt{n:05d}", feats.astype(np.float32), tuple(int(l) for l in labels)))
    return out


def silence_fraction(utt: Utterance, spec: SyntheticTaskSpec) -> float:
    return 1.0 - utt.U * spec.pattern_len / utt.T0


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

def save_dataset(dataset: Sequence[Utterance], path) -> None:
    if not dataset:
        feat_dim = 0
    else:
        feat_dim = dataset[0].features.shape[1]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(dataset), feat_dim))
        for u in dataset:
            if u.features.shape[1] != feat_dim:
                raise DatasetFormatError(f"{u.id}: feature dim {u.features.shape[1]} != {feat_dim}")
            fh.write(struct.pack("<II", u.T0, u.U))
            fh.write(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
            fh.write(np.asarray(u.labels, dtype="<u4").tobytes())


def load_dataset(path, expected_feat_dim: int = None) -> List[Utterance]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise DatasetFormatError(f"{path}: truncated header")
    n, feat_dim = struct.unpack_from("<II", buf, 4)
    if expected_feat_dim is not None and feat_dim != expected_feat_dim:
        raise DatasetFormatError(f"{path}: feature dim mismatch, file has {feat_dim}, expected {expected_feat_dim}")
    off = 12
    out = []
    for i in range(n):
        if off + 8 > len(buf):
            raise DatasetFormatError(f"{path}: truncated payload at utterance {i} header")
        T0, U = struct.unpack_from("<II", buf, off)
        off += 8
        need = 4 * (T0 * feat_dim + U)
        if off + need > len(buf):
            raise DatasetFormatError(
                f"{path}: truncated payload at utterance {i}: declares T0={T0}, U={U} "
                f"({need} bytes) but only {len(buf) - off} remain")
        feats = np.frombuffer(buf, dtype="<f4", count=T0 * feat_dim, offset=off).reshape(T0, feat_dim)
        off += 4 * T0 * feat_dim
        labels = np.frombuffer(buf, dtype="<u4", count=U, offset=off)
        off += 4 * U
        out.append(Utterance(f"utt{i:05d}", feats.astype(np.float32), tuple(int(x) for x in labels)))
    if off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - off} trailing bytes after {n} utterances")
    return out


# ---------------------------------------------------------------------------
# batching / splitting
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray        # (B, T0max, F), zero padded
    lengths: np.ndarray         # (B,)
    labels: List[Tuple[int, ...]]
    ids: List[str]


def batch(utterances: Sequence[Utterance], dtype=np.float32) -> Batch:
    if not utterances:
        raise ValueError("cannot batch an empty list")
    lengths = np.array([u.T0 for u in utterances], dtype=np.int64)
    F = utterances[0].features.shape[1]
    feats = np.zeros((len(utterances), lengths.max(), F), dtype=dtype)
    for i, u in enumerate(utterances):
        feats[i, :u.T0] = u.features
    return Batch(feats, lengths, [u.labels for u in utterances], [u.id for u in utterances])


def iter_batches(utterances: Sequence[Utterance], max_batch: int, dtype=np.float32):
    for i in range(0, len(utterances), max_batch):
        yield batch(utterances[i:i + max_batch], dtype)


def split(dataset: Sequence[Utterance], train_fraction: float, seed: int = 0):
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    train = [dataset[i] for i in sorted(order[:n_train])]
    held = [dataset[i] for i in sorted(order[n_train:])]
    return train, held
