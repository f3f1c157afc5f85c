"""Key-frame extraction, key-frame attention masks and key-frame frame dropping.

A key frame is a frame whose intermediate-CTC argmax is not blank; within a
run of identical consecutive non-blank ids only the first frame counts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from .ctc import BLANK_ID


class MaskMode(str, enum.Enum):
    WINDOW_PLUS_K = "window+k"
    K_ONLY = "k"
    WINDOW_ONLY = "window"
    DENSE = "dense"


class Feasibility(str, enum.Enum):
    OK = "ok"
    FALLBACK_NEEDED = "fallback_needed"


@dataclass(frozen=True)
class KeyFrameSet:
    positions: tuple
    T: int
    blank_id: int = BLANK_ID

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.T or (np.diff(p) <= 0).any()):
            raise ValueError(f"key frames must be strictly increasing in [0, {self.T}): {list(self.positions)}")

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)


@dataclass
class AttentionMask:
    bits: np.ndarray
    mode: MaskMode
    w: int

    @property
    def T(self) -> int:
        return self.bits.shape[0]

    @property
    def active_rows(self) -> np.ndarray:
        return self.bits.any(axis=1)


@dataclass
class FrameSelection:
    kept: np.ndarray
    T: int
    fallback: bool = False

    @property
    def drop_ratio(self) -> float:
        return 1.0 - len(self.kept) / self.T if self.T else 0.0

    @classmethod
    def identity(cls, T: int, fallback: bool = False) -> "FrameSelection":
        return cls(np.arange(T, dtype=np.int64), T, fallback)


def extract_key_frames(frame_ids: Sequence[int], blank_id: int = BLANK_ID) -> KeyFrameSet:
    positions = []
    prev = None
    for t, i in enumerate(frame_ids):
        i = int(i)
        if i != blank_id and i != prev:
            positions.append(t)
        prev = i
    return KeyFrameSet(tuple(positions), len(frame_ids), blank_id)


def _windows(P: Sequence[int], T: int, w: int) -> np.ndarray:
    """(|P|, T) boolean: frame t lies within w of key frame p."""
    t = np.arange(T)
    p = np.asarray(P, dtype=np.int64)[:, None]
    return np.abs(t[None, :] - p) <= w


def build_kfsa_mask(P: KeyFrameSet, T: int, w: int, mode: MaskMode = MaskMode.WINDOW_PLUS_K,
                    literal: bool = False) -> AttentionMask:
    """Attention mask over T frames from key frames ``P``.

    Local term: both frames inside the window of one common key frame.
    Global term: query row is active and key column is a key frame.
    ``literal=True`` instead sets a whole row when the query is within w of a
    key frame, and every key-frame column otherwise.
    """
    if w < 0:
        raise ValueError("local context width must be >= 0")
    mode = MaskMode(mode)
    if mode is MaskMode.DENSE:
        return AttentionMask(np.ones((T, T), dtype=bool), mode, w)
    width = 0 if mode is MaskMode.K_ONLY else w
    keys = np.zeros(T, dtype=bool)
    keys[list(P.positions)] = True
    if not len(P):
        return AttentionMask(np.zeros((T, T), dtype=bool), mode, w)
    win = _windows(P.positions, T, width)
    active = win.any(axis=0)
    if literal:
        bits = active[:, None] | keys[None, :]
        if mode is MaskMode.WINDOW_ONLY:
            bits = np.broadcast_to(active[:, None], (T, T)).copy()
        return AttentionMask(bits, mode, w)
    win_f = win.astype(np.int32)
    local = (win_f.T @ win_f) > 0
    if mode is MaskMode.WINDOW_ONLY:
        bits = local
    else:
        bits = local | (active[:, None] & keys[None, :])
    return AttentionMask(bits, mode, w)


def select_kfds_frames(P: KeyFrameSet, T: int, w: int) -> FrameSelection:
    if w < 0:
        raise ValueError("local context width must be >= 0")
    if not len(P):
        return FrameSelection.identity(T, fallback=True)
    keep = _windows(P.positions, T, w).any(axis=0)
    return FrameSelection(np.flatnonzero(keep).astype(np.int64), T)


def check_ctc_feasible(selection: FrameSelection, U: int) -> Feasibility:
    """Kept length must reach 2U+1 for the final CTC to train on it."""
    if U < 0:
        raise ValueError("label length must be >= 0")
    return Feasibility.OK if len(selection.kept) >= 2 * U + 1 or U == 0 else Feasibility.FALLBACK_NEEDED


def drop_ratio_stats(selections: Sequence[FrameSelection]) -> Dict[str, float]:
    if not selections:
        raise ValueError("drop_ratio_stats needs at least one selection")
    r = np.array([s.drop_ratio for s in selections])
    return {"mean": float(r.mean()), "min": float(r.min()), "max": float(r.max())}
