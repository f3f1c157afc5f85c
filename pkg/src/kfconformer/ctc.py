"""CTC loss (log-space forward-backward), greedy decoding and edit distance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor

BLANK_ID = 0


@dataclass
class CtcPosterior:
    """Per-frame log-posteriors (T, V), rows log-softmax normalised."""

    log_probs: Tensor
    blank_id: int = BLANK_ID

    def __post_init__(self):
        if self.log_probs.ndim != 2:
            raise ShapeError(f"posterior must be (T, V), got {self.log_probs.shape}")
        lse = np.logaddexp.reduce(self.log_probs.data.astype(np.float64), axis=-1)
        tol = 1e-6 if self.log_probs.dtype == np.float64 else 1e-4
        if self.T and np.abs(lse).max() > tol:
            raise ValueError("posterior rows are not log-normalised")

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def V(self) -> int:
        return self.log_probs.shape[1]


@dataclass(frozen=True)
class LabelSeq:
    ids: Tuple[int, ...]

    def __init__(self, ids: Sequence[int] = ()):
        object.__setattr__(self, "ids", tuple(int(i) for i in ids))
        if any(i == BLANK_ID for i in self.ids):
            raise ValueError("label sequence contains the blank id")

    @property
    def U(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate(self, vocab_size: int) -> None:
        if any(not 0 < i < vocab_size for i in self.ids):
            raise ValueError(f"label id outside (0, {vocab_size})")


class CtcResult(NamedTuple):
    loss: Tensor
    feasible: bool


def min_frames_needed(labels: Sequence[int]) -> int:
    """Shortest input that admits an alignment: U plus one blank per adjacent repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


# ---------------------------------------------------------------------------
# batched forward-backward
# ---------------------------------------------------------------------------

def _extended(labels_list: List[Sequence[int]], blank: int):
    B = len(labels_list)
    s_max = 2 * max((len(l) for l in labels_list), default=0) + 1
    ext = np.full((B, s_max), blank, dtype=np.int64)
    n_states = np.zeros(B, dtype=np.int64)
    skip = np.zeros((B, s_max), dtype=bool)   # transition s-2 -> s allowed
    for b, labels in enumerate(labels_list):
        S = 2 * len(labels) + 1
        n_states[b] = S
        ext[b, 1:S:2] = labels
        for s in range(3, S, 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    return ext, n_states, skip


def ctc_forward_backward(log_probs: np.ndarray, lengths: Sequence[int],
                         labels_list: List[Sequence[int]], blank: int = BLANK_ID):
    """Negative log-likelihoods and gradients w.r.t. ``log_probs``.

    ``log_probs`` is (B, T, V). Returns (nll (B,), grad (B, T, V), feasible (B,)).
    Infeasible items get nll=+inf and zero gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    B, T, V = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or len(labels_list) != B:
        raise ShapeError("lengths/labels do not match batch size")
    if (lengths < 1).any() or (lengths > T).any():
        raise ShapeError(f"invalid lengths {lengths.tolist()} for T={T}")
    ext, n_states, skip = _extended(labels_list, blank)
    S = ext.shape[1]
    feasible = np.array([min_frames_needed(l) <= n for l, n in zip(labels_list, lengths)])
    ninf = -np.inf
    # emissions per extended state: (T, B, S)
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2).transpose(1, 0, 2)
    state_valid = np.arange(S)[None, :] < n_states[:, None]
    emit = np.where(state_valid[None], emit, ninf)

    alpha = np.full((T, B, S), ninf)
    alpha[0, :, 0] = emit[0, :, 0]
    if S > 1:
        alpha[0, :, 1] = emit[0, :, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
            two = np.full_like(prev, ninf)
            two[:, 2:] = np.where(skip[:, 2:], prev[:, :-2], ninf)
            alpha[t] = np.logaddexp(acc, two) + emit[t]

        last = lengths - 1
        a_last = alpha[last, np.arange(B)]                       # (B, S)
        end_a = a_last[np.arange(B), n_states - 1]
        end_b = np.where(n_states >= 2, a_last[np.arange(B), np.maximum(n_states - 2, 0)], ninf)
        log_p = np.logaddexp(end_a, end_b)

        # beta excludes the emission at its own frame
        init = np.full((B, S), ninf)
        init[np.arange(B), n_states - 1] = 0.0
        has_two = n_states >= 2
        init[np.arange(B)[has_two], n_states[has_two] - 2] = 0.0
        beta = np.full((T, B, S), ninf)
        nxt = np.full((B, S), ninf)
        for t in range(T - 1, -1, -1):
            if t < T - 1:
                e = nxt + emit[t + 1]
                cur = e.copy()
                cur[:, :-1] = np.logaddexp(cur[:, :-1], e[:, 1:])
                two = np.full_like(e, ninf)
                two[:, :-2] = np.where(skip[:, 2:], e[:, 2:], ninf)
                cur = np.logaddexp(cur, two)
            else:
                cur = np.full((B, S), ninf)
            cur = np.where((last == t)[:, None], init, cur)
            beta[t] = cur
            nxt = cur

        occ = alpha + beta - log_p[None, :, None]                 # (T, B, S)
        occ = np.where(np.isfinite(occ), np.exp(occ), 0.0)
    time_valid = np.arange(T)[:, None] < lengths[None, :]
    occ = occ * time_valid[:, :, None]
    grad = np.zeros((B, T, V))
    b_idx = np.broadcast_to(np.arange(B)[None, :, None], occ.shape)
    t_idx = np.broadcast_to(np.arange(T)[:, None, None], occ.shape)
    np.add.at(grad, (b_idx, t_idx, np.broadcast_to(ext[None], occ.shape)), -occ)
    nll = -log_p
    ok = feasible & np.isfinite(log_p)
    grad[~ok] = 0.0
    nll = np.where(ok, nll, np.inf)
    return nll, grad, ok


def ctc_loss_batch(log_probs: Tensor, lengths, labels_list: List[Sequence[int]],
                   blank: int = BLANK_ID) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Mean CTC loss over the feasible items of a batch.

    Returns (loss, per-item nll, feasible mask). Infeasible items are excluded
    from the mean and contribute no gradient; an all-infeasible batch yields 0.
    """
    nll, grad, ok = ctc_forward_backward(log_probs.data, lengths, labels_list, blank)
    n = int(ok.sum())
    value = float(nll[ok].sum() / n) if n else 0.0
    g_scaled = grad / max(n, 1)
    dtype = log_probs.dtype

    def backward(g):
        return ((g_scaled * g).astype(dtype, copy=False),)

    loss = Tensor._make(np.asarray(value, dtype=dtype), (log_probs,), backward, "ctc_loss")
    return loss, nll, ok


def ctc_loss(post: CtcPosterior, labels: LabelSeq) -> CtcResult:
    """-log P(labels | posterior). Infeasible alignments give +inf, zero gradient, feasible=False."""
    lp = post.log_probs
    labels.validate(post.V)
    nll, grad, ok = ctc_forward_backward(lp.data[None], [post.T], [labels.ids], post.blank_id)
    g0 = grad[0].astype(lp.dtype, copy=False)
    loss = Tensor._make(np.asarray(nll[0], dtype=lp.dtype), (lp,), lambda g: (g0 * g,), "ctc_loss",
                        allow_nonfinite=not ok[0])
    return CtcResult(loss, bool(ok[0]))


# ---------------------------------------------------------------------------
# decoding / metrics
# ---------------------------------------------------------------------------

def argmax_frame_labels(post) -> List[int]:
    """Per-frame argmax ids; numpy's argmax breaks ties toward the smallest index."""
    data = post.log_probs.data if isinstance(post, CtcPosterior) else np.asarray(
        post.data if isinstance(post, Tensor) else post)
    return np.argmax(data, axis=-1).tolist()


def collapse(frame_ids: Sequence[int], blank: int = BLANK_ID) -> List[int]:
    out = []
    prev = None
    for i in frame_ids:
        if i != prev and i != blank:
            out.append(int(i))
        prev = i
    return out


def ctc_greedy_decode(post) -> LabelSeq:
    blank = post.blank_id if isinstance(post, CtcPosterior) else BLANK_ID
    return LabelSeq(collapse(argmax_frame_labels(post), blank))


@dataclass(frozen=True)
class EditStats:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(1, self.ref_len)


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> EditStats:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref`` with an S/I/D breakdown."""
    h, r = list(hyp), list(ref)
    n, m = len(h), len(r)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (h[i - 1] != r[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (h[i - 1] != r[j - 1]):
            s += h[i - 1] != r[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return EditStats(int(s), ins, dels, m)
