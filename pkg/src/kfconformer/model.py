"""Two-encoder Conformer with an intermediate CTC head that guides key-frame
attention masking (KFSA) or key-frame frame dropping (KFDS) in encoder 2.

Also holds the joint loss, Adam, the epoch loop and checkpoint I/O.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn_blocks as nb
from . import tensor as tn
from .ctc import BLANK_ID, collapse, ctc_loss_batch, edit_distance
from .data import Utterance, batch as make_batch
from .keyframe import (AttentionMask, FrameSelection, KeyFrameSet, MaskMode, Feasibility,
                       build_kfsa_mask, check_ctc_feasible, extract_key_frames, select_kfds_frames)
from .tensor import Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Mode(str, enum.Enum):
    DENSE = "dense"
    KFSA = "kfsa"
    KFDS = "kfds"


@dataclass
class ModelConfig:
    feat_dim: int = 16
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    conv_kernel: int = 7
    n_blocks_enc1: int = 2
    n_blocks_enc2: int = 2
    subsample_factor: int = 1
    vocab: int = 9
    mode: str = "dense"
    w: int = 1
    kfsa_mode: str = "window+k"
    literal_mask: bool = False
    alpha0: float = 0.5
    alpha1: float = 0.5
    beta0: float = 1.0
    beta1: float = 0.0
    warmup_epochs: int = 5
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    clip_norm: float = 5.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if abs(self.alpha0 + self.alpha1 - 1.0) > 1e-9:
            raise ConfigError(f"alpha0 + alpha1 must equal 1 (got {self.alpha0} + {self.alpha1})")
        if abs(self.beta0 + self.beta1 - 1.0) > 1e-9:
            raise ConfigError(f"beta0 + beta1 must equal 1 (got {self.beta0} + {self.beta1})")
        if min(self.alpha0, self.alpha1, self.beta0, self.beta1) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.n_blocks_enc1 < 1:
            raise ConfigError("n_blocks_enc1 must be >= 1: the intermediate CTC needs an encoder 1")
        if self.n_blocks_enc2 < 0:
            raise ConfigError("n_blocks_enc2 must be >= 0")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.subsample_factor not in (1, 2, 4):
            raise ConfigError(f"subsample_factor must be 1, 2 or 4, got {self.subsample_factor}")
        if self.vocab < 2:
            raise ConfigError("vocab must include blank and at least one symbol")
        if self.w < 0:
            raise ConfigError("w must be >= 0")
        try:
            Mode(self.mode)
            MaskMode(self.kfsa_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.kfsa_mode == MaskMode.DENSE.value:
            raise ConfigError("kfsa_mode must be window+k, k or window")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.warmup_epochs < 0 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("warmup_epochs/epochs must be >= 0, batch_size >= 1, lr > 0")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def architecture(self) -> dict:
        keys = ("feat_dim", "d_model", "heads", "ffn_dim", "conv_kernel", "n_blocks_enc1",
                "n_blocks_enc2", "subsample_factor", "vocab")
        return {k: getattr(self, k) for k in keys}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    interctc_logprobs: Tensor         # (T, V)
    final_logprobs: Tensor            # (T', V)
    selection: FrameSelection
    mask_used: Optional[AttentionMask]
    fallback_flag: bool
    key_frames: Optional[KeyFrameSet] = None


@dataclass
class BatchOutput:
    inter_logprobs: Tensor            # (B, T, V)
    inter_lengths: np.ndarray
    final_logprobs: Tensor            # (B, T', V)
    final_lengths: np.ndarray
    selections: List[FrameSelection]
    masks: List[Optional[AttentionMask]]
    fallbacks: List[bool]
    key_frames: List[Optional[KeyFrameSet]]

    def item(self, b: int) -> ForwardOutput:
        t1, t2 = int(self.inter_lengths[b]), int(self.final_lengths[b])
        return ForwardOutput(Tensor(self.inter_logprobs.data[b, :t1]), Tensor(self.final_logprobs.data[b, :t2]),
                             self.selections[b], self.masks[b], self.fallbacks[b], self.key_frames[b])


def _pad_mask(lengths: np.ndarray, T: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    valid = np.arange(T)[None, :] < lengths[:, None]
    if valid.all():
        return valid, None
    return valid, valid[:, :, None] & valid[:, None, :]


class KeyFrameConformer:
    """Frontend -> encoder 1 -> intermediate CTC -> key frames -> encoder 2 -> final CTC."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        dt = c.np_dtype
        rng = np.random.default_rng(c.seed)
        self.frontend = nb.FrontendParams.init(rng, c.feat_dim, c.d_model, c.subsample_factor, dt)
        self.enc1 = [nb.ConformerBlockParams.init(rng, c.d_model, c.heads, c.ffn_dim, c.conv_kernel, dt)
                     for _ in range(c.n_blocks_enc1)]
        self.inter_w = nb._dense_init(rng, c.d_model, c.vocab, dt)
        self.inter_b = Tensor(np.zeros(c.vocab, dtype=dt), requires_grad=True)
        self.enc2 = [nb.ConformerBlockParams.init(rng, c.d_model, c.heads, c.ffn_dim, c.conv_kernel, dt)
                     for _ in range(c.n_blocks_enc2)]
        self.final_w = nb._dense_init(rng, c.d_model, c.vocab, dt)
        self.final_b = Tensor(np.zeros(c.vocab, dtype=dt), requires_grad=True)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = self.frontend.named_parameters("frontend.")
        for i, blk in enumerate(self.enc1):
            out += blk.named_parameters(f"enc1.{i}.")
        out += [("inter_ctc.w", self.inter_w), ("inter_ctc.b", self.inter_b)]
        for i, blk in enumerate(self.enc2):
            out += blk.named_parameters(f"enc2.{i}.")
        out += [("final_ctc.w", self.final_w), ("final_ctc.b", self.final_b)]
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- forward ----------------------------------------------------------
    def _guidance_ids(self, inter_logprobs: np.ndarray) -> np.ndarray:
        """Per-frame intermediate-CTC argmax ids that drive key-frame extraction."""
        return np.argmax(inter_logprobs, axis=-1)

    def forward_batch(self, features, lengths, label_lens: Optional[Sequence[int]] = None,
                      key_frames_enabled: bool = True, mode: Optional[str] = None,
                      w: Optional[int] = None, kfsa_mode: Optional[str] = None) -> BatchOutput:
        """Batched forward over zero-padded features (B, T0, F) with true ``lengths``.

        ``label_lens`` enables the KFDS feasibility fallback (training only).
        ``mode``/``w``/``kfsa_mode`` override the config for this call.
        """
        c = self.config
        mode = Mode(mode or c.mode)
        w = c.w if w is None else w
        kfsa_mode = MaskMode(kfsa_mode or c.kfsa_mode)
        dt = c.np_dtype
        feats = np.asarray(features, dtype=dt)
        if feats.ndim != 3 or feats.shape[1] == 0:
            raise tn.ShapeError(f"features must be (B, T0>0, F), got {feats.shape}")
        if feats.shape[2] != c.feat_dim:
            raise tn.ShapeError(f"feature dim {feats.shape[2]} != config feat_dim {c.feat_dim}")
        B = feats.shape[0]
        x, lens = nb.subsample_frontend(Tensor(feats), self.frontend, lengths)
        T = x.shape[1]
        pe = nb.positional_encoding(T, c.d_model, dt)
        x = tn.add(x, Tensor(np.broadcast_to(pe, x.shape)))
        valid, pmask = _pad_mask(lens, T)
        for i, blk in enumerate(self.enc1):
            x = nb.conformer_block(x, pmask, blk, valid, tag=f"enc1.{i}")
        inter = tn.log_softmax(tn.linear(x, self.inter_w, self.inter_b))

        selections = [FrameSelection.identity(int(n)) for n in lens]
        masks: List[Optional[AttentionMask]] = [None] * B
        fallbacks = [False] * B
        kfs: List[Optional[KeyFrameSet]] = [None] * B
        x2, lens2, valid2, pmask2 = x, lens, valid, pmask

        if key_frames_enabled and mode is not Mode.DENSE:
            ids = self._guidance_ids(inter.data)
            for b in range(B):
                kfs[b] = extract_key_frames(ids[b, :lens[b]], BLANK_ID)
            if mode is Mode.KFSA:
                bits = np.zeros((B, T, T), dtype=bool)
                for b in range(B):
                    n = int(lens[b])
                    if len(kfs[b]):
                        masks[b] = build_kfsa_mask(kfs[b], n, w, kfsa_mode, literal=c.literal_mask)
                    else:
                        fallbacks[b] = True
                        masks[b] = build_kfsa_mask(kfs[b], n, w, MaskMode.DENSE)
                    bits[b, :n, :n] = masks[b].bits
                pmask2 = bits
            else:
                for b in range(B):
                    sel = select_kfds_frames(kfs[b], int(lens[b]), w)
                    if not sel.fallback and label_lens is not None and \
                            check_ctc_feasible(sel, int(label_lens[b])) is Feasibility.FALLBACK_NEEDED:
                        sel = FrameSelection.identity(int(lens[b]), fallback=True)
                    selections[b] = sel
                    fallbacks[b] = sel.fallback
                lens2 = np.array([len(s.kept) for s in selections], dtype=np.int64)
                index = np.full((B, int(lens2.max())), -1, dtype=np.int64)
                for b, s in enumerate(selections):
                    index[b, :len(s.kept)] = s.kept
                x2 = tn.gather_frames(x, index)
                valid2, pmask2 = _pad_mask(lens2, index.shape[1])

        for i, blk in enumerate(self.enc2):
            x2 = nb.conformer_block(x2, pmask2, blk, valid2, tag=f"enc2.{i}")
        final = tn.log_softmax(tn.linear(x2, self.final_w, self.final_b))
        return BatchOutput(inter, lens, final, np.asarray(lens2), selections, masks, fallbacks, kfs)

    def forward(self, features, labels_len: Optional[int] = None, key_frames_enabled: bool = True,
                **overrides) -> ForwardOutput:
        """Single-utterance forward on (T0, F) features."""
        feats = np.asarray(features.data if isinstance(features, Tensor) else features)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise tn.ShapeError(f"features must be non-empty (T0, F), got {feats.shape}")
        out = self.forward_batch(feats[None], [feats.shape[0]],
                                 None if labels_len is None else [labels_len],
                                 key_frames_enabled, **overrides)
        return out.item(0)


# ---------------------------------------------------------------------------
# losses / optimisation
# ---------------------------------------------------------------------------

def joint_loss(l_ctc1, l_ctc2, l_ce=0.0, config: ModelConfig = None, *, alpha=None, beta=None):
    """beta0 * (alpha0 * l_ctc1 + alpha1 * l_ctc2) + beta1 * l_ce. Works on floats or Tensors."""
    a0, a1 = alpha if alpha is not None else (config.alpha0, config.alpha1)
    b0, b1 = beta if beta is not None else (config.beta0, config.beta1)
    if abs(a0 + a1 - 1) > 1e-9 or abs(b0 + b1 - 1) > 1e-9:
        raise ConfigError(f"loss weights must satisfy alpha0+alpha1=1 and beta0+beta1=1, got {(a0, a1)}, {(b0, b1)}")
    ctc_part = l_ctc1 * a0 + l_ctc2 * a1
    return ctc_part * b0 + l_ce * b1


@dataclass
class AdamState:
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0


def clip_gradients(grads: List[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        grads = [g * s for g in grads]
    return grads, norm


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], lr: float, state: AdamState,
              betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 5.0) -> float:
    """One Adam update in place after global-norm clipping. Returns the pre-clip norm."""
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    grads, norm = clip_gradients(grads, clip_norm)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
    return norm


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

METRIC_FIELDS = ["epoch", "split", "loss_ctc1", "loss_ctc2", "loss_joint", "ter",
                 "drop_ratio_mean", "fallback_count"]


@dataclass
class TrainState:
    model: KeyFrameConformer
    adam: AdamState
    rng: np.random.Generator
    metrics: List[dict] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def init_train_state(config: ModelConfig) -> TrainState:
    return TrainState(KeyFrameConformer(config), AdamState(), np.random.default_rng(config.seed + 1))


def _decode_errors(final_lp: np.ndarray, lengths: np.ndarray, labels) -> Tuple[int, int]:
    ids = np.argmax(final_lp, axis=-1)
    errs = refs = 0
    for b, ref in enumerate(labels):
        hyp = collapse(ids[b, :lengths[b]].tolist())
        errs += edit_distance(hyp, ref).errors
        refs += len(ref)
    return errs, refs


def _batches_for_epoch(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(utts))
    # length-sorted buckets of 8 batches cut padding; bucket and batch order stay random
    bucket = batch_size * 8
    batches = []
    for i in range(0, len(order), bucket):
        chunk = sorted(order[i:i + bucket], key=lambda j: utts[j].T0)
        batches += [chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def train_epoch(state: TrainState, dataset: Sequence[Utterance], epoch_index: int) -> dict:
    """One pass over ``dataset``; key frames switch on once ``epoch_index >= warmup_epochs``."""
    if epoch_index < 0:
        raise ValueError("epoch_index must be >= 0")
    c = state.config
    model = state.model
    params = model.parameters()
    enabled = epoch_index >= c.warmup_epochs
    sums = np.zeros(3)
    n_batches = errs = refs = fallbacks = 0
    drops = []
    for idx in _batches_for_epoch(dataset, c.batch_size, state.rng):
        bt = make_batch([dataset[i] for i in idx], c.np_dtype)
        out = model.forward_batch(bt.features, bt.lengths, [len(l) for l in bt.labels],
                                  key_frames_enabled=enabled)
        l1, _, _ = ctc_loss_batch(out.inter_logprobs, out.inter_lengths, bt.labels)
        l2, _, _ = ctc_loss_batch(out.final_logprobs, out.final_lengths, bt.labels)
        loss = joint_loss(l1, l2, 0.0, c)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at epoch {epoch_index}, batch {n_batches}: {loss.item()}")
        for p in params:
            p.grad = None
        loss.backward()
        adam_step(params, [p.grad for p in params], c.lr, state.adam, clip_norm=c.clip_norm)
        sums += (l1.item(), l2.item(), loss.item())
        n_batches += 1
        e, r = _decode_errors(out.final_logprobs.data, out.final_lengths, bt.labels)
        errs, refs = errs + e, refs + r
        drops += [s.drop_ratio for s in out.selections]
        fallbacks += sum(out.fallbacks)
    means = sums / max(n_batches, 1)
    row = {"epoch": epoch_index, "split": "train", "loss_ctc1": means[0], "loss_ctc2": means[1],
           "loss_joint": means[2], "ter": errs / max(refs, 1),
           "drop_ratio_mean": float(np.mean(drops)) if drops else 0.0, "fallback_count": fallbacks}
    state.metrics.append(row)
    return row


def evaluate(model: KeyFrameConformer, utts: Sequence[Utterance], mode: Optional[str] = None,
             w: Optional[int] = None, kfsa_mode: Optional[str] = None, key_frames_enabled: bool = True,
             batch_size: int = 32, workers: int = 1) -> dict:
    """Greedy-decode TER plus drop statistics; no feasibility fallback (labels unseen at inference).

    With ``workers > 1`` batches run on a thread pool; results keep input order.
    """
    c = model.config

    def run(chunk):
        bt = make_batch(chunk, c.np_dtype)
        out = model.forward_batch(bt.features, bt.lengths, None, key_frames_enabled, mode=mode, w=w,
                                  kfsa_mode=kfsa_mode)
        l1, _, _ = ctc_loss_batch(out.inter_logprobs, out.inter_lengths, bt.labels)
        l2, _, _ = ctc_loss_batch(out.final_logprobs, out.final_lengths, bt.labels)
        losses = (l1.item(), l2.item(), float(joint_loss(l1.item(), l2.item(), 0.0, c)))
        ids = np.argmax(out.final_logprobs.data, axis=-1)
        rows = []
        for b, u in enumerate(chunk):
            hyp = collapse(ids[b, :out.final_lengths[b]].tolist())
            kf = out.key_frames[b]
            rows.append({"utt_id": u.id, "T": int(out.inter_lengths[b]), "U": u.U,
                         "P": None if kf is None else len(kf), "kept": int(out.final_lengths[b]),
                         "drop_ratio": out.selections[b].drop_ratio, "fallback": bool(out.fallbacks[b]),
                         "errors": edit_distance(hyp, u.labels).errors})
        return losses, rows

    chunks = [utts[i:i + batch_size] for i in range(0, len(utts), batch_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(ch) for ch in chunks]
    rows = [r for _, rs in results for r in rs]
    means = np.mean([l for l, _ in results], axis=0) if results else np.zeros(3)
    refs = sum(r["U"] for r in rows)
    return {
        "ter": sum(r["errors"] for r in rows) / max(refs, 1),
        "drop_ratio_mean": float(np.mean([r["drop_ratio"] for r in rows])) if rows else 0.0,
        "fallback_count": int(sum(r["fallback"] for r in rows)),
        "t_prime_mean": float(np.mean([r["kept"] for r in rows])) if rows else 0.0,
        "t_mean": float(np.mean([r["T"] for r in rows])) if rows else 0.0,
        "loss_ctc1": float(means[0]), "loss_ctc2": float(means[1]), "loss_joint": float(means[2]),
        "rows": rows,
    }


def train(config: ModelConfig, train_set: Sequence[Utterance], heldout: Sequence[Utterance] = (),
          epochs: Optional[int] = None, state: Optional[TrainState] = None, progress=None) -> TrainState:
    """Run ``epochs`` epochs, appending a train row and (when given) a heldout row per epoch."""
    state = state or init_train_state(config)
    n = config.epochs if epochs is None else epochs
    start = len({r["epoch"] for r in state.metrics})
    for ep in range(start, start + n):
        row = train_epoch(state, train_set, ep)
        if heldout:
            ev = evaluate(state.model, heldout, key_frames_enabled=ep >= config.warmup_epochs,
                          batch_size=max(config.batch_size, 32))
            hrow = {"epoch": ep, "split": "heldout", **{k: ev[k] for k in METRIC_FIELDS[2:]}}
            state.metrics.append(hrow)
            row = hrow
        if progress:
            progress(ep, row)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def save_checkpoint(model: KeyFrameConformer, path) -> None:
    """Write ``manifest.json`` and ``weights.bin`` (little-endian f32, manifest order) into ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    manifest = {"format": "kfc-checkpoint-1", "config": model.config.to_dict(),
                "parameters": [{"name": n, "shape": list(p.shape)} for n, p in named]}
    with open(d / WEIGHTS, "wb") as fh:
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> KeyFrameConformer:
    """Rebuild a model from a checkpoint directory.

    When ``config`` is given its architecture must match the manifest.
    """
    d = Path(path)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint manifest {d / MANIFEST}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest {d / MANIFEST}: {e}") from None
    if not isinstance(manifest, dict) or "parameters" not in manifest or "config" not in manifest:
        raise CheckpointError(f"corrupt checkpoint manifest {d / MANIFEST}: missing keys")
    saved = ModelConfig.from_dict(manifest["config"])
    if config is not None:
        diff = {k: (v, getattr(config, k)) for k, v in saved.architecture().items() if getattr(config, k) != v}
        if diff:
            raise ConfigError("checkpoint/config mismatch: " + ", ".join(
                f"{k}: checkpoint={a} config={b}" for k, (a, b) in diff.items()))
    else:
        config = saved
    model = KeyFrameConformer(config)
    named = model.named_parameters()
    entries = manifest["parameters"]
    if [e["name"] for e in entries] != [n for n, _ in named]:
        raise ConfigError("checkpoint parameter list does not match the model built from its config")
    try:
        raw = (d / WEIGHTS).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"missing weights file {d / WEIGHTS}") from None
    off = 0
    for e, (name, p) in zip(entries, named):
        if tuple(e["shape"]) != p.shape:
            raise ConfigError(f"shape mismatch for {name}: checkpoint {tuple(e['shape'])} vs model {p.shape}")
        nbytes = 4 * p.data.size
        if off + nbytes > len(raw):
            raise CheckpointError(f"weights file truncated at parameter {name} "
                                  f"(needs {nbytes} bytes, {max(len(raw) - off, 0)} left)")
        arr = np.frombuffer(raw, dtype="<f4", count=p.data.size, offset=off).reshape(p.shape)
        p.data = arr.astype(config.np_dtype)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"weights file has {len(raw) - off} unexpected trailing bytes")
    return model
