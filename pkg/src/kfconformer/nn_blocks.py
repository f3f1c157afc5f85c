"""Conformer building blocks on top of :mod:`kfconformer.tensor`.

Attention accepts an optional boolean mask (True = may attend). Rows with no
allowed column produce zero output. All attention calls report their
multiply count to any active :class:`MultiplyCounter`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as tn
from .tensor import NEG_LARGE, ShapeError, Tensor


# ---------------------------------------------------------------------------
# multiply-count instrumentation
# ---------------------------------------------------------------------------

@dataclass
class MultiplyCounter:
    """Collects attention multiply counts as (tag, count) records."""

    records: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(n for _, n in self.records)

    def total_for(self, prefix: str) -> int:
        return sum(n for tag, n in self.records if tag.startswith(prefix))


_counters: List[MultiplyCounter] = []


@contextlib.contextmanager
def count_multiplies() -> Iterator[MultiplyCounter]:
    counter = MultiplyCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(tag: str, n: int) -> None:
    for c in _counters:
        c.records.append((tag, int(n)))


def _mask_bits(mask) -> Optional[np.ndarray]:
    if mask is None:
        return None
    bits = getattr(mask, "bits", mask)
    return np.asarray(bits, dtype=bool)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def _dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    return _param(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), dtype)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int
    ln_g: Optional[Tensor] = None
    ln_b: Optional[Tensor] = None

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @classmethod
    def init(cls, rng, d_model: int, num_heads: int, dtype=np.float64) -> "AttentionParams":
        return cls(*(_dense_init(rng, d_model, d_model, dtype) for _ in range(4)), num_heads=num_heads,
                   ln_g=_param(np.ones(d_model), dtype), ln_b=_param(np.zeros(d_model), dtype))

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = [(prefix + n, getattr(self, n)) for n in ("w_q", "w_k", "w_v", "w_o")]
        if self.ln_g is not None:
            out += [(prefix + "ln_g", self.ln_g), (prefix + "ln_b", self.ln_b)]
        return out


@dataclass
class FeedForwardParams:
    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d_model: int, ffn_dim: int, dtype=np.float64) -> "FeedForwardParams":
        return cls(_param(np.ones(d_model), dtype), _param(np.zeros(d_model), dtype),
                   _dense_init(rng, d_model, ffn_dim, dtype), _param(np.zeros(ffn_dim), dtype),
                   _dense_init(rng, ffn_dim, d_model, dtype), _param(np.zeros(d_model), dtype))

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        return [(prefix + n, getattr(self, n)) for n in ("ln_g", "ln_b", "w1", "b1", "w2", "b2")]


@dataclass
class ConvModuleParams:
    ln_g: Tensor
    ln_b: Tensor
    pw_in: Tensor    # d -> 2d, feeds the GLU
    pw_in_b: Tensor
    dw: Tensor       # (kernel, d)
    dw_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    pw_out: Tensor
    pw_out_b: Tensor

    _names = ("ln_g", "ln_b", "pw_in", "pw_in_b", "dw", "dw_b", "ln2_g", "ln2_b", "pw_out", "pw_out_b")

    @property
    def kernel_size(self) -> int:
        return self.dw.shape[0]

    @classmethod
    def init(cls, rng, d_model: int, kernel_size: int, dtype=np.float64) -> "ConvModuleParams":
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"conv kernel size must be odd and positive, got {kernel_size}")
        ones, zeros = (lambda: _param(np.ones(d_model), dtype)), (lambda: _param(np.zeros(d_model), dtype))
        return cls(ones(), zeros(),
                   _dense_init(rng, d_model, 2 * d_model, dtype), _param(np.zeros(2 * d_model), dtype),
                   _param(rng.normal(0, 1 / math.sqrt(kernel_size), size=(kernel_size, d_model)), dtype),
                   zeros(), ones(), zeros(),
                   _dense_init(rng, d_model, d_model, dtype), zeros())

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        return [(prefix + n, getattr(self, n)) for n in self._names]


@dataclass
class ConformerBlockParams:
    ffn1: FeedForwardParams
    attn: AttentionParams
    conv: ConvModuleParams
    ffn2: FeedForwardParams
    ln_g: Tensor
    ln_b: Tensor

    @property
    def kernel_size(self) -> int:
        return self.conv.kernel_size

    @classmethod
    def init(cls, rng, d_model: int, num_heads: int, ffn_dim: int, kernel_size: int,
             dtype=np.float64) -> "ConformerBlockParams":
        return cls(FeedForwardParams.init(rng, d_model, ffn_dim, dtype),
                   AttentionParams.init(rng, d_model, num_heads, dtype),
                   ConvModuleParams.init(rng, d_model, kernel_size, dtype),
                   FeedForwardParams.init(rng, d_model, ffn_dim, dtype),
                   _param(np.ones(d_model), dtype), _param(np.zeros(d_model), dtype))

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        return (self.ffn1.named_parameters(prefix + "ffn1.")
                + self.attn.named_parameters(prefix + "attn.")
                + self.conv.named_parameters(prefix + "conv.")
                + self.ffn2.named_parameters(prefix + "ffn2.")
                + [(prefix + "ln_g", self.ln_g), (prefix + "ln_b", self.ln_b)])


@dataclass
class FrontendParams:
    convs: List[Tuple[Tensor, Tensor]]   # stride-2 convs, weight (3*c_in, d_model)
    proj: Tensor
    proj_b: Tensor

    @property
    def factor(self) -> int:
        return 2 ** len(self.convs)

    @classmethod
    def init(cls, rng, feat_dim: int, d_model: int, factor: int, dtype=np.float64) -> "FrontendParams":
        if factor not in (1, 2, 4):
            raise ValueError(f"subsample factor must be 1, 2 or 4, got {factor}")
        convs = []
        c_in = feat_dim
        for _ in range(int(math.log2(factor))):
            convs.append((_dense_init(rng, 3 * c_in, d_model, dtype), _param(np.zeros(d_model), dtype)))
            c_in = d_model
        return cls(convs, _dense_init(rng, c_in, d_model, dtype), _param(np.zeros(d_model), dtype))

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.convs):
            out += [(f"{prefix}conv{i}.w", w), (f"{prefix}conv{i}.b", b)]
        return out + [(prefix + "proj", self.proj), (prefix + "proj_b", self.proj_b)]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, tag: str = "attn") -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    ``mask`` is boolean (True = allowed) and broadcastable to (..., T, T).
    Counts 2*d multiplies per allowed (query, key) pair.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention operand mismatch: q{q.shape} k{k.shape} v{v.shape}")
    T, d = q.shape[-2], q.shape[-1]
    scores = tn.scale(tn.matmul(q, tn.swap_last(k)), 1.0 / math.sqrt(d))
    bits = _mask_bits(mask)
    if bits is None:
        n_batch = int(np.prod(q.shape[:-2], dtype=np.int64))
        _record(tag, 2 * d * T * T * n_batch)
        weights = tn.softmax(scores)
    else:
        if bits.shape[-2:] != (T, T):
            raise ShapeError(f"mask shape {bits.shape} does not fit sequence length {T}")
        full = np.broadcast_to(bits, scores.shape)
        _record(tag, 2 * d * int(full.sum()))
        additive = np.where(full, 0.0, NEG_LARGE).astype(scores.dtype)
        weights = tn.softmax(scores, additive)
    return tn.matmul(weights, v)


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, T, d = x.shape
    return tn.transpose(tn.reshape(x, (B, T, h, d // h)), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, mask, params: AttentionParams, tag: str = "mhsa") -> Tensor:
    """Multi-head self-attention without biases. ``x`` is (T, d) or (B, T, d).

    A (T, T) mask applies to every batch element; a (B, T, T) mask per element.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = tn.reshape(x, (1,) + x.shape)
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"input width {x.shape[-1]} != d_model {params.d_model}")
    B, T, d = x.shape
    h = params.num_heads
    q = _split_heads(tn.linear(x, params.w_q), h)
    k = _split_heads(tn.linear(x, params.w_k), h)
    v = _split_heads(tn.linear(x, params.w_v), h)
    bits = _mask_bits(mask)
    if bits is not None:
        bits = bits[None, None] if bits.ndim == 2 else bits[:, None]
    ctx = scaled_dot_attention(q, k, v, bits, tag=tag)
    ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    out = tn.linear(ctx, params.w_o)
    if squeeze:
        out = tn.reshape(out, (T, d))
    return out


# ---------------------------------------------------------------------------
# feed-forward / convolution / block
# ---------------------------------------------------------------------------

def feed_forward(x: Tensor, params: FeedForwardParams, half_step: bool = True) -> Tensor:
    if x.shape[-1] != params.w1.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != FFN width {params.w1.shape[0]}")
    h = tn.layer_norm(x, params.ln_g, params.ln_b)
    h = tn.swish(tn.linear(h, params.w1, params.b1))
    h = tn.linear(h, params.w2, params.b2)
    return tn.add(x, tn.scale(h, 0.5 if half_step else 1.0))


def conv_module(x: Tensor, params: ConvModuleParams, valid: Optional[np.ndarray] = None) -> Tensor:
    """LN -> pointwise(2d) -> GLU -> depthwise -> LN -> swish -> pointwise, plus residual.

    ``valid`` (..., T) marks real frames; padding is zeroed before the
    depthwise conv so it cannot leak into real frames.
    """
    h = tn.layer_norm(x, params.ln_g, params.ln_b)
    h = tn.glu(tn.linear(h, params.pw_in, params.pw_in_b))
    if valid is not None:
        h = tn.mask_frames(h, valid)
    h = tn.depthwise_conv1d(h, params.dw, params.dw_b)
    h = tn.swish(tn.layer_norm(h, params.ln2_g, params.ln2_b))
    h = tn.linear(h, params.pw_out, params.pw_out_b)
    return tn.add(x, h)


def conformer_block(x: Tensor, mask, params: ConformerBlockParams,
                    valid: Optional[np.ndarray] = None, tag: str = "block") -> Tensor:
    """FFN/2 -> MHSA -> Conv -> FFN/2 -> LN, each sublayer residual."""
    x = feed_forward(x, params.ffn1, half_step=True)
    a = params.attn
    h = tn.layer_norm(x, a.ln_g, a.ln_b) if a.ln_g is not None else x
    x = tn.add(x, multi_head_attention(h, mask, a, tag=tag))
    x = conv_module(x, params.conv, valid)
    x = feed_forward(x, params.ffn2, half_step=True)
    return tn.layer_norm(x, params.ln_g, params.ln_b)


def frontend_lengths(lengths, factor: int) -> np.ndarray:
    out = np.asarray(lengths, dtype=np.int64)
    for _ in range(int(math.log2(factor))):
        out = (out + 1) // 2
    return out


def subsample_frontend(features: Tensor, params: FrontendParams,
                       lengths=None) -> Tuple[Tensor, np.ndarray]:
    """Stride-2 conv stack (kernel 3, swish) then a linear projection.

    ``features`` is (T0, F) or (B, T0, F). Returns the projected frames and
    their true lengths, ceil(T0 / factor) each.
    """
    if features.shape[-2] == 0:
        raise ShapeError("empty feature sequence")
    if lengths is None:
        lengths = np.full(features.shape[:-2] or (1,), features.shape[-2], dtype=np.int64)
        if features.ndim == 2:
            lengths = lengths[:1]
    x = features
    for w, b in params.convs:
        x = tn.swish(tn.linear(tn.unfold_frames(x, 3, 2, 1), w, b))
    x = tn.linear(x, params.proj, params.proj_b)
    return x, frontend_lengths(lengths, params.factor)


def positional_encoding(T: int, d_model: int, dtype=np.float64) -> np.ndarray:
    if T < 1:
        raise ValueError("positional encoding needs T >= 1")
    pos = np.arange(T)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((T, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe.astype(dtype)
