"""
attention.py
Self-attention and the two intra-batch variants (mean-based MIBA, element-wise
EIBA) behind one interface. Every function is pure given features and params.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

import config
import tensor_core as tc
from exceptions import ConfigError, ShapeError

PARAM_NAMES = ('w_q', 'b_q', 'w_k', 'b_k', 'w_v', 'b_v', 'w_out', 'b_out')


class AttentionKind(str, Enum):
    SELF = 'self'
    MIBA = 'miba'
    EIBA = 'eiba'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown attention kind {value!r}; expected one of self, miba, eiba") from None


@dataclass(frozen=True)
class BatchFeatures:
    tensor: tc.Tensor

    def __post_init__(self):
        if self.tensor.ndim != 3:
            raise ShapeError("BatchFeatures needs a [B, N, D] tensor", self.tensor.shape)

    @property
    def B(self):
        return self.tensor.shape[0]

    @property
    def N(self):
        return self.tensor.shape[1]

    @property
    def D(self):
        return self.tensor.shape[2]


@dataclass(frozen=True)
class AttentionMaps:
    tensor: tc.Tensor   # [B, heads, N, N], post-softmax

    def numpy(self):
        return self.tensor.data


@dataclass(frozen=True)
class AttentionParams:
    w_q: tc.Tensor
    b_q: tc.Tensor
    w_k: tc.Tensor
    b_k: tc.Tensor
    w_v: tc.Tensor
    b_v: tc.Tensor
    w_out: tc.Tensor
    b_out: tc.Tensor
    heads: int
    kind: AttentionKind
    scale_by_head_count: bool = False

    def __post_init__(self):
        width = self.w_q.shape[0]
        if self.heads < 1 or width % self.heads:
            raise ConfigError(f"width {width} is not divisible by {self.heads} heads")
        for name in PARAM_NAMES:
            expected = (width, width) if name.startswith('w') else (width,)
            if getattr(self, name).shape != expected:
                raise ShapeError(f"attention parameter {name} has the wrong shape",
                                 getattr(self, name).shape, expected)

    @property
    def width(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, width, heads, kind, rng, std=config.INIT_STD, scale_by_head_count=False):
        """Truncated-normal weights, zero biases."""
        tensors = {}
        for name in PARAM_NAMES:
            if name.startswith('w'):
                tensors[name] = tc.Tensor(rng.truncated_normal(std, (width, width)))
            else:
                tensors[name] = tc.Tensor(np.zeros(width))
        return cls(heads=heads, kind=AttentionKind.parse(kind),
                   scale_by_head_count=scale_by_head_count, **tensors)

    def to_dict(self, prefix):
        return {f"{prefix}.{name}": getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, params, prefix, heads, kind, scale_by_head_count=False):
        return cls(heads=heads, kind=AttentionKind.parse(kind), scale_by_head_count=scale_by_head_count,
                   **{name: params[f"{prefix}.{name}"] for name in PARAM_NAMES})


def _check(f, p, kind):
    if p.kind != kind:
        raise ConfigError(f"{kind.value} attention called with {p.kind.value} parameters")
    if f.D != p.width:
        raise ShapeError("feature width does not match attention parameters", f.tensor.shape, p.w_q.shape)
    if f.D % p.heads:
        raise ConfigError(f"width {f.D} is not divisible by {p.heads} heads")


def split_heads(x, heads):
    """[B, N, D] -> [B, heads, N, D/heads]"""
    b, n, d = x.shape
    return tc.permute(tc.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x):
    """[B, heads, N, d_h] -> [B, N, heads*d_h]"""
    b, h, n, dh = x.shape
    return tc.reshape(tc.permute(x, (0, 2, 1, 3)), (b, n, h * dh))


def _head_scale(p):
    if p.scale_by_head_count:
        return math.sqrt(p.heads)
    return math.sqrt(p.width // p.heads)


def _attend(logits, v):
    weights = tc.softmax_lastdim(logits)
    return merge_heads(tc.matmul(weights, v)), AttentionMaps(weights)


def compute_reference_batch(f):
    """Leave-one-out batch mean: F^_i = (sum_j F_j - F_i) / (B - 1); F itself when B == 1."""
    if f.B == 1:
        return f
    total = tc.sum(f.tensor, axis=0, keepdims=True)
    return BatchFeatures(tc.scale(tc.sub(total, f.tensor), 1.0 / (f.B - 1)))


def self_attention_forward(f, p):
    _check(f, p, AttentionKind.SELF)
    q = split_heads(tc.linear(f.tensor, p.w_q, p.b_q), p.heads)
    k = split_heads(tc.linear(f.tensor, p.w_k, p.b_k), p.heads)
    v = split_heads(tc.linear(f.tensor, p.w_v, p.b_v), p.heads)
    logits = tc.scale(tc.matmul(q, tc.transpose_last(k)), 1.0 / _head_scale(p))
    out, maps = _attend(logits, v)
    return BatchFeatures(out), maps


def miba_forward(f, p, intra_batch=True):
    """Queries from F, keys and values from the reference batch F^.

    With intra_batch=False every sample is its own reference (F^_i := F_i).
    """
    _check(f, p, AttentionKind.MIBA)
    ref = compute_reference_batch(f) if intra_batch else f
    q = split_heads(tc.linear(f.tensor, p.w_q, p.b_q), p.heads)
    k = split_heads(tc.linear(ref.tensor, p.w_k, p.b_k), p.heads)
    v = split_heads(tc.linear(ref.tensor, p.w_v, p.b_v), p.heads)
    logits = tc.scale(tc.matmul(q, tc.transpose_last(k)), 1.0 / _head_scale(p))
    out, maps = _attend(logits, v)
    return BatchFeatures(out), maps


def eiba_scores(q, k):
    """R_i = sum_j q_i k_j^T, evaluated as q_i (sum_j k_j)^T. Batch is axis 0."""
    if q.shape != k.shape:
        raise ShapeError("eiba_scores: query and key shapes differ", q.shape, k.shape)
    k_total = tc.sum(k, axis=0, keepdims=True)
    return tc.matmul(q, tc.transpose_last(k_total))


def eiba_forward(f, p, intra_batch=True):
    """Summed cross-sample scores scaled by sqrt(B), applied to each sample's own values.

    With intra_batch=False the sum is restricted to j == i and the scale is sqrt(1).
    """
    _check(f, p, AttentionKind.EIBA)
    q = split_heads(tc.linear(f.tensor, p.w_q, p.b_q), p.heads)
    k = split_heads(tc.linear(f.tensor, p.w_k, p.b_k), p.heads)
    v = split_heads(tc.linear(f.tensor, p.w_v, p.b_v), p.heads)
    if intra_batch:
        logits = tc.scale(eiba_scores(q, k), 1.0 / math.sqrt(f.B))
    else:
        logits = tc.matmul(q, tc.transpose_last(k))
    out, maps = _attend(logits, v)
    return BatchFeatures(out), maps


def attention(f, p, intra_batch=True):
    if p.kind == AttentionKind.SELF:
        return self_attention_forward(f, p)
    if p.kind == AttentionKind.MIBA:
        return miba_forward(f, p, intra_batch=intra_batch)
    return eiba_forward(f, p, intra_batch=intra_batch)


def attention_output(f, p, intra_batch=True):
    """Attention followed by the shared output projection; returns (Tensor, AttentionMaps)."""
    out, maps = attention(f, p, intra_batch=intra_batch)
    return tc.linear(out.tensor, p.w_out, p.b_out), maps


def iba_block_forward(f, p, intra_batch=True):
    """F^{l+1} = Linear(Attention(F^l)) + F^l"""
    projected, _ = attention_output(f, p, intra_batch=intra_batch)
    out = BatchFeatures(tc.add(projected, f.tensor))
    logging.debug(f"{p.kind.value} block: B={f.B} N={f.N} D={f.D} heads={p.heads}")
    return out
