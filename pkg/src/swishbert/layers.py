"""Encoder building blocks: SwishRNN, attention with relative bias, FFN, Add+Norm, embeddings.

Blocks are plain functions of ``(input, params)``. Inputs are ``[l, d]`` or
batched ``[B, l, d]`` tensors; parameter bundles are small dataclasses of
:class:`~swishbert.numerics.Tensor` leaves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, InputError
from .numerics import Tensor

INIT_STD = 0.02
MASK_PENALTY = -1e9


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(arr, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class _Bundle:
    """Mixin: iterate ``(field_name, tensor)`` pairs, skipping absent optionals."""

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            t = getattr(self, f.name)
            if isinstance(t, Tensor):
                yield f.name, t


# ----------------------------------------------------------------------------
# parameter bundles


@dataclass
class SwishRnnParams(_Bundle):
    W1: Tensor
    W2: Tensor
    W3: Tensor
    b_c: Tensor
    b_sigma: Tensor
    b3: Tensor
    alpha: Tensor
    beta: Tensor

    @classmethod
    def init(cls, d: int, d_prime: int, rng: np.random.Generator, dtype=np.float32) -> "SwishRnnParams":
        return cls(
            W1=_param(truncated_normal(rng, (d, d_prime), dtype=dtype), "W1"),
            W2=_param(truncated_normal(rng, (d, d_prime), dtype=dtype), "W2"),
            W3=_param(truncated_normal(rng, (d_prime, d), dtype=dtype), "W3"),
            b_c=_param(np.zeros(d_prime, dtype), "b_c"),
            b_sigma=_param(np.zeros(d_prime, dtype), "b_sigma"),
            b3=_param(np.zeros(d, dtype), "b3"),
            alpha=_param(np.ones(d_prime, dtype), "alpha"),
            beta=_param(np.zeros(d_prime, dtype), "beta"),
        )

    def __post_init__(self):
        d, dp = self.W1.shape
        expect = {
            "W1": (d, dp), "W2": (d, dp), "W3": (dp, d), "b_c": (dp,),
            "b_sigma": (dp,), "b3": (d,), "alpha": (dp,), "beta": (dp,),
        }
        for name, t in self.named():
            if t.shape != expect[name]:
                raise DimensionError(f"SwishRnnParams.{name}: expected {expect[name]}, got {t.shape}")


@dataclass
class AttentionParams(_Bundle):
    """Packed projections: head ``m`` owns columns ``m*dh:(m+1)*dh`` of Wq/Wk/Wv."""

    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    heads: int
    rel_bias: Optional[Tensor] = None

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, num_buckets: Optional[int] = None,
             dtype=np.float32) -> "AttentionParams":
        rel = None
        if num_buckets is not None:
            rel = _param(truncated_normal(rng, (num_buckets, heads), dtype=dtype), "rel_bias")
        return cls(
            Wq=_param(truncated_normal(rng, (d, d), dtype=dtype), "Wq"),
            Wk=_param(truncated_normal(rng, (d, d), dtype=dtype), "Wk"),
            Wv=_param(truncated_normal(rng, (d, d), dtype=dtype), "Wv"),
            Wo=_param(truncated_normal(rng, (d, d), dtype=dtype), "Wo"),
            heads=heads,
            rel_bias=rel,
        )

    def __post_init__(self):
        d = self.Wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"hidden size {d} is not divisible by {self.heads} heads")
        for name in ("Wq", "Wk", "Wv", "Wo"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"AttentionParams.{name}: expected {(d, d)}")
        if self.rel_bias is not None and self.rel_bias.shape[1] != self.heads:
            raise DimensionError(f"rel_bias has {self.rel_bias.shape[1]} columns for {self.heads} heads")


@dataclass
class FfnParams(_Bundle):
    Wf1: Tensor
    Wf2: Tensor
    bf1: Tensor
    bf2: Tensor

    @classmethod
    def init(cls, d: int, d_ffn: int, rng: np.random.Generator, dtype=np.float32) -> "FfnParams":
        return cls(
            Wf1=_param(truncated_normal(rng, (d, d_ffn), dtype=dtype), "Wf1"),
            Wf2=_param(truncated_normal(rng, (d_ffn, d), dtype=dtype), "Wf2"),
            bf1=_param(np.zeros(d_ffn, dtype), "bf1"),
            bf2=_param(np.zeros(d, dtype), "bf2"),
        )

    def __post_init__(self):
        d, f = self.Wf1.shape
        if self.Wf2.shape != (f, d) or self.bf1.shape != (f,) or self.bf2.shape != (d,):
            raise DimensionError("FfnParams shapes disagree with a single (d, d_ffn) pair")


@dataclass
class NormParams(_Bundle):
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int, dtype=np.float32) -> "NormParams":
        return cls(gain=_param(np.ones(d, dtype), "gain"), bias=_param(np.zeros(d, dtype), "bias"))


@dataclass
class EmbeddingParams(_Bundle):
    token: Tensor
    position: Optional[Tensor] = None


# ----------------------------------------------------------------------------
# SwishRNN


def swish(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """``sigmoid(alpha*x + beta) * x`` with per-channel alpha, beta."""
    if alpha.shape != (x.shape[-1],) or beta.shape != alpha.shape:
        raise DimensionError(f"swish: alpha {alpha.shape} / beta {beta.shape} vs channels {x.shape[-1]}")
    return nx.mul(nx.sigmoid(nx.add(nx.mul(x, alpha), beta)), x)


def _scan_forward(x1: np.ndarray, alpha: np.ndarray, beta: np.ndarray, k: int):
    """Strided Swish pooling along axis -2. Returns (c, z, s) for the backward pass."""
    l = x1.shape[-2]
    c = np.empty_like(x1)
    z = np.empty_like(x1)
    s = np.empty_like(x1)
    for t in range(0, l, k):
        e = min(t + k, l)
        x = x1[..., t:e, :]
        if t == 0:
            zt = -x
        else:
            zt = c[..., t - k:e - k, :] - x
        st = nx._sigmoid(alpha * zt + beta)
        c[..., t:e, :] = st * zt + x
        z[..., t:e, :] = zt
        s[..., t:e, :] = st
    return c, z, s


def swishrnn_scan(x1: Tensor, alpha: Tensor, beta: Tensor, k: int = 1) -> Tensor:
    """Sequential pooling ``c[i] = Swish(c[i-k] - x1[i]) + x1[i]`` with ``c[j<=0] = 0``.

    Positions in one block of ``k`` consecutive rows depend only on the
    previous block, so each of the ``ceil(l/k)`` steps is one vector op.
    """
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigError(f"step size must be an integer >= 1, got {k!r}")
    if x1.ndim not in (2, 3):
        raise DimensionError(f"swishrnn_scan expects [l, d'] or [B, l, d'], got {x1.shape}")
    dp = x1.shape[-1]
    if alpha.shape != (dp,) or beta.shape != (dp,):
        raise DimensionError(f"swishrnn_scan: alpha {alpha.shape} / beta {beta.shape} vs channels {dp}")
    k = int(k)
    c, z, s = _scan_forward(x1.data, alpha.data, beta.data, k)

    def grad_fn(g):
        l = g.shape[-2]
        gc = np.array(g, copy=True)
        gx = np.empty_like(gc)
        ds = s * (1.0 - s)
        galpha = np.zeros_like(alpha.data)
        gbeta = np.zeros_like(beta.data)
        last = ((l - 1) // k) * k
        for t in range(last, -1, -k):
            e = min(t + k, l)
            gt = gc[..., t:e, :]
            zt = z[..., t:e, :]
            dst = ds[..., t:e, :]
            zd = zt * dst
            gz = gt * (s[..., t:e, :] + alpha.data * zd)
            gx[..., t:e, :] = gt - gz
            galpha += (gt * zd * zt).reshape(-1, dp).sum(axis=0)
            gbeta += (gt * zd).reshape(-1, dp).sum(axis=0)
            if t > 0:
                gc[..., t - k:e - k, :] += gz
        return gx, galpha, gbeta

    return nx._record(c, (x1, alpha, beta), grad_fn)


GATES = {"gelu": nx.gelu, "sigmoid": nx.sigmoid}


def swishrnn_forward(xbar: Tensor, p: SwishRnnParams, k: int = 1, gate: str = "gelu") -> Tensor:
    """SwishRNN block: two projections, strided pooling, gating, output projection."""
    if xbar.shape[-1] != p.W1.shape[0]:
        raise DimensionError(f"swishrnn_forward: input {xbar.shape} vs W1 {p.W1.shape}")
    try:
        act = GATES[gate]
    except KeyError:
        raise ConfigError(f"unknown gate activation {gate!r}") from None
    x1 = nx.matmul(xbar, p.W1)
    x2 = nx.matmul(xbar, p.W2)
    c = swishrnn_scan(x1, p.alpha, p.beta, k)
    gated = nx.mul(nx.add(c, p.b_c), act(nx.add(x2, p.b_sigma)))
    return nx.add(nx.matmul(gated, p.W3), p.b3)


def swishrnn_matrix_params(d: int, d_prime: int) -> int:
    return 3 * d * d_prime


# ----------------------------------------------------------------------------
# attention


def relative_position_bucket(relative_distance: int, num_buckets: int = 32, max_distance: int = 128) -> int:
    """T5 bidirectional bucket for ``key_pos - query_pos``.

    Half of the buckets serve each sign. Within a half, offsets below
    ``num_buckets // 4`` get their own bucket; larger ones share
    logarithmically sized buckets up to ``max_distance``.
    """
    return int(relative_position_buckets(np.array([relative_distance]), num_buckets, max_distance)[0])


def relative_position_buckets(distance: np.ndarray, num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    if num_buckets % 2 or num_buckets < 4:
        raise ConfigError(f"num_buckets must be even and >= 4, got {num_buckets}")
    half = num_buckets // 2
    max_exact = half // 2
    if max_distance <= max_exact:
        raise ConfigError(f"max_distance must exceed {max_exact}, got {max_distance}")
    distance = np.asarray(distance, dtype=np.int64)
    ret = np.where(distance > 0, half, 0)
    n = np.abs(distance)
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, half - 1)
    return ret + np.where(n < max_exact, n, large)


def bucket_matrix(l: int, num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """``[l, l]`` bucket ids for query i, key j."""
    pos = np.arange(l)
    return relative_position_buckets(pos[None, :] - pos[:, None], num_buckets, max_distance)


def relative_bias_logits(rel_bias: Tensor, l: int, max_distance: int = 128) -> Tensor:
    """Look up the ``[l, l, h]`` additive logits from a ``[num_buckets, h]`` table."""
    return nx.take_rows(rel_bias, bucket_matrix(l, rel_bias.shape[0], max_distance))


def attention(
    x: Tensor,
    p: AttentionParams,
    rel_bias_logits: Optional[Tensor] = None,
    pad_mask: Optional[np.ndarray] = None,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tensor:
    """Multi-head scaled dot-product self-attention.

    ``pad_mask`` is boolean ``[B, l]`` (or ``[l]``), True at padded positions;
    those keys get a large negative logit before the softmax.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    B, l, d = x.shape
    if d != p.Wq.shape[0]:
        raise DimensionError(f"attention: input {x.shape} vs Wq {p.Wq.shape}")
    h = p.heads
    dh = d // h
    q = nx.split_heads(nx.matmul(x, p.Wq), h)
    k = nx.split_heads(nx.matmul(x, p.Wk), h)
    v = nx.split_heads(nx.matmul(x, p.Wv), h)
    scores = nx.scale(nx.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(dh))
    if rel_bias_logits is not None:
        if rel_bias_logits.shape != (l, l, h):
            raise DimensionError(f"attention: bias logits {rel_bias_logits.shape}, expected {(l, l, h)}")
        scores = nx.add_head_bias(scores, rel_bias_logits)
    if pad_mask is not None:
        mask = np.asarray(pad_mask, dtype=bool).reshape(B, l)
        penalty = np.where(mask, MASK_PENALTY, 0.0).astype(x.dtype)
        scores = nx.add_const(scores, np.repeat(penalty[:, None, :], h, axis=0))
    probs = nx.dropout(nx.softmax_rows(scores), dropout, rng, train)
    z = nx.merge_heads(nx.matmul(probs, v), h)
    out = nx.matmul(z, p.Wo)
    if squeeze:
        out = nx.reshape(out, (l, d))
    return out


# ----------------------------------------------------------------------------
# feed-forward, residual norm, embeddings


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor:
    return nx.add(nx.matmul(nx.gelu(nx.add(nx.matmul(x, p.Wf1), p.bf1)), p.Wf2), p.bf2)


def ffn_matrix_params(d: int, d_ffn: int) -> int:
    return 2 * d * d_ffn


def add_norm(tilde: Tensor, x: Tensor, n: NormParams) -> Tensor:
    return nx.layer_norm(nx.add(tilde, x), n.gain, n.bias)


def embed(token_ids: np.ndarray, p: EmbeddingParams, variant: str) -> Tensor:
    """Token lookup, plus learned absolute positions for the ``orig`` variant."""
    ids = np.asarray(token_ids)
    if ids.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got {ids.dtype}")
    vocab = p.token.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id outside [0, {vocab}): min {ids.min()}, max {ids.max()}")
    out = nx.take_rows(p.token, ids)
    if variant == "orig":
        if p.position is None:
            raise ConfigError("orig variant needs a position table")
        l = ids.shape[-1]
        if l > p.position.shape[0]:
            raise InputError(f"sequence length {l} exceeds {p.position.shape[0]} positions")
        pos = np.broadcast_to(np.arange(l), ids.shape)
        out = nx.add(out, nx.take_rows(p.position, pos))
    elif variant not in ("rab", "swish"):
        raise ConfigError(f"unknown variant {variant!r}")
    return out
