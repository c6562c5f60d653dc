"""Encoder assembly for the three variants and parameter accounting.

``orig``  absolute position embeddings, attention + FFN layers
``rab``   relative attention bias instead of absolute positions, attention + FFN
``swish`` like ``rab`` but every FFN block is a SwishRNN block
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import layers as L
from . import numerics as nx
from .data import Batch
from .errors import ConfigError, InputError
from .numerics import Tensor

VARIANTS = ("orig", "rab", "swish")


@dataclass
class ModelConfig:
    variant: str = "swish"
    num_layers: int = 2
    d: int = 128
    d_ffn: int = 512
    d_prime: int = 341
    heads: int = 2
    head_dim: int = 64
    vocab_size: int = 8192
    max_seq_len: int = 128
    step_schedule: list = field(default_factory=lambda: [1, 2, 4])
    gate_activation: str = "gelu"
    dropout: float = 0.1
    attention_dropout: float = 0.1
    num_buckets: int = 32
    max_distance: int = 128

    def __post_init__(self):
        self.step_schedule = list(self.step_schedule)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.heads < 1 or self.heads * self.head_dim != self.d:
            raise ConfigError(f"heads * head_dim must equal d ({self.heads} * {self.head_dim} != {self.d})")
        if self.variant == "swish":
            if self.d_prime <= 0:
                raise ConfigError("swish variant needs d_prime > 0")
            if not self.step_schedule or any(int(k) < 1 for k in self.step_schedule):
                raise ConfigError(f"step_schedule must be non-empty with entries >= 1, got {self.step_schedule}")
        elif self.d_ffn <= 0:
            raise ConfigError(f"{self.variant} variant needs d_ffn > 0")
        if self.gate_activation not in L.GATES:
            raise ConfigError(f"gate_activation must be one of {tuple(L.GATES)}")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attention_dropout < 1.0):
            raise ConfigError("dropout rates must lie in [0, 1)")
        if self.vocab_size < 6 or self.max_seq_len < 1:
            raise ConfigError("vocab_size must cover the 5 specials plus text; max_seq_len >= 1")
        if self.variant != "orig":
            L.relative_position_buckets(np.zeros(1), self.num_buckets, self.max_distance)

    @property
    def uses_relative_bias(self) -> bool:
        return self.variant != "orig"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def solve_inner_dim(d: int, d_ffn: int, multiple: int = 1) -> int:
    """Largest SwishRNN inner size with ``3*d*d' <= 2*d*d_ffn``, rounded down to ``multiple``."""
    if multiple < 1:
        raise ConfigError("multiple must be >= 1")
    return (2 * d_ffn // 3) // multiple * multiple


def step_size_schedule(layer_index: int, schedule) -> int:
    if not schedule:
        raise ConfigError("step schedule is empty")
    return int(schedule[layer_index % len(schedule)])


def block_matrix_params(config: ModelConfig) -> int:
    """Matrix entries of one recurrent or feed-forward block (biases excluded)."""
    if config.variant == "swish":
        return L.swishrnn_matrix_params(config.d, config.d_prime)
    return L.ffn_matrix_params(config.d, config.d_ffn)


def count_params(config: ModelConfig) -> int:
    """Exact number of learnable scalars in an :class:`EncoderModel` built from ``config``."""
    d, V = config.d, config.vocab_size
    n = V * d + 2 * d + V  # token table, embedding norm, MLM output bias
    if config.variant == "orig":
        n += config.max_seq_len * d
    else:
        n += config.num_buckets * config.heads
    per_layer = 4 * d * d + 4 * d + block_matrix_params(config)
    if config.variant == "swish":
        per_layer += 4 * config.d_prime + d
    else:
        per_layer += config.d_ffn + d
    return n + config.num_layers * per_layer


@dataclass
class EncoderLayer:
    attn: L.AttentionParams
    norm1: L.NormParams
    block: Union[L.SwishRnnParams, L.FfnParams]
    norm2: L.NormParams
    step: int = 1


class EncoderModel:
    """Parameters of one encoder plus its MLM head (tied to the token table)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = config.d
        self.embeddings = L.EmbeddingParams(
            token=L._param(L.truncated_normal(rng, (config.vocab_size, d), dtype=dtype), "token"),
            position=(
                L._param(L.truncated_normal(rng, (config.max_seq_len, d), dtype=dtype), "position")
                if config.variant == "orig"
                else None
            ),
        )
        self.embed_norm = L.NormParams.init(d, dtype)
        self.rel_bias: Optional[Tensor] = None
        if config.uses_relative_bias:
            self.rel_bias = L._param(
                L.truncated_normal(rng, (config.num_buckets, config.heads), dtype=dtype), "rel_bias"
            )
        self.layers: list[EncoderLayer] = []
        for i in range(config.num_layers):
            attn = L.AttentionParams.init(d, config.heads, rng, dtype=dtype)
            if config.variant == "swish":
                block = L.SwishRnnParams.init(d, config.d_prime, rng, dtype)
                step = step_size_schedule(i, config.step_schedule)
            else:
                block = L.FfnParams.init(d, config.d_ffn, rng, dtype)
                step = 1
            self.layers.append(EncoderLayer(attn, L.NormParams.init(d, dtype), block, L.NormParams.init(d, dtype), step))
        self.mlm_bias = L._param(np.zeros(config.vocab_size, dtype), "mlm_bias")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed.token": self.embeddings.token}
        if self.embeddings.position is not None:
            out["embed.position"] = self.embeddings.position
        out["embed.norm.gain"] = self.embed_norm.gain
        out["embed.norm.bias"] = self.embed_norm.bias
        if self.rel_bias is not None:
            out["rel_bias"] = self.rel_bias
        for i, layer in enumerate(self.layers):
            kind = "swish" if isinstance(layer.block, L.SwishRnnParams) else "ffn"
            for part, bundle in (("attn", layer.attn), ("norm1", layer.norm1), (kind, layer.block), ("norm2", layer.norm2)):
                for name, t in bundle.named():
                    out[f"layers.{i}.{part}.{name}"] = t
        out["mlm.bias"] = self.mlm_bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def __repr__(self) -> str:
        c = self.config
        return f"EncoderModel(variant={c.variant!r}, layers={c.num_layers}, d={c.d}, params={self.num_parameters():,})"


def _ids_and_mask(batch) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if isinstance(batch, Batch):
        return batch.token_ids, batch.pad_mask
    ids = np.asarray(batch)
    if ids.ndim == 1:
        ids = ids[None, :]
    return ids, None


def encoder_forward(
    m: EncoderModel,
    batch: Union[Batch, np.ndarray],
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Hidden states ``[B, l, d]`` for a batch of token ids.

    Each layer applies ``X_bar = AddNorm(Att(X), X)`` then
    ``X_next = AddNorm(Block(X_bar), X_bar)``. Dropout is active only in
    ``train_mode`` and then needs ``rng``.
    """
    cfg = m.config
    ids, pad_mask = _ids_and_mask(batch)
    l = ids.shape[-1]
    if l > cfg.max_seq_len:
        raise InputError(f"sequence length {l} exceeds max_seq_len {cfg.max_seq_len}")
    if train_mode and rng is None and (cfg.dropout > 0 or cfg.attention_dropout > 0):
        raise ValueError("train_mode with dropout needs an rng")
    x = L.embed(ids, m.embeddings, cfg.variant)
    x = nx.layer_norm(x, m.embed_norm.gain, m.embed_norm.bias)
    x = nx.dropout(x, cfg.dropout, rng, train_mode)
    bias = L.relative_bias_logits(m.rel_bias, l, cfg.max_distance) if m.rel_bias is not None and cfg.num_layers else None
    for layer in m.layers:
        a = L.attention(x, layer.attn, bias, pad_mask, cfg.attention_dropout, rng, train_mode)
        xbar = L.add_norm(nx.dropout(a, cfg.dropout, rng, train_mode), x, layer.norm1)
        if isinstance(layer.block, L.SwishRnnParams):
            h = L.swishrnn_forward(xbar, layer.block, layer.step, cfg.gate_activation)
        else:
            h = L.ffn_forward(xbar, layer.block)
        x = L.add_norm(nx.dropout(h, cfg.dropout, rng, train_mode), xbar, layer.norm2)
    return x


def mlm_logits(hidden: Tensor, m: EncoderModel) -> Tensor:
    """Vocabulary logits through the transposed token table plus a free bias."""
    return nx.add(nx.matmul(hidden, m.embeddings.token, transpose_b=True), m.mlm_bias)
