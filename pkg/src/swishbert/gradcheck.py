"""Double-precision finite-difference checks for every block and a 2-layer model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import layers as L
from . import numerics as nx
from .data import IGNORE, MASK, Batch
from .model import EncoderModel, ModelConfig, encoder_forward, mlm_logits
from .numerics import Tensor
from .training import mlm_loss

TOLERANCE = 1e-5


@dataclass
class GroupResult:
    block: str
    group: str
    max_rel_err: float
    size: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def tiny_config(**overrides) -> ModelConfig:
    """The gradient-check configuration: d=8, d'=6, 2 heads, 2 layers."""
    base = dict(
        variant="swish", num_layers=2, d=8, d_ffn=12, d_prime=6, heads=2, head_dim=4,
        vocab_size=11, max_seq_len=5, step_schedule=[1, 2, 4], dropout=0.0,
        attention_dropout=0.0, num_buckets=8, max_distance=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _randomize(bundle_tensors, rng: np.random.Generator, std: float = 0.5) -> None:
    # Small-init weights make several gradients tiny; spread them out.
    for t in bundle_tensors:
        t.data[...] = rng.standard_normal(t.shape) * std


def check_tensors(block: str, loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                  eps: float = 1e-5) -> list[GroupResult]:
    """Compare tape gradients with central differences for each named tensor."""
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    with nx.GradTape():
        nx.backward(loss_fn())
    out = []
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = nx.finite_diff_grad(lambda _: loss_fn(), t, eps)
        out.append(GroupResult(block, name, nx.max_rel_error(analytic, numeric), t.size))
        t.grad = None
    return out


def _projection_loss(out_fn: Callable[[], Tensor], shape, rng) -> Callable[[], Tensor]:
    weights = Tensor(rng.standard_normal(shape))
    return lambda: nx.total(nx.mul(out_fn(), weights))


def run_suite(seed: int = 0, config: Optional[ModelConfig] = None) -> Iterator[GroupResult]:
    """Yield one result per (block, parameter group); all math in float64."""
    cfg = config or tiny_config()
    rng = np.random.default_rng(seed)
    d, dp, l, h = cfg.d, cfg.d_prime, cfg.max_seq_len, cfg.heads
    f64 = np.float64

    # SwishRNN, one check per step size in the schedule.
    for k in sorted(set(cfg.step_schedule)):
        p = L.SwishRnnParams.init(d, dp, rng, f64)
        _randomize([t for _, t in p.named()], rng)
        x = Tensor(rng.standard_normal((l, d)))
        loss = _projection_loss(lambda: L.swishrnn_forward(x, p, k, cfg.gate_activation), (l, d), rng)
        yield from check_tensors(f"swish(k={k})", loss, {**dict(p.named()), "input": x})

    # Attention with relative bias and one padded key.
    a = L.AttentionParams.init(d, h, rng, num_buckets=cfg.num_buckets, dtype=f64)
    _randomize([t for _, t in a.named()], rng)
    x = Tensor(rng.standard_normal((2, l, d)))
    pad = np.zeros((2, l), dtype=bool)
    pad[1, -1] = True
    loss = _projection_loss(
        lambda: L.attention(x, a, L.relative_bias_logits(a.rel_bias, l, cfg.max_distance), pad), (2, l, d), rng
    )
    yield from check_tensors("attention", loss, {**dict(a.named()), "input": x})

    f = L.FfnParams.init(d, cfg.d_ffn, rng, f64)
    _randomize([t for _, t in f.named()], rng)
    x = Tensor(rng.standard_normal((l, d)))
    yield from check_tensors("ffn", _projection_loss(lambda: L.ffn_forward(x, f), (l, d), rng),
                             {**dict(f.named()), "input": x})

    n = L.NormParams.init(d, f64)
    _randomize([n.gain, n.bias], rng)
    x = Tensor(rng.standard_normal((l, d)))
    tilde = Tensor(rng.standard_normal((l, d)))
    yield from check_tensors("add_norm", _projection_loss(lambda: L.add_norm(tilde, x, n), (l, d), rng),
                             {"gain": n.gain, "bias": n.bias, "tilde": tilde, "input": x})

    emb = L.EmbeddingParams(
        token=Tensor(rng.standard_normal((cfg.vocab_size, d))),
        position=Tensor(rng.standard_normal((cfg.max_seq_len, d))),
    )
    ids = rng.integers(0, cfg.vocab_size, size=(2, l))
    yield from check_tensors("embedding", _projection_loss(lambda: L.embed(ids, emb, "orig"), (2, l, d), rng),
                             {"token": emb.token, "position": emb.position})

    # End to end: the tiny swish encoder with its tied MLM head and a real MLM loss.
    model = EncoderModel(cfg, seed=seed, dtype=f64)
    _randomize(model.parameters(), rng, std=0.3)
    for layer in model.layers:
        layer.norm1.gain.data += 1.0
        layer.norm2.gain.data += 1.0
    ids = rng.integers(5, cfg.vocab_size, size=(2, l))
    labels = np.full(ids.shape, IGNORE)
    labels[0, 1], labels[1, 3] = ids[0, 1], ids[1, 3]
    masked_ids = ids.copy()
    masked_ids[0, 1] = masked_ids[1, 3] = MASK
    pad = np.zeros(ids.shape, dtype=bool)
    batch = Batch(masked_ids, pad, labels, [[0, 1], [1, 3]])

    def model_loss():
        return mlm_loss(mlm_logits(encoder_forward(model, batch), model), labels)

    # A slightly wider step keeps rounding noise below the tolerance on the
    # smallest end-to-end gradient entries.
    yield from check_tensors(f"model({cfg.num_layers} layers)", model_loss, model.named_parameters(), eps=3e-5)


def format_report(results: list[GroupResult]) -> str:
    width = max(len(r.block) for r in results)
    lines = [f"{'block':<{width}}  {'group':<26} {'size':>5}  max_rel_err  status"]
    for r in results:
        lines.append(
            f"{r.block:<{width}}  {r.group:<26} {r.size:>5}  {r.max_rel_err:11.3e}  {'ok' if r.ok else 'FAIL'}"
        )
    return "\n".join(lines)
