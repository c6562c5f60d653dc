"""MLM masking and loss, AdamW with warmup/linear decay, and the pretraining loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from . import numerics as nx
from .data import IGNORE, MASK, NUM_SPECIALS, Batch
from .errors import ConfigError, InputError, TrainingDivergedError
from .model import EncoderModel, encoder_forward, mlm_logits
from .numerics import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "Batch",
    "TrainHyper",
    "AdamState",
    "StepRecord",
    "mask_tokens",
    "masked_count",
    "mlm_loss",
    "gather_positions",
    "batch_loss",
    "adam_step",
    "clip_grad_norm",
    "lr_schedule",
    "train_loop",
    "MetricsWriter",
]


@dataclass
class TrainHyper:
    lr_peak: float = 3e-4
    warmup_steps: int = 200
    total_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    batch_size: int = 32
    mask_rate: float = 0.15
    seed: int = 0
    clip_norm: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    wall_ms: float


# ----------------------------------------------------------------------------
# masking and loss


def masked_count(n_maskable: int, rate: float) -> int:
    """``floor(rate * n)`` with a minimum of one (zero if nothing is maskable)."""
    if n_maskable <= 0:
        return 0
    return max(1, int(math.floor(rate * n_maskable + 1e-9)))


def mask_tokens(batch: Batch, rate: float, rng: np.random.Generator) -> Batch:
    """Replace an exact share of each row's ordinary tokens with [MASK].

    Positions are drawn uniformly without replacement among non-pad,
    non-special tokens. Rows with nothing maskable are left untouched and
    counted in ``skipped_rows`` on the returned batch.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"mask rate must lie in (0, 1), got {rate}")
    ids = batch.token_ids.copy()
    labels = np.full(ids.shape, IGNORE, dtype=np.int64)
    maskable = (ids >= NUM_SPECIALS) & ~batch.pad_mask
    positions = []
    skipped = 0
    for r in range(ids.shape[0]):
        cand = np.flatnonzero(maskable[r])
        n = masked_count(cand.size, rate)
        if n == 0:
            skipped += 1
            continue
        cols = np.sort(rng.choice(cand, size=n, replace=False))
        labels[r, cols] = ids[r, cols]
        ids[r, cols] = MASK
        positions.append(np.stack([np.full(n, r), cols], axis=1))
    if skipped:
        log.warning("mask_tokens: %d row(s) without maskable tokens skipped", skipped)
    pos = np.concatenate(positions) if positions else np.zeros((0, 2), dtype=np.int64)
    return Batch(ids, batch.pad_mask.copy(), labels, pos, skipped)


def mlm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over entries whose label is not ``IGNORE``.

    ``logits`` is ``[N, V]`` or ``[B, l, V]`` with matching ``labels``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    V = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise InputError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat = logits.data.reshape(-1, V)
    lab = labels.reshape(-1)
    keep = np.flatnonzero(lab != IGNORE)
    if keep.size == 0:
        raise InputError("mlm_loss needs at least one masked position")
    if lab[keep].min() < 0 or lab[keep].max() >= V:
        raise InputError("label outside the vocabulary")
    sel = flat[keep]
    mx = sel.max(axis=1, keepdims=True)
    e = np.exp(sel - mx)
    se = e.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(se[:, 0])
    loss = np.mean(lse - sel[np.arange(keep.size), lab[keep]])

    def grad_fn(g):
        p = e / se
        p[np.arange(keep.size), lab[keep]] -= 1.0
        full = np.zeros_like(flat)
        full[keep] = p * (g / keep.size)
        return (full.reshape(logits.shape),)

    return nx._record(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)


def gather_positions(hidden: Tensor, positions: np.ndarray) -> Tensor:
    """Rows ``hidden[b, i]`` for each ``(b, i)`` in ``positions`` -> ``[N, d]``."""
    B, l, d = hidden.shape
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    flat = nx.reshape(hidden, (B * l, d))
    return nx.take_rows(flat, positions[:, 0] * l + positions[:, 1])


def batch_loss(model: EncoderModel, masked: Batch, train_mode: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    """MLM loss of a masked batch; logits are formed only at masked positions."""
    if len(masked.masked_positions) == 0:
        raise InputError("batch has no masked positions")
    hidden = encoder_forward(model, masked, train_mode, rng)
    rows = gather_positions(hidden, masked.masked_positions)
    r, c = masked.masked_positions.T
    return mlm_loss(mlm_logits(rows, model), masked.mlm_labels[r, c])


# ----------------------------------------------------------------------------
# optimisation


def lr_schedule(step: int, hyper: TrainHyper) -> float:
    """Linear ramp to ``lr_peak`` over the warmup, then linear decay to zero."""
    if not 0 <= step <= hyper.total_steps:
        raise ConfigError(f"step {step} outside [0, {hyper.total_steps}]")
    if step < hyper.warmup_steps:
        return hyper.lr_peak * step / hyper.warmup_steps
    tail = hyper.total_steps - hyper.warmup_steps
    if tail == 0:
        return hyper.lr_peak
    return hyper.lr_peak * (hyper.total_steps - step) / tail


def _decays(t: Tensor) -> bool:
    # Biases, norm gains/offsets and the swish alpha/beta are all 1-D.
    return t.ndim >= 2


def adam_step(params: dict, state: AdamState, hyper: TrainHyper, lr: float) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    Parameters without a gradient are left alone (their moments too).
    """
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if hyper.weight_decay and _decays(p):
            p.data -= (lr * hyper.weight_decay) * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.adam_eps)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    params = list(params)
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(s)
    return norm


# ----------------------------------------------------------------------------
# loop


class MetricsWriter:
    """Append-only ``step,loss,lr,wall_ms`` CSV."""

    HEADER = "step,loss,lr,wall_ms\n"

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_text(self.HEADER)

    def write(self, rec: StepRecord) -> None:
        with self.path.open("a") as fh:
            fh.write(f"{rec.step},{rec.loss!r},{rec.lr!r},{rec.wall_ms:.3f}\n")


def train_loop(
    model: EncoderModel,
    data: Iterable[Batch],
    hyper: TrainHyper,
    state: Optional[AdamState] = None,
    out_dir: Optional[Union[str, Path]] = None,
    steps: Optional[int] = None,
) -> Iterator[StepRecord]:
    """Run MLM pretraining, yielding one :class:`StepRecord` per update.

    ``data`` yields unmasked batches. Masking and dropout draw from RNGs
    derived from ``hyper.seed``, so a fixed seed and data order reproduce
    the loss sequence bit for bit. With ``out_dir`` and
    ``hyper.checkpoint_every`` set, checkpoints are written along the way.
    """
    from .checkpoint import save_checkpoint

    state = state or AdamState()
    params = model.named_parameters()
    mask_rng = np.random.default_rng([hyper.seed, 1])
    drop_rng = np.random.default_rng([hyper.seed, 2])
    last = hyper.total_steps if steps is None else min(hyper.total_steps, state.step + steps)
    it = iter(data)
    while state.step < last:
        t0 = time.perf_counter()
        batch = next(it)
        masked = mask_tokens(batch, hyper.mask_rate, mask_rng)
        model.zero_grad()
        with nx.GradTape():
            loss = batch_loss(model, masked, True, drop_rng)
            nx.backward(loss)
        value = float(loss.data)
        lr = lr_schedule(state.step + 1, hyper)
        if not math.isfinite(value):
            norms = {n: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0 for n, p in params.items()}
            raise TrainingDivergedError(
                f"non-finite loss {value} at step {state.step + 1}",
                {"step": state.step + 1, "lr": lr, "grad_norms": norms},
            )
        clip_grad_norm(params.values(), hyper.clip_norm)
        adam_step(params, state, hyper, lr)
        rec = StepRecord(state.step, value, lr, (time.perf_counter() - t0) * 1e3)
        if out_dir is not None and hyper.checkpoint_every and state.step % hyper.checkpoint_every == 0:
            save_checkpoint(model, state, Path(out_dir) / f"step{state.step:06d}.swrn")
        yield rec
