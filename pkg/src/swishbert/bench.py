"""Per-layer timing of FFN vs SwishRNN blocks and of the bare strided scan."""

from __future__ import annotations

import csv
import io
import statistics
import time
from contextlib import nullcontext
from dataclasses import astuple, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers as L
from . import numerics as nx
from .numerics import Tensor

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

DEFAULT_SCHEDULE = (1, 2, 4)


@dataclass
class BenchRow:
    block: str       # "ffn" or "swish"
    component: str   # "block" (whole layer block) or "scan" (recurrence only)
    mode: str        # "fwd" or "fwd+bwd"
    step: str        # step size, schedule like "1-2-4", or "-" for ffn
    seq_len: int
    d: int
    inner: int       # d_ffn for ffn rows, d' for swish rows
    mean_ms: float
    std_ms: float
    median_ms: float
    ratio_to_ffn: float


@dataclass
class BenchReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f.name for f in fields(BenchRow)])
        for r in self.rows:
            w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in astuple(r)])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'block':<6} {'part':<6} {'mode':<8} {'step':<6} {'mean ms':>9} {'std':>8} {'median':>9} {'x ffn':>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.block:<6} {r.component:<6} {r.mode:<8} {r.step:<6} {r.mean_ms:9.3f} "
                f"{r.std_ms:8.3f} {r.median_ms:9.3f} {r.ratio_to_ffn:7.3f}"
            )
        return "\n".join(lines)

    def scan_times(self, mode: str = "fwd") -> dict[str, float]:
        return {r.step: r.mean_ms for r in self.rows if r.component == "scan" and r.mode == mode}

    def scan_ordering_holds(self, mode: str = "fwd") -> bool:
        """t(4) <= t(2) <= t(1) and the 1-2-4 schedule strictly between t(4) and t(1)."""
        t = self.scan_times(mode)
        sched = "-".join(map(str, DEFAULT_SCHEDULE))
        return t["4"] <= t["2"] <= t["1"] and t["4"] < t[sched] < t["1"]


def time_call(fn: Callable[[], None], reps: int = 30, warmup: int = 5) -> list[float]:
    """Wall-clock milliseconds of ``reps`` calls after ``warmup`` discarded ones."""
    if reps < 1 or warmup < 0:
        raise ValueError("need reps >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def _runner(forward: Callable[[], Tensor], params: list[Tensor], backward: bool) -> Callable[[], None]:
    if not backward:
        def run():
            forward()
        return run

    def run():
        for p in params:
            p.grad = None
        with nx.GradTape():
            nx.backward(nx.total(forward()))
    return run


def run_bench(
    seq_len: int = 512,
    d: int = 768,
    d_prime: int = 2048,
    d_ffn: int = 3072,
    steps: Sequence[int] = DEFAULT_SCHEDULE,
    reps: int = 30,
    warmup: int = 5,
    backward: bool = False,
    seed: int = 0,
    include_blocks: bool = True,
) -> BenchReport:
    """Time one layer's FFN and SwishRNN blocks (and the scan alone) on a single sequence.

    Each swish configuration appears once per step size in ``steps`` and once
    for the cyclic 1-2-4 schedule, whose time is the mean over its three
    layers. Math is pinned to one BLAS thread.
    """
    if warmup < 5 or reps < 30:
        raise ValueError("benchmark rows need at least 5 warmup and 30 timed iterations")
    rng = np.random.default_rng(seed)
    limit = threadpool_limits(1) if threadpool_limits is not None else nullcontext()
    modes = [("fwd", False)] + ([("fwd+bwd", True)] if backward else [])
    rows: list[BenchRow] = []
    sched = "-".join(map(str, DEFAULT_SCHEDULE))

    with limit:
        x = Tensor(rng.standard_normal((seq_len, d)).astype(np.float32))
        x1 = Tensor(rng.standard_normal((seq_len, d_prime)).astype(np.float32))
        ffn = L.FfnParams.init(d, d_ffn, rng)
        swish = L.SwishRnnParams.init(d, d_prime, rng)
        ffn_params = [t for _, t in ffn.named()]
        swish_params = [t for _, t in swish.named()]

        for mode, bwd in modes:
            mode_rows: list[tuple] = []
            ffn_ms = time_call(_runner(lambda: L.ffn_forward(x, ffn), ffn_params, bwd), reps, warmup)
            mode_rows.append(("ffn", "block", "-", d_ffn, ffn_ms))

            variants: list[tuple[str, Sequence[int]]] = [(str(k), (k,)) for k in steps]
            variants.append((sched, DEFAULT_SCHEDULE))
            for label, ks in variants:
                # Layers are chained so that backward also runs through every one.
                def scan_fwd(ks=ks):
                    out = x1
                    for k in ks:
                        out = L.swishrnn_scan(out, swish.alpha, swish.beta, k)
                    return out

                def block_fwd(ks=ks):
                    out = x
                    for k in ks:
                        out = L.swishrnn_forward(out, swish, k)
                    return out

                n = len(ks)
                for component, fwd in (("scan", scan_fwd), ("block", block_fwd)):
                    if component == "block" and not include_blocks:
                        continue
                    per_layer = [t / n for t in time_call(_runner(fwd, swish_params + [x1], bwd), reps, warmup)]
                    mode_rows.append(("swish", component, label, d_prime, per_layer))

            base = statistics.fmean(ffn_ms)
            for block, component, label, inner, samples in mode_rows:
                mean = statistics.fmean(samples)
                rows.append(BenchRow(
                    block, component, mode, label, seq_len, d, inner, mean,
                    statistics.stdev(samples), statistics.median(samples), mean / base,
                ))
    return BenchReport(rows)
