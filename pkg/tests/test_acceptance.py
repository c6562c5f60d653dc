"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``. The desk-scale
pretraining run (criterion 5) takes roughly 25 minutes on one core; skip it
with ``-m "not slow"``.
"""

import csv
import io
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from swishbert import layers as L
from swishbert.bench import run_bench
from swishbert.checkpoint import load_checkpoint, save_checkpoint
from swishbert.cli import main
from swishbert.data import CLS, NUM_SPECIALS, PAD, SEP, Batch
from swishbert.gradcheck import TOLERANCE, run_suite
from swishbert.model import EncoderModel, ModelConfig, block_matrix_params, encoder_forward
from swishbert.numerics import Tensor
from swishbert.training import AdamState, TrainHyper, mask_tokens, train_loop

ROOT = Path(__file__).resolve().parents[1]
CORPUS = ROOT / "data" / "corpus.txt"
VARIANTS_CSV = ROOT / "results" / "variants.csv"


def read_losses(path):
    return [(int(r["step"]), r["loss"], r["lr"]) for r in csv.DictReader(io.StringIO(Path(path).read_text()))]


def test_1_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    results = list(run_suite(seed=0))
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_err)
    blocks = {r.block.split("(")[0] for r in results}
    ok = (
        worst.max_rel_err <= TOLERANCE
        and elapsed < 60
        and {"swish", "attention", "ffn", "add_norm", "embedding", "model"} <= blocks
    )
    criterion(1, "gradient fidelity", ok,
              f"{len(results)} groups, worst {worst.block}/{worst.group} {worst.max_rel_err:.2e} "
              f"(limit {TOLERANCE:g}), {elapsed:.1f}s")


def test_2_strided_scan_oracle(criterion):
    rng = np.random.default_rng(2024)
    cases = mismatches = 0
    for rep in range(2):
        dtype = (np.float32, np.float64)[rep]
        for l in range(1, 65):
            for k in (1, 2, 4):
                ch = int(rng.integers(1, 9))
                x1 = (rng.standard_normal((l, ch)) * rng.uniform(0.5, 4)).astype(dtype)
                a = Tensor(rng.uniform(0.2, 2.0, ch).astype(dtype))
                b = Tensor(rng.standard_normal(ch).astype(dtype))
                got = L.swishrnn_scan(Tensor(x1), a, b, k).data
                want = np.empty_like(x1)
                for r in range(k):
                    want[r::k] = L.swishrnn_scan(Tensor(x1[r::k]), a, b, 1).data
                cases += 1
                mismatches += not np.array_equal(got, want)
    criterion(2, "strided-scan oracle", cases >= 100 and mismatches == 0,
              f"{cases} random inputs over l=1..64 x k={{1,2,4}} in f32/f64, {mismatches} inexact")


def test_3_parameter_parity(criterion):
    def blocks(variant, d, inner):
        kw = dict(d_prime=inner) if variant == "swish" else dict(d_ffn=inner)
        return block_matrix_params(ModelConfig(variant=variant, d=d, heads=d // 64, head_dim=64, **kw))

    base_s, base_f = blocks("swish", 768, 2048), blocks("rab", 768, 3072)
    large_s, large_f = blocks("swish", 1024, 2752), blocks("rab", 1024, 4096)
    gap = abs(large_s - large_f) / large_f
    ok = base_s == base_f == 4_718_592 and gap < 0.01
    criterion(3, "parameter parity", ok,
              f"base {base_s:,} vs {base_f:,}; large {large_s:,} vs {large_f:,} ({gap:.2%} apart)")


def test_4_pooling_asymptotics(criterion):
    rng = np.random.default_rng(4)
    n = 256
    f32 = np.float32
    alpha, beta = Tensor(np.ones(n, f32)), Tensor(np.zeros(n, f32))
    x0 = rng.standard_normal((1, n)).astype(f32)
    c0 = L.swishrnn_scan(Tensor(x0), alpha, beta, 1).data
    worst = 0.0
    for offset, expect in ((30.0, "c"), (-30.0, "x")):
        # x1[1] chosen so that c[0] - x1[1] is the offset (up to f32 rounding)
        x1 = (c0 - f32(offset)).astype(f32)
        c = L.swishrnn_scan(Tensor(np.vstack([x0, x1])), alpha, beta, 1).data
        target = c0[0] if expect == "c" else x1[0]
        worst = max(worst, float(np.max(np.abs(c[1] - target))))
    criterion(4, "pooling asymptotics (f32)", worst <= 1e-5,
              f"c-x=+30 keeps the state, c-x=-30 takes the input; max deviation {worst:.2e} over {n} channels")


@pytest.mark.slow
def test_5_desk_mlm_run(criterion, tmp_path):
    out = tmp_path / "desk"
    t0 = time.perf_counter()
    code = main(["pretrain", "--corpus", str(CORPUS), "--out", str(out), "--variant", "swish",
                 "--steps", "2000", "--warmup", "200", "--lr", "3e-4", "--batch-size", "32", "--seed", "0",
                 "--log-every", "250"])
    minutes = (time.perf_counter() - t0) / 60
    rows = read_losses(out / "metrics.csv") if code == 0 else []
    initial = float(rows[0][1]) if rows else math.nan
    final = statistics.fmean(float(r[1]) for r in rows[-20:]) if rows else math.nan
    ln_v = math.log(8192)
    ok = (
        code == 0 and len(rows) == 2000
        and abs(initial - ln_v) <= 0.1 * ln_v
        and final <= 0.7 * initial
        and minutes <= 35
    )
    detail = (f"initial {initial:.3f} (ln 8192 = {ln_v:.3f}), final {final:.3f} "
              f"(mean of last 20 steps, limit {0.7 * initial:.3f}), {minutes:.1f} min")
    if VARIANTS_CSV.exists():
        tail = {}
        for r in csv.DictReader(io.StringIO(VARIANTS_CSV.read_text())):
            tail.setdefault(r["variant"], []).append(float(r["loss"]))
        detail += "; reference curves (last-20 mean): " + ", ".join(
            f"{v} {statistics.fmean(ls[-20:]):.3f}" for v, ls in sorted(tail.items()))
    criterion(5, "desk-scale MLM run", ok, detail)


def test_6_throughput_ordering(criterion):
    report = run_bench(seq_len=512, d=768, d_prime=2048, d_ffn=3072, reps=30, warmup=5, include_blocks=False)
    t = report.scan_times()
    ok = report.scan_ordering_holds()
    criterion(6, "scan throughput ordering", ok,
              f"l=512 d'=2048 scan ms/layer: k1 {t['1']:.2f}, k2 {t['2']:.2f}, k4 {t['4']:.2f}, "
              f"schedule {t['1-2-4']:.2f}")


def test_7_pretrain_determinism(criterion, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["pretrain", "--corpus", str(CORPUS), "--out", str(out), "--steps", "12", "--warmup", "4",
                "--seed", "7", "--log-every", "100"]
        if runs:
            args += ["--vocab", str(tmp_path / "a" / "vocab.txt")]
        assert main(args) == 0
        runs.append(read_losses(out / "metrics.csv"))
    vocab_same = (tmp_path / "a" / "vocab.txt").read_bytes() == (tmp_path / "b" / "vocab.txt").read_bytes()
    ok = runs[0] == runs[1] and len(runs[0]) == 12
    criterion(7, "pretrain determinism", ok,
              f"two 12-step desk runs, seed 7: step/loss/lr columns identical={runs[0] == runs[1]}, "
              f"final loss {runs[0][-1][1]}")
    assert vocab_same


def test_8_checkpoint_round_trip(criterion, tmp_path):
    cfg = ModelConfig(num_layers=2, vocab_size=300, max_seq_len=32)
    model = EncoderModel(cfg, seed=5)
    r = np.random.default_rng(8)
    ids = r.integers(NUM_SPECIALS, 300, (4, 32))
    ids[:, 0], ids[:, -1] = CLS, SEP
    state = AdamState()
    list(train_loop(model, [Batch(ids, ids == PAD)] * 2, TrainHyper(warmup_steps=1, total_steps=2, batch_size=4), state))
    path = save_checkpoint(model, state, tmp_path / "m.swrn")
    loaded, st2 = load_checkpoint(path)
    same_fwd = np.array_equal(encoder_forward(model, ids).data, encoder_forward(loaded, ids).data)
    same_state = st2.step == state.step and all(np.array_equal(state.m[k], st2.m[k]) for k in state.m)

    corpus = tmp_path / "c.txt"
    corpus.write_text("some held out text\n\nand another document")
    (tmp_path / "vocab.txt").write_text("")
    raw = path.read_bytes()
    codes = []
    for bad in (raw[: len(raw) // 2], raw[:-1], b"XXXX" + raw[4:]):
        path.write_bytes(bad)
        codes.append(main(["eval", "--checkpoint", str(path), "--corpus", str(corpus)]))
    ok = same_fwd and same_state and codes == [3, 3, 3]
    criterion(8, "checkpoint round-trip", ok,
              f"forward bitwise equal={same_fwd}, optimizer state equal={same_state}, "
              f"exit codes for truncated/cut/corrupt = {codes}")


def test_9_masking_contract(criterion):
    rng = np.random.default_rng(9)
    rows_checked = bad_counts = bad_specials = 0
    for _ in range(1000):
        B, l = int(rng.integers(1, 9)), int(rng.integers(3, 129))
        ids = rng.integers(NUM_SPECIALS, 8192, (B, l))
        ids[:, 0] = CLS
        for b in range(B):
            n = int(rng.integers(1, l - 1))
            ids[b, n + 1] = SEP
            ids[b, n + 2:] = PAD
            if n > 3:
                extra = rng.integers(2, n, size=int(rng.integers(0, 3)))
                ids[b, extra] = SEP  # internal document boundaries
        batch = Batch(ids, ids == PAD)
        out = mask_tokens(batch, 0.15, rng)
        out.check()
        maskable = ((ids >= NUM_SPECIALS) & (ids != PAD)).sum(axis=1)
        counts = np.bincount(out.masked_positions[:, 0], minlength=B)
        expect = np.maximum(1, np.floor(0.15 * maskable + 1e-9).astype(int))
        bad_counts += int(np.sum(counts != expect))
        r, c = out.masked_positions.T
        bad_specials += int(np.sum(ids[r, c] < NUM_SPECIALS))
        rows_checked += B
    ok = bad_counts == 0 and bad_specials == 0
    criterion(9, "masking contract", ok,
              f"1000 batches, {rows_checked} rows: {bad_counts} wrong counts, {bad_specials} masked specials/pads")
