"""Time the FFN block against the SwishRNN block at base-model width.

Fewer sequential steps make larger strides cheaper; the cyclic 1-2-4
schedule lands in between. Absolute numbers depend on the machine, only
the ordering is expected to carry over.
"""

from pathlib import Path

from swishbert.bench import run_bench

report = run_bench(seq_len=512, d=768, d_prime=2048, d_ffn=3072, reps=30, warmup=5, backward=True)
print(report.table())
print("\nscan ordering holds:", report.scan_ordering_holds(), "(fwd),", report.scan_ordering_holds("fwd+bwd"), "(fwd+bwd)")
out = Path(__file__).resolve().parents[1] / "results" / "bench.csv"
out.parent.mkdir(exist_ok=True)
out.write_text(report.to_csv())
print(f"wrote {out}")
