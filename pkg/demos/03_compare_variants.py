"""Pretrain the three encoders on the bundled corpus and write their loss curves.

    python demos/03_compare_variants.py [--steps 2000] [--out results/variants.csv]

Each variant uses the desk configuration, the same vocabulary, seed and
batch order; only the architecture changes. About 25 minutes per variant
on one core.
"""

import argparse
import csv
import statistics
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from swishbert.data import Corpus, batch_stream, build_vocab
from swishbert.model import EncoderModel, ModelConfig
from swishbert.training import TrainHyper, train_loop

ROOT = Path(__file__).resolve().parents[1]

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--variants", default="orig,rab,swish")
ap.add_argument("--out", default=str(ROOT / "results" / "variants.csv"))
args = ap.parse_args()

text = (ROOT / "data" / "corpus.txt").read_text(encoding="utf-8")
vocab = build_vocab(text, 8192)
corpus = Corpus.from_text(text, vocab)
print(f"corpus: {len(corpus)} documents, {corpus.num_tokens:,} tokens, vocab {len(vocab)}")

out = Path(args.out)
out.parent.mkdir(parents=True, exist_ok=True)
with out.open("w", newline="") as fh, threadpool_limits(1):
    w = csv.writer(fh)
    w.writerow(["variant", "step", "loss", "lr"])
    for variant in args.variants.split(","):
        cfg = ModelConfig(variant=variant)
        model = EncoderModel(cfg, seed=0)
        hyper = TrainHyper(total_steps=args.steps, warmup_steps=min(200, args.steps))
        t0 = time.perf_counter()
        losses = []
        for rec in train_loop(model, batch_stream(corpus, cfg.max_seq_len, hyper.batch_size, 0), hyper):
            w.writerow([variant, rec.step, repr(rec.loss), repr(rec.lr)])
            losses.append(rec.loss)
        fh.flush()
        print(f"{variant:>5}: {model.num_parameters():,} params, loss {losses[0]:.3f} -> "
              f"{statistics.fmean(losses[-20:]):.3f} (last 20 mean), {(time.perf_counter() - t0) / 60:.1f} min")
print(f"wrote {out}")
