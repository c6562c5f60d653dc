"""Command-line entry points: pretrain, gradcheck, bench, eval.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, InputError, TrainingDivergedError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("swishbert")


class UsageError(Exception):
    pass


def _precision(name: str):
    return {"f32": np.float32, "f64": np.float64}[name]


def _load_config(path: Optional[str], variant: Optional[str]):
    from .model import ModelConfig

    cfg = ModelConfig.load(path) if path else ModelConfig()
    if variant and variant != cfg.variant:
        doc = {**cfg.__dict__, "variant": variant}
        cfg = ModelConfig.from_dict(doc)
    return cfg


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(1)


# ----------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import Corpus, Vocab, batch_stream, build_vocab
    from .model import EncoderModel
    from .training import AdamState, MetricsWriter, TrainHyper, train_loop

    cfg = _load_config(args.config, args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = Path(args.corpus).read_text(encoding="utf-8")
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        log.info("building a %d-token vocabulary from %s", cfg.vocab_size, args.corpus)
        vocab = build_vocab(text, cfg.vocab_size)
    if len(vocab) > cfg.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} tokens, config allows {cfg.vocab_size}")
    vocab.save(out / "vocab.txt")
    cfg.save(out / "config.json")
    corpus = Corpus.from_text(text, vocab)
    if corpus.num_tokens == 0:
        raise InputError(f"corpus {args.corpus} holds no tokens")

    hyper = TrainHyper(
        lr_peak=args.lr, warmup_steps=min(args.warmup, args.steps), total_steps=args.steps,
        batch_size=args.batch_size, seed=args.seed, checkpoint_every=args.checkpoint_every,
    )
    model = EncoderModel(cfg, seed=args.seed, dtype=_precision(args.precision))
    log.info("%r", model)
    metrics_path = out / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    writer = MetricsWriter(metrics_path)
    data = batch_stream(corpus, cfg.max_seq_len, hyper.batch_size, args.seed)
    state = AdamState()
    for rec in train_loop(model, data, hyper, state, out_dir=out):
        writer.write(rec)
        if rec.step == 1 or rec.step % args.log_every == 0 or rec.step == hyper.total_steps:
            log.info("step %d  loss %.4f  lr %.3g  %.0f ms", rec.step, rec.loss, rec.lr, rec.wall_ms)
    save_checkpoint(model, state, out / "final.swrn")
    print(f"wrote {metrics_path} and {out / 'final.swrn'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_suite, tiny_config
    from .model import ModelConfig

    cfg = ModelConfig.load(args.config) if args.config else tiny_config()
    if cfg.d > 16:
        raise ConfigError("gradient checks are meant for d <= 16")
    results = list(run_suite(args.seed, cfg))
    print(format_report(results))
    if args.out:
        lines = ["block,group,size,max_rel_err,ok"]
        lines += [f"{r.block},{r.group},{r.size},{r.max_rel_err!r},{int(r.ok)}" for r in results]
        Path(args.out).write_text("\n".join(lines) + "\n")
    worst = max(results, key=lambda r: r.max_rel_err)
    print(f"worst: {worst.block} {worst.group} {worst.max_rel_err:.3e}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


def cmd_bench(args) -> int:
    from .bench import run_bench

    try:
        steps = [int(s) for s in args.step_list.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--step-list must be comma-separated integers, got {args.step_list!r}") from None
    for k in (1, 2, 4):
        if k not in steps:
            steps.append(k)
    report = run_bench(
        seq_len=args.seq_len, d=args.d, d_prime=args.d_prime, d_ffn=args.d_ffn, steps=sorted(set(steps)),
        reps=args.reps, warmup=args.warmup, backward=args.backward, seed=args.seed,
    )
    print(report.table())
    csv_text = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
    ok = report.scan_ordering_holds()
    print(f"scan ordering t(4) <= t(2) <= t(1), schedule in between: {'yes' if ok else 'NO'}")
    return EXIT_VERIFY if args.check and not ok else EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import Corpus, Vocab, batch_iterator
    from .training import batch_loss, mask_tokens

    ckpt = Path(args.checkpoint)
    model, _ = load_checkpoint(ckpt)
    vocab_path = Path(args.vocab) if args.vocab else ckpt.with_name("vocab.txt")
    vocab = Vocab.load(vocab_path)
    corpus = Corpus.from_file(args.corpus, vocab)
    if len(vocab) > model.config.vocab_size:
        raise ConfigError("vocabulary is larger than the checkpoint's embedding table")
    rng = np.random.default_rng([args.seed, 3])
    total, count = 0.0, 0
    for i, batch in enumerate(batch_iterator(corpus, model.config.max_seq_len, args.batch_size, args.seed)):
        if args.max_batches and i >= args.max_batches:
            break
        masked = mask_tokens(batch, 0.15, rng)
        if len(masked.masked_positions) == 0:
            continue
        n = len(masked.masked_positions)
        total += float(batch_loss(model, masked).data) * n
        count += n
    if count == 0:
        raise InputError("evaluation corpus produced no masked tokens")
    loss = total / count
    print("loss,perplexity,masked_tokens")
    print(f"{loss!r},{math.exp(loss)!r},{count}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swishbert", description=__doc__, allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="ModelConfig JSON (defaults to the desk-scale config)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("pretrain", help="MLM pretraining on a text corpus", allow_abbrev=False)
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=["orig", "rab", "swish"])
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--precision", choices=["f32", "f64"], default="f32")
    sp.add_argument("--vocab", help="existing vocab file; built from the corpus if omitted")
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--warmup", type=int, default=200)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--log-every", type=int, default=50)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification", allow_abbrev=False)
    common(sp)
    sp.add_argument("--out", help="also write the results as CSV")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", help="per-layer FFN vs SwishRNN timing", allow_abbrev=False)
    common(sp, config=False)
    sp.add_argument("--seq-len", type=int, default=512)
    sp.add_argument("--d", type=int, default=768)
    sp.add_argument("--d-prime", type=int, default=2048)
    sp.add_argument("--d-ffn", type=int, default=3072)
    sp.add_argument("--step-list", default="1,2,4")
    sp.add_argument("--reps", type=int, default=30)
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--backward", action="store_true", help="also time forward+backward")
    sp.add_argument("--check", action="store_true", help="exit 1 if the scan ordering does not hold")
    sp.add_argument("--out", help="CSV report path")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("eval", help="held-out MLM loss of a checkpoint", allow_abbrev=False)
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", help="vocab file (default: vocab.txt beside the checkpoint)")
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--max-batches", type=int, default=0)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr,
    )
    try:
        with _single_thread():
            return args.func(args)
    except (UsageError, ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as exc:
        print(f"error: {exc}; diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
