import csv
import io
import subprocess
import sys

import pytest

from swishbert.cli import main
from swishbert.model import ModelConfig

TEXT = "\n\n".join(
    f"Document {i} talks about foxes, dogs and {'boxes ' * (i % 4)}jugs of liquor." for i in range(60)
)


@pytest.fixture
def setup(tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text(TEXT)
    cfg = ModelConfig(variant="swish", num_layers=2, d=16, d_ffn=24, d_prime=16, heads=2, head_dim=8,
                      vocab_size=120, max_seq_len=24, num_buckets=8, max_distance=16)
    cfg_path = tmp_path / "cfg.json"
    cfg.save(cfg_path)
    return tmp_path, corpus, cfg_path


def pretrain(tmp, corpus, cfg, name, *extra):
    out = tmp / name
    code = main(["pretrain", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out),
                 "--steps", "5", "--warmup", "2", "--batch-size", "4", "--seed", "1", *extra])
    return code, out


def without_timing(path):
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    return [(r["step"], r["loss"], r["lr"]) for r in rows]


class TestPretrainEval:
    def test_outputs_and_determinism(self, setup, capsys):
        tmp, corpus, cfg = setup
        code, a = pretrain(tmp, corpus, cfg, "a")
        assert code == 0
        assert {p.name for p in a.iterdir()} >= {"metrics.csv", "vocab.txt", "config.json", "final.swrn"}
        assert a.joinpath("metrics.csv").read_text().startswith("step,loss,lr,wall_ms\n")
        _, b = pretrain(tmp, corpus, cfg, "b")
        assert without_timing(a / "metrics.csv") == without_timing(b / "metrics.csv")
        assert len(without_timing(a / "metrics.csv")) == 5

        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(a / "final.swrn"), "--corpus", str(corpus), "--seed", "2"]) == 0
        first = capsys.readouterr().out
        assert main(["eval", "--checkpoint", str(b / "final.swrn"), "--corpus", str(corpus), "--seed", "2"]) == 0
        second = capsys.readouterr().out
        assert first == second
        header, row = first.strip().splitlines()
        assert header == "loss,perplexity,masked_tokens"
        loss, ppl, n = row.split(",")
        assert float(loss) > 0 and int(n) > 0

    @pytest.mark.parametrize("variant", ["orig", "rab"])
    def test_variants(self, setup, variant):
        tmp, corpus, cfg = setup
        code, out = pretrain(tmp, corpus, cfg, variant, "--variant", variant)
        assert code == 0
        assert f'"variant": "{variant}"' in (out / "config.json").read_text()

    def test_rerun_truncates_metrics(self, setup):
        tmp, corpus, cfg = setup
        pretrain(tmp, corpus, cfg, "a")
        pretrain(tmp, corpus, cfg, "a")
        assert len(without_timing(tmp / "a" / "metrics.csv")) == 5

    def test_checkpoint_every(self, setup):
        tmp, corpus, cfg = setup
        _, out = pretrain(tmp, corpus, cfg, "c", "--checkpoint-every", "2")
        assert sorted(p.name for p in out.glob("step*.swrn")) == ["step000002.swrn", "step000004.swrn"]

    def test_truncated_checkpoint_exit_3(self, setup):
        tmp, corpus, cfg = setup
        _, out = pretrain(tmp, corpus, cfg, "a")
        ck = out / "final.swrn"
        ck.write_bytes(ck.read_bytes()[:-100])
        assert main(["eval", "--checkpoint", str(ck), "--corpus", str(corpus)]) == 3

    def test_corrupted_checkpoint_exit_3(self, setup):
        tmp, corpus, cfg = setup
        _, out = pretrain(tmp, corpus, cfg, "a")
        ck = out / "final.swrn"
        ck.write_bytes(b"JUNK" + ck.read_bytes()[4:])
        assert main(["eval", "--checkpoint", str(ck), "--corpus", str(corpus)]) == 3

    def test_missing_corpus_exit_3(self, setup):
        tmp, _, cfg = setup
        code, _ = pretrain(tmp, tmp / "missing.txt", cfg, "x")
        assert code == 3

    def test_bad_config_exit_2(self, setup):
        tmp, corpus, _ = setup
        bad = tmp / "bad.json"
        bad.write_text('{"d": 16, "heads": 3, "head_dim": 8}')
        code, _ = pretrain(tmp, corpus, bad, "x")
        assert code == 2


class TestUsage:
    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["gradcheck", "--bogus"],
        ["pretrain", "--corpus", "x"],
        ["pretrain", "--corpus", "x", "--out", "y", "--precision", "f16"],
        ["pretrain", "--corpus", "x", "--out", "y", "--step", "3"],
        ["bench", "--step-list", "1,x"],
    ])
    def test_exit_2(self, argv, capsys):
        assert main(argv) == 2

    def test_bench_rejects_too_few_reps(self):
        with pytest.raises(ValueError):
            main(["bench", "--seq-len", "8", "--d", "8", "--d-prime", "8", "--d-ffn", "8", "--reps", "3"])


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "worst:" in text and "FAIL" not in text
    lines = out.read_text().splitlines()
    assert lines[0] == "block,group,size,max_rel_err,ok" and all(l.endswith(",1") for l in lines[1:])


def test_gradcheck_rejects_large_config(tmp_path):
    p = tmp_path / "c.json"
    ModelConfig().save(p)
    assert main(["gradcheck", "--config", str(p)]) == 2


def test_bench_small(tmp_path, capsys):
    out = tmp_path / "b.csv"
    code = main(["bench", "--seq-len", "32", "--d", "16", "--d-prime", "16", "--d-ffn", "24",
                 "--reps", "30", "--warmup", "5", "--backward", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert {(r["mode"], r["step"], r["component"]) for r in rows} >= {
        ("fwd", "-", "block"), ("fwd", "1", "scan"), ("fwd", "2", "scan"), ("fwd", "4", "scan"),
        ("fwd", "1-2-4", "scan"), ("fwd+bwd", "1-2-4", "block"),
    }
    for r in rows:
        if r["block"] == "ffn":
            assert float(r["ratio_to_ffn"]) == 1.0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "swishbert", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert all(c in proc.stdout for c in ("pretrain", "gradcheck", "bench", "eval"))
