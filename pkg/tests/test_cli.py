import json

import pytest

from conftest import tiny_config
from deco.cli import main
from deco.metrics import read_csv


@pytest.fixture
def run_dir(tmp_path, small_corpus):
    corpus = tmp_path / "corpus.txt"
    corpus.write_bytes(small_corpus)
    cfg = tiny_config().to_dict()
    cfg["paths"] = {"corpus": str(corpus), "output_dir": str(tmp_path / "out")}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    return tmp_path


def test_train_writes_checkpoint_and_csv(run_dir, capsys):
    assert main(["train", str(run_dir / "run.json"), "--eval-windows", "20"]) == 0
    out = run_dir / "out"
    assert (out / "checkpoint.deco").is_file()
    assert len(read_csv(out / "metrics.csv")) == 8
    assert "held-out ppl" in capsys.readouterr().out


def test_train_twice_identical_csv(run_dir):
    main(["train", str(run_dir / "run.json"), "--out", str(run_dir / "a"), "--eval-windows", "2"])
    main(["train", str(run_dir / "run.json"), "--out", str(run_dir / "b"), "--eval-windows", "2"])
    assert (run_dir / "a/metrics.csv").read_bytes() == (run_dir / "b/metrics.csv").read_bytes()


def test_missing_corpus_names_path(run_dir, capsys):
    code = main(["train", str(run_dir / "run.json"), "--corpus", str(run_dir / "absent.txt")])
    assert code != 0
    assert "absent.txt" in capsys.readouterr().err


def test_unknown_config_key(run_dir, capsys):
    cfg = json.loads((run_dir / "run.json").read_text())
    cfg["train"]["n_stpes"] = 3
    (run_dir / "bad.json").write_text(json.dumps(cfg))
    assert main(["train", str(run_dir / "bad.json")]) == 2
    assert "n_stpes" in capsys.readouterr().err


def test_eval_round_trip(run_dir, capsys):
    main(["train", str(run_dir / "run.json"), "--eval-windows", "20"])
    trained = capsys.readouterr().out.split("held-out ppl ")[1].split()[0]
    assert main(["eval", str(run_dir / "out/checkpoint.deco"), "--eval-windows", "20"]) == 0
    assert capsys.readouterr().out.strip() == f"ppl {trained}"


def test_eval_corrupt_magic(run_dir, capsys):
    bad = run_dir / "bad.deco"
    bad.write_bytes(b"XXXX" + b"\0" * 64)
    assert main(["eval", str(bad)]) == 2
    assert "magic" in capsys.readouterr().err


def test_eval_fresh_model_near_uniform(run_dir, capsys):
    from deco.checkpoint import save_checkpoint
    from deco.config import load_run_config
    from deco.lm import build_model
    cfg = load_run_config(run_dir / "run.json")
    save_checkpoint(run_dir / "fresh.deco", build_model(cfg.model, cfg.moe), cfg)
    assert main(["eval", str(run_dir / "fresh.deco"), "--eval-windows", "50"]) == 0
    ppl = float(capsys.readouterr().out.split()[1])
    assert abs(ppl - 256) / 256 < 0.1


def test_bench_dense_only(capsys):
    size = "d_h=32,n_experts=8,d_e=8,d_s=16,n_layers=2,n_heads=2,context_length=16"
    assert main(["bench", "--size", size, "--modes", "dense", "--tokens", "16", "--seq-len", "16",
                 "--repeats", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    head = lines[0].split(",")
    row = dict(zip(head, lines[1].split(",")))
    assert lines[2].startswith("# threads=")
    assert float(row["speedup"]) == 1.0 and int(row["routed_flops"]) > 0


def test_bench_unknown_mode(capsys):
    assert main(["bench", "--modes", "warp"]) == 2


def test_ablate_unknown_suite(capsys):
    assert main(["ablate", "nope"]) == 2
    assert "scaling, activation, gating" in capsys.readouterr().err


def test_ablate_activation_emits_four_csvs(run_dir, capsys):
    out = run_dir / "abl"
    assert main(["ablate", "activation", "--config", str(run_dir / "run.json"), "--seeds", "1",
                 "--out", str(out)]) == 0
    assert len(list(out.glob("*.csv"))) == 4
    text = capsys.readouterr().out
    assert text.count("PASS ") + text.count("FAIL ") == 5


def test_gradcheck_passes_and_lists_groups(capsys):
    assert main(["gradcheck"]) == 0
    text = capsys.readouterr().out
    assert "W_up" in text and "alpha" in text and "overall: PASS" in text


def test_gradcheck_corrupt_hook_fails(capsys):
    assert main(["gradcheck", "--corrupt", "W_up"]) == 1
    assert "[FAIL]" in capsys.readouterr().out
