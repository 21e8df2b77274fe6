import csv
import json
import shutil

import numpy as np
import pytest

from molrepo.cli import (EXIT_INFEASIBLE, EXIT_NONFINITE, EXIT_USAGE, EXIT_VOCAB, main,
                         sweep_cells, UsageError)
from molrepo.policy import Dims, default_vocab, init_params, load_checkpoint, save_checkpoint

from conftest import DATA

SMOKE = str(DATA / "smoke12.jsonl")
FAST = ["--steps", "2", "--batch-size", "2", "--max-len", "24", "--G", "2"]


@pytest.fixture(scope="module")
def small_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "init.json"
    save_checkpoint(init_params(0, Dims(default_vocab().size, 8, 16), 0.3), path)
    return str(path)


def test_gen_deterministic_and_creates_dir(tmp_path):
    args = ["gen", "--n", "3", "--eval-n", "2", "--kinds", "add_hydroxyl,del_hydroxyl",
            "--seed", "7"]
    a, b = tmp_path / "a" / "nested", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    for name in ("train.jsonl", "eval.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(args + ["--out", str(b)]) == 0
    assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()


def test_gen_unseen_eval_templates(tmp_path):
    assert main(["gen", "--n", "4", "--eval-n", "3", "--kinds", "add_hydroxyl", "--seed", "1",
                 "--unseen-eval", "--out", str(tmp_path)]) == 0
    tr = {json.loads(l)["template_id"] for l in open(tmp_path / "train.jsonl")}
    ev = {json.loads(l)["template_id"] for l in open(tmp_path / "eval.jsonl")}
    assert not tr & ev


def test_gen_seed_env(tmp_path, monkeypatch):
    args = ["gen", "--n", "2", "--kinds", "add_amine"]
    monkeypatch.setenv("MOLOPT_SEED", "5")
    assert main(args + ["--out", str(tmp_path / "env")]) == 0
    monkeypatch.delenv("MOLOPT_SEED")
    assert main(args + ["--seed", "5", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "train.jsonl").read_bytes() == \
        (tmp_path / "flag" / "train.jsonl").read_bytes()


def test_gen_errors(tmp_path):
    assert main(["gen", "--kinds", "frobnicate", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["gen", "--n", "0", "--kinds", "add_hydroxyl", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["gen", "--no-such-flag"]) == EXIT_USAGE
    assert main(["gen", "--n", "1", "--kinds", "del_halogen_i", "--max-atoms", "5",
                 "--out", str(tmp_path)]) == EXIT_INFEASIBLE


def _log(path):
    return [json.loads(l) for l in open(path / "log.jsonl")]


def test_train_outputs_and_beta_zero_equivalence(tmp_path, small_ckpt):
    common = ["--train", SMOKE, "--eval", SMOKE, "--init", small_ckpt, "--seed", "3"] + FAST
    assert main(["train", "--variant", "grpo", "--out", str(tmp_path / "g")] + common) == 0
    assert main(["train", "--variant", "repo", "--beta", "0", "--out", str(tmp_path / "r")]
                + common) == 0
    for name in ("checkpoint.json", "log.jsonl", "eval.csv", "config.json"):
        assert (tmp_path / "g" / name).is_file()
    assert _log(tmp_path / "g") == _log(tmp_path / "r")
    assert np.array_equal(load_checkpoint(tmp_path / "g" / "checkpoint.json").flat,
                          load_checkpoint(tmp_path / "r" / "checkpoint.json").flat)
    rows = list(csv.DictReader(open(tmp_path / "g" / "eval.csv")))
    assert [int(r["step"]) for r in rows] == [0, 2]


def test_train_config_precedence(tmp_path, small_ckpt, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"beta": 2.5, "seed": 11, "gamma": 0.1}))
    monkeypatch.setenv("MOLOPT_SEED", "99")
    assert main(["train", "--variant", "repo", "--train", SMOKE, "--init", small_ckpt,
                 "--config", str(cfg), "--gamma", "0.2", "--out", str(tmp_path / "o")] + FAST) == 0
    got = json.loads((tmp_path / "o" / "config.json").read_text())
    assert (got["beta"], got["seed"], got["gamma"], got["steps"]) == (2.5, 11, 0.2, 2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_keeps_checkpoint(tmp_path, small_ckpt):
    code = main(["train", "--variant", "sft", "--train", SMOKE, "--init", small_ckpt,
                 "--out", str(tmp_path), "--lr", "1e308", "--steps", "5"])
    assert code == EXIT_NONFINITE
    params = load_checkpoint(tmp_path / "checkpoint.json")
    assert np.all(np.isfinite(params.flat))


def test_train_usage_errors(tmp_path, small_ckpt):
    assert main(["train", "--variant", "repo", "--train", str(tmp_path / "missing.jsonl"),
                 "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--variant", "repo", "--train", SMOKE, "--init", small_ckpt,
                 "--G", "1", "--out", str(tmp_path)]) == EXIT_USAGE


def test_eval_outputs_and_vocab_mismatch(tmp_path, small_ckpt):
    out = tmp_path / "ev"
    args = ["eval", "--checkpoint", small_ckpt, "--data", SMOKE, "--k", "4", "--per-kind",
            "--max-len", "24", "--seed", "2"]
    assert main(args + ["--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["product"] == pytest.approx(summary["SR"] * summary["Sim"], abs=1e-12)
    bok = list(csv.DictReader(open(out / "best_of_k.csv")))
    assert [int(r["k"]) for r in bok] == [1, 2, 4]
    assert float(bok[0]["sr"]) == summary["SR"]
    srs = [float(r["sr"]) for r in bok]
    assert srs == sorted(srs)
    per = list(csv.DictReader(open(out / "per_kind.csv")))
    assert len(per) == 12
    weighted = sum(float(r["sr"]) * int(r["n"]) for r in per) / sum(int(r["n"]) for r in per)
    assert weighted == pytest.approx(summary["SR"])
    assert main(args + ["--out", str(tmp_path / "ev2")]) == 0
    assert (out / "results.csv").read_bytes() == (tmp_path / "ev2" / "results.csv").read_bytes()

    bad = tmp_path / "bad.json"
    obj = json.loads(open(small_ckpt).read())
    obj["vocab_hash"] = "f" * 64
    bad.write_text(json.dumps(obj))
    assert main(["eval", "--checkpoint", str(bad), "--data", SMOKE, "--out", str(out)]) == EXIT_VOCAB
    assert main(["eval", "--checkpoint", small_ckpt, "--data", SMOKE, "--k", "0",
                 "--out", str(out)]) == EXIT_USAGE


def test_sweep_cells():
    assert sweep_cells({"grid": {"beta": [0, 1, 10]}}) == [{"beta": 0}, {"beta": 1}, {"beta": 10}]
    assert len(sweep_cells({"grid": {"beta": [0, 1], "gamma": [0, 0.1]}, "mode": "product"})) == 4
    for bad in ({}, {"grid": {}}, {"grid": {"beta": []}}, {"grid": {"colour": [1]}},
                {"grid": {"beta": [1]}, "mode": "zigzag"}):
        with pytest.raises(UsageError):
            sweep_cells(bad)


def test_sweep_empty_grid_is_usage_error(tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"grid": {}, "train": SMOKE}))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_sweep_beta_grid_and_failing_cell(tmp_path, small_ckpt):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({
        "train": SMOKE, "eval": SMOKE, "init": small_ckpt,
        "base": {"steps": 2, "batch_size": 2, "max_len": 24, "G": 2, "seed": 1},
        "grid": {"beta": [0, 1, 10], "mask_mode": ["bogus"]}}))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "results.csv")))
    status = {r["cell"]: r["status"] for r in rows}
    assert [status[c] for c in "012"] == ["ok"] * 3
    assert status["3"].startswith("failed")
    # beta = 0 cell matches a plain GRPO run with the same settings
    assert main(["train", "--variant", "grpo", "--train", SMOKE, "--eval", SMOKE,
                 "--init", small_ckpt, "--seed", "1", "--out", str(tmp_path / "g")] + FAST) == 0
    assert _log(tmp_path / "g") == _log(tmp_path / "o" / "cell_000")
