import json

import pytest
import torch

from qava import cli, toyvlm
from qava.numcore import load_qtns


@pytest.fixture
def run_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("QAVA_RUN_DIR", str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture
def tiny(run_dir, tmp_path):
    """A 3x4 corpus and an untrained checkpoint, written to disk."""
    assert cli.main(["dataset", "--images", "3", "--questions", "4", "--out", "corpus"]) == 0
    toyvlm.save_checkpoint(toyvlm.new_model(seed=3), tmp_path / "ckpt", name="rand")
    return {"corpus": str(run_dir / "corpus"), "ckpt": str(tmp_path / "ckpt")}


def attack(tiny, *extra):
    base = ["attack", "--checkpoint", tiny["ckpt"], "--corpus", tiny["corpus"],
            "--steps", "2", "--repeats", "1", "--n-questions", "2"]
    return cli.main(base + list(extra))


def test_dataset_default_size_and_bytes(run_dir):
    assert cli.main(["dataset", "--out", "a"]) == 0
    root = run_dir / "a"
    assert len((root / "questions.jsonl").read_text().splitlines()) == 32 * 50
    first = {f: f.read_bytes() for f in sorted(root.rglob("*")) if f.is_file()}
    assert cli.main(["dataset", "--out", "a"]) == 0
    assert {f: f.read_bytes() for f in sorted(root.rglob("*")) if f.is_file()} == first


@pytest.mark.parametrize(
    "argv",
    [
        ["dataset", "--questions", "0"],
        ["attack", "--checkpoint", "x", "--corpus", "y", "--strategy", "telepathy"],
        ["attack", "--corpus", "y"],
        ["frobnicate"],
        ["dataset", "--images", "many"],
    ],
)
def test_usage_errors_exit_1(run_dir, argv):
    assert cli.main(argv) == 1


def test_unknown_config_key_exits_1(run_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"images": 2, "colour": "red"}))
    assert cli.main(["dataset", "--config", str(cfg)]) == 1


def test_config_file_and_flag_precedence(run_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"images": 2, "questions": 3}))
    assert cli.main(["dataset", "--config", str(cfg), "--questions", "2", "--out", "d"]) == 0
    assert len((run_dir / "d" / "questions.jsonl").read_text().splitlines()) == 4


def test_missing_checkpoint_exits_2(tiny):
    assert cli.main(["eval", "--checkpoint", "/nonexistent", "--corpus", tiny["corpus"]]) == 2


def test_eps_zero_gives_clean_images(tiny, run_dir):
    assert attack(tiny, "--eps", "0", "--out", "zero") == 0
    out = run_dir / "zero"
    for f in sorted((out / "rep-0" / "adv").iterdir()):
        clean = load_qtns(out / "clean" / f.name)
        assert torch.equal(load_qtns(f), clean.to(torch.float64))


def test_attack_outputs_and_determinism(tiny, run_dir):
    assert attack(tiny, "--out", "one") == 0
    one = run_dir / "one"
    first = {f.name: f.read_bytes() for f in sorted((one / "rep-0" / "adv").iterdir())}
    assert attack(tiny, "--out", "one") == 0
    manifest = json.loads((one / "manifest.json").read_text())
    assert manifest["command"] == "attack" and len(manifest["images"]) == 3
    assert {f.name: f.read_bytes() for f in sorted((one / "rep-0" / "adv").iterdir())} == first
    side = json.loads(next((one / "rep-0" / "sidecars").iterdir()).read_text())
    assert "wall_time" not in json.dumps(side)
    assert (one / "timing.log").exists()


def test_eval_missing_adversarial_exits_2(tiny, run_dir):
    assert attack(tiny, "--out", "broken") == 0
    victim = next((run_dir / "broken" / "rep-0" / "adv").iterdir())
    victim.unlink()
    rc = cli.main(["eval", "--checkpoint", tiny["ckpt"], "--corpus", tiny["corpus"],
                   "--adv", str(run_dir / "broken"), "--out", "ev"])
    assert rc == 2


def test_eval_and_report(tiny, run_dir):
    assert cli.main(["attack", "--checkpoint", tiny["ckpt"], "--corpus", tiny["corpus"],
                     "--steps", "2", "--repeats", "2", "--n-questions", "2", "--out", "atk"]) == 0
    assert cli.main(["eval", "--checkpoint", tiny["ckpt"], "--corpus", tiny["corpus"],
                     "--adv", "atk", "--noise", "--out", "ev"]) == 0
    ev = json.loads((run_dir / "ev" / "eval.json").read_text())
    assert {"clean", "adversarial", "noise"} <= set(ev)
    assert "(±" in (run_dir / "ev" / "table.md").read_text()
    assert cli.main(["report", "ev"]) == 0
    assert (run_dir / "ev" / "report.md").exists()


def test_report_on_empty_dir_exits_2(run_dir):
    (run_dir / "empty").mkdir(parents=True)
    assert cli.main(["report", "empty"]) == 2


def test_transfer_grid_files(tiny, run_dir, tmp_path):
    toyvlm.save_checkpoint(toyvlm.new_model(seed=4), tmp_path / "ckpt2", name="rand2")
    assert attack(tiny, "--out", "s1") == 0
    assert cli.main(["attack", "--checkpoint", str(tmp_path / "ckpt2"), "--corpus", tiny["corpus"],
                     "--steps", "2", "--repeats", "1", "--n-questions", "2", "--out", "s2"]) == 0
    assert cli.main(["transfer", "--checkpoints", tiny["ckpt"], str(tmp_path / "ckpt2"),
                     "--adv", "s1", "s2", "--corpus", tiny["corpus"], "--out", "tr"]) == 0
    grid = json.loads((run_dir / "tr" / "grid.json").read_text())
    assert len(grid["overall"]) == 2 and all(len(r) == 2 for r in grid["overall"])
    assert (run_dir / "tr" / "grid.csv").exists()


def test_train_below_threshold_exits_nonzero(tiny):
    rc = cli.main(["train", "--corpus", tiny["corpus"], "--epochs", "1", "--min-epochs", "1",
                   "--batch-size", "4", "--target", "100.1", "--out", "bad"])
    assert rc != 0


def test_train_rerun_is_identical(tiny, run_dir):
    args = ["train", "--corpus", tiny["corpus"], "--epochs", "1", "--min-epochs", "1",
            "--batch-size", "4", "--target", "0", "--seed", "9"]
    assert cli.main(args + ["--out", "t1"]) == 0
    first = {f.name: f.read_bytes() for f in sorted((run_dir / "t1").iterdir())}
    assert cli.main(args + ["--out", "t1"]) == 0
    assert {f.name: f.read_bytes() for f in sorted((run_dir / "t1").iterdir())} == first
