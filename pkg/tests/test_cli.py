import csv
import hashlib

import numpy as np
import pytest

from infocons.cli import MANIFEST, main
from infocons.shapes import load_dataset, load_xyz
from infocons.textio import read_kv


def _digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny dataset, classifier and explainer shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    d, m, e = root / "data", root / "model", root / "expl"
    assert main(["gen-data", "--classes", "sphere,cube,cone", "--per-class", "8", "--per-class-test", "6",
                 "--points", "64", "--out", str(d), "-q"]) == 0
    assert main(["train", "--data", str(d), "--out", str(m), "--epochs", "2", "-q"]) == 0
    assert main(["train-explainer", "--data", str(d), "--model", str(m / "model.ckpt"), "--out", str(e),
                 "--epochs", "2", "--clouds-per-epoch", "8", "-q"]) == 0
    return root


def test_gen_data_defaults_are_recorded(tmp_path, monkeypatch):
    monkeypatch.delenv("INFOCONS_SEED", raising=False)
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--per-class", "1", "--per-class-test", "1", "-q"]) == 0
    man = read_kv(tmp_path / "d" / MANIFEST)
    assert man["classes"] == "sphere,cube,cylinder,cone,pot_plant,chair_like"
    assert man["points"] == "256" and man["per_class_test"] == "1"


def test_gen_data_is_byte_reproducible(tmp_path):
    args = ["gen-data", "--classes", "torus,cone", "--per-class", "2", "--per-class-test", "1", "--points", "8", "-q"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    del a[MANIFEST], b[MANIFEST]  # records --out
    assert a == b
    assert load_dataset(tmp_path / "a").train_points.shape == (4, 8, 3)


def test_existing_output_needs_force(tmp_path):
    args = ["gen-data", "--points", "8", "--per-class", "1", "--per-class-test", "0", "--out", str(tmp_path), "-q"]
    (tmp_path / "junk").write_text("x")
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_seed_env_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("INFOCONS_SEED", "11")
    assert main(["gen-data", "--seed", "3", "--points", "8", "--per-class", "1", "--per-class-test", "0",
                 "--out", str(tmp_path), "-q"]) == 0
    assert read_kv(tmp_path / MANIFEST)["seed"] == "11"


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("points = 8\nper_class = 3\nper_class_test = 0\nclasses = sphere\n")
    assert main(["gen-data", "--config", str(cfg), "--per-class", "2", "--out", str(tmp_path / "d"), "-q"]) == 0
    man = read_kv(tmp_path / "d" / MANIFEST)
    assert (man["points"], man["per_class"]) == ("8", "2")


def test_config_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("colour = red\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_usage_errors_exit_two(tmp_path):
    assert main(["train"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--points", "many"]) == 2


def test_missing_checkpoint_is_a_data_error(run, tmp_path):
    assert main(["train-explainer", "--data", str(run / "data"), "--model", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "o")]) == 3
    assert main(["eval", "--data", str(run / "data"), "--model", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "o")]) == 3


def test_training_writes_checkpoint_and_curves(run):
    rows = list(csv.reader(open(run / "model" / "train_log.csv")))
    assert rows[0] == ["epoch", "loss", "train_acc", "test_acc"] and len(rows) == 3
    loss = list(csv.reader(open(run / "expl" / "loss.csv")))
    assert loss[0] == ["epoch", "loss", "ce", "info"] and len(loss) == 3
    man = read_kv(run / "expl" / MANIFEST)
    assert (man["dr"], man["tau"], man["k"], man["objective"]) == ("64", "0.7", "32", "infocons")


def test_beta_sweep_writes_one_explainer_per_value(run, tmp_path):
    assert main(["train-explainer", "--data", str(run / "data"), "--model", str(run / "model" / "model.ckpt"),
                 "--out", str(tmp_path), "--beta", "0.001,0.1", "--epochs", "1", "--clouds-per-epoch", "8",
                 "-q"]) == 0
    assert (tmp_path / "explainer_beta=0.001.ckpt").is_file() and (tmp_path / "loss_beta=0.1.csv").is_file()


def test_explain_writes_scores_and_svg(run, tmp_path):
    args = ["explain", "--model", str(run / "model" / "model.ckpt"), "--explainer", str(run / "expl" / "explainer.ckpt"),
            "--data", str(run / "data"), "--index", "2", "--method", "infocons-dyn", "--iters", "3",
            "--drop-per-iter", "5", "-q"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    pc = load_xyz(tmp_path / "a" / "test_00002_infocons-dyn.xyz")
    assert pc.points.shape == (64, 3) and np.all((pc.scores.scores >= 0) & (pc.scores.scores <= 1))
    svg = (tmp_path / "a" / "test_00002_infocons-dyn.svg").read_bytes()
    assert svg == (tmp_path / "b" / "test_00002_infocons-dyn.svg").read_bytes()
    assert svg.count(b'id="axes_') == 3


def test_explain_cp_writes_index_list(run, tmp_path):
    assert main(["explain", "--model", str(run / "model" / "model.ckpt"), "--data", str(run / "data"),
                 "--method", "cp", "--out", str(tmp_path), "-q"]) == 0
    idx = [int(v) for v in (tmp_path / "test_00000_cp_indices.txt").read_text().split()]
    assert idx == sorted(set(idx)) and 1 <= len(idx) <= 64
    assert not (tmp_path / "test_00000_cp.xyz").exists()


def test_explain_rejects_unknown_method(run, tmp_path, capsys):
    assert main(["explain", "--model", str(run / "model" / "model.ckpt"), "--data", str(run / "data"),
                 "--method", "gradcam", "--out", str(tmp_path)]) == 2
    assert "valid methods: infocons, infocons-dyn, cp, cp++, pcsam, lime3d, random" in capsys.readouterr().err


def test_explain_from_xyz_file(run, tmp_path):
    src = next((run / "data" / "test").glob("*.xyz"))
    assert main(["explain", "--model", str(run / "model" / "model.ckpt"), "--input", str(src),
                 "--method", "cp++", "--out", str(tmp_path), "-q"]) == 0
    assert (tmp_path / f"{src.stem}_cp++.xyz").is_file()


def test_eval_outputs_and_reproducibility(run, tmp_path):
    before = _digests(run)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["eval", "--data", str(run / "data"), "--model", str(run / "model" / "model.ckpt"),
                 "--explainer", str(run / "expl" / "explainer.ckpt"), "--methods", "infocons,cp++,random",
                 "--budgets", "4,8,16", "--efficiency-clouds", "3", "--out", str(a), "-q"]) == 0
    assert main(["eval", "--config", str(a / MANIFEST), "--out", str(b), "-q"]) == 0
    assert _digests(run) == before
    for name in ("attack_infocons_mcd.csv", "attack_infocons_lcd.csv", "attack_random_lcd.csv"):
        assert (a / name).is_file()
    eff = list(csv.reader(open(a / "efficiency.csv")))
    assert eff[0] == ["scorer", "forwards", "backwards", "params", "ms_per_cloud"]
    assert [r[:3] for r in eff[1:]] == [["infocons", "1", "0"], ["cp++", "1", "0"], ["random", "0", "0"]]
    da, db = _digests(a), _digests(b)
    for name in da:
        if name not in ("efficiency.csv", MANIFEST):
            assert da[name] == db[name], name
    hier = list(csv.reader(open(a / "hierarchy.csv")))
    assert [r[1] for r in hier[1:] if r[0] == "random"] == ["1", "2", "3", "4"]


def test_eval_default_budgets(run, tmp_path):
    assert main(["eval", "--data", str(run / "data"), "--model", str(run / "model" / "model.ckpt"),
                 "--methods", "random", "--modes", "mcd", "--efficiency-clouds", "1", "--out", str(tmp_path),
                 "-q"]) == 0
    rows = list(csv.reader(open(tmp_path / "attack_random_mcd.csv")))
    assert [r[0] for r in rows[1:]] == ["4", "8", "16", "32"]
