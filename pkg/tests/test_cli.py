import json

import numpy as np
import pytest

from fdrl import diffcore
from fdrl.cli import main, read_embeddings
from fdrl.config import ABLATIONS, load_config
from fdrl.datasets import load_features, read_manifest
from fdrl.objectives import read_loss_log

TERM_OF = {"alignment_global": "L_g", "alignment_local": "L_l", "disparity_adv": "L_p",
           "disparity_orth": "L_d", "predictor": "L_f"}


@pytest.fixture(scope="module")
def synth_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy.feat"
    assert main(["synth", "--out", str(path), "--seed", "3", "--samples", "100", "--classes", "3",
                 "--d-in", "12", "--shared-dim", "3", "--private-dim", "3"]) == 0
    return path


TRAIN_FAST = ["--set", "d=4", "--set", "heads=2", "--set", "epochs=2", "--set", "batch_size=20",
              "--set", "lr=1e-3"]


# -- gradcheck --------------------------------------------------------------

def test_gradcheck_all_passes(capsys):
    assert main(["gradcheck", "--all"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == len(diffcore.GRADCHECKS)
    for line in lines:
        assert line.endswith("ok")
        assert float(line.split("max_rel_err=")[1].split()[0]) < 1e-4


def test_gradcheck_reports_corrupted_relu(monkeypatch, capsys):
    monkeypatch.setattr(diffcore, "_relu_grad_mask", lambda x: np.ones_like(x))
    code = main(["gradcheck", "--all"])
    captured = capsys.readouterr()
    assert code != 0
    assert "relu" in captured.err
    assert any(line.startswith("relu") and line.endswith("FAIL") for line in captured.out.splitlines())


def test_gradcheck_single_op(capsys):
    assert main(["gradcheck", "--op", "softmax_rows", "--op", "loss_orthogonal"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_gradcheck_unknown_op(capsys):
    assert main(["gradcheck", "--op", "nope"]) == 1
    assert "unknown op" in capsys.readouterr().err


# -- synth ------------------------------------------------------------------

def test_synth_default_loads_back(tmp_path):
    out = tmp_path / "d.feat"
    assert main(["synth", "--out", str(out)]) == 0
    ds = load_features(out)
    assert len(ds) == 2000 and ds.h_a.shape[1] == 64 and ds.manifest.classes == 4


def test_synth_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name / "d.feat"), "--seed", "7", "--samples", "50"]) == 0
    for ext in ("feat", "manifest", "factors"):
        assert (tmp_path / "a" / f"d.{ext}").read_bytes() == (tmp_path / "b" / f"d.{ext}").read_bytes()


def test_synth_manifest_reflects_arguments(tmp_path):
    out = tmp_path / "d.feat"
    main(["synth", "--out", str(out), "--classes", "4", "--samples", "2000"])
    kv = read_manifest(tmp_path / "d.manifest")
    assert kv["classes"] == "4" and kv["count"] == "2000"


# -- train ------------------------------------------------------------------

def test_train_persists_effective_config(tmp_path, synth_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(synth_file), "--out", str(out), "--seed", "4", *TRAIN_FAST]) == 0
    cfg = load_config(out / "fold1" / "config.ini")
    assert (cfg.seed, cfg.d, cfg.epochs, cfg.d_in, cfg.classes) == (4, 4, 2, 12, 3)
    for f in ("model.ckpt", "loss_log.csv", "metrics.txt", "summary.json"):
        assert (out / "fold1" / f).exists()
    assert "WAR=" in capsys.readouterr().out


@pytest.mark.parametrize("ablation", sorted(ABLATIONS))
def test_train_ablation_zero_columns(tmp_path, synth_file, ablation):
    out = tmp_path / ablation
    assert main(["train", "--data", str(synth_file), "--out", str(out), "--ablation", ablation, *TRAIN_FAST]) == 0
    rows = read_loss_log(out / "fold1" / "loss_log.csv")
    off = {TERM_OF[t] for t in ABLATIONS[ablation]}
    for term in TERM_OF.values():
        values = [r[term] for r in rows]
        if term in off:
            assert all(v == 0.0 for v in values), term
        else:
            assert all(v > 0.0 for v in values), term


def test_ablation_none_equals_full_model(tmp_path, synth_file):
    for name, extra in (("none", ["--ablation", "none"]), ("full", [])):
        main(["train", "--data", str(synth_file), "--out", str(tmp_path / name), *extra, *TRAIN_FAST])
    assert (tmp_path / "none/fold1/loss_log.csv").read_bytes() == (tmp_path / "full/fold1/loss_log.csv").read_bytes()


def test_train_all_folds_summary(tmp_path, synth_file):
    out = tmp_path / "cv"
    assert main(["train", "--data", str(synth_file), "--out", str(out), "--all-folds",
                 "--set", "epochs=1", "--set", "d=4", "--set", "heads=2", "--set", "batch_size=40"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["folds"] == [1, 2, 3, 4, 5]
    assert all((out / f"fold{k}" / "model.ckpt").exists() for k in range(1, 6))


def test_train_output_root_env(tmp_path, synth_file, monkeypatch):
    monkeypatch.setenv("FDRL_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--data", str(synth_file), *TRAIN_FAST]) == 0
    assert (tmp_path / "root" / "train" / "fold1" / "model.ckpt").exists()


def test_config_file_with_override(tmp_path, synth_file):
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nd = 8\nheads = 2\n[optim]\nepochs = 1\nbatch_size = 40\n")
    out = tmp_path / "run"
    assert main(["train", "--data", str(synth_file), "--config", str(ini), "--set", "model.d=4",
                 "--out", str(out)]) == 0
    cfg = load_config(out / "config.ini")
    assert cfg.d == 4 and cfg.epochs == 1


def test_quickstart_flag_sets_preset(tmp_path, synth_file):
    out = tmp_path / "run"
    assert main(["train", "--data", str(synth_file), "--quickstart", "--set", "epochs=1",
                 "--set", "d=4", "--set", "heads=2", "--out", str(out)]) == 0
    cfg = load_config(out / "config.ini")
    assert (cfg.batch_size, cfg.lr, cfg.epochs) == (32, 1e-3, 1)


@pytest.mark.parametrize("args", [["--set", "heads=3"], ["--set", "alpha=-1"], ["--set", "bogus=1"],
                                  ["--fold", "9"]])
def test_train_configuration_errors_exit_1(tmp_path, synth_file, args, capsys):
    assert main(["train", "--data", str(synth_file), "--out", str(tmp_path / "x"), *args]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_data_file_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing.feat")]) == 1


def test_numerical_failure_exits_2(tmp_path, synth_file, monkeypatch):
    from fdrl.errors import NumericalError

    def explode(*args, **kwargs):
        raise NumericalError("L_total", float("inf"), 0)

    monkeypatch.setattr("fdrl.cli.train", explode)
    assert main(["train", "--data", str(synth_file), "--out", str(tmp_path / "x")]) == 2


# -- eval / export ----------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_file):
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--data", str(synth_file), "--out", str(out), "--set", "d=8", "--set", "heads=2",
                 "--set", "epochs=40", "--set", "batch_size=20", "--set", "lr=3e-3"]) == 0
    return out / "fold1" / "model.ckpt"


def test_eval_on_training_data_is_near_perfect(trained, synth_file, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["eval", "--checkpoint", str(trained), "--data", str(synth_file), "--out", str(out)]) == 0
    metrics = json.loads(out.read_text())
    assert metrics["WAR"] >= 0.95
    assert "confusion.class0" in capsys.readouterr().out


def test_eval_fold_subset(trained, synth_file, tmp_path):
    out = tmp_path / "m.json"
    assert main(["eval", "--checkpoint", str(trained), "--data", str(synth_file), "--fold", "1",
                 "--out", str(out)]) == 0
    assert int(np.sum(json.loads(out.read_text())["confusion"])) == 20


def test_export_embeddings(trained, synth_file, tmp_path):
    out = tmp_path / "emb.csv"
    assert main(["export-embeddings", "--checkpoint", str(trained), "--data", str(synth_file),
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) - 1 == 4 * 100
    codes, labels = read_embeddings(out)
    assert all(codes[k].shape == (100, 8) for k in codes)
    assert np.array_equal(labels, load_features(synth_file).y)


def test_eval_rejects_dimension_mismatch(trained, tmp_path):
    other = tmp_path / "o.feat"
    main(["synth", "--out", str(other), "--samples", "20", "--d-in", "5", "--classes", "3"])
    assert main(["eval", "--checkpoint", str(trained), "--data", str(other)]) == 1
    assert main(["export-embeddings", "--checkpoint", str(trained), "--data", str(other),
                 "--out", str(tmp_path / "e.csv")]) == 1
