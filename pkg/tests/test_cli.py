import json
import os

import numpy as np
import pytest

from silcarve.cli import main
from silcarve.pgm import read_pgm


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["gen-data", "--n-objects", "12", "--views", "5",
               "--image-size", "16", "--seed", "7", "--out", str(root)])
    assert rc == 0
    return str(root)


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    rc = main(["train", "--data", data_dir, "--out", str(out),
               "--epochs", "2", "--batch-size", "8", "--feature-dim", "32",
               "--voxel-size", "9", "--quiet"])
    assert rc == 0
    return str(out)


def test_gen_data_writes_dataset(data_dir, capsys):
    rc = main(["gen-data", "--n-objects", "10", "--views", "3",
               "--image-size", "16", "--out", data_dir + "_b"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "10 objects" in out
    assert "8/1/1" in out  # 75/10/15 percent split, remainder to test
    assert os.path.exists(os.path.join(data_dir + "_b", "manifest.jsonl"))


def test_train_writes_checkpoint_and_log(run_dir, capsys):
    assert os.path.exists(os.path.join(run_dir, "best.ckpt"))
    with open(os.path.join(run_dir, "train_log.jsonl")) as fh:
        lines = [json.loads(line) for line in fh]
    assert len(lines) == 2
    assert {"epoch", "train_loss", "val_iou", "wall_ms"} <= set(lines[0])


def test_eval_prints_mean_and_writes_report(data_dir, run_dir, capsys, tmp_path):
    ckpt = os.path.join(run_dir, "best.ckpt")
    report_path = tmp_path / "report.json"
    rc = main(["eval", "--data", data_dir, "--checkpoint", ckpt,
               "--k", "2", "--out", str(report_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mean IoU" in out and "k=2" in out
    with open(report_path) as fh:
        payload = json.load(fh)
    assert payload["k"] == 2 and payload["split"] == "test"
    assert 0.0 <= payload["mean_iou"] <= 1.0
    assert len(payload["per_object"]) == payload["count"]


def test_matrix_custom_variants(data_dir, tmp_path, capsys):
    variants = {"tiny": {"views": 1, "batch_size": 8,
                         "feature_dim": 32, "voxel_size": 9}}
    vpath = tmp_path / "variants.json"
    vpath.write_text(json.dumps(variants))
    out = tmp_path / "matrix"
    rc = main(["matrix", "--data", data_dir, "--ks", "1,2", "--epochs", "1",
               "--variants", str(vpath), "--out", str(out)])
    assert rc == 0
    table = capsys.readouterr().out
    assert "tiny" in table and "k=1" in table
    assert os.path.exists(out / "matrix.json")
    with open(out / "matrix.json") as fh:
        cells = json.load(fh)
    assert set(cells["tiny"]) == {"1", "2"}


def test_matrix_rejects_unknown_variant_keys(data_dir, tmp_path, capsys):
    vpath = tmp_path / "variants.json"
    vpath.write_text(json.dumps({"bad": {"view_count": 2}}))
    rc = main(["matrix", "--data", data_dir, "--variants", str(vpath),
               "--out", str(tmp_path / "m")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "view_count" in err


def test_carve_check_reports(data_dir, capsys, tmp_path):
    report_path = tmp_path / "carve.json"
    rc = main(["carve-check", "--data", data_dir, "--n-objects", "3",
               "--out", str(report_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "objects=3" in out and "mean IoU" in out
    with open(report_path) as fh:
        payload = json.load(fh)
    assert payload["n_objects"] == 3
    assert len(payload["per_view"]) == 15


def test_render_writes_pgms(data_dir, run_dir, tmp_path, capsys):
    out = tmp_path / "render"
    rc = main(["render", "--data", data_dir,
               "--checkpoint", os.path.join(run_dir, "best.ckpt"),
               "--thetas", "0,40,80", "--out", str(out)])
    assert rc == 0
    assert "wrote 6 files" in capsys.readouterr().out
    img = read_pgm(out / "prob_02.pgm")
    assert img.shape == (16, 16)


def test_render_rejects_bad_view_index(data_dir, run_dir, tmp_path, capsys):
    rc = main(["render", "--data", data_dir,
               "--checkpoint", os.path.join(run_dir, "best.ckpt"),
               "--view-indices", "0,9", "--out", str(tmp_path / "r")])
    assert rc == 1
    assert "out of range" in capsys.readouterr().err


def test_config_file_layering(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"n_objects": 10, "image_size": 16, "views": 3}))
    out = tmp_path / "ds"
    # flag --views 4 overrides the config's 3; config overrides default n_objects
    rc = main(["gen-data", "--config", str(cfg), "--views", "4", "--out", str(out)])
    assert rc == 0
    with open(out / "manifest.jsonl") as fh:
        records = [json.loads(line) for line in fh]
    assert len(records) == 10
    assert all(len(r["views"]) == 4 for r in records)


def test_config_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"object_count": 10}))
    rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "ds")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "object_count" in err


def test_error_exit_code_on_missing_data(capsys):
    rc = main(["eval", "--data", "/nonexistent/ds", "--checkpoint", "x.ckpt"])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1


def test_thread_cap_seeds_blas_variables():
    import silcarve

    env = {"SILCARVE_THREADS": "2", "OMP_NUM_THREADS": "8"}
    silcarve._apply_thread_cap(env)
    assert env["OMP_NUM_THREADS"] == "8"  # explicit setting wins
    assert env["OPENBLAS_NUM_THREADS"] == "2"
    assert env["MKL_NUM_THREADS"] == "2"
    untouched = {}
    silcarve._apply_thread_cap(untouched)
    assert untouched == {}  # unset → library defaults (machine cores)


def test_train_rejects_bad_optimizer_via_config(data_dir, tmp_path, capsys):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"optimizer": "rmsprop"}))
    rc = main(["train", "--data", data_dir, "--config", str(cfg),
               "--out", str(tmp_path / "run")])
    assert rc == 1
    assert "rmsprop" in capsys.readouterr().err
