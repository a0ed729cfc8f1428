import json

import numpy as np
import pytest

from oracles import tiny_config
from tiedseg.cli import main
from tiedseg.data import read_pnm


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {"image_size": 16, "channels": 3, "shapes": ["disk", "square"], "scale": [3, 5],
            "objects_per_class": [1, 1], "count": 6, "seed": 1}
    (root / "spec.json").write_text(json.dumps(spec))
    cfg = tiny_config()
    cfg.save(root / "net.json")
    plan = {"batch_size": 3, "seed": 0, "stages": [{"stage": 0, "epochs": 1, "lr0": 0.01, "trainable": "all"},
                                                    {"stage": 1, "epochs": 1, "lr0": 0.01}]}
    (root / "plan.json").write_text(json.dumps(plan))
    assert main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "net.json"), "--plan", str(root / "plan.json"),
                 "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_train_writes_checkpoints(trained):
    assert (trained / "run" / "stage0.ckpt").exists() and (trained / "run" / "stage1.ckpt").exists()
    assert len((trained / "run" / "metrics.csv").read_text().splitlines()) == 3


def test_eval(trained, capsys):
    out = trained / "iou.csv"
    code = main(["eval", "--stage", "1", "--ckpt", str(trained / "run" / "stage1.ckpt"), "--data", str(trained / "data"), "--out", str(out)])
    assert code == 0
    assert "mean IoU" in capsys.readouterr().out
    assert out.read_text().startswith("id,class,intersection,union,iou")


def test_eval_stage_mismatch(trained, capsys):
    code = main(["eval", "--stage", "3", "--ckpt", str(trained / "run" / "stage1.ckpt"), "--data", str(trained / "data")])
    assert code == 1
    assert "stage-1" in capsys.readouterr().err


def test_infer(trained):
    out = trained / "inf"
    code = main(["infer", "--ckpt", str(trained / "run" / "stage1.ckpt"), "--image", str(trained / "data" / "images" / "img00000.ppm"), "--out", str(out)])
    assert code == 0
    assert read_pnm(out / "mask.pgm").shape == (16, 16)
    assert read_pnm(out / "heat_2.ppm").shape == (16, 16, 3)


def test_analyze(trained):
    out = trained / "prof.csv"
    code = main(["analyze", "--ckpt", str(trained / "run" / "stage1.ckpt"), "--data", str(trained / "data"),
                 "--layers", "conv3,deconv1", "--k", "10", "--out", str(out)])
    assert code == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "rank,conv3,deconv1" and len(rows) == 11
    vals = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    assert np.all(np.diff(vals, axis=0) <= 0)


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["train", "--bogus"]) == 2
    assert main(["fly"]) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["eval", "--ckpt", str(bad), "--data", str(tmp_path)]) == 1
    assert "byte offset 0" in capsys.readouterr().err
