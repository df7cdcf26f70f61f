import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from piseg import model as M
from piseg.cli import main
from piseg.data import load_pgm, save_pgm
from piseg.tensor import load_tensor, save_tensor


@pytest.fixture(scope="module")
def schema():
    return json.loads(resources.files("piseg").joinpath("schemas/metric_report.json").read_text())


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gradcheck", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    assert main([]) == 2


def test_train_missing_config_exits_2(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "missing.json"), "--data", str(tmp_path), "--out", str(tmp_path)])
    assert rc == 2
    assert "missing.json" in capsys.readouterr().err


def test_train_missing_dataset_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--iters", "1"]) == 1


def test_gradcheck_tiny_exits_0(capsys):
    assert main(["gradcheck", "--size", "tiny"]) == 0
    out = capsys.readouterr().out
    assert "all passed" in out and "FAIL]" not in out


def test_eval_report_matches_golden_schema(tmp_path, capsys, schema):
    rng = np.random.default_rng(0)
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    for i in range(3):
        gt = rng.integers(0, 3, (16, 16)).astype(np.uint8)
        pred = gt.copy()
        pred[rng.random((16, 16)) < 0.2] = 0
        if i == 2:
            pred[pred == 2] = 0  # an empty class exercises the HD95 flag
        save_pgm(gt, tmp_path / "gt" / f"c{i}.pgm", normalized=False)
        save_pgm(pred, tmp_path / "pred" / f"c{i}.pgm", normalized=False)
    rc = main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--out",
               str(tmp_path / "r" / "report.json")])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out)
    jsonschema.validate(printed, schema)
    assert printed == json.loads((tmp_path / "r" / "report.json").read_text())
    assert printed["cases"][2]["hd95_flags"] == {"2": "empty_pred"}
    assert (tmp_path / "r" / "report.csv").read_text().startswith("id,class,dsc,hd95,hd95_flag")
    assert (tmp_path / "r" / "report.png").stat().st_size > 0


def test_eval_schema_rejects_out_of_range(schema):
    bad = {"num_classes": 2, "thresholds": [0.5] * 10, "cases": [],
           "mean": {"dsc": {"1": 120.0}, "hd95": {}, "dsc_all": 0, "hd95_all": 0, "miou": 0,
                    "iou_per_threshold": [0] * 10}}
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)


def test_eval_with_probability_map(tmp_path, capsys):
    gt = np.zeros((8, 8), np.uint8)
    gt[2:6, 2:6] = 1
    save_pgm(gt, tmp_path / "g.pgm", normalized=False)
    prob = np.stack([1 - gt * 0.6, gt * 0.6]).astype(np.float64)
    save_tensor(prob, tmp_path / "p.t22")
    assert main(["eval", "--pred", str(tmp_path / "g.pgm"), "--gt", str(tmp_path / "g.pgm"),
                 "--prob", str(tmp_path / "p.t22")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["cases"][0]["iou_per_threshold"] == [1.0, 1.0] + [0.0] * 8


def test_synth_train_infer_round_trip(tmp_path, capsys):
    data, run = tmp_path / "d", tmp_path / "run"
    assert main(["synth", "--out", str(data), "--image-size", "32", "--num-classes", "3", "--n-train", "2",
                 "--n-val", "1", "--n-test", "1", "--seed", "3"]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": M.PRESETS["tiny"].replace(precision="train32").to_dict(),
                               "train": {"batch_size": 1, "val_interval": 1}}))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--iters", "2"]) == 0
    assert (run / "loss_curve.png").stat().st_size > 0
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2
    capsys.readouterr()
    image = data / "images" / "case0003.pgm"
    assert main(["infer", "--checkpoint", str(run / "final.ckpt"), "--image", str(image), "--out",
                 str(tmp_path / "pred" / "case0003"), "--step-preset", "synapse224"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["stride"] == 10  # round(0.3 * 32)
    prob = load_tensor(tmp_path / "pred" / "case0003.prob.t22")
    mask = load_pgm(tmp_path / "pred" / "case0003.mask.pgm", normalize=False)
    assert prob.shape == (3, 32, 32) and mask.shape == (32, 32)
    np.testing.assert_array_equal(mask, prob.argmax(axis=0))
    assert (tmp_path / "pred" / "case0003.png").exists()


def test_infer_crop_mismatch_is_usage_error(tmp_path):
    cfg = M.PRESETS["tiny"]
    M.save(M.build(cfg, 0), tmp_path / "m.ckpt", cfg)
    save_pgm(np.zeros((32, 32)), tmp_path / "i.pgm")
    assert main(["infer", "--checkpoint", str(tmp_path / "m.ckpt"), "--image", str(tmp_path / "i.pgm"),
                 "--out", str(tmp_path / "o"), "--crop", "16"]) == 2


def test_corrupt_checkpoint_exits_1(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    save_pgm(np.zeros((32, 32)), tmp_path / "i.pgm")
    assert main(["infer", "--checkpoint", str(tmp_path / "bad.ckpt"), "--image", str(tmp_path / "i.pgm"),
                 "--out", str(tmp_path / "o")]) == 1
