import json

import numpy as np
import pytest

from biflow.cli import main
from biflow.fileio import read_flow, read_pair, write_flow
from biflow.model import ModelConfig, init_params, save_checkpoint

SMALL_FLAGS = ["--points-per-level", "32,16,8", "--channels", "6,8,10", "--k-extract", "4", "--k-bfp", "4",
               "--k-fe", "4", "--k-pred", "4"]


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.fixture
def gen_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--out", str(out), "--count", "2", "--n-points", "64", "--seed", "7"]) == 0
    return out


def test_gen_is_reproducible(tmp_path, gen_dir):
    again = tmp_path / "again"
    main(["gen", "--out", str(again), "--count", "2", "--n-points", "64", "--seed", "7"])
    for name in ("pair_0000.txt", "pair_0001.txt", "flow_0000.txt", "flow_0001.txt"):
        assert (gen_dir / name).read_bytes() == (again / name).read_bytes()


def test_gen_outputs_parse(gen_dir):
    pair = read_pair(gen_dir / "pair_0000.txt")
    flow, mask = read_flow(gen_dir / "flow_0000.txt")
    assert pair.source.n == 64 and flow.shape == (64, 3) and mask.all()


def test_config_file_overridden_by_flags(tmp_path):
    cfg = tmp_path / "scene.cfg"
    cfg.write_text("# scene\nn_points = 40\nseed = 3\n")
    main(["gen", "--out", str(tmp_path / "a"), "--config", str(cfg)])
    main(["gen", "--out", str(tmp_path / "b"), "--config", str(cfg), "--n-points", "30"])
    assert read_pair(tmp_path / "a" / "pair_0000.txt").source.n == 40
    assert read_pair(tmp_path / "b" / "pair_0000.txt").source.n == 30


def test_perfect_predictions_score_perfectly(gen_dir, capsys):
    assert main(["eval", "--pairs", str(gen_dir), "--preds", str(gen_dir)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["epe3d"] == 0.0 and report["acc3ds"] == 1.0 and report["outliers3d"] == 0.0


def test_infer_zero_head_static_pair(tmp_path):
    data = tmp_path / "still"
    main(["gen", "--out", str(data), "--n-points", "48", "--max-rotation", "0", "--max-translation", "0",
          "--seed", "1"])
    cfg = ModelConfig(points_per_level=(32, 16, 8), channels=(6, 8, 10), k_extract=4, k_bfp=4, k_fe=4, k_pred=4)
    save_checkpoint(init_params(cfg).zero_heads(), tmp_path / "zero.ckpt")
    out = tmp_path / "pred.txt"
    assert main(["infer", "--checkpoint", str(tmp_path / "zero.ckpt"), "--pair", str(data / "pair_0000.txt"),
                 "--out", str(out)]) == 0
    flow, mask = read_flow(out)
    np.testing.assert_array_equal(flow, np.zeros((48, 3)))
    assert mask is None


def test_train_then_eval(gen_dir, tmp_path, capsys):
    ckpt, loss = tmp_path / "net.ckpt", tmp_path / "loss.csv"
    assert main(["train", "--pairs", str(gen_dir), "--checkpoint", str(ckpt), "--loss-csv", str(loss),
                 "--epochs", "1", "--seed", "0", *SMALL_FLAGS]) == 0
    rows = loss.read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 3
    assert main(["eval", "--pairs", str(gen_dir), "--checkpoint", str(ckpt)]) == 0
    assert json.loads(capsys.readouterr().out)["n_points"] == 128


def test_eval_with_mismatched_prediction(gen_dir, tmp_path, capsys):
    preds = tmp_path / "preds"
    preds.mkdir()
    for i in range(2):
        write_flow(np.zeros((5, 3)), preds / f"flow_{i:04d}.txt")
    assert main(["eval", "--pairs", str(gen_dir), "--preds", str(preds)]) == 1
    assert _error(capsys)["error"] == "invalid"


def test_check_passes(capsys):
    assert main(["check", "--instances", "5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 4 and all(line.startswith("PASS ") for line in out)


def test_bench_csv(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--sizes", "32,32,4,4,4", "--repetitions", "10", "--warmup", "1",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[1] == "variant,Np,Mp,K,C,Cout,ops,median_ms,iqr_ms" and len(lines) == 4


def test_unknown_flag(capsys):
    assert main(["gen", "--out", "x", "--bogus", "1"]) == 2
    assert _error(capsys)["error"] == "usage"


def test_missing_file(tmp_path, capsys):
    assert main(["infer", "--checkpoint", str(tmp_path / "nope"), "--pair", "p", "--out", "o"]) == 1
    assert _error(capsys)["error"] == "missing-file"
    assert not (tmp_path / "o").exists()


def test_config_violation_leaves_no_checkpoint(gen_dir, tmp_path, capsys):
    ckpt = tmp_path / "net.ckpt"
    code = main(["train", "--pairs", str(gen_dir), "--checkpoint", str(ckpt), "--points-per-level", "32,32",
                 "--channels", "4,4"])
    assert code == 1 and _error(capsys)["error"] == "invalid"
    assert not ckpt.exists()
