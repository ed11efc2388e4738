import filecmp
import json
import os

import numpy as np
import pytest

from occkit.cli import run_command
from occkit.pipeline import PipelineConfig, evaluate, predict
from occkit import cli as climod


def run(*argv):
    return run_command(list(argv))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def dir_bytes(root):
    """Map of relative path -> file bytes for a whole tree."""
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            p = os.path.join(base, name)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("synth", "--preset", "tiny", "--count", "2", "--seed", "0",
               "--out", str(root)) == 0
    return root


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    capsys.readouterr()


def test_unknown_command_exits_one(capsys):
    assert run("frobnicate") == 1
    capsys.readouterr()


def test_synth_layout(data_dir):
    for i in range(2):
        sdir = data_dir / f"sample_{i:03d}"
        for name in ("scene.json", "cloud.ocfp", "gt.occg", "config.json"):
            assert (sdir / name).exists()
        ppms = [f for f in os.listdir(sdir) if f.endswith(".ppm")]
        assert len(ppms) == 2  # tiny rig
    assert (data_dir / "config.json").exists()


def test_synth_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run("synth", "--preset", "tiny", "--count", "1", "--seed", "3", "--out", str(a)) == 0
    assert run("synth", "--preset", "tiny", "--count", "1", "--seed", "3", "--out", str(b)) == 0
    assert dir_bytes(a) == dir_bytes(b)


def test_preprocess_report(data_dir, tmp_path):
    out = tmp_path / "prep.json"
    assert run("preprocess", "--cloud", str(data_dir / "sample_000" / "cloud.ocfp"),
               "--tau", "5", "--theta", "20", "--seed", "0",
               "--fill-scope", "all_voxels", "--out", str(out)) == 0
    rep = read_json(out)
    assert rep["processed_voxels"] == 8 ** 3  # every coarse voxel filled
    assert 5 < rep["min_count"] <= 20
    assert rep["max_count"] <= 20
    assert rep["reference_points"] >= rep["processed_voxels"] * 6
    assert rep["dropped_points"] == 0


def test_predict_outputs_and_inprocess_match(data_dir, tmp_path):
    out = tmp_path / "pred"
    sample_dir = str(data_dir / "sample_000")
    assert run("predict", "--preset", "tiny", "--seed", "0",
               "--sample", sample_dir, "--out", str(out)) == 0
    for name in ("pred.occg", "coarse.occg", "opcount.json", "metrics.json"):
        assert (out / name).exists()
    cfg = PipelineConfig.for_preset("tiny", seed=0)
    from occkit.pipeline import OccModel

    sample = climod._load_sample(sample_dir, cfg)
    model = OccModel.create(cfg)
    _, fine, report, _ = predict(model, sample, cfg)
    assert read_json(out / "metrics.json") == json.loads(
        json.dumps(evaluate(fine, sample.gt_fine))
    )
    assert read_json(out / "opcount.json") == json.loads(json.dumps(report.to_json()))


def test_predict_byte_identical_and_thread_invariant(data_dir, tmp_path):
    sample_dir = str(data_dir / "sample_001")
    outs = []
    for name, threads in (("r1", "1"), ("r2", "1"), ("r4", "4")):
        out = tmp_path / name
        assert run("predict", "--preset", "tiny", "--seed", "0", "--threads", threads,
                   "--sample", sample_dir, "--out", str(out)) == 0
        outs.append(dir_bytes(out))
    assert outs[0] == outs[1] == outs[2]


def test_eval_self_is_perfect(data_dir, tmp_path):
    out = tmp_path / "pred"
    assert run("predict", "--preset", "tiny", "--sample", str(data_dir / "sample_000"),
               "--seed", "0", "--out", str(out)) == 0
    rep_path = tmp_path / "eval.json"
    assert run("eval", "--pred", str(out / "pred.occg"),
               "--gt", str(out / "pred.occg"), "--out", str(rep_path)) == 0
    rep = read_json(rep_path)
    assert rep["iou"] == 1.0 and rep["miou"] == 1.0
    rep2_path = tmp_path / "eval2.json"
    assert run("eval", "--pred", str(out / "pred.occg"),
               "--gt", str(data_dir / "sample_000" / "gt.occg"),
               "--out", str(rep2_path)) == 0
    rep2 = read_json(rep2_path)
    assert 0.0 <= rep2["iou"] <= 1.0


def test_fuse_blob_shape(data_dir, tmp_path):
    out = tmp_path / "fused"
    assert run("fuse", "--preset", "tiny", "--seed", "0",
               "--sample", str(data_dir / "sample_000"), "--out", str(out)) == 0
    meta = read_json(out / "fused.json")
    nx, ny, nz = meta["dims"]
    blob = np.fromfile(out / "fused.f64", dtype="<f8")
    assert blob.size == nx * ny * nz * meta["channels"]
    assert np.all(np.isfinite(blob))


def test_bench_rows(data_dir, tmp_path):
    out = tmp_path / "bench.json"
    assert run("bench", "--preset", "tiny", "--seed", "0",
               "--sample", str(data_dir / "sample_000"), "--out", str(out)) == 0
    rows = read_json(out)["rows"]
    assert [r["delta"] for r in rows] == [0.1, 0.2, 0.3, 1.0]
    for r in rows:
        assert 0.0 <= r["ratio"] <= 1.0
    assert rows[-1]["ratio"] == 1.0
    ops = [r["fine_ops"] for r in rows]
    assert ops == sorted(ops)


def test_train_and_reuse_checkpoint(data_dir, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--data", str(data_dir), "--epochs", "1",
               "--k-percent", "100", "--learning-rate", "0.05",
               "--batch-size", "2", "--seed", "0", "--out", str(out)) == 0
    assert (out / "checkpoint" / "manifest.json").exists()
    lines = (out / "history.jsonl").read_text().strip().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["active_ids"] == [0, 1]
    out2 = tmp_path / "run2"
    assert run("train", "--data", str(data_dir), "--epochs", "1",
               "--k-percent", "100", "--learning-rate", "0.05",
               "--batch-size", "2", "--seed", "0", "--out", str(out2)) == 0
    assert dir_bytes(out) == dir_bytes(out2)
    pred_out = tmp_path / "pred_ckpt"
    assert run("predict", "--sample", str(data_dir / "sample_000"),
               "--ckpt", str(out / "checkpoint"), "--seed", "0",
               "--out", str(pred_out)) == 0
    assert (pred_out / "metrics.json").exists()


def test_missing_inputs_exit_two(tmp_path, capsys):
    assert run("predict", "--preset", "tiny", "--sample", str(tmp_path / "nope"),
               "--out", str(tmp_path / "o")) == 2
    assert run("eval", "--pred", str(tmp_path / "a.occg"),
               "--gt", str(tmp_path / "b.occg"), "--out", str(tmp_path / "e.json")) == 2
    assert run("preprocess", "--cloud", str(tmp_path / "c.ocfp"),
               "--out", str(tmp_path / "p.json")) == 2
    capsys.readouterr()


def test_console_script_installed():
    import shutil
    import subprocess

    exe = shutil.which("occkit")
    assert exe is not None
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "synth" in proc.stdout
