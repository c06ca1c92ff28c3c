import csv
import io
import json

import pytest

from mmpipe import io as mio
from mmpipe.cli import main
from mmpipe.workload import DistributionSpec, synthetic_batch, video_captions, vlm_mixture

SMALL = ["--microbatches", "2", "--max-rollouts", "3", "--workers", "1", "--budget-ms", "60000"]


def test_partition_prints_plan(capsys):
    assert main(["partition"]) == 0
    out = capsys.readouterr().out
    assert "P=4" in out and "vit: B=12 K=1" in out and "lm: B=8192 K=5" in out


def test_profile_csv(tmp_path):
    out = tmp_path / "curve.csv"
    assert main(["profile", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 32
    assert [r["size"] for r in rows if r["selected"] == "1"] == ["12"]


def test_plan_then_simulate(tmp_path, capsys):
    seg = tmp_path / "segplan.json"
    assert main(["partition", "--out", str(seg)]) == 0
    out = tmp_path / "run"
    assert main(["plan", "--segment-plan", str(seg), "--out", str(out), *SMALL]) == 0
    for name in ("schedule.json", "plan.json", "gantt.svg", "gantt.csv", "trace.csv"):
        assert (out / name).exists()
    capsys.readouterr()
    assert main(["simulate", str(out / "plan.json")]) == 0
    assert "ok: 4 ranks" in capsys.readouterr().out


def test_simulate_reports_broken_plan(tmp_path, capsys):
    bad = {"schema_version": 1, "ranks": [[{"kind": "irecv", "peer": 1, "tag": 0},
                                           {"kind": "wait_irecv", "peer": 1, "tag": 0}], []]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert main(["simulate", str(path)]) == 1
    assert "UnmatchedTag" in capsys.readouterr().out


def test_compare_table(tmp_path):
    out = tmp_path / "cmp.csv"
    assert main(["compare", "--out", str(out), *SMALL]) == 0
    rows = {r["scheduler"]: r for r in csv.DictReader(out.open())}
    assert set(rows) == {"searched", "1f1b", "encoder_first"}
    assert all(float(r["makespan_s"]) > 0 for r in rows.values())


def test_bench(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--iterations", "2", "--out", str(out), *SMALL]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["iteration"] for r in rows] == ["0", "1"]


def test_batch_file_input(tmp_path, capsys):
    path = tmp_path / "batch.json"
    mio.write_json(synthetic_batch(vlm_mixture(), 8192, 2, seed=4, iteration=9), str(path))
    assert main(["plan", "--batch", str(path), *SMALL]) == 0
    assert capsys.readouterr().out.startswith("iteration 9:")


def test_video_model_needs_instance_tokens(capsys):
    assert main(["partition", "--model", "T2V-S"]) == 2
    assert "tokens per instance" in capsys.readouterr().err
    assert main(["partition", "--model", "T2V-S", "--instance-tokens", "dit=1024"]) == 0


def test_unknown_preset_is_an_error(capsys):
    assert main(["partition", "--model", "nope"]) == 2
    assert "error" in capsys.readouterr().err


def test_io_distribution_and_json(tmp_path):
    with pytest.raises(ValueError):
        mio.load_distribution("video_captions", None)
    assert mio.load_distribution("video_captions", 50.0) == video_captions(50.0)
    for name in mio.DISTRIBUTIONS:
        if name != "video_captions":
            assert isinstance(mio.load_distribution(name, None), DistributionSpec)
    path = tmp_path / "d" / "dist.json"
    mio.write_json(vlm_mixture(), str(path))
    text = path.read_text()
    assert text.endswith("\n")
    assert mio.load_distribution(str(path), None) == vlm_mixture()
    buf = io.StringIO(text)
    assert json.load(buf) == vlm_mixture().to_dict()
