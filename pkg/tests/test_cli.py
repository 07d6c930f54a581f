import csv
import io
import json

import pytest

from pcamnet.cli import BENCH_SHAPES, bench_rows, main

TINY = ["--stages", "2", "--base-channels", "2", "--pcam-location", "2", "--epochs", "1",
        "--batch-size", "2", "--set", "data.extents=[16,16,8]"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen", "--spec", '{"extents": [16, 16, 8], "seed": 1}', "--count", "6",
                 "--out", str(d)]) == 0
    return d


def test_gen_writes_samples_deterministically(data, tmp_path):
    assert len(list(data.glob("sample_*/meta.json"))) == 6
    assert main(["gen", "--spec", '{"extents": [16, 16, 8], "seed": 1}', "--count", "6",
                 "--out", str(tmp_path)]) == 0
    for a in data.glob("sample_*/*.raw"):
        assert (tmp_path / a.parent.name / a.name).read_bytes() == a.read_bytes()


def test_train_eval_compose(data, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(run)] + TINY) == 0
    assert {p.name for p in run.iterdir()} == {"checkpoint.pcam", "metrics.csv", "config.json"}
    assert json.loads((run / "config.json").read_text())["network"]["pcam_location"] == 2
    rows = list(csv.DictReader(io.StringIO((run / "metrics.csv").read_text())))
    assert len(rows) == 1 and rows[0]["epoch"] == "0"
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pcam"), "--data", str(data),
                 "--out", str(out)]) == 0
    agg = json.loads(out.read_text())["aggregate"]
    assert {"precision_fg", "precision_fg_eroded", "precision_bg", "precision_bg_eroded"} <= set(agg)
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pcam"), "--data", str(data),
                 "--out", str(tmp_path / "eval.csv")]) == 0
    header = (tmp_path / "eval.csv").read_text().splitlines()[0]
    assert "precision_fg_eroded" in header
    run2 = tmp_path / "run2"
    assert main(["train", "--data", str(data), "--out", str(run2)] + TINY) == 0
    assert (run2 / "metrics.csv").read_text() == (run / "metrics.csv").read_text()


def test_config_file_and_flag_precedence(data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"training": {"epochs": 3}, "network": {"stages": 2, "base_channels": 2,
                                                                      "pcam_location": 1}}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run),
                 "--epochs", "1"]) == 0
    saved = json.loads((run / "config.json").read_text())
    assert saved["training"]["epochs"] == 1 and saved["network"]["pcam_location"] == 1


def test_folds_flag(data, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--folds", "2"] + TINY) == 0
    assert (tmp_path / "fold0" / "checkpoint.pcam").exists()
    assert (tmp_path / "fold1" / "checkpoint.pcam").exists()


def test_ablate_table(data, tmp_path, capsys):
    out = tmp_path / "ablation.json"
    assert main(["ablate", "--data", str(data), "--out", str(out)] + TINY) == 0
    rows = json.loads(out.read_text())
    assert [r["pcam_location"] for r in rows] == ["none", 1, 2]
    table = capsys.readouterr().out.strip().splitlines()
    assert table[0].startswith("pcam_location,dsc,dsc_std,voe,voe_std,assd,assd_std,betti0_error")
    assert len(table) == 4


def test_exit_codes(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--epochs", "-1"]) == 2
    assert main(["train", "--config", "{not json"]) == 2
    assert main(["train", "--set", "network.bogus=1"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pcam"), "--data", str(data)]) == 3
    assert main(["gen", "--count", "0", "--out", str(tmp_path)]) == 2
    capsys.readouterr()


def test_eval_extent_mismatch(data, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(run), "--stages", "3",
                 "--base-channels", "2", "--epochs", "0", "--pcam-location", "none"]) == 0
    odd = tmp_path / "odd"
    assert main(["gen", "--spec", '{"extents": [12, 12, 4]}', "--count", "2", "--out", str(odd)]) == 0
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pcam"), "--data", str(odd)]) == 3


def test_bench(capsys):
    assert main(["bench"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[1] == "64,2,48,48,16,9363456,9363456,1"
    assert len(lines) == 1 + len(BENCH_SHAPES)
    assert all(r["ratio"] == 1.0 for r in bench_rows())


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--coords", "3"]) == 0
    assert "checks passed" in capsys.readouterr().out
