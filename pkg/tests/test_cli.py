"""Command-line behaviour: config resolution, exit codes, artifacts."""

import json

import pytest

from volmark.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main

TINY = ["--set", "channels=[4,8,8]", "--set", "region_size=[2,2,2]", "--set", "top_k=2", "--set", "steps=3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "4", "--set", "count=2", "--set", "dims=[16,16,8]"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(dataset), "--out", str(out)] + TINY) == EXIT_OK
    return out


def test_synth_writes_cases_and_config(dataset):
    assert len(list(dataset.glob("*.landmarks"))) == 2
    cfg = json.loads((dataset / "config.json").read_text())
    assert cfg["seed"] == 4 and cfg["dims"] == [16, 16, 8] and cfg["command"] == "synth"


def test_train_artifacts(trained):
    assert (trained / "model.ckpt").is_file()
    rows = (trained / "loss_curve.csv").read_text().splitlines()
    assert rows[0].startswith("step,total") and len(rows) == 5


def test_train_rerun_is_byte_identical(dataset, trained, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path)] + TINY) == EXIT_OK
    for name in ("model.ckpt", "loss_curve.csv", "config.json"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_infer_then_eval_from_predictions(dataset, trained, tmp_path, capsys):
    preds = tmp_path / "preds"
    assert main(["infer", "--data", str(dataset), "--checkpoint", str(trained / "model.ckpt"),
                 "--out", str(preds)]) == EXIT_OK
    assert len(list(preds.glob("*.landmarks"))) == 2
    assert main(["eval", "--data", str(dataset), "--predictions", str(preds), "--out", str(tmp_path / "ev")]) == 0
    assert "presence agreement" in capsys.readouterr().out.lower()
    assert (tmp_path / "ev" / "report.csv").is_file()


def test_eval_from_checkpoint(dataset, trained, tmp_path):
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(trained / "model.ckpt"),
                 "--out", str(tmp_path)]) == EXIT_OK


def test_config_file_sections_and_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"synth": {"count": 1, "dims": [8, 8, 8], "landmarks": 1}}))
    out = tmp_path / "o"
    assert main(["synth", "--config", str(conf), "--set", "landmarks=2", "--set", "sigma_blob=1.0",
                 "--out", str(out)]) == EXIT_OK
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["count"] == 1 and cfg["landmarks"] == 2


def test_unknown_setting_is_usage_error(tmp_path):
    assert main(["synth", "--set", "colour=3", "--out", str(tmp_path)]) == EXIT_USAGE


def test_bad_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--nope", "--out", str(tmp_path)])
    assert e.value.code == EXIT_USAGE


def test_negative_seed_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--seed", "-1", "--out", str(tmp_path)])
    assert e.value.code == EXIT_USAGE


def test_missing_data_dir_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == EXIT_DATA


def test_missing_checkpoint_is_data_error(dataset, tmp_path, capsys):
    assert main(["infer", "--data", str(dataset), "--checkpoint", str(tmp_path / "x.ckpt"),
                 "--out", str(tmp_path)]) == EXIT_DATA
    assert "volmark train" in capsys.readouterr().err


def test_gradcheck_passes_and_corrupt_fails(tmp_path):
    assert main(["gradcheck", "--suite", "losses", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["gradcheck", "--suite", "losses", "--corrupt", "--out", str(tmp_path / "b")]) == EXIT_VERIFY
    assert "FAIL" in (tmp_path / "b" / "gradcheck.txt").read_text()


def test_bench_writes_analytic_records(tmp_path):
    args = ["bench", "--out", str(tmp_path), "--set", "dims=[[4,4,4]]", "--set", "regions=[[2,2,2]]",
            "--set", "ks=[1,2]", "--set", "repeats=1", "--set", "channels=8"]
    assert main(args) == EXIT_OK
    assert len((tmp_path / "bench_analytic.csv").read_text().splitlines()) == 3


def test_empty_bench_sweep_is_usage_error(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "--set", "dims=[[5,5,5]]", "--set", "regions=[[2,2,2]]"]) \
        == EXIT_USAGE
