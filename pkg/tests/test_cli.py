import csv
import json

import pytest

from mcegnn import cli
from mcegnn.egnn import MCEGNNConfig, param_count_formula


@pytest.fixture(scope="module")
def charged_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("d") / "c.mcc"
    assert cli.main(["gen-data", "charged", "--systems", "16", "--seed", "1", "--horizon-steps", "200",
                     "--record-every", "100", "--out", str(path)]) == 0
    return str(path)


def test_gen_data_deterministic(tmp_path, charged_file):
    again = tmp_path / "again.mcc"
    cli.main(["gen-data", "charged", "--systems", "16", "--seed", "1", "--horizon-steps", "200",
              "--record-every", "100", "--out", str(again)])
    assert again.read_bytes() == open(charged_file, "rb").read()
    summary = json.loads(open(charged_file + ".json").read())
    assert summary["samples"] == {"train": 10, "val": 2, "test": 4}


def test_gen_data_orbital_counts(tmp_path):
    out = tmp_path / "o.mcc"
    assert cli.main(["gen-data", "orbital", "--planets", "3", "--moons", "2", "--systems", "2",
                     "--n-steps", "600", "--horizon-steps", "100", "--stride-steps", "100",
                     "--out", str(out)]) == 0
    assert json.loads((tmp_path / "o.mcc.json").read_text())["bodies"] == 10


def test_gen_data_bad_horizon(tmp_path, capsys):
    rc = cli.main(["gen-data", "orbital", "--systems", "1", "--n-steps", "100", "--horizon-steps", "200",
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE
    assert "horizon" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", "x", "--out", "y", "--frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE


def test_train_eval_roundtrip(tmp_path, charged_file):
    out = tmp_path / "run"
    args = ["train", "--data", charged_file, "--out", str(out), "--channels", "1", "2", "--epochs", "2",
            "--layers", "2", "--hidden", "8", "--velocity", "--clip-norm", "1.0"]
    assert cli.main(args) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["channels"] == [1, 2] and resolved["train"]["clip_norm"] == 1.0
    reports = {m: json.loads((out / f"m{m}-seed0" / "report.json").read_text()) for m in (1, 2)}
    base = MCEGNNConfig(n_layers=2, hidden=8, in_node=1, edge_dim=1, velocity_mode=True)
    delta = param_count_formula(MCEGNNConfig(**dict(base.to_dict(), channels=2))) - param_count_formula(base)
    assert reports[2]["params"] - reports[1]["params"] == delta
    for pre, post in reports[1]["grad_norms"]:
        assert pre >= post
    rows = list(csv.DictReader(open(out / "m1-seed0" / "losses.csv")))
    assert len(rows) == 2 and set(rows[0]) == {"epoch", "train_loss", "val_loss", "epoch_seconds"}

    metric = tmp_path / "metric.json"
    assert cli.main(["eval", "--checkpoint", str(out / "m2-seed0" / "checkpoint.mcc"), "--data", charged_file,
                     "--out", str(metric)]) == 0
    assert json.loads(metric.read_text())["value"] == pytest.approx(reports[2]["test_metric"], rel=1e-12)

    # rerun reproduces the metric exactly
    assert cli.main(args[:4] + [str(tmp_path / "run2")] + args[5:]) == 0
    again = json.loads((tmp_path / "run2" / "m2-seed0" / "report.json").read_text())
    assert again["test_metric"] == reports[2]["test_metric"]
    assert again["train_loss"] == reports[2]["train_loss"]


def test_train_errors(tmp_path, charged_file):
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == cli.EXIT_RUNTIME
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hiden": 3}}))
    assert cli.main(["train", "--data", charged_file, "--out", str(tmp_path / "r"), "--config", str(bad)]) == 1
    bad.write_text(json.dumps({"optimizer": {}}))
    assert cli.main(["train", "--data", charged_file, "--out", str(tmp_path / "r"), "--config", str(bad)]) == 1


def test_eval_incompatible(tmp_path, charged_file):
    out = tmp_path / "o.mcc"
    cli.main(["gen-data", "orbital", "--systems", "1", "--n-steps", "600", "--horizon-steps", "100",
              "--stride-steps", "100", "--out", str(out)])
    run = tmp_path / "run"
    cli.main(["train", "--data", charged_file, "--out", str(run), "--epochs", "1", "--layers", "1", "--hidden", "4"])
    rc = cli.main(["eval", "--checkpoint", str(run / "m1-seed0" / "checkpoint.mcc"), "--data", str(out)])
    assert rc == cli.EXIT_RUNTIME
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", charged_file]) == cli.EXIT_RUNTIME


def test_equicheck_exit_codes(tmp_path):
    report = tmp_path / "eq.json"
    rc = cli.main(["equicheck", "--channels", "3", "--layers", "2", "--hidden", "8", "--velocity", "--trials", "3",
                   "--out", str(report)])
    assert rc == 0
    props = {r["property"] for r in json.loads(report.read_text())}
    assert {"rotation", "reflection", "translation", "permutation", "gradients", "mutation_coordinate_leak"} <= props
    rc = cli.main(["equicheck", "--channels", "2", "--layers", "2", "--hidden", "8", "--trials", "3", "--tol", "-1"])
    assert rc == cli.EXIT_PROPERTY


def test_bench_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--channels", "1", "2", "--repeats", "3", "--warmup", "1", "--batch-size", "4",
                     "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == list(cli.BENCH_COLUMNS)
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert int(rows[1][3]) == 134020


def test_presets_validate():
    for preset in cli.PRESETS.values():
        cli.validate_experiment(preset)
    with pytest.raises(cli.UsageError):
        cli.validate_experiment({"data": {"task": "charged", "particle": 3}})
