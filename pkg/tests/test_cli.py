import csv
import json

import pytest
from click.testing import CliRunner

from coda_lab import cotrain, settings
from coda_lab.cli import ablation_runs, aggregate_rows, cli, parse_seeds
from coda_lab.config import Mode, echo_text, load_config, parse_config
from coda_lab.exceptions import ConfigError, NonFiniteError

SCENE = "height = 16\nwidth = 16\nlabeled_fraction = 0.25\nseed = 3\n"
TINY = "max_iterations = 4\nlabeled_batch = 32\nunlabeled_batch = 32\neval_every = 2\nhidden = 8\n"


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def files(tmp_path):
    (tmp_path / "scene.cfg").write_text(SCENE)
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


@pytest.fixture
def dataset(runner, files):
    out = files / "data"
    result = runner.invoke(cli, ["generate", "--config", str(files / "scene.cfg"), "--out", str(out), "--images", "10"])
    assert result.exit_code == 0, result.output
    return out


def test_generate_writes_every_image(runner, files, dataset):
    assert len(list((dataset / settings.IMAGES_DIR).iterdir())) == 10
    assert len(list((dataset / settings.LABELS_DIR).iterdir())) == 10
    manifest = json.loads((dataset / settings.DATASET_MANIFEST).read_text())
    assert len(manifest["split"]["labeled"]) == 2

    again = files / "again"
    runner.invoke(cli, ["generate", "--config", str(files / "scene.cfg"), "--out", str(again), "--images", "10"])
    for path in dataset.rglob("*.*"):
        assert (again / path.relative_to(dataset)).read_bytes() == path.read_bytes()


def test_train_writes_run_artifacts(runner, files, dataset):
    out = files / "run"
    result = runner.invoke(
        cli, ["train", "--config", str(files / "tiny.cfg"), "--data", str(dataset), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    for name in ("iterations.csv", "summary.json", "run.json", "model_1.ckpt", "best_model_2.ckpt", "alignment_1.txt"):
        assert (out / name).exists(), name

    with open(out / "iterations.csv", newline="") as log_file:
        rows = list(csv.reader(log_file))
    assert rows[0][:3] == ["iter", "L_s", "L_u"]
    assert len(rows) == 5
    assert all(len(row) == len(rows[0]) for row in rows)

    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["report"]["best"]["per_class"]) == 5
    assert summary["report"]["better"] in (1, 2)
    assert json.loads((out / "run.json").read_text())["status"] == "done"


def test_run_manifest_echoes_a_config_that_parses_back(runner, files, dataset):
    out = files / "run"
    result = runner.invoke(
        cli,
        ["train", "--config", str(files / "tiny.cfg"), "--data", str(dataset), "--out", str(out), "--threshold", "0.7"],
    )
    assert result.exit_code == 0, result.output

    manifest = json.loads((out / "run.json").read_text())
    assert parse_config(echo_text(manifest["config"])) == load_config(files / "tiny.cfg").replace(threshold=0.7)
    assert manifest["data"] == str(dataset / settings.DATASET_MANIFEST)
    assert manifest["revision"]
    assert manifest["finished"] >= manifest["started"]
    assert "summary.json" in manifest["outputs"]


def test_non_finite_gradients_abort_the_run(runner, files, dataset, monkeypatch):
    def broken(state, grads, lr, momentum):
        raise NonFiniteError("gradients", ["w1"])

    monkeypatch.setattr(cotrain, "sgd_step", broken)
    out = files / "broken"
    result = runner.invoke(
        cli, ["train", "--config", str(files / "tiny.cfg"), "--data", str(dataset), "--out", str(out)]
    )
    assert result.exit_code == 1
    assert "w1" in result.output

    manifest = json.loads((out / "run.json").read_text())
    assert manifest["status"] == "aborted"
    assert manifest["finished"] is not None
    assert not (out / "summary.json").exists()


def test_supervised_only_has_no_unlabeled_loss(runner, files, dataset):
    out = files / "supervised"
    result = runner.invoke(
        cli,
        ["train", "--config", str(files / "tiny.cfg"), "--data", str(dataset), "--out", str(out), "--mode", "supervised_only"],
    )
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "summary.json").read_text())
    assert all(entry["L_u"] is None for entry in summary["loss_history"])


def test_bad_config_key_fails(runner, files, dataset):
    (files / "bad.cfg").write_text("learning_rate = 0.1\n")
    result = runner.invoke(
        cli, ["train", "--config", str(files / "bad.cfg"), "--data", str(dataset), "--out", str(files / "x")]
    )
    assert result.exit_code == 1
    assert "learning_rate" in result.output


def test_bad_threshold_fails(runner, files, dataset):
    result = runner.invoke(
        cli, ["train", "--data", str(dataset), "--out", str(files / "x"), "--threshold", "1.5"]
    )
    assert result.exit_code == 1
    assert "threshold" in result.output


def test_eval_reports_both_checkpoints(runner, files, dataset):
    out = files / "run"
    runner.invoke(cli, ["train", "--config", str(files / "tiny.cfg"), "--data", str(dataset), "--out", str(out)])
    result = runner.invoke(
        cli,
        [
            "eval",
            "--checkpoint",
            str(out / "best_model_1.ckpt"),
            "--checkpoint",
            str(out / "best_model_2.ckpt"),
            "--data",
            str(dataset),
            "--out",
            str(files / "report.json"),
        ],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((files / "report.json").read_text())
    assert {"model_1", "model_2", "better", "best"} <= set(report)

    (files / "three.cfg").write_text(SCENE + "classes = 3\n")
    three = files / "three"
    generated = runner.invoke(cli, ["generate", "--config", str(files / "three.cfg"), "--out", str(three), "--images", "10"])
    assert generated.exit_code == 0, generated.output
    mismatch = runner.invoke(cli, ["eval", "--checkpoint", str(out / "model_1.ckpt"), "--data", str(three)])
    assert mismatch.exit_code == 1


def test_ablate_writes_table(runner, files, dataset):
    out = files / "ablation"
    result = runner.invoke(
        cli,
        ["ablate", "--data", str(dataset), "--out", str(out), "--seeds", "1", "--config", str(files / "tiny.cfg")],
        env={settings.THREADS_ENV: "1"},
    )
    assert result.exit_code == 0, result.output
    with open(out / "ablation.csv", newline="") as table:
        rows = list(csv.reader(table))
    assert rows[0] == settings.ABLATION_COLUMNS
    runs = [row for row in rows[1:] if row[2] == "1"]
    assert len(runs) == 10
    assert len(rows) == 1 + 10 + 20
    assert ["cotrain", "none"] == runs[0][:2]
    assert ["cotrain+CoDA+OE", "dynamic"] == runs[-1][:2]


def test_ablate_rejects_bad_thread_count(runner, files, dataset):
    result = runner.invoke(
        cli, ["ablate", "--data", str(dataset), "--out", str(files / "a")], env={settings.THREADS_ENV: "many"}
    )
    assert result.exit_code == 1
    assert settings.THREADS_ENV in result.output


def test_ablation_run_matrix():
    runs = ablation_runs([1, 2], full_reference=True)
    assert len(runs) == 2 * 11
    coda = [run for run in runs if run.mode is Mode.CODA and run.seed == 1]
    assert [run.threshold for run in coda] == settings.THRESHOLD_GRID
    assert runs[10].mode_label == "full_reference"
    assert len({run.name for run in runs}) == len(runs)


def test_aggregate_rows_uses_population_std():
    rows = [
        {"mode": "cotrain", "threshold": "none", "seed": "1", "mIoU": 0.2, "minority_IoU": None},
        {"mode": "cotrain", "threshold": "none", "seed": "2", "mIoU": 0.4, "minority_IoU": None},
    ]
    mean, std = aggregate_rows(rows)
    assert mean["mIoU"] == pytest.approx(0.3)
    assert std["mIoU"] == pytest.approx(0.1)
    assert mean["minority_IoU"] is None


def test_parse_seeds():
    assert parse_seeds("1, 2,3") == [1, 2, 3]
    with pytest.raises(ConfigError):
        parse_seeds("one")
