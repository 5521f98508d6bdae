"""
Command-line surface: generate, train, eval, ablate.

Usage example:
    python -m coda_lab generate --out data/tail5
    python -m coda_lab train --data data/tail5 --out runs/coda --mode coda
    python -m coda_lab eval --checkpoint runs/coda/best_model_1.ckpt --checkpoint runs/coda/best_model_2.ckpt --data data/tail5
    python -m coda_lab ablate --data data/tail5 --out runs/ablation --seeds 1,2,3,4,5
"""

import csv
import json
import logging
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from functools import cache
from pathlib import Path

import click
import numpy as np

from coda_lab import __version__, formats, settings, synthdata
from coda_lab.config import (
    Mode,
    TrainConfig,
    config_echo,
    format_threshold,
    load_config,
    parse_mode,
    parse_threshold,
)
from coda_lab.core_types import DatasetSplit
from coda_lab.cotrain import (
    IterationRecord,
    csv_header,
    evaluate,
    minority_iou,
    pseudo_label_quality,
    train,
)
from coda_lab.exceptions import (
    CodaError,
    ConfigError,
    EmptyEvaluationError,
    NonFiniteError,
    NonFiniteLossError,
)

logger = logging.getLogger(__name__)


@contextmanager
def reported_errors():
    """
    Turn lab and IO errors into a click error: message on stderr, exit code 1.
    """
    try:
        yield
    except (CodaError, OSError) as ex:
        logger.debug("Command failed", exc_info=True)
        raise click.ClickException(str(ex)) from ex


def read_threads() -> int:
    raw = os.environ.get(settings.THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError([settings.THREADS_ENV], [f"{settings.THREADS_ENV}: not an integer: {raw!r}"])
    return max(1, threads)


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(token) for token in text.split(",") if token.strip()]
    except ValueError as ex:
        raise ConfigError(["seeds"], [f"seeds: {ex}"])
    if not seeds:
        raise ConfigError(["seeds"], ["seeds: at least one seed is needed"])
    return seeds


def _now() -> str:
    return datetime.now().isoformat(timespec="seconds")


@cache
def source_revision() -> str:
    """
    Git commit of the package sources, or the package version outside a checkout.
    """
    try:
        commit = subprocess.check_output(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, stderr=subprocess.DEVNULL
        )
    except (OSError, subprocess.CalledProcessError):
        return f"coda_lab {__version__}"
    return commit.decode().strip()


@dataclass
class RunManifest:
    """
    What a command ran on and what it wrote, saved as `run.json`.
    """

    command: str
    revision: str = field(default_factory=source_revision)
    started: str = field(default_factory=_now)
    finished: str | None = None
    data: str | None = None
    config: dict | None = None
    outputs: list[str] = field(default_factory=list)
    status: str = "running"
    wall_clock_seconds: float | None = None

    def finish(self, status: str, started: float, path: Path):
        self.status = status
        self.finished = _now()
        self.wall_clock_seconds = time.perf_counter() - started
        self.write(path)

    def write(self, path: Path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def _format_cell(value) -> str:
    return "" if value is None else repr(float(value))


def run_training(
    config: TrainConfig,
    split: DatasetSplit,
    out_dir: Path,
    data: Path | None = None,
    progress: bool = False,
) -> dict:
    """
    Train, write every artifact of the run into `out_dir`, return the summary.

    The iteration CSV is flushed per record, so an aborted run keeps its log.

    :param data: dataset manifest the split was loaded from, recorded in `run.json`
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command="train", data=None if data is None else str(data), config=config_echo(config))
    started = time.perf_counter()

    with open(out_dir / "iterations.csv", "w", newline="") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(csv_header(split.classes))

        def on_record(record: IterationRecord):
            writer.writerow(record.csv_row())
            log_file.flush()

        try:
            result = train(config, split, on_record=on_record, progress=progress)
        except NonFiniteLossError as ex:
            writer.writerow(ex.record.csv_row())
            manifest.finish("aborted", started, out_dir / "run.json")
            logger.error("⛔ Training aborted at iteration %d", ex.record.iteration)
            raise
        except NonFiniteError as ex:
            manifest.finish("aborted", started, out_dir / "run.json")
            logger.error("⛔ Training aborted: %s", ex)
            raise

    outputs = []
    for m, (model, best, alignment) in enumerate(
        zip(result.models, result.best.models, result.alignments), start=1
    ):
        formats.write_segmenter(out_dir / f"model_{m}.ckpt", model)
        formats.write_segmenter(out_dir / f"best_model_{m}.ckpt", best)
        formats.write_alignment(out_dir / f"alignment_{m}.txt", alignment)
        outputs += [f"model_{m}.ckpt", f"best_model_{m}.ckpt", f"alignment_{m}.txt"]

    summary = {
        "config": config_echo(config),
        "best_miou": result.best.miou,
        "best_iteration": result.best.iteration,
        "minority_classes": list(result.minority),
        "fallback_counts": [alignment.fallback_count for alignment in result.alignments],
        "loss_history": [
            {"iter": record.iteration, "L_s": record.loss_s, "L_u": record.loss_u} for record in result.records
        ],
    }
    if split.evaluation:
        report = evaluate(result.best.models, split.evaluation, config.absent_class)
        summary["report"] = report.as_dict()
        summary["minority_IoU"] = minority_iou(report.best, result.minority)
        summary["pseudo_label_quality"] = pseudo_label_quality(
            result.best.models, result.best.alignments, split.evaluation
        )
    summary["wall_clock_seconds"] = time.perf_counter() - started
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    manifest.outputs = sorted([*outputs, "iterations.csv", "summary.json"])
    manifest.finish("done", started, out_dir / "run.json")
    return summary


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool):
    """
    Class-wise distribution alignment co-training lab.
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=settings.LOG_FORMAT)


@cli.command()
@click.option("--config", "spec_path", type=click.Path(exists=True, dir_okay=False), help="Scene spec file.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--images", type=int, default=settings.DEFAULT_IMAGES, show_default=True)
@click.option("--labeled-fraction", type=float, default=None, help="Override the scene's labeled share.")
def generate(spec_path: str | None, out_dir: str, images: int, labeled_fraction: float | None):
    """
    Generate a synthetic dataset directory.
    """
    with reported_errors():
        spec = synthdata.load_scene_spec(Path(spec_path)) if spec_path else synthdata.tail5()
        if labeled_fraction is not None:
            spec = replace(spec, labeled_fraction=labeled_fraction)
        split = synthdata.generate(spec, images)
        manifest_path = synthdata.save_dataset(split, spec, Path(out_dir))
    click.echo(f"🗂️ Dataset written: {manifest_path}")


def _train_config(config_path: str | None, mode: str | None, threshold: str | None) -> TrainConfig:
    config = load_config(Path(config_path)) if config_path else TrainConfig()
    changes = {}
    problems = {}
    if mode is not None:
        try:
            changes["mode"] = parse_mode(mode)
        except ValueError as ex:
            problems["mode"] = str(ex)
    if threshold is not None:
        try:
            changes["threshold"] = parse_threshold(threshold)
        except ValueError as ex:
            problems["threshold"] = str(ex)
    if problems:
        raise ConfigError(list(problems), [f"{key}: {msg}" for key, msg in problems.items()])
    return config.replace(**changes)


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--mode", default=None, help="Training mode, e.g. cotrain+CoDA+OE or supervised_only.")
@click.option("--threshold", default=None, help="'dynamic' or a static value in [0, 1].")
def train_command(config_path: str | None, data_dir: str, out_dir: str, mode: str | None, threshold: str | None):
    """
    Co-train two segmenters on a dataset directory.
    """
    with reported_errors():
        config = _train_config(config_path, mode, threshold)
        split = synthdata.load_dataset(Path(data_dir))
        summary = run_training(
            config, split, Path(out_dir), data=Path(data_dir) / settings.DATASET_MANIFEST, progress=True
        )
    click.echo(f"✅ Best mIoU {summary['best_miou']} at iteration {summary['best_iteration']}, see {out_dir}")


@cli.command("eval")
@click.option(
    "--checkpoint", "checkpoints", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True
)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def eval_command(checkpoints: tuple[str, ...], data_dir: str, out_path: str | None, config_path: str | None):
    """
    Metric report of checkpoints on a dataset's evaluation split.
    """
    with reported_errors():
        config = load_config(Path(config_path)) if config_path else TrainConfig()
        models = [formats.read_segmenter(Path(path)) for path in checkpoints]
        split = synthdata.load_dataset(Path(data_dir))
        report = evaluate(models, split.evaluation, config.absent_class)
        text = json.dumps(report.as_dict(), indent=2) + "\n"
        if out_path:
            Path(out_path).write_text(text)
    if out_path:
        click.echo(f"📊 Report written: {out_path}")
    else:
        click.echo(text, nl=False)


@dataclass(frozen=True)
class AblationRun:
    mode: Mode
    threshold: float | None
    seed: int
    full_reference: bool = False

    @property
    def threshold_label(self) -> str:
        if self.mode.over_expectation:
            return format_threshold(self.threshold)
        return "none"

    @property
    def mode_label(self) -> str:
        return "full_reference" if self.full_reference else self.mode.value

    @property
    def name(self) -> str:
        return f"{self.mode_label}_{self.threshold_label}_seed{self.seed}".replace("+", "-")


def ablation_runs(seeds: list[int], full_reference: bool = False) -> list[AblationRun]:
    """
    Mode matrix at the dynamic threshold, then the threshold sweep for full Co-DA, for every seed.
    """
    runs = []
    for seed in seeds:
        for name in settings.ABLATION_MODES:
            mode = Mode(name)
            if mode is Mode.CODA:
                runs += [AblationRun(mode, threshold, seed) for threshold in settings.THRESHOLD_GRID]
            else:
                runs.append(AblationRun(mode, None, seed))
        if full_reference:
            runs.append(AblationRun(Mode.SUPERVISED_ONLY, None, seed, full_reference=True))
    return runs


def run_ablation(
    run: AblationRun, base: TrainConfig, split: DatasetSplit, out_dir: Path, data: Path | None = None
) -> dict:
    """
    Train one ablation run into `out_dir / run.name` and return its table row.

    :raise EmptyEvaluationError: if the split holds no evaluation images
    """
    config = base.replace(
        mode=run.mode, threshold=run.threshold, seed_1=2 * run.seed, seed_2=2 * run.seed + 1, data_seed=run.seed
    )
    if not split.evaluation:
        raise EmptyEvaluationError()
    if run.full_reference:
        split = synthdata.fully_labeled(split)
    summary = run_training(config, split, Path(out_dir) / run.name, data=data)
    return {
        "mode": run.mode_label,
        "threshold": run.threshold_label,
        "seed": str(run.seed),
        "mIoU": summary["report"]["best"]["miou"],
        "minority_IoU": summary["minority_IoU"],
    }


def _ablation_task(task: tuple[AblationRun, TrainConfig, str, str]) -> dict:
    run, base, data_dir, out_dir = task
    split = synthdata.load_dataset(Path(data_dir))
    return run_ablation(run, base, split, Path(out_dir), data=Path(data_dir) / settings.DATASET_MANIFEST)


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """
    Mean and standard deviation (population) per (mode, threshold), in first-seen order.
    """
    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["mode"], row["threshold"]), []).append(row)

    aggregates = []
    for (mode, threshold), members in groups.items():
        for stat, reduce in (("mean", np.mean), ("std", np.std)):
            aggregate = {"mode": mode, "threshold": threshold, "seed": stat}
            for column in ("mIoU", "minority_IoU"):
                values = [row[column] for row in members if row[column] is not None]
                aggregate[column] = float(reduce(values)) if values else None
            aggregates.append(aggregate)
    return aggregates


@cli.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seeds", default="1,2,3,4,5", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--full-reference", is_flag=True, help="Add a supervised run with every training image labeled.")
def ablate(data_dir: str, out_dir: str, seeds: str, config_path: str | None, full_reference: bool):
    """
    Mode matrix and threshold sweep over several seeds, written as ablation.csv.
    """
    with reported_errors():
        base = load_config(Path(config_path)) if config_path else TrainConfig()
        runs = ablation_runs(parse_seeds(seeds), full_reference)
        threads = read_threads()
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(
            command="ablate", data=str(Path(data_dir) / settings.DATASET_MANIFEST), config=config_echo(base)
        )
        started = time.perf_counter()

        logger.info("🚀 %d ablation runs on %d process(es)", len(runs), threads)
        tasks = [(run, base, data_dir, out_dir) for run in runs]
        if threads == 1:
            rows = [_ablation_task(task) for task in tasks]
        else:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(_ablation_task, tasks))

        table_path = Path(out_dir) / "ablation.csv"
        with open(table_path, "w", newline="") as table:
            writer = csv.writer(table)
            writer.writerow(settings.ABLATION_COLUMNS)
            for row in rows + aggregate_rows(rows):
                writer.writerow(
                    [row["mode"], row["threshold"], row["seed"], _format_cell(row["mIoU"]), _format_cell(row["minority_IoU"])]
                )

        manifest.outputs = ["ablation.csv", *(run.name for run in runs)]
        manifest.finish("done", started, Path(out_dir) / "run.json")
    click.echo(f"📊 Ablation table written: {table_path}")
