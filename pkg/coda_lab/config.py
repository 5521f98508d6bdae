"""
Run configuration: `TrainConfig` and the flat `key = value` file format.
"""

import dataclasses
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from coda_lab import settings
from coda_lab.exceptions import ConfigError


class Mode(str, Enum):
    """
    Training modes, one per ablation row.
    """

    SUPERVISED_ONLY = "supervised_only"
    COTRAIN = "cotrain"
    COTRAIN_NAIVE_DA = "cotrain+naiveDA"
    COTRAIN_OE = "cotrain+OE"
    COTRAIN_CODA = "cotrain+CoDA"
    CODA = "cotrain+CoDA+OE"

    @property
    def unsupervised(self) -> bool:
        return self is not Mode.SUPERVISED_ONLY

    @property
    def class_alignment(self) -> bool:
        return self in (Mode.COTRAIN_CODA, Mode.CODA)

    @property
    def naive_alignment(self) -> bool:
        return self is Mode.COTRAIN_NAIVE_DA

    @property
    def over_expectation(self) -> bool:
        return self in (Mode.COTRAIN_OE, Mode.CODA)


MODE_ALIASES = {
    "supervised": Mode.SUPERVISED_ONLY,
    "cps": Mode.COTRAIN,
    "naive_da": Mode.COTRAIN_NAIVE_DA,
    "oe": Mode.COTRAIN_OE,
    "coda_no_oe": Mode.COTRAIN_CODA,
    "coda": Mode.CODA,
    "full": Mode.CODA,
}


def parse_mode(text: str) -> Mode:
    text = text.strip()
    if text in MODE_ALIASES:
        return MODE_ALIASES[text]
    return Mode(text)


def parse_threshold(text: str) -> float | None:
    """
    "dynamic" → None, anything else must be a number in [0, 1].
    """
    text = text.strip().lower()
    if text == "dynamic":
        return None
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"static threshold must be in [0, 1], got {value}")
    return value


def format_threshold(threshold: float | None) -> str:
    return "dynamic" if threshold is None else repr(float(threshold))


@dataclass(frozen=True)
class TrainConfig:
    seed_1: int = 1
    seed_2: int = 2
    data_seed: int = 0
    alpha: float = settings.DEFAULT_ALPHA
    lr: float = settings.DEFAULT_LR
    momentum: float = settings.DEFAULT_MOMENTUM
    lr_schedule: str = "poly"
    lr_power: float = settings.DEFAULT_LR_POWER
    labeled_batch: int = settings.DEFAULT_LABELED_BATCH
    unlabeled_batch: int = settings.DEFAULT_UNLABELED_BATCH
    max_iterations: int = settings.DEFAULT_MAX_ITERATIONS
    mode: Mode = Mode.CODA
    threshold: float | None = None
    confidence_source: str = "raw"
    unsup_weight: float = 1.0
    soft_targets: bool = False
    hidden: int = settings.DEFAULT_HIDDEN
    eval_every: int = settings.DEFAULT_EVAL_EVERY
    augment: bool = True
    aug_noise: float = settings.DEFAULT_AUG_NOISE
    freeze_alignment: bool = False
    absent_class: str = "one"

    def __post_init__(self):
        problems = validate(self)
        if problems:
            raise ConfigError(list(problems), [f"{key}: {msg}" for key, msg in problems.items()])

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def validate(config: TrainConfig) -> dict[str, str]:
    problems = {}
    if config.max_iterations <= 0:
        problems["max_iterations"] = "must be > 0"
    if config.labeled_batch <= 0:
        problems["labeled_batch"] = "must be > 0"
    if config.unlabeled_batch <= 0:
        problems["unlabeled_batch"] = "must be > 0"
    if not 0.0 < config.alpha < 1.0:
        problems["alpha"] = "must be in (0, 1)"
    if config.threshold is not None and not 0.0 <= config.threshold <= 1.0:
        problems["threshold"] = "static threshold must be in [0, 1]"
    if config.lr_schedule not in ("poly", "exponential", "constant"):
        problems["lr_schedule"] = "must be poly, exponential or constant"
    if config.confidence_source not in ("raw", "aligned"):
        problems["confidence_source"] = "must be raw or aligned"
    if config.absent_class not in ("one", "skip"):
        problems["absent_class"] = "must be one or skip"
    if config.eval_every <= 0:
        problems["eval_every"] = "must be > 0"
    if config.hidden <= 0:
        problems["hidden"] = "must be > 0"
    return problems


def _parse_bool(text: str) -> bool:
    text = text.strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {
    int: int,
    float: float,
    str: str.strip,
    bool: _parse_bool,
}


def _field_parser(field: dataclasses.Field):
    if field.name == "mode":
        return parse_mode
    if field.name == "threshold":
        return parse_threshold
    return _PARSERS[field.type]


def read_pairs(text: str) -> tuple[dict[str, str], dict[str, str]]:
    """
    Split `key = value` lines. Blank lines and `#` comments are skipped.

    :return: pairs, and problems for malformed lines keyed by "line N"
    """
    pairs = {}
    problems = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            problems[f"line {number}"] = "expected `key = value`"
            continue
        pairs[key.strip()] = value.strip()
    return pairs, problems


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """
    Parse a config file body. Every bad key is reported at once.

    :param text: `key = value` lines
    :param base: defaults to override, `TrainConfig()` if omitted
    :raise ConfigError: listing every offending key
    """
    pairs, problems = read_pairs(text)
    fields = {field.name: field for field in dataclasses.fields(TrainConfig)}

    values = {}
    for key, raw in pairs.items():
        if key not in fields:
            problems[key] = "unknown key"
            continue
        try:
            values[key] = _field_parser(fields[key])(raw)
        except ValueError as ex:
            problems[key] = str(ex)

    if problems:
        raise ConfigError(list(problems), [f"{key}: {msg}" for key, msg in problems.items()])
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path: Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def _format_value(name: str, value) -> str:
    if name == "threshold":
        return format_threshold(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_text(echo: dict) -> str:
    """
    Config file body for a config echo, e.g. the `config` entry of `run.json`.
    """
    return "".join(f"{name} = {_format_value(name, value)}\n" for name, value in echo.items())


def dump_config(config: TrainConfig) -> str:
    return echo_text(config_echo(config))


def config_echo(config: TrainConfig) -> dict:
    """
    JSON-friendly view of a config.
    """
    echo = {}
    for field in dataclasses.fields(config):
        value = getattr(config, field.name)
        echo[field.name] = value.value if isinstance(value, Enum) else value
    return echo
