"""Experiment configuration: one structured JSON format for every experiment.

Configs round-trip exactly (parse -> serialize -> parse is the identity on the
canonical form), unknown keys are rejected by name, and grid divisibility is
validated before any computation starts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError

EXPERIMENT_KINDS = (
    "simulate",
    "converge-lemma31",
    "crossterm-lemma41",
    "mp-scan",
    "lq-solve",
    "lq-verify",
    "adjoint-oracle",
)

#: Problems whose expansion ladders make sense by default.
_DEFAULT_PROBLEM = {
    "simulate": "lq-benchmark",
    "converge-lemma31": "lq-benchmark-smooth",
    "crossterm-lemma41": "lq-benchmark-smooth",
    "mp-scan": "lq-benchmark",
    "lq-solve": "lq-benchmark",
    "lq-verify": "lq-benchmark",
    "adjoint-oracle": "first-adjoint-oracle",
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown key {sorted(unknown)[0]!r} in {where}")
    return cls(**data)


@dataclass(frozen=True)
class ProblemConfig:
    name: str = "lq-benchmark"
    lq_params: dict | None = None
    coefficients: dict | None = None  # expression strings for custom problems


@dataclass(frozen=True)
class GridConfig:
    steps_per_delay: int = 16


@dataclass(frozen=True)
class SpikeConfig:
    tau: float = 0.25
    width: float = 0.0625
    value: float = 2.0


@dataclass(frozen=True)
class LadderConfig:
    rungs: int = 4
    min_steps_per_spike: int = 8


@dataclass(frozen=True)
class BasisConfig:
    degree: int = 2
    ridge: float = 1e-8


@dataclass(frozen=True)
class PicardSection:
    max_iters: int = 30
    damping: float = 0.5
    tolerance: float = 1e-3


@dataclass(frozen=True)
class ScanConfig:
    n_cells: int = 100
    values: tuple = (-1.0, 1.0, -1.5, 1.5, -2.0, 2.0, -3.0, 3.0)
    seed: int = 7
    control: str | float = "solved"  # "solved" or a constant control value
    expect: str = "pass"  # "pass" or "violation"


@dataclass(frozen=True)
class ChallengerConfig:
    count: int = 20
    seed: int = 2024


@dataclass(frozen=True)
class ToleranceConfig:
    dt_allowance: float = 5.0
    slope_x1: tuple = (0.8, 1.2)
    slope_x2: tuple = (1.7, 2.3)
    lhs_slope: tuple = (0.8, 1.2)
    residual_slope_min: float = 1.0
    oracle_rel_error: float = 0.02


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    seed: int = 20240601
    n_paths: int = 20000
    output_dir: str | None = None
    sample_paths: int = 20
    spike: SpikeConfig = field(default_factory=SpikeConfig)
    ladder: LadderConfig = field(default_factory=LadderConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    picard: PicardSection = field(default_factory=PicardSection)
    scan: ScanConfig = field(default_factory=ScanConfig)
    challengers: ChallengerConfig = field(default_factory=ChallengerConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigurationError(
                f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}"
            )
        if self.n_paths < 1:
            raise ConfigurationError("n_paths must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        # canonical JSON types
        for key in ("scan", "tolerances"):
            for k, v in out[key].items():
                if isinstance(v, tuple):
                    out[key][k] = list(v)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def config_from_dict(data: dict, kind: str | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    data = dict(data)
    file_kind = data.pop("kind", None)
    if kind is not None and file_kind is not None and kind != file_kind:
        raise ConfigurationError(
            f"config kind {file_kind!r} does not match requested experiment {kind!r}"
        )
    resolved = kind or file_kind
    if resolved is None:
        raise ConfigurationError("config is missing the experiment kind")
    sections = {
        "problem": ProblemConfig,
        "grid": GridConfig,
        "spike": SpikeConfig,
        "ladder": LadderConfig,
        "basis": BasisConfig,
        "picard": PicardSection,
        "scan": ScanConfig,
        "challengers": ChallengerConfig,
        "tolerances": ToleranceConfig,
    }
    kwargs: dict = {"kind": resolved}
    for key, value in data.items():
        if key in sections:
            if key in ("scan", "tolerances") and isinstance(value, dict):
                value = {
                    k: tuple(v) if isinstance(v, list) else v for k, v in dict(value).items()
                }
            kwargs[key] = _build(sections[key], value, where=key)
        elif key in ("seed", "n_paths", "output_dir", "sample_paths"):
            kwargs[key] = value
        else:
            raise ConfigurationError(f"unknown key {key!r} in config")
    if "problem" not in kwargs:
        kwargs["problem"] = ProblemConfig(name=_DEFAULT_PROBLEM[resolved])
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from exc


def load_config(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return config_from_dict(data, kind=kind)


def default_config(kind: str) -> ExperimentConfig:
    return config_from_dict({}, kind=kind)


def apply_override(config: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply a ``dotted.key=value`` override; values parse as JSON literals
    with a plain-string fallback."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} must look like KEY=VALUE")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    data = config.to_dict()
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"override {key!r} does not name a config section")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigurationError(f"override {key!r} does not name a config field")
    node[parts[-1]] = value
    return config_from_dict(data)
