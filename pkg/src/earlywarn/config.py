"""Experiment configuration: TOML files with a closed key set and task presets."""

from __future__ import annotations

import copy
import enum
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .detectors import DetectorKind
from .evaluation import DetectorSetup, MatchConfig
from .events import LayeredEventSpec, parse_event_spec
from .learners import GbtParams, IsoForestParams
from .resampling import Strategy
from .series import ConfigurationError, WindowConfig
from .synthgen import SynthParams, ahe_like, te_like


class Task(str, enum.Enum):
    AHE_LIKE = "AHE_LIKE"
    TE_LIKE = "TE_LIKE"
    CUSTOM = "CUSTOM"


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


_TOP = {"task", "seed", "threads", "out_dir"}
_SECTIONS: dict[str, set[str]] = {
    "data": {"input", "outlier_low", "outlier_high"},
    "synth": _field_names(SynthParams) - {"rng_seed"},
    "window": _field_names(WindowConfig),
    "events": {"main", "pre"},
    "detectors": {"kinds"},
    "resampling": {"CL", "LL"},
    "gbt": _field_names(GbtParams) - {"rng_seed"},
    "regression": _field_names(GbtParams) - {"rng_seed"},
    "iforest": _field_names(IsoForestParams) - {"rng_seed"},
    "cv": {"folds", "repeats"},
    "match": _field_names(MatchConfig),
}

_BASE: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "out_dir": "out",
    "data": {"input": "", "outlier_low": 10.0, "outlier_high": 200.0},
    "synth": {},
    "window": {"ow_minutes": 60, "ww_minutes": 60, "tw_minutes": 30, "train_stride_minutes": 30, "eval_stride_minutes": 1},
    "detectors": {"kinds": ["AH", "CL", "LL", "RG", "IF"]},
    "gbt": {"n_trees": 200, "max_depth": 4, "learning_rate": 0.1, "min_leaf": 20, "subsample_ratio": 0.8},
    "regression": {"n_trees": 50, "max_depth": 4, "learning_rate": 0.1, "min_leaf": 20, "subsample_ratio": 0.8},
    "iforest": {"n_trees": 100, "subsample_size": 256},
    "cv": {"folds": 10, "repeats": 5},
    "match": {"credit_window_minutes": 60, "active_window_minutes": 60},
}

PRESETS: dict[Task, dict[str, Any]] = {
    Task.AHE_LIKE: {
        "events": {"main": "90% of MAP below 60", "pre": "45% of MAP below 60"},
        "resampling": {"CL": "RO", "LL": "RU"},
    },
    Task.TE_LIKE: {
        "events": {"main": "90% of HR above 100", "pre": "45% of HR above 100"},
        "resampling": {"CL": "SMOTE", "LL": "SMOTE"},
    },
    Task.CUSTOM: {"resampling": {"CL": "NR", "LL": "NR"}},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def check_keys(raw: Mapping) -> None:
    unknown = [k for k in raw if k not in _TOP and k not in _SECTIONS]
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    for name, allowed in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, Mapping):
            raise ConfigurationError(f"[{name}] must be a table")
        bad = sorted(set(section) - allowed)
        if bad:
            raise ConfigurationError(f"unknown keys in [{name}]: {bad}; allowed: {sorted(allowed)}")


@dataclass(frozen=True)
class ExperimentConfig:
    task: Task
    seed: int
    threads: int
    out_dir: Path
    input: Path | None
    outlier_range: tuple[float, float]
    synth: SynthParams
    window: WindowConfig
    spec: LayeredEventSpec
    setup: DetectorSetup
    folds: int
    repeats: int
    match: MatchConfig
    resolved: dict

    def resolved_json(self) -> str:
        return json.dumps(self.resolved, indent=1, sort_keys=True) + "\n"


def resolve(raw: Mapping, overrides: Mapping | None = None) -> ExperimentConfig:
    """Validate ``raw`` (parsed TOML), apply flag overrides and build typed settings."""
    check_keys(raw)
    if overrides:
        check_keys(overrides)
    task_name = (overrides or {}).get("task", raw.get("task", "AHE_LIKE"))
    try:
        task = Task(str(task_name).upper())
    except ValueError:
        raise ConfigurationError(f"task must be one of {[t.value for t in Task]}, got {task_name!r}") from None
    merged = _merge(_merge(_merge(_BASE, PRESETS[task]), raw), overrides or {})
    merged["task"] = task.value
    if "events" not in merged:
        raise ConfigurationError("CUSTOM tasks must define [events] main and pre")
    if task is Task.CUSTOM and not merged["data"]["input"]:
        raise ConfigurationError("CUSTOM tasks need [data] input (no synthetic preset)")

    try:
        seed = int(merged["seed"])
        threads = int(merged["threads"])
        if threads < 1:
            raise ConfigurationError("threads must be >= 1")
        window = WindowConfig(**merged["window"])
        main = parse_event_spec(merged["events"]["main"], window_minutes=window.tw_minutes)
        pre = parse_event_spec(merged["events"]["pre"], signal=main.signal, window_minutes=window.tw_minutes)
        spec = LayeredEventSpec(main, pre)
        preset = te_like if task is Task.TE_LIKE else ahe_like
        synth = preset(**{**merged["synth"], "rng_seed": seed})
        kinds = tuple(DetectorKind(str(k).upper()) for k in merged["detectors"]["kinds"])
        if not kinds or len(set(kinds)) != len(kinds):
            raise ConfigurationError("[detectors] kinds must be a non-empty list without repeats")
        resampling = {k: Strategy(str(v).upper()) for k, v in merged["resampling"].items()}
        setup = DetectorSetup(
            kinds=kinds,
            gbt=GbtParams(**merged["gbt"]),
            rg=GbtParams(**merged["regression"]),
            iforest=IsoForestParams(**merged["iforest"]),
            resampling={k.value if hasattr(k, "value") else k: v for k, v in resampling.items()},
        )
        match = MatchConfig(**merged["match"])
        folds, repeats = int(merged["cv"]["folds"]), int(merged["cv"]["repeats"])
        if folds < 3 or repeats < 1:
            raise ConfigurationError("cv needs folds >= 3 and repeats >= 1")
        lo, hi = float(merged["data"]["outlier_low"]), float(merged["data"]["outlier_high"])
        if not lo < hi:
            raise ConfigurationError("outlier_low must be below outlier_high")
    except ConfigurationError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc

    if main.signal is not synth.target and not merged["data"]["input"]:
        raise ConfigurationError(
            f"event signal {main.signal.value} differs from the synthetic target {synth.target.value}"
        )
    resolved = copy.deepcopy(merged)
    resolved["synth"] = {k: v for k, v in synth.to_dict().items() if k != "rng_seed"}
    return ExperimentConfig(
        task=task,
        seed=seed,
        threads=threads,
        out_dir=Path(merged["out_dir"]),
        input=Path(merged["data"]["input"]) if merged["data"]["input"] else None,
        outlier_range=(lo, hi),
        synth=synth,
        window=window,
        spec=spec,
        setup=setup,
        folds=folds,
        repeats=repeats,
        match=match,
        resolved=resolved,
    )


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``ahe.toml`` or ``te.toml``)."""
    p = Path(__file__).parent / "configs" / name
    if not p.exists():
        raise ConfigurationError(f"no bundled config {name!r}")
    return p


def parse_assignment(text: str) -> dict:
    """``section.key=value`` with a TOML value, e.g. ``cv.repeats=1`` or ``events.pre='50% below 65'``."""
    if "=" not in text:
        raise ConfigurationError(f"--set expects KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    parts = key.strip().split(".")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = parsed
    return out
