"""``earlywarn`` command line: staged, cache-aware, deterministic experiments.

Every stage writes into ``--out`` (or ``out_dir`` from the config) together
with ``resolved_config.json`` and a ``<stage>.json`` manifest recording the
SHA-256 of its inputs. Later stages reuse earlier artifacts when present.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, bundled_config, load_toml, parse_assignment, resolve
from .detectors import detector_from_dict, make_detector, write_alarm_csv
from .evaluation import EvalReport, cv_harness, fold_plan, render_table, score_entities
from .events import label_offsets, parse_event_spec, window_event_flags
from .features import feature_schema, read_feature_cache, write_feature_cache
from .pipeline import EntityData, build_entity_data, ensure_prepared, stack
from .series import EntitySeries, filter_outliers, read_series_csv, window_offsets, write_series_csv
from .synthgen import generate

log = logging.getLogger("earlywarn")

SERIES_CSV = "series.csv"
TRUTH_JSON = "synth_truth.json"
INGESTED_CSV = "ingested.csv"
FEATURE_CACHE = "features.ewfm"
MODELS_DIR = "models"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _manifest(cfg: ExperimentConfig, stage: str, inputs: Sequence[Path], outputs: Sequence[Path], **extra) -> None:
    out = cfg.out_dir
    _write_json(
        out / f"{stage}.json",
        {
            "stage": stage,
            "version": __version__,
            "inputs": {p.name: sha256(p) for p in inputs},
            "outputs": sorted(p.name for p in outputs),
            **extra,
        },
    )


# --- stages ----------------------------------------------------------------


def stage_synth(cfg: ExperimentConfig) -> Path:
    corpus = generate(cfg.synth)
    csv_path, truth = cfg.out_dir / SERIES_CSV, cfg.out_dir / TRUTH_JSON
    corpus.write(csv_path, truth)
    _manifest(cfg, "synth", [], [csv_path, truth], entities=len(corpus.entities))
    return csv_path


def _raw_input(cfg: ExperimentConfig) -> Path:
    if cfg.input is not None:
        return cfg.input
    p = cfg.out_dir / SERIES_CSV
    if not p.exists():
        stage_synth(cfg)
    return p


def stage_ingest(cfg: ExperimentConfig) -> Path:
    src = _raw_input(cfg)
    entities = read_series_csv(src)
    if not entities:
        raise StageError("ingest", f"{src}: no rows")
    lo, hi = cfg.outlier_range
    cleaned, removed = [], {}
    for s in entities:
        c, n = filter_outliers(s, lo, hi)
        cleaned.append(c)
        removed[s.entity_id] = n
    dst = cfg.out_dir / INGESTED_CSV
    write_series_csv(dst, cleaned)
    _manifest(
        cfg,
        "ingest",
        [src],
        [dst],
        entities=len(cleaned),
        minutes=sum(s.length for s in cleaned),
        outliers_removed=removed,
    )
    return dst


def _ingested(cfg: ExperimentConfig) -> tuple[Path, list[EntitySeries]]:
    p = cfg.out_dir / INGESTED_CSV
    if not p.exists():
        stage_ingest(cfg)
    return p, [ensure_prepared(s, *cfg.outlier_range) for s in read_series_csv(p)]


def stage_label(cfg: ExperimentConfig, spec_text: str | None = None) -> dict:
    """Label every evaluation-stride sub-sequence; ``spec_text`` labels a single ad-hoc event."""
    src, entities = _ingested(cfg)
    win = cfg.window
    rows, counts = [], {"subsequences": 0, "labeled": 0}
    single = None
    if spec_text:
        single = parse_event_spec(spec_text, signal=cfg.spec.main.signal, window_minutes=win.tw_minutes)
        counts["event"] = 0
    else:
        counts.update({"y": 0, "y_s": 0})
    for s in entities:
        offsets = window_offsets(s.length, win, win.eval_stride_minutes)
        if single is not None:
            ev, ok = window_event_flags(s[single.signal], single)
            idx = offsets + win.tw_offset
            ev, ok = ev[idx], ok[idx]
            for t, e, k in zip(offsets, ev, ok):
                rows.append(f"{s.entity_id},{s.start_time + t},{int(k)},{int(e) if k else ''}")
            counts["event"] += int(ev[ok].sum())
        else:
            y, y_s, ok = label_offsets(s, offsets, win, cfg.spec)
            for t, a, b, k in zip(offsets, y, y_s, ok):
                yf = (str(int(a)) if b else "") if k else ""
                rows.append(f"{s.entity_id},{s.start_time + t},{int(k)},{int(a) if k else ''},{int(b) if k else ''},{yf}")
            counts["y"] += int(y[ok].sum())
            counts["y_s"] += int(y_s[ok].sum())
        counts["subsequences"] += len(offsets)
        counts["labeled"] += int(ok.sum())
    header = "entity_id,t_start,labeled,event" if single is not None else "entity_id,t_start,labeled,y,y_s,y_f"
    dst = cfg.out_dir / "labels.csv"
    dst.write_text(header + "\n" + "".join(r + "\n" for r in rows))
    counts["spec"] = single.describe() if single is not None else {"main": cfg.spec.main.describe(), "pre": cfg.spec.pre.describe()}
    _manifest(cfg, "label", [src], [dst], counts=counts)
    return counts


def stage_featurize(cfg: ExperimentConfig) -> Path:
    src, entities = _ingested(cfg)
    from .features import feature_matrix

    blocks, index = [], []
    for s in entities:
        offsets = window_offsets(s.length, cfg.window, cfg.window.eval_stride_minutes)
        blocks.append(feature_matrix(s, offsets, cfg.window.ow_minutes))
        index.append([s.entity_id, int(len(offsets))])
    X = np.concatenate(blocks) if blocks else np.empty((0, len(feature_schema())))
    dst = cfg.out_dir / FEATURE_CACHE
    meta = {"entities": index, "window": cfg.resolved["window"], "input_sha256": sha256(src)}
    write_feature_cache(dst, X, feature_schema(), meta)
    _manifest(cfg, "featurize", [src], [dst], rows=int(X.shape[0]))
    return dst


def load_entity_data(cfg: ExperimentConfig) -> dict[str, EntityData]:
    """Entity tables, reusing the feature cache when it matches the current inputs."""
    src, entities = _ingested(cfg)
    cache = cfg.out_dir / FEATURE_CACHE
    cached = None
    if cache.exists():
        X, schema, meta = read_feature_cache(cache)
        if (
            schema == feature_schema()
            and meta.get("input_sha256") == sha256(src)
            and meta.get("window") == cfg.resolved["window"]
        ):
            cached = (X, meta["entities"])
    if cached is None:
        stage_featurize(cfg)
        X, _, meta = read_feature_cache(cache)
        cached = (X, meta["entities"])
    X, index = cached
    by_id, pos = {}, 0
    for eid, n in index:
        by_id[eid] = X[pos : pos + n]
        pos += n
    return {s.entity_id: build_entity_data(s, cfg.window, cfg.spec, by_id[s.entity_id]) for s in entities}


def stage_train(cfg: ExperimentConfig) -> Path:
    """Fit deployable detectors on all entities, validating on one seeded fold."""
    data = load_entity_data(cfg)
    run = fold_plan(list(data), cfg.folds, 1, cfg.seed)[0]
    train_ids = sorted(run.train + run.test)
    train = stack([data[e] for e in train_ids], "train")
    valid = stack([data[e] for e in run.validation], "eval")
    mdir = cfg.out_dir / MODELS_DIR
    mdir.mkdir(exist_ok=True)
    written = []
    for kind in cfg.setup.kinds:
        det = make_detector(
            kind,
            cfg.spec,
            gbt=cfg.setup.gbt.__class__(**{**cfg.setup.gbt.__dict__, "rng_seed": cfg.seed}),
            rg=cfg.setup.rg.__class__(**{**cfg.setup.rg.__dict__, "rng_seed": cfg.seed}),
            iforest=cfg.setup.iforest.__class__(**{**cfg.setup.iforest.__dict__, "rng_seed": cfg.seed}),
            strategy=cfg.setup.resampling.get(kind.value, "NR"),
            seed=cfg.seed,
        ).fit(train, valid)
        p = mdir / f"{kind.value}.json"
        _write_json(p, det.to_dict())
        written.append(p)
    _manifest(
        cfg,
        "train",
        [cfg.out_dir / INGESTED_CSV],
        written,
        train_entities=train_ids,
        validation_entities=list(run.validation),
    )
    return mdir


def stage_evaluate(cfg: ExperimentConfig, models: Path | None = None) -> EvalReport:
    data = load_entity_data(cfg)
    if models is not None:
        report = _score_saved(cfg, data, models)
    else:
        report = cv_harness(data, cfg.spec, cfg.setup, cfg.folds, cfg.repeats, cfg.seed, cfg.match, cfg.threads)
    report.write(cfg.out_dir)
    write_alarm_csv(cfg.out_dir / "alarms.csv", report.alarms)
    if report.layer_runs:
        (cfg.out_dir / "layers.csv").write_text(_layer_csv(report.layer_runs))
    _manifest(
        cfg,
        "evaluate",
        [cfg.out_dir / INGESTED_CSV],
        [cfg.out_dir / n for n in ("runs.csv", "summary.json", "report.txt", "alarms.csv")],
        runs=len(report.runs),
    )
    return report


def _layer_csv(rows) -> str:
    cols = ("repeat", "fold", "layer", "recall", "precision", "f1", "specificity")
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join("NA" if isinstance(r[c], float) and r[c] != r[c] else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _score_saved(cfg: ExperimentConfig, data: dict[str, EntityData], models: Path) -> EvalReport:
    runs, alarms = [], {}
    for kind in cfg.setup.kinds:
        p = models / f"{kind.value}.json"
        if not p.exists():
            raise StageError("evaluate", f"missing model file {p}")
        det = detector_from_dict(json.loads(p.read_text()), cfg.spec)
        log_ = {e: np.unique(d.alarm_minutes[det.predict_entity(d).astype(bool)]) for e, d in data.items()}
        s = score_entities(log_, {e: d.episodes for e, d in data.items()}, {e: d.series.length for e, d in data.items()}, cfg.match)
        runs.append(
            {
                "repeat": 0,
                "fold": 0,
                "detector": kind.value,
                "ER": s.er,
                "RP": s.rp,
                "DFP": s.dfp,
                "events": s.events,
                "captured": s.captured,
                "avg_AT": s.at,
                "FA_per_hour": s.fa_per_hour,
                "DFA_per_hour": s.dfa_per_hour,
                "false_alarms": s.false_alarms,
                "alarms": s.alarms,
                "sub_recall": float("nan"),
                "sub_precision": float("nan"),
                "sub_f1": float("nan"),
                "sub_specificity": float("nan"),
            }
        )
        alarms[kind.value] = log_
    return EvalReport(runs, [], alarms)


def stage_report(cfg: ExperimentConfig, summary: Path | None = None) -> str:
    path = summary or cfg.out_dir / "summary.json"
    if not path.exists():
        raise StageError("report", f"{path} not found; run `evaluate` first")
    table = render_table(json.loads(path.read_text()))
    (cfg.out_dir / "report.txt").write_text(table)
    return table


def stage_run_all(cfg: ExperimentConfig) -> str:
    if cfg.input is None:
        stage_synth(cfg)
    stage_ingest(cfg)
    stage_label(cfg)
    stage_featurize(cfg)
    stage_evaluate(cfg)
    return stage_report(cfg)


# --- argument handling -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file, or 'ahe'/'te' for a bundled one")
    common.add_argument("--seed", type=int, help="overrides `seed`")
    common.add_argument("--threads", type=int, help="overrides `threads`")
    common.add_argument("--out", help="output directory; overrides `out_dir`")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key, e.g. cv.repeats=1")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="earlywarn", description="Early warning of episodes in minute-level vital signs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    sub.add_parser("ingest", parents=[common], help="validate input CSV and filter outliers")
    p = sub.add_parser("label", parents=[common], help="label sub-sequences")
    p.add_argument("--spec", help="single event to label instead of the configured pair, e.g. '45%% below 60'")
    sub.add_parser("featurize", parents=[common], help="compute and cache the feature matrix")
    sub.add_parser("train", parents=[common], help="fit deployable detectors")
    p = sub.add_parser("evaluate", parents=[common], help="cross-validate detectors (or score saved models)")
    p.add_argument("--models", help="score models saved by `train` instead of cross-validating")
    p = sub.add_parser("report", parents=[common], help="render the summary table")
    p.add_argument("--summary", help="summary.json to render (default: OUT/summary.json)")
    sub.add_parser("run-all", parents=[common], help="synth/ingest, label, featurize, evaluate, report")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists() and args.config in ("ahe", "te", "ahe.toml", "te.toml"):
            path = bundled_config(args.config if args.config.endswith(".toml") else f"{args.config}.toml")
        raw = load_toml(path)
    overrides: dict = {}
    for item in args.set:
        overrides = _deep_update(overrides, parse_assignment(item))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out_dir"] = args.out
    return resolve(raw, overrides)


def _deep_update(a: dict, b: dict) -> dict:
    for k, v in b.items():
        a[k] = _deep_update(a.get(k, {}), v) if isinstance(v, dict) else v
    return a


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        cfg = config_from_args(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / "resolved_config.json").write_text(cfg.resolved_json())
        stage = args.command
        if args.command == "synth":
            print(stage_synth(cfg))
        elif args.command == "ingest":
            print(stage_ingest(cfg))
        elif args.command == "label":
            print(json.dumps(stage_label(cfg, args.spec), sort_keys=True))
        elif args.command == "featurize":
            print(stage_featurize(cfg))
        elif args.command == "train":
            print(stage_train(cfg))
        elif args.command == "evaluate":
            report = stage_evaluate(cfg, Path(args.models) if args.models else None)
            print(render_table(report.summary()), end="")
        elif args.command == "report":
            print(stage_report(cfg, Path(args.summary) if args.summary else None), end="")
        elif args.command == "run-all":
            print(stage_run_all(cfg), end="")
    except StageError as exc:
        print(f"earlywarn: [{exc.stage}] {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"earlywarn: [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
