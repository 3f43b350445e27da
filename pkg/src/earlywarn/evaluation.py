"""Event-aware alarm scoring and the patient-grouped cross-validation harness."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detectors import DetectorKind, LayeredDetector, make_detector
from .events import Episode, LayeredEventSpec
from .learners import GbtParams, IsoForestParams
from .pipeline import EntityData, stack
from .resampling import Strategy

NA = float("nan")


class AlarmClass(str, enum.Enum):
    TRUE_ALARM = "TRUE_ALARM"
    FALSE_ALARM = "FALSE_ALARM"
    OBSOLETE = "OBSOLETE"


@dataclass(frozen=True)
class MatchConfig:
    credit_window_minutes: int = 60
    active_window_minutes: int = 60

    def __post_init__(self):
        if self.credit_window_minutes < 1 or self.active_window_minutes < 1:
            raise ValueError("credit and active windows must be positive")


@dataclass
class MatchResult:
    onsets: np.ndarray
    captured: np.ndarray
    anticipation: np.ndarray  # minutes, NaN where not captured
    alarms: np.ndarray
    classes: list[AlarmClass]

    @property
    def false_alarms(self) -> np.ndarray:
        return self.alarms[[c is AlarmClass.FALSE_ALARM for c in self.classes]] if len(self.alarms) else self.alarms


def _as_episodes(events) -> list[Episode]:
    return [e if isinstance(e, Episode) else Episode(int(e), int(e) + 1) for e in events]


def match_alarms(alarms, events, cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Credit each event with alarms issued 1..credit minutes before its onset.

    Alarms that credit some event are TRUE_ALARM. Others issued while an
    episode is running (onset <= alarm < end) are OBSOLETE. The rest are
    FALSE_ALARM. ``events`` holds :class:`Episode` items or bare onsets
    (treated as one-minute episodes).
    """
    alarms = np.unique(np.asarray(alarms, dtype=np.int64))
    eps = sorted(_as_episodes(events), key=lambda e: e.onset)
    onsets = np.array([e.onset for e in eps], dtype=np.int64)
    ends = np.array([e.end for e in eps], dtype=np.int64)
    credit = cfg.credit_window_minutes
    captured = np.zeros(len(eps), dtype=bool)
    anticipation = np.full(len(eps), NA)
    true_alarm = np.zeros(len(alarms), dtype=bool)
    for k, onset in enumerate(onsets):
        lo = np.searchsorted(alarms, onset - credit, side="left")
        hi = np.searchsorted(alarms, onset, side="left")
        if hi > lo:
            captured[k] = True
            anticipation[k] = float(onset - alarms[lo])
            true_alarm[lo:hi] = True
    classes = []
    for a, is_true in zip(alarms, true_alarm):
        if is_true:
            classes.append(AlarmClass.TRUE_ALARM)
        elif np.any((onsets <= a) & (a < ends)):
            classes.append(AlarmClass.OBSOLETE)
        else:
            classes.append(AlarmClass.FALSE_ALARM)
    return MatchResult(onsets, captured, anticipation, alarms, classes)


def _results(matched) -> list[MatchResult]:
    return [matched] if isinstance(matched, MatchResult) else list(matched)


def event_recall(matched: MatchResult | Iterable[MatchResult]) -> float:
    res = _results(matched)
    total = sum(len(r.onsets) for r in res)
    if total == 0:
        return NA
    return sum(int(r.captured.sum()) for r in res) / total


def discounted_false_positives(false_alarms: Sequence[int], active: int = 60) -> int:
    """Greedy count of active periods ``[a, a + active)`` needed to absorb all false alarms."""
    count = 0
    period_end = None
    for a in false_alarms:
        if period_end is None or a >= period_end:
            count += 1
            period_end = a + active
    return count


def reduced_precision(captured: int, dfp: int) -> float:
    if captured + dfp == 0:
        return NA
    return captured / (captured + dfp)


def anticipation_time(matched: MatchResult | Iterable[MatchResult]) -> float:
    at = np.concatenate([r.anticipation[r.captured] for r in _results(matched)] or [np.empty(0)])
    return float(at.mean()) if at.size else NA


def false_alarm_rate(matched: MatchResult, monitored_hours: float, active: int = 60) -> tuple[float, float]:
    """Raw and discounted false alarms per monitored hour for one entity."""
    if monitored_hours <= 0:
        return NA, NA
    fa = matched.false_alarms
    return len(fa) / monitored_hours, discounted_false_positives(fa, active) / monitored_hours


@dataclass
class RunScore:
    er: float
    rp: float
    dfp: int
    events: int
    captured: int
    at: float
    fa_per_hour: float
    dfa_per_hour: float
    false_alarms: int
    alarms: int


def score_entities(
    alarm_log: Mapping[str, np.ndarray],
    episode_log: Mapping[str, Sequence[Episode]],
    monitored_minutes: Mapping[str, int],
    cfg: MatchConfig = MatchConfig(),
) -> RunScore:
    results, dfp, fa, dfa, n_false, n_alarms = [], 0, [], [], 0, 0
    for eid in sorted(episode_log):
        r = match_alarms(alarm_log.get(eid, []), episode_log[eid], cfg)
        results.append(r)
        d = discounted_false_positives(r.false_alarms, cfg.active_window_minutes)
        dfp += d
        raw_rate, disc_rate = false_alarm_rate(r, monitored_minutes[eid] / 60.0, cfg.active_window_minutes)
        fa.append(raw_rate)
        dfa.append(disc_rate)
        n_false += len(r.false_alarms)
        n_alarms += len(r.alarms)
    captured = sum(int(r.captured.sum()) for r in results)
    return RunScore(
        er=event_recall(results),
        rp=reduced_precision(captured, dfp),
        dfp=dfp,
        events=sum(len(r.onsets) for r in results),
        captured=captured,
        at=anticipation_time(results),
        fa_per_hour=float(np.mean(fa)) if fa else NA,
        dfa_per_hour=float(np.mean(dfa)) if dfa else NA,
        false_alarms=n_false,
        alarms=n_alarms,
    )


def subsequence_metrics(pred, truth) -> dict[str, float]:
    """Classical per-sub-sequence recall, precision, F1 and specificity."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    tn = int((~pred & ~truth).sum())
    rec = tp / (tp + fn) if tp + fn else NA
    prec = tp / (tp + fp) if tp + fp else NA
    f1 = 2 * prec * rec / (prec + rec) if (tp and prec + rec) else (0.0 if tp + fn and tp + fp else NA)
    spec = tn / (tn + fp) if tn + fp else NA
    return {"recall": rec, "precision": prec, "f1": f1, "specificity": spec}


# --- cross-validation ------------------------------------------------------


@dataclass(frozen=True)
class Run:
    repeat: int
    fold: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]


def fold_plan(entity_ids: Sequence[str], folds: int = 10, repeats: int = 5, seed: int = 0) -> list[Run]:
    """Per repeat: shuffle entities into ``folds`` groups; rotation ``k`` validates on
    fold ``k``, tests on fold ``k + 1`` and trains on the rest."""
    ids = sorted(entity_ids)
    if folds < 3:
        raise ValueError("need at least 3 folds (train, validation, test)")
    if len(ids) < folds:
        raise ValueError(f"{len(ids)} entities cannot fill {folds} folds")
    runs = []
    for rep in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        perm = [ids[i] for i in rng.permutation(len(ids))]
        groups = [tuple(sorted(g)) for g in np.array_split(np.array(perm, dtype=object), folds)]
        for k in range(folds):
            val, test = groups[k], groups[(k + 1) % folds]
            train = tuple(sorted(e for j, g in enumerate(groups) if j not in (k, (k + 1) % folds) for e in g))
            runs.append(Run(rep, k, train, val, test))
    return runs


@dataclass
class DetectorSetup:
    kinds: tuple[DetectorKind, ...] = tuple(DetectorKind)
    gbt: GbtParams = field(default_factory=GbtParams)
    rg: GbtParams = field(default_factory=lambda: GbtParams(n_trees=50))
    iforest: IsoForestParams = field(default_factory=IsoForestParams)
    resampling: dict = field(default_factory=lambda: {"CL": Strategy.NR, "LL": Strategy.NR})


RUN_COLUMNS = (
    "repeat",
    "fold",
    "detector",
    "ER",
    "RP",
    "DFP",
    "events",
    "captured",
    "avg_AT",
    "FA_per_hour",
    "DFA_per_hour",
    "false_alarms",
    "alarms",
    "sub_recall",
    "sub_precision",
    "sub_f1",
    "sub_specificity",
)

SUMMARY_METRICS = ("ER", "RP", "avg_AT", "FA_per_hour", "DFA_per_hour", "false_alarms")


def _run_seed(seed: int, run: Run, kind: DetectorKind) -> int:
    return int(np.random.SeedSequence([seed, run.repeat, run.fold, list(DetectorKind).index(kind)]).generate_state(1)[0])


def evaluate_run(
    run: Run,
    data: Mapping[str, EntityData],
    spec: LayeredEventSpec,
    setup: DetectorSetup,
    match: MatchConfig,
    seed: int,
) -> tuple[list[dict], list[dict]]:
    """Fit every detector on one train/validation split and score it on the test fold."""
    train = stack([data[e] for e in run.train], "train")
    valid = stack([data[e] for e in run.validation], "eval")
    episodes = {e: data[e].episodes for e in run.test}
    minutes = {e: data[e].series.length for e in run.test}
    rows, layers = [], []
    for kind in setup.kinds:
        det = make_detector(
            kind,
            spec,
            gbt=GbtParams(**{**setup.gbt.__dict__, "rng_seed": _run_seed(seed, run, kind) % 2**31}),
            rg=GbtParams(**{**setup.rg.__dict__, "rng_seed": _run_seed(seed, run, kind) % 2**31}),
            iforest=IsoForestParams(**{**setup.iforest.__dict__, "rng_seed": _run_seed(seed, run, kind) % 2**31}),
            strategy=setup.resampling.get(kind.value, Strategy.NR),
            seed=_run_seed(seed, run, kind) % 2**31,
        )
        det.fit(train, valid)
        alarm_log, preds, truth = {}, [], []
        for e in run.test:
            d = data[e]
            p = det.predict_entity(d)
            alarm_log[e] = np.unique(d.alarm_minutes[p.astype(bool)])
            preds.append(p[d.labeled])
            truth.append(d.y[d.labeled])
            if isinstance(det, LayeredDetector) and d.X.shape[0]:
                h_first, h_second = det.layer_outputs(det.imputer.transform(d.X[d.labeled]))
                layers.append({"entity": e, "h_first": h_first, "h_second": h_second, "y": d.y[d.labeled], "y_s": d.y_s[d.labeled]})
        s = score_entities(alarm_log, episodes, minutes, match)
        sub = subsequence_metrics(np.concatenate(preds), np.concatenate(truth))
        rows.append(
            {
                "repeat": run.repeat,
                "fold": run.fold,
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
                "sub_recall": sub["recall"],
                "sub_precision": sub["precision"],
                "sub_f1": sub["f1"],
                "sub_specificity": sub["specificity"],
                "_alarms": alarm_log,
            }
        )
    layer_rows = []
    if layers:
        h_first = np.concatenate([l["h_first"] for l in layers])
        h_second = np.concatenate([l["h_second"] for l in layers])
        y = np.concatenate([l["y"] for l in layers])
        y_s = np.concatenate([l["y_s"] for l in layers])
        sec = y_s == 1
        layer_rows.append({"repeat": run.repeat, "fold": run.fold, "layer": "first", **subsequence_metrics(h_first, y_s)})
        layer_rows.append({"repeat": run.repeat, "fold": run.fold, "layer": "second", **subsequence_metrics(h_second[sec], y[sec])})
    return rows, layer_rows


@dataclass
class EvalReport:
    runs: list[dict]
    layer_runs: list[dict] = field(default_factory=list)
    alarms: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        out = {}
        for det in dict.fromkeys(r["detector"] for r in self.runs):
            rows = [r for r in self.runs if r["detector"] == det]
            entry = {"runs": len(rows)}
            for m in SUMMARY_METRICS:
                vals = np.array([r[m] for r in rows], dtype=np.float64)
                vals = vals[~np.isnan(vals)]
                entry[m] = {
                    "mean": float(vals.mean()) if vals.size else None,
                    "sd": float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None),
                }
            out[det] = entry
        layers = {}
        for name in ("first", "second"):
            rows = [r for r in self.layer_runs if r["layer"] == name]
            if rows:
                layers[name] = {
                    m: _mean_sd([r[m] for r in rows]) for m in ("recall", "precision", "f1", "specificity")
                }
        return {"detectors": out, "layers": layers}

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in self.runs:
            w.writerow([_cell(r[c]) for c in RUN_COLUMNS])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "runs.csv").write_text(self.runs_csv())
        (out / "summary.json").write_text(self.summary_json())
        (out / "report.txt").write_text(render_table(self.summary()))


def _mean_sd(values) -> dict:
    v = np.array(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return {"mean": float(v.mean()) if v.size else None, "sd": float(v.std(ddof=1)) if v.size > 1 else None}


def _cell(v) -> str:
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def _pm(entry: dict | None, digits: int = 3) -> str:
    if not entry or entry.get("mean") is None:
        return "NA"
    sd = entry.get("sd")
    return f"{entry['mean']:.{digits}f}±{sd:.{digits}f}" if sd is not None else f"{entry['mean']:.{digits}f}"


def render_table(summary: dict) -> str:
    """Text table with one row per detector: ER, RP, Avg. AT, Avg. FA."""
    header = ("Method", "ER", "RP", "Avg. AT", "Avg. FA")
    rows = [header]
    for det, e in summary["detectors"].items():
        rows.append((det, _pm(e["ER"]), _pm(e["RP"]), _pm(e["avg_AT"], 1), _pm(e["FA_per_hour"], 3)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    note = "Avg. AT in minutes; Avg. FA = false alarms per patient-hour."
    return "\n".join(lines) + "\n" + note + "\n"


def cv_harness(
    data: Mapping[str, EntityData],
    spec: LayeredEventSpec,
    setup: DetectorSetup = DetectorSetup(),
    folds: int = 10,
    repeats: int = 5,
    seed: int = 0,
    match: MatchConfig = MatchConfig(),
    threads: int = 1,
) -> EvalReport:
    plan = fold_plan(list(data), folds, repeats, seed)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda r: evaluate_run(r, data, spec, setup, match, seed), plan))
    else:
        outcomes = [evaluate_run(r, data, spec, setup, match, seed) for r in plan]
    runs, layers, alarms = [], [], {}
    for rows, lrows in outcomes:
        for r in rows:
            log = r.pop("_alarms")
            alarms.setdefault(r["detector"], {}).update(
                {f"{r['repeat']}:{e}": v for e, v in log.items()}
            )
            runs.append(r)
        layers += lrows
    return EvalReport(runs, layers, alarms)
