"""The five alarm producers: AH (rule), CL, LL (layered), RG (regression), IF.

Every detector maps an entity's evaluation sub-sequences to 0/1 predictions.
A positive prediction becomes an alarm stamped at the end of the
sub-sequence's observation window.
"""

from __future__ import annotations

import csv
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .events import EventSpec, LayeredEventSpec
from .features import FeatureImputer, feature_schema
from .learners import (
    GbtModel,
    GbtParams,
    IsoForestModel,
    IsoForestParams,
    LearnerError,
    Loss,
    gbt_fit,
    isoforest_fit,
    tune_threshold,
)
from .pipeline import EntityData, LabeledSet, build_entity_data
from .resampling import Dataset, Strategy, resample
from .series import EntitySeries, WindowConfig

log = logging.getLogger(__name__)

AlarmLog = dict  # entity_id -> sorted array of alarm minutes


class DetectorKind(str, enum.Enum):
    AH = "AH"
    CL = "CL"
    LL = "LL"
    RG = "RG"
    IF = "IF"


class NotFittedError(RuntimeError):
    pass


def _tune(scores_val, y_val, scores_train, y_train, what: str) -> float:
    """Tune on validation rows; fall back to training rows when validation is one-class."""
    y_val = np.asarray(y_val)
    if 0 < y_val.sum() < len(y_val):
        return tune_threshold(scores_val, y_val)
    log.warning("%s: validation rows hold one class only; tuning threshold on training rows", what)
    return tune_threshold(scores_train, y_train)


def _imputer_dict(imp: FeatureImputer) -> dict:
    return {"schema": list(imp.schema), "medians": imp.medians.tolist()}


def _imputer_from(d: dict) -> FeatureImputer:
    imp = FeatureImputer(d["schema"])
    imp.medians = np.array(d["medians"], dtype=np.float64)
    return imp


@dataclass
class Detector:
    """Base class; subclasses implement ``fit`` and ``_predict_matrix``."""

    spec: LayeredEventSpec
    seed: int = 0
    imputer: FeatureImputer | None = field(default=None, repr=False)

    kind = None
    needs_fit = True

    @property
    def fitted(self) -> bool:
        return self.imputer is not None

    def fit(self, train: LabeledSet, valid: LabeledSet) -> "Detector":
        raise NotImplementedError

    def _fit_imputer(self, train: LabeledSet) -> np.ndarray:
        self.imputer = FeatureImputer(feature_schema()).fit(train.X)
        return self.imputer.transform(train.X)

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError(f"{self.kind.value} detector is not fitted")
        return self._predict_matrix(self.imputer.transform(X)).astype(np.int8)

    def predict_entity(self, data: EntityData) -> np.ndarray:
        if data.X.shape[0] == 0:
            return np.zeros(0, np.int8)
        return self.predict(data.X)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class AdHocDetector(Detector):
    kind = DetectorKind.AH
    needs_fit = False

    @property
    def fitted(self) -> bool:
        return True

    def fit(self, train=None, valid=None) -> "AdHocDetector":
        return self

    def predict_current(self, values) -> np.ndarray:
        return adhoc_predict(values, self.spec.main)

    def predict_entity(self, data: EntityData) -> np.ndarray:
        return self.predict_current(data.current_values)

    def predict(self, X):
        raise TypeError("the ad-hoc rule reads current signal values, not features")

    def to_dict(self) -> dict:
        return {"kind": "AH"}


def adhoc_predict(current_values, spec: EventSpec) -> np.ndarray:
    """1 where the current value is strictly past the event level; missing -> 0."""
    v = np.asarray(current_values, dtype=np.float64)
    present = ~np.isnan(v)
    hit = spec.comparator.holds(np.where(present, v, spec.level), spec.level)
    return (present & hit).astype(np.int8)


@dataclass
class ClassifierDetector(Detector):
    params: GbtParams = field(default_factory=GbtParams)
    strategy: Strategy = Strategy.NR
    model: GbtModel | None = field(default=None, repr=False)
    threshold: float = 0.5

    kind = DetectorKind.CL

    def fit(self, train: LabeledSet, valid: LabeledSet) -> "ClassifierDetector":
        Xtr = self._fit_imputer(train)
        ds = resample(Dataset(Xtr, train.y, train.groups, train.t), self.strategy, self.seed)
        self.model = gbt_fit(ds.X, ds.y, self.params, Loss.LOGISTIC, feature_schema())
        self.threshold = _tune(
            self.model.predict_proba(self.imputer.transform(valid.X)),
            valid.y,
            self.model.predict_proba(Xtr),
            train.y,
            "CL",
        )
        return self

    def _predict_matrix(self, X):
        return self.model.predict_proba(X) >= self.threshold

    def to_dict(self) -> dict:
        return {
            "kind": "CL",
            "imputer": _imputer_dict(self.imputer),
            "threshold": self.threshold,
            "model": self.model.to_dict(),
        }


@dataclass
class LayeredDetector(Detector):
    """First layer: normal vs pre-conditional. Second layer, trained only on
    pre-conditional rows: pre-conditional vs main. Output is the product of
    the two thresholded layers."""

    params: GbtParams = field(default_factory=GbtParams)
    strategy: Strategy = Strategy.NR
    first_model: GbtModel | None = field(default=None, repr=False)
    second_model: GbtModel | None = field(default=None, repr=False)
    first_threshold: float = 0.5
    second_threshold: float = 0.5
    parallel: bool = True

    kind = DetectorKind.LL

    def fit(self, train: LabeledSet, valid: LabeledSet) -> "LayeredDetector":
        Xtr = self._fit_imputer(train)
        second = train.y_s == 1
        if not second.any():
            raise LearnerError("second layer has no training rows: no pre-conditional events in the training data")
        y_f = train.y[second]
        if y_f.min() == y_f.max():
            raise LearnerError(
                f"second layer training labels are all {int(y_f[0])} over {int(second.sum())} pre-conditional rows; "
                "the pre-conditional event may coincide with the main event"
            )
        ds_first = resample(Dataset(Xtr, train.y_s, train.groups, train.t), self.strategy, self.seed)
        ds_second = resample(
            Dataset(Xtr[second], y_f, train.groups[second], train.t[second]), self.strategy, self.seed + 1
        )
        self.second_layer_rows = np.flatnonzero(second)
        schema = feature_schema()

        def fit_first():
            return gbt_fit(ds_first.X, ds_first.y, self.params, Loss.LOGISTIC, schema)

        def fit_second():
            return gbt_fit(ds_second.X, ds_second.y, self.params, Loss.LOGISTIC, schema)

        if self.parallel:
            with ThreadPoolExecutor(max_workers=2) as pool:
                fut_first, fut_second = pool.submit(fit_first), pool.submit(fit_second)
                self.first_model, self.second_model = fut_first.result(), fut_second.result()
        else:
            self.first_model, self.second_model = fit_first(), fit_second()
        for name, model, n in (("first", self.first_model, len(ds_first.y)), ("second", self.second_model, len(ds_second.y))):
            if not model.trees:
                log.warning(
                    "LL %s layer is constant: no split possible on %d rows with min_leaf=%d", name, n, self.params.min_leaf
                )

        Xva = self.imputer.transform(valid.X)
        self.first_threshold = _tune(
            self.first_model.predict_proba(Xva), valid.y_s, self.first_model.predict_proba(Xtr), train.y_s, "LL first layer"
        )
        vsec = valid.y_s == 1
        self.second_threshold = _tune(
            self.second_model.predict_proba(Xva[vsec]),
            valid.y[vsec],
            self.second_model.predict_proba(Xtr[second]),
            y_f,
            "LL second layer",
        )
        return self

    def layer_outputs(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Hard outputs of both layers on imputed features; the second layer is
        evaluated on every row regardless of the first."""
        h_first = (self.first_model.predict_proba(X) >= self.first_threshold).astype(np.int8)
        h_second = (self.second_model.predict_proba(X) >= self.second_threshold).astype(np.int8)
        return h_first, h_second

    def _predict_matrix(self, X):
        h_first, h_second = self.layer_outputs(X)
        return combine_layers(h_first, h_second)

    def to_dict(self) -> dict:
        return {
            "kind": "LL",
            "imputer": _imputer_dict(self.imputer),
            "first_threshold": self.first_threshold,
            "second_threshold": self.second_threshold,
            "first_model": self.first_model.to_dict(),
            "second_model": self.second_model.to_dict(),
        }


def combine_layers(hard_first, hard_second) -> np.ndarray:
    return np.asarray(hard_first, dtype=np.int8) * np.asarray(hard_second, dtype=np.int8)


def layered_predict(det: LayeredDetector, x) -> np.ndarray:
    return det.predict(np.atleast_2d(x))


@dataclass
class RegressionDetector(Detector):
    """One squared-loss booster per target-window minute; alarm when the
    forecast window satisfies the main event definition."""

    params: GbtParams = field(default_factory=lambda: GbtParams(n_trees=50))
    models: list[GbtModel] = field(default_factory=list, repr=False)

    kind = DetectorKind.RG

    def fit(self, train: LabeledSet, valid: LabeledSet | None = None) -> "RegressionDetector":
        Xtr = self._fit_imputer(train)
        horizon = train.targets.shape[1]
        models = []
        for j in range(horizon):
            target = train.targets[:, j]
            ok = ~np.isnan(target)
            if ok.sum() < 2:
                raise LearnerError(f"regressor for target minute {j} has fewer than 2 observed targets")
            p = GbtParams(**{**self.params.__dict__, "rng_seed": self.params.rng_seed + j})
            models.append(gbt_fit(Xtr[ok], target[ok], p, Loss.SQUARED, feature_schema()))
        self.models = models
        return self

    def forecast(self, X) -> np.ndarray:
        if len(self.models) != self.spec.main.window_minutes:
            raise NotFittedError(f"RG needs {self.spec.main.window_minutes} fitted regressors, has {len(self.models)}")
        return np.column_stack([m.predict(X) for m in self.models])

    def _predict_matrix(self, X):
        return forecast_alarm(self.forecast(X), self.spec.main)

    def to_dict(self) -> dict:
        return {"kind": "RG", "imputer": _imputer_dict(self.imputer), "models": [m.to_dict() for m in self.models]}


def forecast_alarm(predictions: np.ndarray, spec: EventSpec) -> np.ndarray:
    """Row-wise event rule applied to forecast windows."""
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    count = spec.comparator.holds(P, spec.level).sum(axis=1)
    frac = spec.fraction
    return (count * frac.denominator >= P.shape[1] * frac.numerator).astype(np.int8)


@dataclass
class IsolationDetector(Detector):
    params: IsoForestParams = field(default_factory=IsoForestParams)
    model: IsoForestModel | None = field(default=None, repr=False)
    threshold: float = 0.5

    kind = DetectorKind.IF

    def fit(self, train: LabeledSet, valid: LabeledSet) -> "IsolationDetector":
        Xtr = self._fit_imputer(train)
        self.model = isoforest_fit(Xtr, self.params)
        self.threshold = _tune(
            self.model.score(self.imputer.transform(valid.X)), valid.y, self.model.score(Xtr), train.y, "IF"
        )
        return self

    def _predict_matrix(self, X):
        return self.model.score(X) >= self.threshold

    def to_dict(self) -> dict:
        return {
            "kind": "IF",
            "imputer": _imputer_dict(self.imputer),
            "threshold": self.threshold,
            "model": self.model.to_dict(),
        }


_CLASSES = {
    DetectorKind.AH: AdHocDetector,
    DetectorKind.CL: ClassifierDetector,
    DetectorKind.LL: LayeredDetector,
    DetectorKind.RG: RegressionDetector,
    DetectorKind.IF: IsolationDetector,
}


def make_detector(
    kind: DetectorKind | str,
    spec: LayeredEventSpec,
    gbt: GbtParams = GbtParams(),
    rg: GbtParams = GbtParams(n_trees=50),
    iforest: IsoForestParams = IsoForestParams(),
    strategy: Strategy | str = Strategy.NR,
    seed: int = 0,
) -> Detector:
    kind = DetectorKind(kind)
    if kind is DetectorKind.AH:
        return AdHocDetector(spec, seed)
    if kind is DetectorKind.CL:
        return ClassifierDetector(spec, seed, params=gbt, strategy=Strategy(strategy))
    if kind is DetectorKind.LL:
        return LayeredDetector(spec, seed, params=gbt, strategy=Strategy(strategy))
    if kind is DetectorKind.RG:
        return RegressionDetector(spec, seed, params=rg)
    return IsolationDetector(spec, seed, params=iforest)


def detector_from_dict(d: Mapping, spec: LayeredEventSpec) -> Detector:
    kind = DetectorKind(d["kind"])
    if kind is DetectorKind.AH:
        return AdHocDetector(spec)
    imp = _imputer_from(d["imputer"])
    if kind is DetectorKind.CL:
        return ClassifierDetector(spec, imputer=imp, model=GbtModel.from_dict(d["model"]), threshold=d["threshold"])
    if kind is DetectorKind.LL:
        return LayeredDetector(
            spec,
            imputer=imp,
            first_model=GbtModel.from_dict(d["first_model"]),
            second_model=GbtModel.from_dict(d["second_model"]),
            first_threshold=d["first_threshold"],
            second_threshold=d["second_threshold"],
        )
    if kind is DetectorKind.RG:
        return RegressionDetector(spec, imputer=imp, models=[GbtModel.from_dict(m) for m in d["models"]])
    return IsolationDetector(spec, imputer=imp, model=IsoForestModel.from_dict(d["model"]), threshold=d["threshold"])


def run_detector(det: Detector, series: EntitySeries | EntityData, cfg: WindowConfig | None = None) -> np.ndarray:
    """Alarm minutes for one entity, sorted and unique."""
    if isinstance(series, EntityData):
        data = series
    else:
        data = build_entity_data(series, cfg or WindowConfig(), det.spec)
    hits = det.predict_entity(data).astype(bool)
    return np.unique(data.alarm_minutes[hits])


def write_alarm_csv(path: str | Path, logs: Mapping[str, Mapping[str, np.ndarray]]) -> None:
    """``logs[detector][entity_id]`` -> rows ``entity_id,alarm_minute,detector``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "alarm_minute", "detector"])
        for det in sorted(logs):
            for eid in sorted(logs[det]):
                for m in logs[det][eid]:
                    w.writerow([eid, int(m), det])


def read_alarm_csv(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, list[int]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["detector"], {}).setdefault(row["entity_id"], []).append(int(row["alarm_minute"]))
    return {d: {e: np.array(sorted(v), dtype=np.int64) for e, v in m.items()} for d, m in out.items()}
