from __future__ import annotations

import itertools
import json
from fractions import Fraction

import numpy as np
import pytest

from earlywarn import detectors
from earlywarn.events import Comparator, EventSpec, LayeredEventSpec
from earlywarn.evaluation import DetectorSetup, MatchConfig, evaluate_run, fold_plan
from earlywarn.features import FeatureImputer, feature_schema
from earlywarn.learners import GbtModel, GbtParams, IsoForestParams, LearnerError, Loss
from earlywarn.pipeline import build_entity_data, stack
from earlywarn.resampling import Strategy
from earlywarn.series import EntitySeries, SignalKind, WindowConfig
from earlywarn.synthgen import SynthParams, generate

AHE = EventSpec(SignalKind.MAP, Comparator.BELOW, 60.0, Fraction(9, 10))
AHE_PRE = EventSpec(SignalKind.MAP, Comparator.BELOW, 60.0, Fraction(45, 100))
TE = EventSpec(SignalKind.HR, Comparator.ABOVE, 100.0, Fraction(9, 10))
SPEC = LayeredEventSpec(AHE, AHE_PRE)
SMALL = GbtParams(n_trees=20, min_leaf=5)


@pytest.fixture(scope="module")
def corpus():
    c = generate(SynthParams(n_entities=10, minutes_per_entity=1500, rng_seed=3))
    data = {s.entity_id: build_entity_data(s, WindowConfig(), SPEC) for s in c.entities}
    ids = sorted(data)
    return c, data, ids[:6], ids[6:8], ids[8:]


def split(corpus):
    _, data, tr, va, _ = corpus
    return stack([data[e] for e in tr], "train"), stack([data[e] for e in va], "eval")


def test_layer_combination_truth_table():
    for h_first, h_second in itertools.product((0, 1), repeat=2):
        assert detectors.combine_layers([h_first], [h_second])[0] == (h_first and h_second)


def test_adhoc_examples():
    assert detectors.adhoc_predict([59.0, 60.0, np.nan, 61.0], AHE).tolist() == [1, 0, 0, 0]
    assert detectors.adhoc_predict([101.0, 100.0], TE).tolist() == [1, 0]


def test_forecast_alarm_examples():
    rows = np.array([[55.0] * 30, [55.0] * 27 + [70.0] * 3, [55.0] * 26 + [70.0] * 4, [60.0] * 30])
    assert detectors.forecast_alarm(rows, AHE).tolist() == [1, 1, 0, 0]


def constant_regression(value):
    imp = FeatureImputer(feature_schema()).fit(np.zeros((1, len(feature_schema()))))
    models = [GbtModel([], value, Loss.SQUARED) for _ in range(30)]
    return detectors.RegressionDetector(SPEC, imputer=imp, models=models)


def test_constant_regressors():
    X = np.random.default_rng(0).normal(size=(5, 111))
    assert constant_regression(55.0).predict(X).tolist() == [1] * 5
    assert constant_regression(75.0).predict(X).tolist() == [0] * 5
    short = constant_regression(55.0)
    short.models = short.models[:29]
    with pytest.raises(detectors.NotFittedError):
        short.predict(X)


def test_unfitted_detectors_refuse_to_predict():
    with pytest.raises(detectors.NotFittedError):
        detectors.make_detector("CL", SPEC).predict(np.zeros((1, 111)))


def test_layered_rejects_coinciding_definitions(corpus):
    train, valid = split(corpus)
    same = train.subset(np.ones(len(train), bool))
    same.y_s = same.y.copy()  # pre-conditional rows all carry the main label
    with pytest.raises(LearnerError):
        detectors.make_detector("LL", SPEC, gbt=SMALL).fit(same, valid)


def test_second_layer_sees_only_preconditional_rows(corpus):
    train, valid = split(corpus)
    det = detectors.make_detector("LL", SPEC, gbt=SMALL).fit(train, valid)
    rows = det.second_layer_rows
    assert np.array_equal(rows, np.flatnonzero(train.y_s == 1))
    assert np.all(train.y_f[rows] >= 0) and np.all(train.y_f[np.setdiff1d(np.arange(len(train)), rows)] == -1)


def test_run_detector_always_off_and_always_on(corpus):
    c, data, *_ = corpus
    d = data[c.entities[0].entity_id]

    class Fixed(detectors.AdHocDetector):
        def __init__(self, v):
            super().__init__(SPEC)
            self.v = v

        def predict_entity(self, data):
            return np.full(len(data.offsets), self.v, np.int8)

    assert detectors.run_detector(Fixed(0), d).size == 0
    on = detectors.run_detector(Fixed(1), d)
    assert np.array_equal(on, d.series.start_time + d.offsets + 60)
    assert on[0] == 60 and on[-1] == d.series.length - 90  # last start leaves WW + TW


def test_planted_onset_is_preceded_by_an_alarm():
    n = 400
    mp = np.full(n, 80.0)
    mp[200:260] = 50.0
    mp[140:200] = np.linspace(80, 62, 60)
    sig = {k: np.full(n, 80.0) for k in (SignalKind.HR, SignalKind.SBP, SignalKind.DBP)}
    sig[SignalKind.MAP] = mp
    s = EntitySeries("planted", 0, sig)
    d = build_entity_data(s, WindowConfig(), SPEC)
    assert [ep.onset for ep in d.episodes] == [197]
    # the rule only fires once the current value is below the level, i.e. after the onset
    alarms = detectors.run_detector(detectors.AdHocDetector(SPEC), d)
    assert alarms.min() == 201 and alarms.max() == 260
    det = constant_regression(55.0)
    alarms = detectors.run_detector(det, d)
    assert np.any((197 - alarms > 0) & (197 - alarms <= 60))


@pytest.mark.parametrize("kind", ["CL", "LL", "RG", "IF", "AH"])
def test_detector_serialization_round_trip(corpus, kind):
    train, valid = split(corpus)
    _, data, _, _, test = corpus
    det = detectors.make_detector(
        kind, SPEC, gbt=SMALL, rg=GbtParams(n_trees=5, min_leaf=5), iforest=IsoForestParams(n_trees=20)
    )
    det.fit(train, valid)
    back = detectors.detector_from_dict(json.loads(json.dumps(det.to_dict())), SPEC)
    for e in test:
        assert np.array_equal(back.predict_entity(data[e]), det.predict_entity(data[e]))


def test_fit_is_deterministic(corpus):
    train, valid = split(corpus)
    a = detectors.make_detector("CL", SPEC, gbt=SMALL, strategy="SMOTE", seed=4).fit(train, valid)
    b = detectors.make_detector("CL", SPEC, gbt=SMALL, strategy="SMOTE", seed=4).fit(train, valid)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_alarm_csv_round_trip(tmp_path):
    logs = {"CL": {"e1": np.array([60, 90]), "e0": np.array([120])}, "AH": {"e1": np.array([61])}}
    detectors.write_alarm_csv(tmp_path / "a.csv", logs)
    back = detectors.read_alarm_csv(tmp_path / "a.csv")
    assert {d: {e: v.tolist() for e, v in m.items()} for d, m in back.items()} == {
        d: {e: v.tolist() for e, v in m.items()} for d, m in logs.items()
    }


def test_cl_and_ll_share_features_and_resampler_sees_training_rows_only(corpus, monkeypatch):
    _, data, *_ = corpus
    run = fold_plan(sorted(data), folds=5, repeats=1, seed=0)[0]
    seen = []
    real = detectors.resample

    def spy(ds, strategy, rng_seed, k=5):
        seen.append((Strategy(strategy), set(ds.groups), ds.X.copy()))
        return real(ds, strategy, rng_seed, k)

    monkeypatch.setattr(detectors, "resample", spy)
    setup = DetectorSetup(kinds=(detectors.DetectorKind.CL, detectors.DetectorKind.LL), gbt=SMALL,
                          resampling={"CL": Strategy.RO, "LL": Strategy.RU})
    evaluate_run(run, data, SPEC, setup, MatchConfig(), seed=0)
    assert [s for s, _, _ in seen] == [Strategy.RO, Strategy.RU, Strategy.RU]
    for _, groups, _ in seen:
        assert groups <= set(run.train)
        assert not groups & (set(run.validation) | set(run.test))
    # CL and the first LL layer resample the same imputed feature matrix
    assert np.array_equal(seen[0][2], seen[1][2])
