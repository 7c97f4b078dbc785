import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eltnilm.data import NormStats, Segment, WindowSet
from eltnilm.errors import ConfigError, DataError
from eltnilm.evaluation import (
    APPLIANCE_THRESHOLDS,
    Confusion,
    confusion,
    denormalize,
    evaluate_predictions,
    f1_from_counts,
    f1_mcc,
    macro_average,
    mae,
    mcc_from_counts,
    report,
    statusize,
    threshold_for,
    write_reports,
    write_trace,
)

from oracles import f1_mcc_closed_form


def expand(tp, tn, fp, fn):
    pred = [True] * tp + [False] * tn + [True] * fp + [False] * fn
    truth = [True] * tp + [False] * tn + [False] * fp + [True] * fn
    return np.array(pred), np.array(truth)


class TestMetrics:
    def test_worked_case(self):
        f1, mcc, c = f1_mcc(*expand(2, 2, 1, 1))
        assert c == Confusion(2, 2, 1, 1)
        assert f1 == pytest.approx(2 / 3, abs=1e-15)
        assert mcc == pytest.approx(1 / 3, abs=1e-15)

    def test_perfect_and_inverted(self):
        f1, mcc, _ = f1_mcc(*expand(5, 5, 0, 0))
        assert (f1, mcc) == (1.0, 1.0)
        f1, mcc, _ = f1_mcc(*expand(0, 0, 5, 5))
        assert (f1, mcc) == (0.0, -1.0)

    def test_degenerate_denominators(self):
        assert f1_mcc(*expand(0, 10, 0, 0))[:2] == (0.0, 0.0)
        assert mcc_from_counts(Confusion(10, 0, 0, 0)) == 0.0

    def test_large_counts_do_not_overflow(self):
        c = Confusion(3 * 10**9, 4 * 10**9, 10**9, 2 * 10**9)
        f1_ref, mcc_ref = f1_mcc_closed_form(3, 4, 1, 2)
        assert mcc_from_counts(c) == pytest.approx(mcc_ref, rel=1e-12)
        assert f1_from_counts(c) == pytest.approx(f1_ref, rel=1e-12)

    def test_random_configurations(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            tp, tn, fp, fn = (int(v) for v in rng.integers(0, 40, 4))
            f1_ref, mcc_ref = f1_mcc_closed_form(tp, tn, fp, fn)
            f1, mcc, _ = f1_mcc(*expand(tp, tn, fp, fn))
            assert abs(f1 - f1_ref) < 1e-12 and abs(mcc - mcc_ref) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion([True], [True, False])
        with pytest.raises(ValueError):
            mae([1.0], [1.0, 2.0])

    def test_mae(self):
        assert mae([1.0, 5.0], [2.0, 2.0]) == 2.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60), st.integers(0, 2**31 - 1))
def test_metric_ranges(truth, seed):
    truth = np.array(truth)
    pred = np.random.default_rng(seed).random(len(truth)) < 0.5
    f1, mcc, c = f1_mcc(pred, truth)
    assert 0.0 <= f1 <= 1.0 and -1.0 <= mcc <= 1.0
    assert c.total == len(truth)


class TestThresholds:
    def test_table(self):
        assert APPLIANCE_THRESHOLDS == {"dishwasher": 10, "fridge": 50, "kettle": 2000, "microwave": 200, "washer": 20}

    def test_boundary_counts_as_on(self):
        np.testing.assert_array_equal(statusize([49.9, 50.0, 51.0], "fridge"), [False, True, True])

    def test_unknown_appliance_lists_known(self):
        with pytest.raises(ConfigError, match="fridge"):
            threshold_for("toaster")

    def test_override(self):
        assert threshold_for("toaster", {"toaster": 300}) == 300.0
        assert threshold_for("kettle", {"kettle": 1000}) == 1000.0


class ConstantModel:
    def __init__(self, value):
        self.value = value

    def predict_windows(self, windows, batch_size=256):
        return np.full(len(windows), self.value)


@pytest.fixture
def window_set():
    n = 40
    app = np.where(np.arange(n) % 10 < 3, 2500.0, 0.0)
    seg = Segment(6 * np.arange(n, dtype=np.int64), app + 100.0, app)
    return WindowSet([seg], NormStats(1000.0, 500.0), NormStats(750.0, 1000.0), input_len=5)


class TestReport:
    def test_denormalize_clamps(self):
        np.testing.assert_array_equal(denormalize([-5.0, 1.0], NormStats(0.0, 2.0)), [0.0, 2.0])

    def test_constant_model(self, window_set):
        # normalised 0 -> 750 W, below the kettle threshold: always off
        rep, pred = report(ConstantModel(0.0), window_set, "kettle")
        truth = window_set.truth_watts()
        assert rep.samples == len(window_set) == 36
        assert rep.mae == pytest.approx(np.abs(750.0 - truth).mean())
        assert rep.tp == 0 and rep.f1 == 0.0 and rep.mcc == 0.0
        assert (pred == 750.0).all()

    def test_empty_windows(self):
        w = WindowSet([], NormStats(0, 1), NormStats(0, 1), input_len=5)
        with pytest.raises(DataError):
            report(ConstantModel(0.0), w, "kettle")

    def test_evaluate_predictions_perfect(self):
        truth = np.array([0.0, 3000.0, 0.0, 2500.0])
        rep = evaluate_predictions(truth, truth, "kettle")
        assert (rep.mae, rep.f1, rep.mcc) == (0.0, 1.0, 1.0)

    def test_write_single(self, tmp_path):
        rep = evaluate_predictions([0.0, 3000.0], [0.0, 2500.0], "kettle")
        write_reports(tmp_path, [rep])
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["appliance"] == "kettle" and data["f1"] == 1.0
        rows = list(csv.DictReader(open(tmp_path / "report.csv")))
        assert len(rows) == 1

    def test_write_macro_average(self, tmp_path):
        a = evaluate_predictions([0.0, 3000.0], [0.0, 2500.0], "kettle")
        b = evaluate_predictions([0.0, 0.0], [0.0, 100.0], "fridge")
        write_reports(tmp_path, [a, b])
        rows = list(csv.DictReader(open(tmp_path / "report.csv")))
        assert [r["appliance"] for r in rows] == ["kettle", "fridge", "average"]
        avg = macro_average([a, b])
        assert avg.f1 == pytest.approx((a.f1 + b.f1) / 2) and avg.samples == 4

    def test_trace(self, tmp_path):
        write_trace(tmp_path / "t.csv", [6, 12], [1.5, 2.0], [1.0, 2.0])
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows == [["timestamp", "pred_watts", "truth_watts"], ["6", "1.5", "1.0"], ["12", "2.0", "2.0"]]


class TestEvaluationContracts:
    def test_denormalize_examples(self):
        stats = NormStats(300.0, 50.0)
        assert denormalize([0.0], stats)[0] == 300.0
        v = np.array([0.5, 2.0, -1.0])
        np.testing.assert_allclose(stats.normalize(denormalize(v, stats)), v, atol=1e-12)
        assert denormalize([-100.0], stats)[0] == 0.0

    def test_mae_examples(self):
        assert mae([3.0, 4.0], [3.0, 4.0]) == 0.0
        assert mae([0.0, 10.0], [10.0, 10.0]) == 5.0
        rng = np.random.default_rng(3)
        p, t = rng.uniform(0, 100, 20), rng.uniform(0, 100, 20)
        assert mae(p + 17.0, t + 17.0) == pytest.approx(mae(p, t), abs=1e-12)
        assert mae(p, t) > 0

    def test_threshold_boundaries(self):
        np.testing.assert_array_equal(statusize([1999.0, 2000.0], "kettle"), [False, True])
        np.testing.assert_array_equal(statusize([5.0, 15.0], "dishwasher"), [False, True])
        assert not statusize(np.zeros(10), "fridge").any()

    def test_mcc_symmetric_f1_not(self):
        rng = np.random.default_rng(4)
        f1_changed = False
        for _ in range(200):
            a, b = rng.random(30) < 0.3, rng.random(30) < 0.6
            f1_ab, mcc_ab, c = f1_mcc(a, b)
            assert f1_mcc(b, a)[1] == pytest.approx(mcc_ab, abs=1e-15)
            # relabelling on as off leaves MCC unchanged but not F1
            f1_neg, mcc_neg, _ = f1_mcc(~a, ~b)
            assert mcc_neg == pytest.approx(mcc_ab, abs=1e-15)
            f1_changed |= abs(f1_neg - f1_ab) > 1e-9
            f1_ref, mcc_ref = f1_mcc_closed_form(c.tp, c.tn, c.fp, c.fn)
            assert f1_ab == pytest.approx(f1_ref, abs=1e-12) and mcc_ab == pytest.approx(mcc_ref, abs=1e-12)
        assert f1_changed

    def test_counts_match_per_sample_accumulation(self):
        rng = np.random.default_rng(5)
        p, t = rng.random(100) < 0.4, rng.random(100) < 0.4
        tp = tn = fp = fn = 0
        for pi, ti in zip(p, t):
            tp += pi and ti
            tn += (not pi) and (not ti)
            fp += pi and not ti
            fn += (not pi) and ti
        assert confusion(p, t) == Confusion(tp, tn, fp, fn)

    def test_oracle_predictor(self, window_set):
        class Oracle:
            def predict_windows(self, windows, batch_size=256):
                return windows.appliance_stats.normalize(windows.truth_watts())

        rep, _ = report(Oracle(), window_set, "kettle")
        assert rep.mae == pytest.approx(0.0, abs=1e-9) and rep.f1 == 1.0 and rep.mcc == 1.0

    def test_report_deterministic(self, window_set):
        a, _ = report(ConstantModel(1.3), window_set, "kettle")
        b, _ = report(ConstantModel(1.3), window_set, "kettle")
        assert a == b

    def test_all_off_constant_zero(self):
        n = 20
        seg = Segment(6 * np.arange(n, dtype=np.int64), np.full(n, 50.0), np.where(np.arange(n) % 2, 30.0, 0.0))
        w = WindowSet([seg], NormStats(0.0, 1.0), NormStats(0.0, 1.0), input_len=3)
        rep, _ = report(ConstantModel(0.0), w, "kettle")
        assert rep.mae == pytest.approx(w.truth_watts().mean()) and rep.f1 == 0.0 and rep.mcc == 0.0
