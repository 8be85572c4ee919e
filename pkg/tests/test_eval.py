import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pimtl import eval as ev
from pimtl.eval import (MetricDimensionError, NormalizationError, UndefinedCorrelationError,
                        normalized_rmse, pearson_cc, rmse)

vec = arrays(np.float64, 30, elements=st.floats(-100, 100))


def two_pass_pearson(y, yh):
    n = len(y)
    my, mh = sum(y) / n, sum(yh) / n
    cov = sum((a - my) * (b - mh) for a, b in zip(y, yh))
    vy = sum((a - my) ** 2 for a in y)
    vh = sum((b - mh) ** 2 for b in yh)
    return cov / math.sqrt(vy * vh)


def test_rmse_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert rmse(y, y) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355339, abs=1e-6)
    assert rmse([0, 0], [3, 4]) == rmse([3, 4], [0, 0])


@pytest.mark.parametrize("a,b", [([1, 2], [1]), ([], [])])
def test_rmse_dimension_errors(a, b):
    with pytest.raises(MetricDimensionError):
        rmse(a, b)


@settings(max_examples=50)
@given(vec, vec, vec)
def test_rmse_triangle(y, z, yh):
    assert rmse(y, yh) <= rmse(y, z) + rmse(z, yh) + 1e-9


def test_pearson_examples():
    y = np.random.default_rng(0).normal(size=50)
    assert pearson_cc(y, 2 * y + 3) == pytest.approx(1.0, abs=1e-12)
    assert pearson_cc(y, -y) == pytest.approx(-1.0, abs=1e-12)


def test_pearson_two_pass_oracle():
    rng = np.random.default_rng(1)
    y, yh = rng.normal(size=100), rng.normal(size=100) + 0.3 * np.arange(100) / 100
    assert pearson_cc(y, yh) == pytest.approx(two_pass_pearson(y.tolist(), yh.tolist()), abs=1e-12)


def test_pearson_constant_is_error():
    with pytest.raises(UndefinedCorrelationError):
        pearson_cc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(MetricDimensionError):
        pearson_cc([1.0], [2.0])


@settings(max_examples=50)
@given(st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 10_000))
def test_pearson_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    y, yh = rng.normal(size=40), rng.normal(size=40)
    base = pearson_cc(y, yh)
    assert abs(pearson_cc(a * y + b, yh) - base) <= 1e-12
    assert abs(pearson_cc(y, a * yh + b) - base) <= 1e-12
    assert -1.0 <= base <= 1.0


def test_nrmse_examples():
    y = np.array([0.0, 1.0, 0.5])
    assert normalized_rmse(y, y) == 0.0
    yh = np.array([0.2, 0.7, 0.5])
    assert normalized_rmse(y, yh) == pytest.approx(rmse(y, yh))
    assert normalized_rmse(3 * y, 3 * yh) == pytest.approx(normalized_rmse(y, yh), abs=1e-15)
    with pytest.raises(NormalizationError):
        normalized_rmse([2.0, 2.0], [1.0, 2.0])


def test_score_orders_outputs_and_converts_angle():
    rng = np.random.default_rng(2)
    truth = rng.normal(size=(40, 6))
    pred = truth + 0.01
    r, c, nr, _ = ev.score(truth, pred)
    assert list(r) == list(ev.OUTPUTS)
    assert r["angle"] == pytest.approx(math.degrees(0.01))
    assert r["FCR"] == pytest.approx(0.01)


def test_score_constant_prediction_gives_nan_cc():
    truth = np.random.default_rng(3).normal(size=(20, 6))
    pred = truth.copy()
    pred[:, 0] = 1.0
    _, c, _, _ = ev.score(truth, pred)
    assert math.isnan(c["FCR"]) and not math.isnan(c["angle"])


def record(method, seed=0, n=30):
    rng = np.random.default_rng(seed)
    truth, pred = rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
    r, c, nr, traces = ev.score(truth, pred)
    curve = {"iteration": [1, 2], "total": [2.0, 1.0], "l_data": [1.5, 0.5], "l_phys": [0.5, 0.5],
             **{f"out{j}": [0.1, 0.05] for j in range(6)}}
    return ev.EvaluationRecord(method, "multiple", 3, [1, 2], seed, 1.0, r, c, nr, "abc", 1.5,
                               traces, curve)


def test_metrics_csv_round_trip():
    recs = [record("CNN-1", 0), record("Pi-CNN-KT", 1)]
    rows = ev.read_metrics_csv(ev.metrics_csv(recs))
    assert len(rows) == 12
    expected = [r for rec in recs for r in rec.rows()]
    for got, want in zip(rows, expected):
        assert got["rmse"] == want["rmse"] and got["cc"] == want["cc"]
        assert got["output"] == want["output"] and got["method"] == want["method"]
        assert got["split_hash"] == "abc"


def test_empty_records_give_header_only(tmp_path):
    assert ev.metrics_csv([]).strip() == ",".join(ev.METRIC_COLUMNS)
    ev.emit_reports([], tmp_path)
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 1
    assert (tmp_path / "loss_curves.csv").read_text().count("\n") == 1


def test_svg_reports_are_valid(tmp_path):
    recs = [record(m, k) for k, m in enumerate(("CNN-1", "CNN-2", "Pi-CNN-KT"))]
    ev.emit_reports(recs, tmp_path)
    ns = "{http://www.w3.org/2000/svg}"
    for o in ev.OUTPUTS:
        root = ET.parse(tmp_path / f"trace_{o}.svg").getroot()
        lines = root.findall(f"{ns}polyline")
        assert [p.get("data-series") for p in lines] == ["ground truth", "CNN-1", "CNN-2", "Pi-CNN-KT"]
    curves = (tmp_path / "loss_curves.csv").read_text().splitlines()
    assert curves[0].split(",") == list(ev.CURVE_COLUMNS) and len(curves) == 7


def test_emit_reports_surfaces_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        ev.emit_reports([record("CNN-1")], blocker / "sub")
