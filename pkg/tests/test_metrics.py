import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rewarp.core import Image, OverlapMask
from rewarp.errors import EmptyMask
from rewarp.homography import Homography
from rewarp.metrics import (
    PSNR_CAP, Metrics, bucketize, corner_error, epe, mpsnr, report_json, report_table, suite_report,
)


def const(v, shape=(8, 10)):
    return Image(np.full(shape + (3,), v))


ALL = OverlapMask(np.ones((8, 10), bool))


def test_mpsnr_identical_is_capped():
    assert mpsnr(const(0.3), const(0.3), ALL) == PSNR_CAP == 99.0


def test_mpsnr_half_intensity():
    assert mpsnr(const(0.0), const(0.5), ALL) == pytest.approx(6.0206, abs=1e-4)


def test_mpsnr_ignores_invalid_pixels():
    a = np.full((8, 10, 3), 0.2)
    b = a.copy()
    b[:, :3] = 0.9
    mask = np.ones((8, 10), bool)
    mask[:, :3] = False
    assert mpsnr(Image(a), Image(b), OverlapMask(mask)) == PSNR_CAP


def test_mpsnr_empty_mask():
    with pytest.raises(EmptyMask):
        mpsnr(const(0.1), const(0.2), OverlapMask(np.zeros((8, 10), bool)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mpsnr_symmetric_and_invalid_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 8, 10, 3))
    mask = rng.uniform(size=(8, 10)) > 0.3
    mask[0, 0] = True
    m = OverlapMask(mask)
    v = mpsnr(Image(a), Image(b), m)
    assert v == mpsnr(Image(b), Image(a), m)
    a2 = a.copy()
    a2[~mask] = rng.uniform(size=((~mask).sum(), 3))
    assert v == mpsnr(Image(a2), Image(b), m)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mpsnr_decreases_with_error(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.3, 0.7, (8, 10, 3))
    err = rng.uniform(0.01, 0.1, (8, 10, 3))
    more = err + rng.uniform(0.0, 0.1, (8, 10, 3))
    more[0, 0, 0] += 0.01
    assert mpsnr(Image(a), Image(a + err), ALL) > mpsnr(Image(a), Image(a + more), ALL)


@pytest.mark.parametrize("ratio, bucket", [
    (0.0, "low"), (0.30, "low"), (0.31, "mid"), (0.60, "mid"), (0.61, "high"), (1.0, "high"),
])
def test_bucketize(ratio, bucket):
    assert bucketize(ratio) == bucket


@given(st.floats(0.0, 1.0))
def test_buckets_partition(ratio):
    b = bucketize(ratio)
    assert b == ("low" if ratio <= 0.30 else "mid" if ratio <= 0.60 else "high")


def test_metrics_requires_exactly_one_outcome():
    with pytest.raises(ValueError):
        Metrics()
    with pytest.raises(ValueError):
        Metrics(mpsnr=20.0, failure="NoOverlap")


def test_metrics_to_dict_timing():
    m = Metrics(mpsnr=20.0, overlap_ratio=0.5, bucket="mid", time_ms=12.0)
    assert "time_ms" in m.to_dict() and "time_ms" not in m.to_dict(timing=False)
    assert "epe" not in m.to_dict()


def test_corner_error():
    assert corner_error(Homography.translation(3.0, 4.0), np.zeros((4, 2)), 64, 64) == pytest.approx(5.0)
    assert corner_error(Homography.translation(3.0, 4.0), np.tile([3.0, 4.0], (4, 1)), 64, 64) == pytest.approx(0.0, abs=1e-9)


def test_epe():
    a = np.zeros((4, 5, 2))
    b = a.copy()
    b[..., 0] = 3.0
    b[..., 1] = 4.0
    mask = np.zeros((4, 5), bool)
    mask[1] = True
    assert epe(a, b, mask) == 5.0
    with pytest.raises(EmptyMask):
        epe(a, b, np.zeros((4, 5), bool))


def ok(v, bucket):
    return Metrics(mpsnr=v, overlap_ratio=0.5, bucket=bucket, time_ms=10.0)


def test_suite_single_success():
    rep = suite_report([("a", ok(20.0, "mid"))])
    assert rep["summary"]["average"] == 20.0
    assert rep["summary"]["failure_pct"] == 0.0


def test_suite_failure_percentage():
    results = [(f"p{i}", ok(20.0, "high")) for i in range(9)]
    results.append(("p9", Metrics(failure="NoOverlap", time_ms=1.0)))
    rep = suite_report(results)
    assert rep["summary"]["failure_pct"] == 10.0
    assert rep["results"][-1]["failure"] == "NoOverlap"


def test_suite_per_bucket_oracle():
    results = [("c", ok(10.0, "low")), ("a", ok(30.0, "high")), ("b", ok(20.0, "low")),
               ("d", ok(26.0, "high")), ("e", Metrics(failure="UnreasonableWarp"))]
    rep = suite_report(results)
    pb = rep["summary"]["per_bucket"]
    assert pb["low"] == {"count": 2, "mpsnr": 15.0}
    assert pb["mid"] == {"count": 0, "mpsnr": None}
    assert pb["high"] == {"count": 2, "mpsnr": 28.0}
    assert rep["summary"]["average"] == 21.5
    assert rep["summary"]["failure_pct"] == 20.0
    assert [r["id"] for r in rep["results"]] == ["a", "b", "c", "d", "e"]
    assert rep["summary"]["mean_time_ms"] == 10.0


@given(st.integers(1, 50), st.integers(0, 50))
def test_failure_percentage_exact(n_ok, n_fail):
    results = [(f"o{i}", ok(20.0, "mid")) for i in range(n_ok)]
    results += [(f"f{i}", Metrics(failure="NoOverlap")) for i in range(n_fail)]
    assert suite_report(results)["summary"]["failure_pct"] == 100.0 * n_fail / (n_ok + n_fail)


def test_report_without_timing():
    rep = suite_report([("a", ok(20.0, "mid"))], timing=False)
    assert "mean_time_ms" not in rep["summary"]
    assert "time_ms" not in rep["results"][0]


def test_report_formats():
    rep = suite_report([("a", ok(20.0, "mid")), ("b", Metrics(failure="NoOverlap"))])
    assert json.loads(report_json(rep)) == rep
    table = report_table(rep).splitlines()
    assert len(table) == 2
    assert table[0].split() == ["low", "mid", "high", "average", "failures", "time_ms"]
    assert table[1].split() == ["mPSNR", "-", "20.00", "-", "20.00", "50.0%", "10.0"]


def test_empty_report():
    rep = suite_report([])
    assert rep["results"] == [] and rep["summary"]["failure_pct"] == 0.0
