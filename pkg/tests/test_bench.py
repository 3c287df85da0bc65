import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from oracles import naive_stats, rel_close

from confcore import bench
from confcore.bench import (
    RAW_HEADER,
    SUMMARY_HEADER,
    BenchReport,
    Kind,
    Scenario,
    ScenarioMismatch,
    compare,
    linear_fit,
    nearest_rank,
    summarize,
)

samples_st = st.lists(st.floats(0.001, 1e4, allow_nan=False), min_size=1, max_size=200)


def sc(**kw):
    base = dict(kind=Kind.DB_CREATE, sizes=(10, 20, 30), trials=3, seed=1, warmup=0)
    base.update(kw)
    return Scenario(**base)


@given(samples_st)
def test_summary_matches_naive_recomputation(xs):
    row = summarize(5, "plain", xs)
    mean, median, p95, sd = naive_stats(xs)
    assert rel_close(row.mean_ms, mean) and rel_close(row.median_ms, median)
    assert row.p95_ms == p95
    assert math.isclose(row.stddev_ms, sd, rel_tol=1e-9, abs_tol=1e-9 * max(xs))
    assert row.trials == len(xs)


def test_nearest_rank_examples():
    xs = list(range(1, 101))
    assert nearest_rank(xs, 95) == 95 and nearest_rank(xs, 100) == 100 and nearest_rank(xs, 0) == 1
    assert nearest_rank([7.0], 95) == 7.0
    with pytest.raises(ValueError):
        nearest_rank([], 50)


def test_single_trial_has_zero_stddev():
    rep = BenchReport.from_samples(sc(sizes=(100,), trials=1), {100: [3.25]})
    assert rep.rows[0].stddev_ms == 0 and rep.rows[0].mean_ms == 3.25 and rep.linear_fit is None


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=30,
                unique_by=lambda t: t[0]))
def test_fit_matches_closed_form_least_squares(pts):
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    assume(np.ptp(xs) > 1e-3)
    fit = linear_fit(xs, ys)
    A = np.vstack([xs, np.ones(len(xs))]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, np.array(ys), rcond=None)
    resid = np.array(ys) - (slope * np.array(xs) + intercept)
    ss_tot = float(((np.array(ys) - np.mean(ys)) ** 2).sum())
    r2 = 1 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    scale = max(1.0, abs(slope), abs(intercept))
    assert abs(fit.slope - slope) <= 1e-9 * scale
    assert abs(fit.intercept - intercept) <= 1e-9 * scale * max(1.0, float(np.max(np.abs(xs))))
    if ss_tot > 1e-6:
        assert abs(fit.r_squared - r2) <= 1e-9


def test_fit_exact_line():
    fit = linear_fit([100, 200, 300, 400], [12.0, 22.0, 32.0, 42.0])
    assert rel_close(fit.slope, 0.1) and rel_close(fit.intercept, 2.0) and rel_close(fit.r_squared, 1.0)
    with pytest.raises(ValueError):
        linear_fit([1], [1])


# -- compare ------------------------------------------------------------------------------

def _rep(mode, samples, **kw):
    return BenchReport.from_samples(sc(mode=mode, **kw), samples)


def test_identical_reports_zero_deltas():
    s = {10: [1.0, 2.0, 3.0], 20: [2.0, 2.0, 2.0], 30: [5.0, 4.0, 6.0]}
    assert all(d.abs_delta_ms == 0 and d.rel_delta == 0 for d in compare(_rep("plain", s), _rep("attested", s)))


def test_uniform_one_ms_shift():
    s = {10: [1.0, 2.0, 3.0], 20: [2.5, 2.0, 2.0], 30: [5.0, 4.0, 6.0]}
    shifted = {k: [v + 1.0 for v in vs] for k, vs in s.items()}
    for d in compare(_rep("plain", s), _rep("attested", shifted)):
        assert math.isclose(d.abs_delta_ms, 1.0, rel_tol=1e-12)


@given(st.lists(st.lists(st.floats(0.01, 100), min_size=3, max_size=3), min_size=6, max_size=6))
def test_deltas_equal_recomputation_from_raw_rows(vals):
    a = {10: vals[0], 20: vals[1], 30: vals[2]}
    b = {10: vals[3], 20: vals[4], 30: vals[5]}
    for d in compare(_rep("plain", a), _rep("attested", b)):
        ma, mb = sum(a[d.size]) / 3, sum(b[d.size]) / 3
        assert rel_close(d.abs_delta_ms + ma, mb, 1e-9) or abs(d.abs_delta_ms - (mb - ma)) <= 1e-9 * mb
        assert rel_close(d.rel_delta, (mb - ma) / ma, 1e-6) or abs(d.rel_delta - (mb - ma) / ma) < 1e-9


@pytest.mark.parametrize("change", [dict(seed=2), dict(trials=4), dict(sizes=(10, 20)), dict(kind=Kind.NF_REGISTRATION)])
def test_scenario_mismatch(change):
    a = _rep("plain", {10: [1.0] * 3, 20: [1.0] * 3, 30: [1.0] * 3})
    sizes = change.get("sizes", (10, 20, 30))
    trials = change.get("trials", 3)
    b = BenchReport.from_samples(sc(mode="attested", **change), {s: [1.0] * trials for s in sizes})
    with pytest.raises(ScenarioMismatch):
        compare(a, b)


@pytest.mark.parametrize("bad", [dict(trials=0), dict(sizes=()), dict(sizes=(3, 3)), dict(sizes=(5, 2)),
                                 dict(mode="turbo"), dict(warmup=-1), dict(parallel=True)])
def test_scenario_validation(bad):
    with pytest.raises(ValueError):
        sc(**bad)


# -- running against a live core -------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(Kind))
def test_run_small_scenarios(kind, tmp_path):
    rep = bench.run(Scenario(kind, (1, 3, 5), 2, "attested", seed=3, warmup=1), store_dir=tmp_path)
    assert [r.size for r in rep.rows] == [1, 3, 5]
    assert all(len(rep.samples[s]) == 2 and r.trials == 2 for s, r in zip((1, 3, 5), rep.rows))
    assert all(v > 0 for vs in rep.samples.values() for v in vs)
    assert rep.linear_fit is not None and "emulation" in rep.header


def test_parallel_registration(tmp_path):
    rep = bench.run(Scenario(Kind.NF_REGISTRATION, (2, 4), 4, "plain", warmup=0, parallel=True),
                    store_dir=tmp_path)
    assert [len(rep.samples[s]) for s in (2, 4)] == [4, 4]


def test_run_both_and_csv(tmp_path):
    plain, att = bench.run_both(Scenario(Kind.DB_CREATE, (5, 10), 2, seed=1, warmup=0), store_dir=tmp_path)
    assert (plain.scenario.mode, att.scenario.mode) == ("plain", "attested")
    bench.write_raw([plain, att], tmp_path / "raw.csv")
    bench.write_summary([plain, att], tmp_path / "summary.csv")
    deltas = compare(plain, att)
    bench.write_deltas(deltas, "DbCreate", tmp_path / "deltas.csv")
    raw = list(csv.reader(open(tmp_path / "raw.csv")))
    assert raw[0] == RAW_HEADER and len(raw) == 1 + 2 * 2 * 2
    summ = list(csv.reader(open(tmp_path / "summary.csv")))
    assert summ[0] == SUMMARY_HEADER
    assert [r[0] for r in summ[1:]] == ["DbCreate", "DbCreate", "#fit", "DbCreate", "DbCreate", "#fit"]
    # summary means are recomputable from the raw file
    for row in summ[1:]:
        if row[0] == "#fit":
            continue
        vals = [float(r[4]) for r in raw[1:] if r[1] == row[1] and r[2] == row[2]]
        assert abs(float(row[3]) - sum(vals) / len(vals)) < 1e-5
    d = list(csv.reader(open(tmp_path / "deltas.csv")))
    assert d[0][:2] == ["scenario", "size"] and len(d) == 3
