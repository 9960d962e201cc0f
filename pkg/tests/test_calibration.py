import math
import random
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from blockemu.calibration import (CalibrationMiss, DifficultyTimeMap, MapFormatError, SolveTimeStats,
                                  calibrate, difficulties_near, expand_difficulty_range, load_map,
                                  mean_matched_location, mean_matched_sampler, predict_solve_ms,
                                  sample_solve_time, save_map, select_difficulty, truncated_mean,
                                  truncated_normal_sampler)
from blockemu.puzzle import Difficulty, PuzzleError


def D(text):
    return Difficulty.parse(text)


def test_range_expansion_example():
    assert [str(d) for d in expand_difficulty_range("0.0:1.2")] == ["0.0", "0.1", "0.2", "1.0", "1.1", "1.2"]


def test_range_expansion_lists_and_dedup():
    assert expand_difficulty_range("2.1, 1.0,2.1") == [D("2.1"), D("1.0")]
    assert len(expand_difficulty_range("1.0:8.7")) == 8 * 8
    with pytest.raises(PuzzleError):
        expand_difficulty_range("2.0:1.0")
    with pytest.raises(PuzzleError):
        expand_difficulty_range(" , ")


def test_stats_validation():
    with pytest.raises(ValueError):
        SolveTimeStats(D("1.0"), 5.0, 1.0, 0, 1.0, 9.0)
    with pytest.raises(ValueError):
        SolveTimeStats(D("1.0"), 50.0, 1.0, 3, 1.0, 9.0)
    st_ = SolveTimeStats.from_samples(D("1.0"), [1.0, 2.0, 3.0])
    assert st_.mean_ms == 2.0 and st_.stddev_ms == pytest.approx(1.0) and st_.samples == 3
    assert st_.stderr_ms == pytest.approx(1 / math.sqrt(3))


def test_calibrate_small_and_deterministic_headers():
    m = calibrate(expand_difficulty_range("0.0:1.1"), samples=4, seed=5)
    assert [str(d) for d in m.difficulties()] == ["0.0", "0.1", "1.0", "1.1"]
    for s in m:
        assert s.samples == 4 and 0 < s.min_ms <= s.mean_ms <= s.max_ms


def test_calibrate_budget_omits_entry(caplog):
    m = calibrate([D("0.0"), D("9.0")], samples=2, budget_s=0.05)
    assert D("0.0") in m and D("9.0") not in m
    assert "budget" in caplog.text


def test_lookup_miss_has_remediation():
    m = DifficultyTimeMap({}, "h")
    with pytest.raises(CalibrationMiss) as ei:
        m.lookup(D("3.2"))
    assert "calibrate --difficulties 3.2" in str(ei.value)


def test_map_round_trip_exact(tmp_path):
    entries = {D("1.0"): SolveTimeStats(D("1.0"), 0.1 + 0.2, 1 / 3, 30, 0.01, 2.5),
               D("0.2"): SolveTimeStats(D("0.2"), 12.5, 0.0, 1, 12.5, 12.5)}
    m = DifficultyTimeMap(entries, "host x")
    p = save_map(m, tmp_path / "m.csv")
    text = p.read_text()
    assert text.splitlines()[0] == "# blocklite-map v1 host=host x"
    assert text.splitlines()[1].startswith("0.2,")  # sorted by (L, M)
    back = load_map(p)
    assert back == m
    # saving again overwrites, never appends
    save_map(back, p)
    assert p.read_text() == text
    assert not [f for f in tmp_path.iterdir() if f.name.startswith(".map-")]


@pytest.mark.parametrize("body,lineno", [
    ("1.0,1,1,3,1\n", 2),
    ("1.0,1,1,3,1,1\n1.0,1,1,3,1,1\n", 3),
    ("x.0,1,1,3,1,1\n", 2),
    ("1.0,1,1,0,1,1\n", 2),
])
def test_load_map_errors_carry_line_numbers(tmp_path, body, lineno):
    p = tmp_path / "bad.csv"
    p.write_text("# blocklite-map v1 host=h\n" + body)
    with pytest.raises(MapFormatError) as ei:
        load_map(p)
    assert ei.value.lineno == lineno


def test_load_map_requires_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1.0,1,1,3,1,1\n")
    with pytest.raises(MapFormatError):
        load_map(p)


def test_select_difficulty_nearest_and_ties():
    mk = lambda t, mean: SolveTimeStats(D(t), mean, 1.0, 5, mean, mean)
    m = DifficultyTimeMap({D("1.0"): mk("1.0", 10.0), D("2.0"): mk("2.0", 30.0), D("3.0"): mk("3.0", 100.0)})
    assert select_difficulty(m, 12.0) == D("1.0")
    assert select_difficulty(m, 20.0) == D("1.0")  # tie goes to the smaller difficulty
    assert select_difficulty(m, 1e9) == D("3.0")
    single = DifficultyTimeMap({D("4.4"): mk("4.4", 5.0)})
    assert select_difficulty(single, 60_000.0) == D("4.4")
    with pytest.raises(ValueError):
        select_difficulty(DifficultyTimeMap({}), 1.0)


def test_difficulties_near_orders_by_prediction():
    rate = 1e6
    near = difficulties_near(60_000.0, rate, count=3)
    preds = sorted(abs(math.log(predict_solve_ms(d, rate) / 60_000.0)) for d in near)
    assert len(near) == 3
    assert preds[-1] < math.log(16)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # scipy computes unused higher moments
@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 20), st.floats(-10, 10))
def test_truncated_mean_matches_scipy(loc, scale, lower):
    a = (lower - loc) / scale
    expected = sps.truncnorm.mean(a, math.inf, loc=loc, scale=scale)
    assert truncated_mean(loc, scale, lower) == pytest.approx(expected, rel=1e-7, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 1e6), st.floats(0.05, 2.0))
def test_mean_matched_location_hits_mean(mean, rel_sd):
    scale = mean * rel_sd
    lower = 0.1
    loc = mean_matched_location(mean, scale, lower)
    a = (lower - loc) / scale
    if a < 30:
        assert sps.truncnorm.mean(a, math.inf, loc=loc, scale=scale) == pytest.approx(mean, rel=1e-6)


def test_truncnorm_draws_match_scipy_cdf():
    st_ = SolveTimeStats(D("2.0"), 100.0, 40.0, 30, 10.0, 400.0)
    rng = random.Random(0)
    xs = [truncated_normal_sampler(st_, rng) for _ in range(4000)]
    a = (10.0 - 100.0) / 40.0
    res = sps.kstest(xs, sps.truncnorm(a, math.inf, loc=100.0, scale=40.0).cdf)
    assert res.pvalue > 0.001
    assert min(xs) >= 10.0


def test_plain_truncation_overshoots_exponential_like_mean():
    st_ = SolveTimeStats(D("1.0"), 1000.0, 1000.0, 30, 1.0, 5000.0)
    rng = random.Random(1)
    plain = statistics.fmean(truncated_normal_sampler(st_, rng) for _ in range(20000))
    matched = statistics.fmean(mean_matched_sampler(st_, rng) for _ in range(20000))
    assert plain > 1.2 * 1000.0
    assert matched == pytest.approx(1000.0, rel=0.03)


def test_samplers_consume_one_uniform_each():
    st_ = SolveTimeStats(D("1.0"), 50.0, 20.0, 30, 1.0, 500.0)
    for sampler in (truncated_normal_sampler, mean_matched_sampler):
        a, b = random.Random(9), random.Random(9)
        sampler(st_, a)
        b.random()
        assert a.random() == b.random()


def test_zero_stddev_returns_mean():
    m = DifficultyTimeMap({D("1.0"): SolveTimeStats(D("1.0"), 42.0, 0.0, 5, 42.0, 42.0)})
    rng = random.Random(0)
    assert {sample_solve_time(m, D("1.0"), rng, s) for s in ("mean-matched", "truncnorm")} == {42.0}


def test_sample_miss_raises():
    with pytest.raises(CalibrationMiss):
        sample_solve_time(DifficultyTimeMap({}), D("1.0"), random.Random(0))
