import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rolling_diffusion.errors import ConfigError, InvalidIntervalError
from rolling_diffusion.schedules import (
    COSINE,
    CosineSchedule,
    GlobalRollingMap,
    ScheduleKind,
    ScheduleSpec,
    local_time,
    noise_level,
    partition_frames,
)

KINDS = [ScheduleKind.LIN, ScheduleKind.INIT, ScheduleKind.CONST]


@st.composite
def specs(draw, kinds=(ScheduleKind.LIN, ScheduleKind.INIT, ScheduleKind.INIT_RESCALED, ScheduleKind.CONST)):
    kind = draw(st.sampled_from(kinds))
    W = draw(st.integers(1, 24))
    n = 0 if kind is ScheduleKind.INIT_RESCALED else draw(st.integers(0, W - 1))
    return ScheduleSpec(kind, W, n)


times = st.floats(0.0, 1.0, allow_nan=False)


# -- SNR schedule ---------------------------------------------------------------


def test_noise_level_endpoint_near_clean():
    lvl = noise_level(COSINE.t_min)
    assert lvl.alpha == pytest.approx(1.0, abs=1e-7)
    assert 0.0 < lvl.sigma < 2e-4
    assert lvl.logsnr > 15


def test_noise_level_midpoint_is_symmetric():
    lvl = noise_level(0.5)
    assert lvl.alpha == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert lvl.sigma == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert abs(lvl.logsnr) < 1e-12


def test_logsnr_ordering_examples():
    lam = noise_level(np.array([0.25, 0.5, 0.75])).logsnr
    assert lam[0] > lam[1] > lam[2]


def test_logsnr_strictly_decreasing_and_variance_preserving_on_grid():
    t = np.linspace(0.0, 1.0, 1000)
    lvl = noise_level(t)
    assert np.all(np.diff(lvl.logsnr[1:-1]) < 0)
    assert np.max(np.abs(lvl.alpha**2 + lvl.sigma**2 - 1)) <= 1e-12
    assert np.all((lvl.alpha > 0) & (lvl.alpha <= 1) & (lvl.sigma > 0) & (lvl.sigma <= 1))


def test_endpoints_are_clamped():
    lo, hi = noise_level(np.array([0.0, 1.0])).logsnr
    assert np.isfinite(lo) and np.isfinite(hi)
    assert lo == noise_level(COSINE.t_min).logsnr


def test_logsnr_derivative_matches_finite_difference():
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd = -(noise_level(t + h).logsnr - noise_level(t - h).logsnr) / (2 * h)
    np.testing.assert_allclose(COSINE.neg_dlogsnr_dt(t), fd, rtol=1e-6)


@pytest.mark.parametrize("t_min", [0.0, 0.5, -0.1])
def test_cosine_rejects_bad_clamp(t_min):
    with pytest.raises(ConfigError):
        CosineSchedule(t_min=t_min)


# -- local times ---------------------------------------------------------------


def test_lin_window_endpoints():
    spec = ScheduleSpec("lin", 16)
    np.testing.assert_array_equal(spec.local_times(1.0), np.arange(1, 17) / 16)
    np.testing.assert_array_equal(spec.local_times(0.0), np.arange(16) / 16)


def test_lin_clean_frames_stay_at_zero():
    spec = ScheduleSpec("lin", 16, n_cln=2)
    for t in np.linspace(0, 1, 11):
        assert local_time(spec, 1, t) == 0.0


def test_init_is_all_noise_at_one():
    np.testing.assert_array_equal(ScheduleSpec("init", 16).local_times(1.0), np.ones(16))


def test_init_at_one_over_w_equals_lin_at_one():
    W = 16
    np.testing.assert_array_equal(ScheduleSpec("init", W).local_times(1 / W),
                                  ScheduleSpec("lin", W).local_times(1.0))


def test_init_rescaled_endpoints():
    spec = ScheduleSpec("init_rescaled", 8)
    np.testing.assert_array_equal(spec.local_times(0.0), np.arange(8) / 8)
    np.testing.assert_array_equal(spec.local_times(1.0), np.ones(8))


def test_init_rescaled_at_one_over_w_follows_printed_formula():
    W = 8
    w = np.arange(W)
    np.testing.assert_allclose(ScheduleSpec("init_rescaled", W).local_times(1 / W),
                               w / W + (1 / W) * (1 - w / W), atol=1e-15)


def test_init_rescaled_requires_no_clean_frames():
    with pytest.raises(ConfigError):
        ScheduleSpec("init_rescaled", 8, n_cln=1)


@pytest.mark.parametrize("W,n", [(0, 0), (4, 4), (4, -1)])
def test_spec_validation(W, n):
    with pytest.raises(ConfigError):
        ScheduleSpec("lin", W, n)


def test_local_time_index_error():
    spec = ScheduleSpec("lin", 4)
    with pytest.raises(IndexError):
        local_time(spec, 4, 0.5)
    with pytest.raises(IndexError):
        local_time(spec, -1, 0.5)


def test_rolling_state():
    np.testing.assert_array_equal(ScheduleSpec("init", 8).rolling_state(), np.arange(8) / 8)
    np.testing.assert_array_equal(ScheduleSpec("lin", 8, 2).rolling_state(),
                                  [0, 0, 0, 1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6])


def test_const_spec_shares_global_time():
    lt = ScheduleSpec("const", 6, 2).local_times(0.3)
    np.testing.assert_array_equal(lt, [0, 0, 0.3, 0.3, 0.3, 0.3])


def test_batched_local_times_shape():
    spec = ScheduleSpec("lin", 5, 1)
    t = np.random.default_rng(0).random((3, 4))
    lt = spec.local_times(t)
    assert lt.shape == (3, 4, 5)
    np.testing.assert_array_equal(lt[2, 1], spec.local_times(t[2, 1]))


def test_identity_warp_changes_nothing():
    a = ScheduleSpec("lin", 8, 1)
    b = ScheduleSpec("lin", 8, 1, warp=lambda u: u)
    t = np.linspace(0, 1, 17)
    np.testing.assert_array_equal(a.local_times(t), b.local_times(t))
    np.testing.assert_allclose(a.dlocal_dt(t), b.dlocal_dt(t), rtol=1e-6)


@given(st.integers(2, 32))
def test_window_shift_consistency(W):
    spec = ScheduleSpec("lin", W)
    for w in range(1, W):
        assert local_time(spec, w, 0.0) == local_time(spec, w - 1, 1.0)


@given(st.integers(2, 32), times)
def test_init_contains_lin(W, u):
    lin = ScheduleSpec("lin", W).local_times(u)
    init = ScheduleSpec("init", W).local_times(u / W)
    np.testing.assert_allclose(init, lin, rtol=0, atol=1e-15)


@given(st.integers(2, 24).flatmap(lambda W: st.tuples(st.just(W), st.integers(0, W - 1))), times)
def test_init_contains_lin_with_clean_frames(Wn, u):
    W, n = Wn
    lin = ScheduleSpec("lin", W, n).local_times(u)
    init = ScheduleSpec("init", W, n).local_times(u / (W - n))
    np.testing.assert_allclose(init, lin, rtol=0, atol=1e-15)


@given(specs(), times, times)
def test_monotone_in_t_and_w(spec, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = spec.local_times(lo), spec.local_times(hi)
    assert np.all(a <= b)
    assert np.all(np.diff(a) >= 0) and np.all(np.diff(b) >= 0)
    assert np.all((a >= 0) & (a <= 1))


@given(specs(), st.floats(0.01, 0.99))
def test_dlocal_dt_matches_central_difference(spec, t):
    h = 1e-7
    left = (spec.local_times(t) - spec.local_times(t - h)) / h
    right = (spec.local_times(t + h) - spec.local_times(t)) / h
    smooth = np.abs(left - right) < 1e-5  # skip frames sitting on a clipping kink
    fd = (left + right) / 2
    np.testing.assert_allclose(spec.dlocal_dt(t)[smooth], fd[smooth], atol=1e-6)


def test_dlocal_dt_values_per_kind():
    np.testing.assert_allclose(ScheduleSpec("lin", 8, 2).dlocal_dt(0.5)[2:], 1 / 6)
    np.testing.assert_array_equal(ScheduleSpec("lin", 8, 2).dlocal_dt(0.5)[:2], 0)
    np.testing.assert_allclose(ScheduleSpec("init_rescaled", 4).dlocal_dt(0.2), [1, 0.75, 0.5, 0.25])


# -- partition -----------------------------------------------------------------


def test_partition_global_example():
    part = partition_frames(GlobalRollingMap(K=32, W=16), 0.375, 0.5)
    assert 0 in part.clean
    assert 31 in part.noise
    assert 16 in part.win
    assert set(part.clean) | set(part.noise) | set(part.win) == set(range(32))


def test_partition_full_window():
    part = partition_frames(ScheduleSpec("lin", 4), 0.0, 1.0)
    assert part.win == (0, 1, 2, 3) and part.clean == () and part.noise == ()


def test_partition_with_clean_frames():
    part = partition_frames(ScheduleSpec("lin", 8, 2), 0.0, 1.0)
    assert part.clean == (0, 1)
    assert part.win == tuple(range(2, 8))
    assert part.noise == ()


def test_partition_clean_frames_exact_zero_on_grid():
    spec = ScheduleSpec("lin", 8, 2)
    lt = spec.local_times(np.linspace(0, 1, 1001))
    assert np.all(lt[:, :2] == 0.0)


@pytest.mark.parametrize("s,t", [(0.5, 0.5), (0.6, 0.5), (-0.1, 0.5), (0.2, 1.1)])
def test_partition_rejects_bad_interval(s, t):
    with pytest.raises(InvalidIntervalError):
        partition_frames(ScheduleSpec("lin", 4), s, t)


def closed_form_partition(spec, s, t):
    """Membership by threshold inequalities on w, derived by hand per kind."""
    W, n, m = spec.W, spec.n_cln, spec.W - spec.n_cln
    w = np.arange(W)
    if spec.kind is ScheduleKind.LIN:
        clean = w + t - n <= 0
        noise = w + s - n >= m
    elif spec.kind is ScheduleKind.INIT:
        clean = w < n
        noise = (w >= n) & ((w - n) / m + s >= 1)
    elif spec.kind is ScheduleKind.CONST:
        clean = w < n
        noise = np.zeros(W, bool)
    else:
        clean = np.zeros(W, bool)
        noise = np.zeros(W, bool)
    win = ~clean & ~noise
    return tuple(w[clean]), tuple(w[noise]), tuple(w[win])


@given(specs(), st.integers(1, 4096).flatmap(
    lambda T: st.tuples(st.just(T), st.integers(0, T), st.integers(0, T))))
def test_partition_matches_closed_form(spec, grid):
    # samplers only query times on a grid i / T
    T, i, j = grid
    if i == j:
        return
    s, t = min(i, j) / T, max(i, j) / T
    part = partition_frames(spec, s, t)
    assert (part.clean, part.noise, part.win) == closed_form_partition(spec, s, t)
    assert not set(part.clean) & set(part.noise)
    assert not set(part.clean) & set(part.win)
    assert not set(part.noise) & set(part.win)
