import numpy as np
import pytest
from scipy.stats import ks_2samp

from rbmlab.geometry import Ball, Box, GeometryError
from rbmlab.rbm import (
    PathParams,
    RbmState,
    coupled_expansion_scan,
    derive_seed,
    exact_box_path,
    mix64,
    sample_exact_box,
    sample_paths,
    simulate,
    simulate_coupled,
    step,
)


def interval():
    return Box(np.array([0.0]), np.array([1.0]))


def disk():
    return Ball(np.array([0.0, 0.0]), 1.0)


# ---------------------------------------------------------------------------
# seeding and parameters


def test_mix64_is_deterministic_and_spreads():
    a = mix64(np.uint64(1))
    b = mix64(np.uint64(2))
    assert a == mix64(np.uint64(1))
    assert a != b
    assert int(a) != 1


def test_derive_seed_tag_sensitivity():
    s = 12345
    assert derive_seed(s, 1) == derive_seed(s, 1)
    assert derive_seed(s, 1) != derive_seed(s, 2)
    assert derive_seed(s, 1, 2) != derive_seed(s, 2, 1)


def test_path_params_validation():
    with pytest.raises(ValueError):
        PathParams(step_h=0.0)
    with pytest.raises(ValueError):
        PathParams(step_h=-1e-3)
    with pytest.raises(ValueError):
        PathParams(step_h=1e-3, horizon_T=5e-4)  # shorter than one step
    with pytest.raises(ValueError):
        PathParams(step_h=1e-3, horizon_T=0.0015)  # not an integer multiple
    p = PathParams(step_h=1e-3, horizon_T=0.25)
    assert p.n_steps() == 250


# ---------------------------------------------------------------------------
# single transition


def test_step_interior_has_no_local_time():
    dom = interval()
    st = RbmState(position=np.array([0.5]), local_time=0.0, time=0.0)
    out = step(dom, st, np.array([0.001]), 1e-4)
    assert out.position[0] == pytest.approx(0.501)
    assert out.local_time == 0.0
    assert out.time == pytest.approx(1e-4)


def test_step_at_wall_accrues_local_time():
    dom = interval()
    st = RbmState(position=np.array([0.999]), local_time=0.0, time=0.0)
    out = step(dom, st, np.array([0.05]), 1e-4)
    # proposal 1.049 projects back to the wall; the overshoot is local time
    assert out.position[0] == pytest.approx(1.0)
    assert out.local_time == pytest.approx(0.049)


# ---------------------------------------------------------------------------
# trajectories


def test_simulate_grid_contract():
    dom = interval()
    p = PathParams(step_h=0.01, horizon_T=0.1)
    tr = simulate(dom, np.array([0.25]), p, path_index=3)
    assert tr.path_index == 3
    assert np.allclose(tr.times, 0.01 * np.arange(11))
    assert tr.positions.shape == (11, 1)
    assert tr.positions[0, 0] == 0.25
    assert tr.local_times[0] == 0.0
    assert np.all(np.diff(tr.local_times) >= 0.0)
    assert dom.contains_many(tr.positions).all()
    st = tr.state(4)
    assert st.time == pytest.approx(tr.times[4])
    assert st.position[0] == tr.positions[4, 0]


def test_simulate_is_reproducible_per_path_index():
    dom = interval()
    p = PathParams(step_h=0.01, horizon_T=0.05, master_seed=11)
    a = simulate(dom, np.array([0.5]), p, path_index=2)
    b = simulate(dom, np.array([0.5]), p, path_index=2)
    c = simulate(dom, np.array([0.5]), p, path_index=5)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_simulate_coupled_contract():
    dom = disk()
    p = PathParams(step_h=0.005, horizon_T=0.5, master_seed=4)
    tr = simulate_coupled(dom, np.array([0.5, 0.0]), np.array([-0.3, 0.2]), p)
    assert tr.initial_separation == pytest.approx(np.hypot(0.8, 0.2))
    seps = tr.separations()
    assert seps[0] == pytest.approx(tr.initial_separation)
    # synchronous coupling never expands the separation, step by step
    assert np.all(np.diff(seps) <= 1e-12)
    assert tr.local_times_x.shape == tr.local_times_y.shape == tr.times.shape


def test_coupled_identical_starts_stay_identical():
    dom = disk()
    p = PathParams(step_h=0.01, horizon_T=0.2)
    x = np.array([0.3, -0.1])
    tr = simulate_coupled(dom, x, x, p)
    assert tr.initial_separation == 0.0
    assert np.array_equal(tr.positions_x, tr.positions_y)


def test_coupled_expansion_scan_disk():
    dom = disk()
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(size=(60, 2, 1)))
    th = rng.uniform(0, 2 * np.pi, size=(60, 2, 1))
    starts = np.concatenate([r * np.cos(th), r * np.sin(th)], axis=-1)
    p = PathParams(step_h=1e-3, master_seed=2)
    scan = coupled_expansion_scan(dom, starts, 300, p)
    assert scan["violations"] == 0
    assert np.all(scan["max_expansion"] <= 1e-12)
    assert np.all(scan["final_separation"] <= scan["initial_separation"] + 1e-12)


# ---------------------------------------------------------------------------
# the path ensemble engine


def test_sample_paths_shapes_and_local_time():
    dom = interval()
    p = PathParams(step_h=1e-3, n_paths=50, master_seed=1)
    qt = [0.01, 0.05, 0.2]
    pos, loc = sample_paths(
        dom, np.array([[0.1], [0.9]]), qt, p, record_local_time=True
    )
    assert pos.shape == (50, 2, 3, 1)
    assert loc.shape == (50, 2, 3)
    assert np.all(loc >= 0)
    assert np.all(np.diff(loc, axis=-1) >= 0)  # cumulative in time
    assert dom.contains_many(pos.reshape(-1, 1)).all()


def test_sample_paths_worker_independence():
    dom = disk()
    p = PathParams(step_h=1e-2, n_paths=1000, master_seed=77)
    qt = [0.05, 0.1]
    base = sample_paths(dom, np.array([[0.2, 0.2]]), qt, p, workers=1)
    multi = sample_paths(dom, np.array([[0.2, 0.2]]), qt, p, workers=4)
    assert np.array_equal(base, multi)


def test_sample_paths_offset_concatenation():
    dom = interval()
    p = PathParams(step_h=1e-2, master_seed=5)
    qt = [0.1]
    whole = sample_paths(dom, np.array([[0.5]]), qt, p, n_paths=20)
    first = sample_paths(dom, np.array([[0.5]]), qt, p, n_paths=12)
    rest = sample_paths(dom, np.array([[0.5]]), qt, p, n_paths=8, path_offset=12)
    assert np.array_equal(whole, np.concatenate([first, rest], axis=0))


def test_sample_paths_rejects_outside_start():
    with pytest.raises(GeometryError):
        sample_paths(interval(), np.array([[1.5]]), [0.1], PathParams(step_h=1e-2))


def test_seed_changes_output():
    dom = interval()
    p = PathParams(step_h=1e-2, n_paths=10, master_seed=1)
    a = sample_paths(dom, np.array([[0.5]]), [0.1], p)
    b = sample_paths(dom, np.array([[0.5]]), [0.1], p, seed=2)
    assert not np.array_equal(a, b)


def test_crossing_a_corner_stays_inside():
    # drive a 2-d path hard into the square's corner region
    sq = Box(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    p = PathParams(step_h=0.05, n_paths=200, master_seed=3)
    pos = sample_paths(sq, np.array([[0.98, 0.98]]), [0.5], p)
    assert sq.contains_many(pos.reshape(-1, 2)).all()


# ---------------------------------------------------------------------------
# exact sampler as a statistical control


def test_fold_matches_direct_reflection():
    from rbmlab.rbm import _fold_into_interval

    b = interval()
    w = np.array([[1.3], [-0.4], [2.6], [0.7]])
    out = _fold_into_interval(w, b.lo, b.hi)
    assert np.allclose(out[:, 0], [0.7, 0.4, 0.6, 0.7])


def test_exact_box_path_stays_inside():
    b = interval()
    p = PathParams(step_h=1e-2, master_seed=9)
    path = exact_box_path(b, np.array([0.5]), np.linspace(0.05, 1.0, 20), p)
    assert path.shape == (20, 1)
    assert np.all((path >= 0.0) & (path <= 1.0))


def test_scheme_converges_to_exact_law():
    # two-sample KS distance to the exact folded law shrinks with h
    b = interval()
    t = 0.1
    x0 = np.array([0.3])
    m = 20000
    exact = sample_exact_box(b, x0, [t], PathParams(step_h=1.0, master_seed=42), n_paths=m)
    stats = {}
    for h in (1e-2, 1e-4):
        pos = sample_paths(
            b, x0[None, :], [t], PathParams(step_h=h, n_paths=m, master_seed=7), workers=2
        )
        stats[h] = ks_2samp(pos[:, 0, 0, 0], exact[:, 0, 0]).statistic
    assert stats[1e-4] < stats[1e-2]
    assert stats[1e-4] < 0.02


def test_exact_sampler_requires_box():
    with pytest.raises(GeometryError):
        sample_exact_box(disk(), np.array([0.0, 0.0]), [0.1], PathParams(step_h=1.0))
