import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from singular_sde_lab.drift_catalog import (difference, make_bounded_smooth, make_constant,
                                            make_inverse_square, make_zero, mollify)
from singular_sde_lab.errors import InvalidParameterError
from singular_sde_lab.rng import normals
from singular_sde_lab.sde import (
    DEFECT_CSV_HEADER, HITTING_CSV_HEADER, KRYLOV_CSV_HEADER, PHI_CATALOG, bessel_dimension,
    bessel_hitting_pde, default_jobs, drift_integral_scaling, hitting_probability, krylov_rhs,
    krylov_statistic, ks_distance, martingale_defect, occupation_integrals, radial_oracle,
    simulate)

X0 = (0.5, 0.0, 0.0)


@pytest.fixture(scope="module")
def b8():
    return mollify(make_inverse_square(3, 1.0), 8)


@pytest.fixture(scope="module")
def small_ens(b8):
    return simulate(b8, X0, 1e-3, 1.0, 64, seed=3)


def _python_paths(b, x0, dt, nsteps, seed, paths):
    out = np.empty((len(paths), nsteps + 1, len(x0)))
    for i, p in enumerate(paths):
        x = np.array(x0, dtype=float)
        out[i, 0] = x
        for k in range(nsteps):
            x = x - b.eval(0.0, x) * dt + math.sqrt(2 * dt) * normals(seed, p, k, len(x0))
            out[i, k + 1] = x
    return out


def test_engine_paths_follow_the_euler_recursion(b8, small_ens):
    got = small_ens.paths([0, 5, 63], steps=200)
    ref = _python_paths(b8, X0, 1e-3, 200, 3, [0, 5, 63])
    # the engine interpolates the drift table in log-radius; eval uses the same table
    assert np.allclose(got, ref, atol=1e-9)
    assert np.allclose(small_ens.paths([5])[0, -1], small_ens.final[5])


def test_summary_arrays_agree_with_regenerated_paths(small_ens):
    P = small_ens.paths(range(8))
    assert np.allclose(np.linalg.norm(P, axis=-1).min(axis=1), small_ens.min_radius[:8])


@pytest.mark.parametrize("jobs", [1, 3])
def test_results_do_not_depend_on_the_worker_count(b8, small_ens, jobs):
    other = simulate(b8, X0, 1e-3, 1.0, 64, seed=3, jobs=jobs)
    assert np.array_equal(other.final, small_ens.final)
    assert np.array_equal(other.min_radius, small_ens.min_radius)


def test_prefix_of_a_larger_ensemble_is_the_smaller_ensemble(b8, small_ens):
    big = simulate(b8, X0, 1e-3, 1.0, 100, seed=3)
    assert np.array_equal(big.final[:64], small_ens.final)


def test_zero_drift_gives_brownian_increments():
    e = simulate(make_zero(3), X0, 1e-2, 1.0, 4000, seed=5)
    inc = e.final - np.array(X0)
    assert np.all(np.abs(inc.mean(axis=0)) < 4 * math.sqrt(2 / 4000))
    assert np.allclose(inc.var(axis=0), 2.0, rtol=0.1)
    assert ks_distance(inc[:, 0] / math.sqrt(2), np.random.default_rng(0).normal(size=4000)) < 0.05


def test_constant_drift_shifts_the_mean():
    c = np.array([1.0, -2.0, 0.0])
    e = simulate(make_constant(3, c), X0, 1e-2, 0.5, 2000, seed=6)
    assert np.allclose(e.final.mean(axis=0), np.array(X0) - 0.5 * c, atol=0.1)


def test_stopping_radius_and_hit_steps(b8):
    e = simulate(b8, X0, 1e-3, 1.0, 300, seed=4, stop_radius=0.3)
    hit = e.min_radius <= 0.3
    assert hit.any() and np.all(e.hit_step[hit] >= 1)
    st_ = hitting_probability(e, 0.3)
    assert st_.p_hat == pytest.approx(hit.mean())
    with pytest.raises(InvalidParameterError):
        hitting_probability(e, 0.1)


def test_hitting_refinement_and_csv(b8):
    e = simulate(b8, X0, 2e-3, 0.5, 400, seed=8, stop_radius=0.2)
    st_ = hitting_probability(e, 0.2, refine=True)
    assert st_.refined is not None and st_.refined.dt == 1e-3
    assert len(st_.csv_row(1.0)) == len(HITTING_CSV_HEADER)
    assert st_.agrees_with(st_)


@pytest.mark.parametrize("kwargs", [dict(dt=0.0), dict(M=0), dict(x0=(0.5, 0.0)), dict(T=0.1005)])
def test_simulate_validation(b8, kwargs):
    args = dict(b_n=b8, x0=X0, dt=1e-3, T=0.1, M=10, seed=1) | kwargs
    with pytest.raises(InvalidParameterError):
        simulate(**args)


def test_singular_drift_is_refused():
    with pytest.raises(InvalidParameterError):
        simulate(make_inverse_square(3, 1.0), X0, 1e-3, 0.1, 10, seed=1)


@pytest.mark.parametrize("d, delta, expected", [(3, 9.0, 1.5), (3, 1.0, 2.5), (4, 4.0, 2.0)])
def test_bessel_dimension(d, delta, expected):
    assert bessel_dimension(d, delta) == pytest.approx(expected)


def test_bessel_pde_matches_the_scale_function_at_long_times():
    # with absorption at eps and R the long-time hitting probability of eps is
    # (r0^-k - R^-k) / (eps^-k - R^-k), k = delta_B - 2
    d, delta, r0, eps, R = 3, 0.25, 0.5, 0.1, 4.0
    k = bessel_dimension(d, delta) - 2
    p = bessel_hitting_pde(d, delta, r0, eps, T=60.0, r_far=R, n=2000, nt=3000)
    assert p == pytest.approx((r0 ** -k - R ** -k) / (eps ** -k - R ** -k), rel=1e-3)


def test_radial_oracle_reproduces_the_cartesian_radius(b8):
    # the chain scheme with the mollified profile is the exact radius of the 3d Euler chain
    e = simulate(b8, X0, 1e-3, 0.5, 2000, seed=21)
    rad = radial_oracle(3, 1.0, 0.5, 1e-3, 0.5, 2000, seed=22, epsilon=0.0, profile=b8)
    assert ks_distance(np.linalg.norm(e.final, axis=1), rad.final_radius) < 0.05


def test_radial_oracle_validation():
    with pytest.raises(InvalidParameterError):
        radial_oracle(3, 1.0, 0.5, 1e-3, 0.1, 10, 1, epsilon=0.0)
    with pytest.raises(InvalidParameterError):
        radial_oracle(3, 1.0, 0.5, 1e-3, 0.1, 10, 1, scheme="milstein")


@pytest.mark.parametrize("name", ["bump", "bump2"])
def test_test_function_derivatives(name):
    phi = PHI_CATALOG[name]
    x = np.random.default_rng(1).uniform(-0.6, 0.6, size=(30, 3)) * phi.R
    h = 1e-4
    fd_grad = np.stack([(phi(x + h * e) - phi(x - h * e)) / (2 * h) for e in np.eye(3)], -1)
    fd_lap = sum((phi(x + h * e) - 2 * phi(x) + phi(x - h * e)) / h ** 2 for e in np.eye(3))
    assert np.allclose(phi.grad(x), fd_grad, atol=1e-6)
    assert np.allclose(phi.laplacian(x), fd_lap, atol=1e-4)


def _python_martingale(b, P, dt, k0, k1):
    phi = PHI_CATALOG["bump"]
    out = []
    for X in P:
        gen = -phi.laplacian(X) + np.sum(b.eval(0.0, X) * phi.grad(X), -1)
        integral = np.sum(0.5 * dt * (gen[k0 + 1:k1 + 1] + gen[k0:k1]))
        out.append(phi(X[k1]) - phi(X[k0]) + integral)
    return np.array(out)


def test_martingale_kernel_against_a_direct_evaluation(b8, small_ens):
    md = martingale_defect(small_ens, "bump", t0=0.25, t1=0.5)
    ref = _python_martingale(b8, small_ens.paths(range(64), steps=500), 1e-3, 250, 500)
    assert md.defect == pytest.approx(ref.mean(), abs=1e-10)
    assert md.stderr == pytest.approx(ref.std(ddof=1) / 8, rel=1e-8)
    assert len(md.csv_row(8)) == len(DEFECT_CSV_HEADER)


def test_occupation_kernel_against_a_direct_evaluation(b8, small_ens):
    got = occupation_integrals(small_ens, b8, "grad_phi", [(0.0, 0.25), (0.1, 0.5)])
    P = small_ens.paths(range(64), steps=500)
    phi = PHI_CATALOG["bump"]
    y = b8.magnitude(0.0, P) * phi.grad_norm(P)
    tr = 0.5 * 1e-3 * (y[:, 1:] + y[:, :-1])
    assert np.allclose(got[:, 0], tr[:, :250].sum(1))
    assert np.allclose(got[:, 1], tr[:, 100:500].sum(1))


def test_martingale_defect_is_small_for_brownian_motion():
    e = simulate(make_zero(3), X0, 1e-3, 0.5, 4000, seed=9)
    for G in ("one", "phi_t0", "avg_x1"):
        md = martingale_defect(e, "bump", t0=0.25, t1=0.5, G=G)
        assert md.z_score < 4


@pytest.mark.parametrize("kwargs", [dict(t0=0.5, t1=0.25), dict(phi="square"), dict(G="two"),
                                    dict(t0=0.0, G="avg_x1"), dict(t0=0.2505)])
def test_martingale_validation(small_ens, kwargs):
    with pytest.raises(InvalidParameterError):
        martingale_defect(small_ens, **kwargs)


def test_krylov_rhs_matches_a_direct_sum():
    from singular_sde_lab.energy import Weight
    b = make_bounded_smooth(3, 2.0)
    p, theta, h, L = 2.5, 1.25, 0.25, 2.0
    tp = theta / (theta - 1)
    ax = np.arange(-8, 9) * h
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1)
    hm = b.magnitude(0.0, X)
    F = np.where(hm >= 1, 1.0, hm ** p) ** tp
    w = Weight(3)
    best = 0.0
    for z in np.stack(np.meshgrid(*[np.arange(-2, 3)] * 3, indexing="ij"), -1).reshape(-1, 3):
        best = max(best, float(np.sum(F * w(X, z) ** 2)) * h ** 3 * 0.5)
    assert krylov_rhs(b, "one", p, theta, 0.0, 0.5, L=L, h=h) == pytest.approx(best ** (1 / (p * tp)))


def test_krylov_statistic_and_scaling(b8):
    e = simulate(b8, X0, 1e-3, 1.0, 400, seed=10)
    kp = krylov_statistic(e, b8, "one", 2.5, None, 0.0, 0.5, delta=1.0)
    assert kp.lhs > 0 and kp.rhs > 0 and not kp.degenerate
    assert len(kp.csv_row()) == len(KRYLOV_CSV_HEADER)
    fit = drift_integral_scaling(e)
    assert 0 < fit.mu <= 1.0 and fit.r2 > 0.9
    with pytest.raises(InvalidParameterError):
        drift_integral_scaling(e, windows=[(0.0, 0.1)] * 4)


def test_difference_fields_shrink_along_the_mollification_sequence(b8, small_ens):
    base = make_inverse_square(3, 1.0)
    vals = []
    for m in (4, 8):
        h = difference(mollify(base, m), mollify(base, 2 * m))
        vals.append(occupation_integrals(small_ens, h, "grad_phi", [(0.0, 0.5)]).mean())
    assert vals[1] < vals[0]


@given(jobs=st.one_of(st.none(), st.integers(-3, 64)))
def test_default_jobs(jobs):
    assert default_jobs(jobs) >= 1
