import numpy as np
import pytest

from singular_sde_lab.drift_catalog import make_constant, make_inverse_square, make_zero, mollify
from singular_sde_lab.errors import InvalidParameterError, StabilityError
from singular_sde_lab.kolmogorov import (
    HEADER_SIZE, Grid, GridSolution, SourceSpec, duhamel_gaussian, gaussian_source,
    laplacian_matrix, relative_error_in_ball, residual_norm, solve_cauchy, solve_terminal,
    upwind_matrix)

GAUSS = SourceSpec(None, gaussian_source(1.0, 0.4))


def _interior_axis(m, h, L):
    return -L + h * np.arange(1, m + 1)


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("k", [1, 3])
def test_laplacian_sine_eigenvectors(d, k):
    L, h = 2.0, 0.25
    m = int(round(2 * L / h)) - 1
    x = _interior_axis(m, h, L)
    s = np.sin(np.pi * k * (x + L) / (2 * L))
    v = s
    for _ in range(d - 1):
        v = np.multiply.outer(v, s)
    lam = d * 4.0 / h ** 2 * np.sin(np.pi * k * h / (4 * L)) ** 2
    assert np.allclose(laplacian_matrix(m, d, h) @ v.ravel(), lam * v.ravel())


def test_upwind_is_exact_on_linear_functions_away_from_the_boundary():
    m, h, d = 9, 0.2, 3
    ax = _interior_axis(m, h, 1.0)
    X = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1)
    b = np.broadcast_to(np.array([0.7, -1.3, 0.2]), X.shape)
    a = np.array([1.0, 2.0, -0.5])
    got = (upwind_matrix(b, h) @ (X @ a).ravel()).reshape((m,) * d)
    assert np.allclose(got[1:-1, 1:-1, 1:-1], b[0, 0, 0] @ a)


def test_upwind_matrix_is_an_m_matrix_pattern():
    rng = np.random.default_rng(1)
    A = upwind_matrix(rng.normal(size=(5, 5, 5, 3)), 0.1).toarray()
    off = A - np.diag(np.diag(A))
    assert np.all(off <= 0) and np.all(np.diag(A) >= 0)
    assert np.all(A.sum(axis=1) >= -1e-12)


@pytest.mark.parametrize("drift", [None, make_zero(3)])
def test_heat_equation_matches_the_duhamel_quadrature(drift):
    sol = solve_cauchy(drift, GAUSS, Grid(3, 2.0, 0.2, 0.01, 0.1))
    err = relative_error_in_ball(sol, lambda t, x: duhamel_gaussian(t, x, 1.0, 0.4))
    assert err < 0.05


def test_constant_drift_transports_the_source():
    c = np.array([1.0, 0.0, 0.0])
    sol = solve_cauchy(make_constant(3, c), GAUSS, Grid(3, 2.0, 0.2, 0.01, 0.1))
    err = relative_error_in_ball(sol, lambda t, x: duhamel_gaussian(t, x, 1.0, 0.4, c))
    still = relative_error_in_ball(sol, lambda t, x: duhamel_gaussian(t, x, 1.0, 0.4))
    assert err < 0.06 and err < still


def test_error_decreases_under_refinement():
    oracle = lambda t, x: duhamel_gaussian(t, x, 1.0, 0.4)
    e1 = relative_error_in_ball(solve_cauchy(None, GAUSS, Grid(3, 2.0, 0.4, 0.04, 0.08)), oracle)
    e2 = relative_error_in_ball(solve_cauchy(None, GAUSS, Grid(3, 2.0, 0.2, 0.01, 0.08)), oracle)
    assert e2 < e1 / 2


def test_duhamel_quadrature_against_closed_form_at_the_centre():
    # at x = 0 the time integral is elementary: int_0^t (1 + 2r/s^2)^{-3/2} dr
    s2, t = 0.16, 0.3
    exact = s2 * (1 - (1 + 2 * t / s2) ** -0.5)
    assert duhamel_gaussian(t, np.zeros((1, 3)), 1.0, 0.4)[0] == pytest.approx(exact, rel=1e-10)


def test_nonnegative_source_gives_nonnegative_solution():
    b = mollify(make_inverse_square(3, 1.0), 4)
    sol = solve_cauchy(b, GAUSS, Grid(3, 2.0, 0.25, 0.02, 0.1))
    assert sol.values.min() >= -1e-14
    assert residual_norm(sol, b, GAUSS) < 1e-8 * np.abs(sol.values).max()


def test_explicit_scheme_refuses_unstable_steps():
    with pytest.raises(StabilityError) as info:
        solve_cauchy(None, GAUSS, Grid(3, 2.0, 0.2, 0.01, 0.1), scheme="explicit")
    assert 0 < info.value.suggested_tau < 0.01


def test_explicit_and_implicit_agree_on_a_stable_step():
    g = Grid(3, 2.0, 0.25, 0.005, 0.1)
    a = solve_cauchy(None, GAUSS, g, scheme="explicit").values[-1]
    b = solve_cauchy(None, GAUSS, g).values[-1]
    assert np.max(np.abs(a - b)) < 0.05 * np.max(b)


def test_terminal_problem_is_the_time_reversed_forward_problem():
    g = Grid(3, 2.0, 0.25, 0.02, 0.1)
    F = lambda t, x: gaussian_source(1.0, 0.4)(t, x)
    back = solve_terminal(None, F, g, t1=0.3)
    fwd = solve_cauchy(None, GAUSS, g)
    assert np.allclose(back.times, 0.3 - g.times[::-1])
    assert np.allclose(back.values, fwd.values[::-1])
    assert np.all(back.values[-1] == 0.0)


def test_large_drift_triggers_a_peclet_warning():
    sol = solve_cauchy(make_constant(3, [10.0, 0, 0]), GAUSS, Grid(3, 2.0, 0.25, 0.05, 0.1))
    assert any("Peclet" in w for w in sol.warnings)


def test_binary_and_csv_dumps():
    sol = solve_cauchy(None, GAUSS, Grid(3, 2.0, 0.5, 0.05, 0.1))
    blob = sol.to_bytes()
    assert blob[:6] == b"KGSOL1" and len(blob) == HEADER_SIZE + sol.values.size * 8
    back = GridSolution.from_bytes(blob)
    assert np.array_equal(back.values, sol.values) and back.grid == sol.grid
    text = sol.to_csv().splitlines()
    assert text[0] == "t,x1,x2,x3,u" and len(text) == 1 + sol.values.size
    with pytest.raises(InvalidParameterError):
        GridSolution.from_bytes(b"XXXXXX" + blob[6:])


@pytest.mark.parametrize("kwargs", [dict(L=1.0), dict(h=0.3), dict(tau=0.03), dict(h=-0.1)])
def test_grid_validation(kwargs):
    args = dict(d=3, L=2.0, h=0.2, tau=0.01, T=0.1) | kwargs
    with pytest.raises(InvalidParameterError):
        Grid(**args)


def test_singular_drift_rejected():
    with pytest.raises(InvalidParameterError):
        solve_cauchy(make_inverse_square(3, 1.0), GAUSS, Grid(3, 2.0, 0.5, 0.05, 0.1))


def test_nonfinite_values_rejected():
    g = Grid(3, 2.0, 0.5, 0.05, 0.1)
    with pytest.raises(InvalidParameterError):
        GridSolution(g, np.full((g.nt,) + (g.n + 1,) * 3, np.nan))
