"""Finite differences for the Kolmogorov equation with smooth drifts.

Forward problem on [0, T] x [-L, L]^d with zero Dirichlet data::

    du/dt - Lap u + b . grad u = |h| f,    u(0) = g (default 0)

Centered second differences for the Laplacian, first-order upwinding for
the drift, implicit Euler in time (explicit Euler on request).
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .drift_catalog import DriftField
from .errors import InvalidParameterError, StabilityError

DIRECT_SOLVE_LIMIT = 20000
PECLET_WARN = 1.0


@dataclass(frozen=True)
class Grid:
    d: int
    L: float
    h: float
    tau: float
    T: float

    def __post_init__(self):
        if self.h <= 0 or self.tau <= 0 or self.T <= 0:
            raise InvalidParameterError("h, tau and T must be positive")
        if self.L < 2:
            raise InvalidParameterError(f"box half-width must be >= 2, got {self.L}")
        if abs(2 * self.L / self.h - round(2 * self.L / self.h)) > 1e-9:
            raise InvalidParameterError("2L/h must be an integer")
        if abs(self.T / self.tau - round(self.T / self.tau)) > 1e-9:
            raise InvalidParameterError("T/tau must be an integer")

    @property
    def n(self):
        """Number of lattice intervals per axis."""
        return int(round(2 * self.L / self.h))

    @property
    def nt(self):
        return int(round(self.T / self.tau)) + 1

    @property
    def axis(self):
        return np.linspace(-self.L, self.L, self.n + 1)

    @property
    def times(self):
        return np.arange(self.nt) * self.tau

    def coords(self, interior=False):
        ax = self.axis[1:-1] if interior else self.axis
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)

    def refined(self, factor=2):
        return Grid(self.d, self.L, self.h / factor, self.tau / factor, self.T)


@dataclass(frozen=True)
class SourceSpec:
    """Right-hand side |h(t, x)| f(t, x); ``h_field=None`` means |h| = 1."""

    h_field: Optional[DriftField]
    f: Callable

    def __call__(self, t, x):
        fv = np.asarray(self.f(t, x), dtype=float)
        if self.h_field is None:
            return fv
        return self.h_field.magnitude(t, x) * fv

    def h_magnitude(self, t, x):
        if self.h_field is None:
            return np.ones(x.shape[:-1])
        return self.h_field.magnitude(t, x)


@dataclass
class GridSolution:
    grid: Grid
    values: np.ndarray
    boundary_condition: str = "zero_dirichlet"
    times: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.times is None:
            self.times = self.grid.times
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("grid solution contains non-finite values")

    @property
    def warnings(self):
        return self.metadata.setdefault("warnings", [])

    def at(self, k):
        return self.values[k]

    def with_values(self, values):
        return GridSolution(self.grid, values, self.boundary_condition, self.times,
                            dict(self.metadata))

    def to_csv(self):
        g = self.grid
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(g.d)] + ["u"])
        pts = g.coords().reshape(-1, g.d)
        for k, t in enumerate(self.times):
            for p, u in zip(pts, self.values[k].ravel()):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in p] + [repr(float(u))])
        return buf.getvalue()

    def to_bytes(self):
        g = self.grid
        head = struct.pack(_HEADER_FMT, _MAGIC, g.d, g.n + 1, len(self.times), g.h, g.tau, g.T,
                           float(g.L), float(self.times[0]))
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob):
        magic, d, npts, nt, h, tau, T, L, t_start = struct.unpack_from(_HEADER_FMT, blob)
        if magic != _MAGIC:
            raise InvalidParameterError("not a KGSOL1 dump")
        vals = np.frombuffer(blob, dtype="<f8", offset=HEADER_SIZE)
        vals = vals.reshape((nt,) + (npts,) * d).copy()
        grid = Grid(d, L, h, tau, T)
        return cls(grid, vals, times=t_start + np.arange(nt) * tau)


_MAGIC = b"KGSOL1"
# magic, pad, d, points per axis, time levels, h, tau, T, L, first time, pad to 64 bytes
_HEADER_FMT = "<6s2xIIIddddd4x"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)
assert HEADER_SIZE == 64


# ---------------------------------------------------------------------------
# operators

def laplacian_matrix(m, d, h):
    """-Lap_h on the m^d interior lattice (C order), zero Dirichlet outside."""
    t1 = sparse.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1]) / h ** 2
    out = t1.tocsr()
    for k in range(1, d):
        out = sparse.kron(out, sparse.identity(m), format="csr") + \
            sparse.kron(sparse.identity(m ** k), t1, format="csr")
    return out.tocsr()


def upwind_matrix(bvals, h):
    """Upwinded b . grad on the interior lattice; ``bvals`` has shape (m,)*d + (d,)."""
    d = bvals.shape[-1]
    m = bvals.shape[0]
    size = m ** d
    idx = np.arange(size).reshape((m,) * d)
    rows, cols, vals = [], [], []
    diag = np.zeros(size)
    for j in range(d):
        bj = bvals[..., j].ravel()
        bp = np.maximum(bj, 0.0) / h
        bm = np.maximum(-bj, 0.0) / h
        diag += bp + bm
        stride = m ** (d - 1 - j)
        pos = np.moveaxis(idx, j, 0)
        lower = pos[1:].ravel()
        rows.append(lower)
        cols.append(lower - stride)
        vals.append(-bp[lower])
        upper = pos[:-1].ravel()
        rows.append(upper)
        cols.append(upper + stride)
        vals.append(-bm[upper])
    rows.append(np.arange(size))
    cols.append(np.arange(size))
    vals.append(diag)
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(size, size))


class _Operator:
    def __init__(self, grid, drift, sign=1.0):
        self.grid = grid
        self.m = grid.n - 1
        self.X = grid.coords(interior=True)
        self.lap = laplacian_matrix(self.m, grid.d, grid.h)
        self.drift = drift
        self.sign = sign
        self.time_dependent = drift is not None and drift.time_dependent
        self._cache = None
        self.max_drift = 0.0

    def drift_values(self, t):
        if self.drift is None:
            return None
        return self.sign * self.drift.eval(t, self.X)

    def matrix(self, t):
        if self._cache is not None and not self.time_dependent:
            return self._cache
        bv = self.drift_values(t)
        if bv is None:
            A = self.lap
        else:
            self.max_drift = max(self.max_drift, float(np.max(np.abs(bv))))
            A = (self.lap + upwind_matrix(bv, self.grid.h)).tocsr()
        self._cache = A
        return A


class _StepSolver:
    def __init__(self, rtol):
        self.rtol = rtol
        self.key = None
        self.lu = None
        self.M = None
        self.iterations = 0

    def solve(self, S, rhs, x0):
        if S.shape[0] <= DIRECT_SOLVE_LIMIT:
            if self.key is not S:
                self.key = S
                self.lu = splinalg.splu(S.tocsc())
            return self.lu.solve(rhs)
        if self.key is not S:
            self.key = S
            self.M = sparse.diags(1.0 / S.diagonal())
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = splinalg.bicgstab(S, rhs, x0=x0, rtol=self.rtol, atol=0.0, M=self.M,
                                    maxiter=2000, callback=cb)
        self.iterations += count[0]
        if info != 0:
            raise RuntimeError(f"bicgstab did not converge (info={info})")
        return x


def _solve(grid, drift, source, initial=None, scheme="implicit", sign=1.0, rtol=1e-12):
    op = _Operator(grid, drift, sign)
    m, d, tau = op.m, grid.d, grid.tau
    shape = (m,) * d
    full = np.zeros((grid.nt,) + (grid.n + 1,) * d)
    inner = (slice(None),) + (slice(1, -1),) * d
    u = np.zeros(m ** d) if initial is None else np.asarray(initial(op.X), dtype=float).ravel()
    full[inner][0] = u.reshape(shape)
    warnings = []
    meta = {"scheme": scheme, "warnings": warnings}
    A0 = op.matrix(0.0)
    if scheme == "explicit":
        bmax = op.max_drift
        limit = 1.0 / (2 * d / grid.h ** 2 + d * bmax / grid.h)
        if tau > limit:
            raise StabilityError(f"explicit step tau={tau} exceeds stability limit {limit:.3g}",
                                 suggested_tau=0.9 * limit)
    elif scheme != "implicit":
        raise InvalidParameterError(f"unknown scheme {scheme!r}")
    stepper = _StepSolver(rtol)
    ident = sparse.identity(m ** d, format="csr")
    S = None
    for k in range(1, grid.nt):
        t = k * tau
        if scheme == "implicit":
            A = op.matrix(t)
            if S is None or op.time_dependent:
                S = (ident + tau * A).tocsr()
            F = source(t, op.X).ravel() if source is not None else 0.0
            u = stepper.solve(S, u + tau * F, u)
        else:
            A = op.matrix(t - tau)
            F = source(t - tau, op.X).ravel() if source is not None else 0.0
            u = u + tau * (F - A @ u)
        full[inner][k] = u.reshape(shape)
    if op.max_drift * grid.h / 2 > PECLET_WARN:
        warnings.append(f"cell Peclet number {op.max_drift * grid.h / 2:.3g} exceeds {PECLET_WARN}")
    meta["krylov_iterations"] = stepper.iterations
    meta["max_drift"] = op.max_drift
    del A0
    return GridSolution(grid, full, metadata=meta)


def solve_cauchy(b, src, grid, initial=None, scheme="implicit", rtol=1e-12):
    """Solve du/dt - Lap u + b . grad u = |h| f with u(0) = initial (default 0).

    ``b`` may be ``None`` for the pure heat equation; ``src`` may be ``None``
    for the homogeneous problem.
    """
    if b is not None:
        _check_smooth(b, grid)
    return _solve(grid, b, src, initial, scheme, rtol=rtol)


def solve_terminal(b_n, F, grid, t1, scheme="implicit", rtol=1e-12):
    """Solve du/dt + Lap u + b_n . grad u + F = 0 on [t1 - T, t1] with u(t1) = 0.

    ``F(t, x)`` is a scalar source.  Internally the problem is reversed in
    time, which turns it into the forward problem with drift ``-b_n``.
    The returned solution is indexed forward in time.
    """
    if b_n is not None:
        _check_smooth(b_n, grid)
    rev = _solve(grid, b_n, (lambda s, x: F(t1 - s, x)), None, scheme, sign=-1.0, rtol=rtol)
    vals = rev.values[::-1].copy()
    sol = GridSolution(grid, vals, times=t1 - grid.times[::-1], metadata=rev.metadata)
    return sol


def _check_smooth(b, grid):
    if b.is_singular:
        raise InvalidParameterError(f"{b.id} is singular; the solver needs a mollified drift")
    if b.d != grid.d:
        raise InvalidParameterError("drift and grid dimensions differ")
    if grid.T > b.time_cap:
        raise InvalidParameterError("horizon exceeds the drift's time truncation")


def residual_norm(sol, b, src, initial_check=True):
    """Discrete L^2([0,T] x box) norm of the implicit-Euler residual at interior nodes."""
    g = sol.grid
    op = _Operator(g, b)
    d = g.d
    inner = (slice(None),) + (slice(1, -1),) * d
    U = sol.values[inner].reshape(sol.values.shape[0], -1)
    total = 0.0
    for k in range(1, U.shape[0]):
        t = sol.times[k]
        A = op.matrix(t)
        r = (U[k] - U[k - 1]) / g.tau + A @ U[k]
        if src is not None:
            r -= src(t, op.X).ravel()
        total += g.tau * g.h ** d * float(r @ r)
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# oracles

def duhamel_gaussian(t, x, amp, sigma, drift=None, nodes=400):
    """Heat-kernel oracle for a Gaussian source amp exp(-|x|^2 / 2 sigma^2), constant in time.

    With a constant drift c the mass emitted r time units ago has moved by
    c r.  The time integral is a dense Gauss-Legendre sum.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    c = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    t = float(t)
    if t == 0:
        return np.zeros(x.shape[:-1])
    r = 0.5 * t * (gx + 1.0)
    w = 0.5 * t * gw
    out = np.zeros(x.shape[:-1])
    for rk, wk in zip(r, w):
        var = sigma ** 2 + 2.0 * rk
        shifted = x - c * rk
        out += wk * (sigma ** 2 / var) ** (d / 2.0) * np.exp(-np.sum(shifted ** 2, axis=-1) / (2 * var))
    return amp * out


def gaussian_source(amp, sigma):
    def f(t, x):
        return amp * np.exp(-np.sum(np.asarray(x) ** 2, axis=-1) / (2 * sigma ** 2))
    return f


def relative_error_in_ball(sol, oracle, radius=1.0):
    """max |u - u*| / max |u*| over all time levels and nodes of the closed ball."""
    X = sol.grid.coords()
    mask = np.sum(X ** 2, axis=-1) <= radius ** 2 + 1e-12
    errs, scale = 0.0, 0.0
    for k, t in enumerate(sol.times):
        ref = oracle(t, X[mask])
        errs = max(errs, float(np.max(np.abs(sol.values[k][mask] - ref))))
        scale = max(scale, float(np.max(np.abs(ref))))
    return errs / scale
