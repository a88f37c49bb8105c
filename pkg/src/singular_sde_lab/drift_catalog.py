"""Drift fields: construction, evaluation, mollification and form-bound certificates.

Every catalog field has the shape

    b(x) = c * chi(|x|) + psi(|x|) * x / |x|

with a radial magnitude ``psi`` (positive values attract, since the SDE
uses ``-b``) and an optional constant vector ``c`` modulated by a radial
scalar ``chi``.  The family is closed under mollification with a radial
kernel and under differences, which is all the laboratory needs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import linalg

from .errors import (FormBoundError, InvalidDimensionError,
                     InvalidParameterError)

KINDS = ("inverse_square", "bounded_smooth", "lps_power", "mollified", "difference")


def sphere_area(n):
    """Surface area of the unit sphere S^{n-1} in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


# ---------------------------------------------------------------------------
# radial tables

@dataclass(frozen=True)
class RadialTable:
    """Radial profiles sampled on ``r_j = a * expm1(j * du)``.

    Values beyond the last node are clamped to the last value; tables of
    compactly supported fields end in zeros.
    """

    a: float
    du: float
    psi: np.ndarray
    chi: np.ndarray
    const: np.ndarray

    @property
    def r(self):
        return self.a * np.expm1(self.du * np.arange(self.psi.size))

    @property
    def r_max(self):
        return float(self.r[-1])

    def _interp(self, vals, r):
        u = np.log1p(np.asarray(r, dtype=float) / self.a) / self.du
        return np.interp(u, np.arange(vals.size, dtype=float), vals)

    def psi_at(self, r):
        return self._interp(self.psi, r)

    def chi_at(self, r):
        return self._interp(self.chi, r)


def _table_nodes(a, du, r_max):
    n = int(math.ceil(math.log1p(r_max / a) / du)) + 2
    return a * np.expm1(du * np.arange(n))


# ---------------------------------------------------------------------------
# drift fields

@dataclass(frozen=True, eq=False)
class DriftField:
    kind: str
    d: int
    params: Mapping[str, object]
    time_dependent: bool = False
    support_radius: Optional[float] = None
    psi: Callable = field(repr=False, default=None)
    chi: Optional[Callable] = field(repr=False, default=None)
    const: np.ndarray = field(repr=False, default=None)
    table: Optional[RadialTable] = field(repr=False, default=None)
    operands: tuple = field(repr=False, default=())
    # the time indicator 1_{|t| <= time_cap} is 1 on every horizon in use
    time_cap: float = math.inf

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown drift kind {self.kind!r}")
        if self.const is None:
            object.__setattr__(self, "const", np.zeros(self.d))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @property
    def id(self):
        return drift_id(self)

    @property
    def has_const(self):
        return bool(np.any(self.const != 0.0))

    @property
    def is_singular(self):
        return self.kind in ("inverse_square", "lps_power") or any(
            op.is_singular for op in self.operands if self.kind == "difference")

    def radial(self, r):
        """Signed radial magnitude psi(r)."""
        r = np.asarray(r, dtype=float)
        return self.psi(r)

    def eval(self, t, x):
        """Evaluate b(t, x) for points ``x`` of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise InvalidDimensionError(f"points have dimension {x.shape[-1]}, field has {self.d}")
        r = np.sqrt(np.sum(x * x, axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0, self.psi(r) / np.where(r > 0, r, 1.0), 0.0)
            if self.is_singular and self.kind != "difference":
                scale = np.where(r > 0, scale, np.nan)
        out = scale[..., None] * x
        if self.has_const:
            chi = np.ones_like(r) if self.chi is None else self.chi(r)
            out = out + chi[..., None] * self.const
        return out

    def magnitude(self, t, x):
        return np.linalg.norm(self.eval(t, x), axis=-1)

    def sup_norm(self):
        """sup |b|, or inf for singular kinds."""
        if self.is_singular:
            return math.inf
        if self.kind == "bounded_smooth":
            return abs(self.params["amp"]) + float(np.linalg.norm(self.const))
        tab = self.tabulate()
        return float(np.max(np.abs(tab.psi)) + np.linalg.norm(tab.const) * np.max(np.abs(tab.chi)))

    def tabulate(self):
        """Radial table used by the Monte Carlo kernels."""
        if self.table is not None:
            return self.table
        if self.is_singular:
            raise InvalidParameterError(
                f"{self.id}: singular drifts cannot be tabulated; mollify first")
        a, du, r_max = 1e-2, 5e-3, 60.0
        r = _table_nodes(a, du, r_max)
        chi = np.ones_like(r) if self.chi is None else self.chi(r)
        tab = RadialTable(a, du, self.psi(r), chi, np.array(self.const, dtype=float))
        object.__setattr__(self, "table", tab)
        return tab


def _check_dim(d):
    if int(d) != d or d < 3:
        raise InvalidDimensionError(f"dimension must be an integer >= 3, got {d}")
    return int(d)


def make_inverse_square(d, delta):
    """b(x) = sqrt(delta) (d-2)/2 |x|^{-2} x."""
    d = _check_dim(d)
    if not delta > 0:
        raise InvalidParameterError(f"delta must be positive, got {delta}")
    k = math.sqrt(delta) * (d - 2) / 2.0

    def psi(r):
        with np.errstate(divide="ignore"):
            return k / r

    return DriftField("inverse_square", d, {"delta": float(delta)}, psi=psi)


def make_bounded_smooth(d, amp=1.0, const=None):
    """b(x) = const + amp * tanh(|x|) x/|x|; smooth and bounded by |amp| + |const|."""
    d = _check_dim(d)
    c = np.zeros(d) if const is None else np.asarray(const, dtype=float)
    if c.shape != (d,):
        raise InvalidDimensionError(f"constant vector must have shape ({d},)")
    amp = float(amp)
    return DriftField("bounded_smooth", d, {"amp": amp, "c": tuple(c.tolist())},
                      psi=lambda r: amp * np.tanh(r), const=c)


def make_zero(d):
    return make_bounded_smooth(d, amp=0.0)


def make_constant(d, c):
    return make_bounded_smooth(d, amp=0.0, const=c)


def make_lps_power(d, a, coef=1.0):
    """b(x) = coef |x|^{-a} 1_{|x| <= 1} x/|x|."""
    d = _check_dim(d)
    if not 0 < a:
        raise InvalidParameterError(f"power a must be positive, got {a}")
    a, coef = float(a), float(coef)

    def psi(r):
        with np.errstate(divide="ignore"):
            return np.where(r <= 1.0, coef * np.power(r, -a), 0.0)

    return DriftField("lps_power", d, {"a": a, "coef": coef}, psi=psi, support_radius=1.0)


def difference(b1, b2):
    """The field b1 - b2."""
    if b1.d != b2.d:
        raise InvalidDimensionError("difference operands must share the dimension")
    if b1.time_dependent != b2.time_dependent:
        raise InvalidParameterError("difference operands must share the time structure")
    if not b2.has_const:
        const, chi = b1.const, b1.chi
    elif not b1.has_const:
        const, chi = -b2.const, b2.chi
    elif b1.chi is None and b2.chi is None:
        const, chi = b1.const - b2.const, None
    else:
        raise InvalidParameterError("difference of two modulated constant parts is not representable")
    p1, p2 = b1.psi, b2.psi
    supports = [s for s in (b1.support_radius, b2.support_radius)]
    support = None if None in supports else max(supports)
    tab = None
    if not (b1.is_singular or b2.is_singular):
        t1, t2 = b1.tabulate(), b2.tabulate()
        a, du = min(t1.a, t2.a), min(t1.du, t2.du)
        r = _table_nodes(a, du, max(t1.r_max, t2.r_max))
        c1 = t1.chi_at(r) if b1.has_const else np.zeros_like(r)
        c2 = t2.chi_at(r) if b2.has_const else np.zeros_like(r)
        chi_tab = c1 if b1.has_const else (c2 if b2.has_const else np.ones_like(r))
        if b1.has_const and b2.has_const:
            chi_tab = np.ones_like(r)
        tab = RadialTable(a, du, t1.psi_at(r) - t2.psi_at(r), chi_tab, np.array(const, dtype=float))
    return DriftField("difference", b1.d, {"left": b1.id, "right": b2.id},
                      support_radius=support, psi=lambda r: p1(r) - p2(r), chi=chi,
                      const=np.array(const, dtype=float), table=tab, operands=(b1, b2),
                      time_cap=min(b1.time_cap, b2.time_cap))


def negate(b):
    return difference(make_zero(b.d), b)


# ---------------------------------------------------------------------------
# mollification

@dataclass(frozen=True)
class MollificationSchedule:
    n: int
    time_cap: Optional[float] = None
    space_cap: Optional[float] = None
    value_cap: Optional[float] = None
    mollifier_width: Optional[float] = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise InvalidParameterError(f"mollification index must be a positive integer, got {self.n}")
        for name in ("time_cap", "space_cap", "value_cap"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, float(self.n))
            elif not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.mollifier_width is None:
            object.__setattr__(self, "mollifier_width", 1.0 / self.n)
        elif not self.mollifier_width > 0:
            raise InvalidParameterError("mollifier_width must be positive")


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _radial_convolution(psi, chi, d, width, r, n_s=64, n_ang=64, chunk=64):
    """Convolve radial profiles with the normalized bump (1 - |y|^2/w^2)^4.

    Polar coordinates for y = s (cos a, sin a omega): the vector part needs
    only the projection on x/|x|, the transverse components cancel.
    """
    s, ws = _gauss01(n_s)
    s = s * width
    ws = ws * width
    ang, wa = _gauss01(n_ang)
    ang = ang * math.pi
    wa = wa * math.pi
    kern = (1.0 - (s / width) ** 2) ** 4 * s ** (d - 1)
    wgt = (ws * kern)[:, None] * (wa * np.sin(ang) ** (d - 2))[None, :]
    wgt = wgt / wgt.sum()
    cos_a = np.cos(ang)[None, :]
    psi_out = np.empty_like(r)
    chi_out = np.empty_like(r)
    for i in range(0, r.size, chunk):
        rr = r[i:i + chunk, None, None]
        par = rr - s[None, :, None] * cos_a[None]
        rho = np.sqrt(par ** 2 + (s[None, :, None] * np.sin(ang)[None, None, :]) ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = np.where(rho > 0, par / rho, 0.0)
        psi_out[i:i + chunk] = np.einsum("kij,ij->k", psi(rho) * proj, wgt)
        if chi is not None:
            chi_out[i:i + chunk] = np.einsum("kij,ij->k", chi(rho), wgt)
    if chi is None:
        chi_out[:] = 1.0
    return psi_out, chi_out


_MOLLIFY_CACHE = {}


def mollify(b, schedule):
    """Truncate in time, space and magnitude, then smooth with a compact bump.

    The magnitude test uses ``|psi| + |c| |chi|``, which equals |b| when the
    constant part vanishes and is a sufficient condition otherwise.
    """
    if isinstance(schedule, int):
        schedule = MollificationSchedule(schedule)
    key = (b.id, schedule)
    if key in _MOLLIFY_CACHE:
        return _MOLLIFY_CACHE[key]
    w = schedule.mollifier_width
    space_cap = schedule.space_cap
    if b.support_radius is not None:
        space_cap = min(space_cap, b.support_radius)
    cnorm = float(np.linalg.norm(b.const))
    psi0, chi0 = b.psi, b.chi

    def keep(rho):
        with np.errstate(divide="ignore", invalid="ignore"):
            mag = np.abs(psi0(rho))
            if cnorm:
                mag = mag + cnorm * (np.ones_like(rho) if chi0 is None else np.abs(chi0(rho)))
            return (rho <= space_cap) & (mag <= schedule.value_cap)

    def psi_t(rho):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(keep(rho), psi0(rho), 0.0)

    def chi_t(rho):
        base = np.ones_like(rho) if chi0 is None else chi0(rho)
        return np.where(keep(rho), base, 0.0)

    support = space_cap + w
    a = w / 8.0
    r = _table_nodes(a, 0.01, support * (1.0 + 1e-9))
    psi_v, chi_v = _radial_convolution(psi_t, chi_t if b.has_const else None, b.d, w, r)
    psi_v[0] = 0.0
    tab = RadialTable(a, 0.01, psi_v, chi_v, np.array(b.const, dtype=float))
    out = DriftField("mollified", b.d,
                     {"base": b.id, "n": schedule.n, "width": w, "value_cap": schedule.value_cap,
                      "space_cap": schedule.space_cap, "time_cap": schedule.time_cap},
                     support_radius=support, psi=tab.psi_at, chi=tab.chi_at if b.has_const else None,
                     const=np.array(b.const, dtype=float), table=tab, operands=(b,),
                     time_cap=schedule.time_cap)
    _MOLLIFY_CACHE[key] = out
    return out


def local_l2_distance(b1, b2, radius=2.0, horizon=1.0, n_nodes=4000):
    """||b1 - b2|| in L^2([0, horizon] x B(0, radius)) for radial fields without constant part."""
    if b1.has_const or b2.has_const:
        raise InvalidParameterError("local_l2_distance handles purely radial fields")
    # geometric nodes resolve the r -> 0 end where mollified fields differ most
    s, ws = _gauss01(n_nodes)
    r = radius * s ** 3
    jac = 3 * radius * s ** 2 * ws
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = b1.psi(r) - b2.psi(r)
    val = np.sum(diff ** 2 * r ** (b1.d - 1) * jac) * sphere_area(b1.d) * horizon
    return math.sqrt(val)


# ---------------------------------------------------------------------------
# critical exponent and LPS data

def p_critical(delta):
    """p_delta = 2 / (2 - sqrt(delta)) for 0 < delta < 4."""
    from .errors import ExponentRangeError
    if not 0 < delta < 4:
        raise ExponentRangeError(f"p_critical needs 0 < delta < 4, got {delta}")
    return 2.0 / (2.0 - math.sqrt(delta))


@dataclass(frozen=True)
class LpsExponents:
    """|b| in L^q_t (L^r_x + L^inf); ``r`` is the critical Lebesgue exponent.

    For power singularities |b| lies in L^{r'} for every r' < r (weak L^r at r).
    """

    q: float
    r: float
    d: int
    critical: bool

    def __post_init__(self):
        total = self.d / self.r + 2.0 / self.q
        if total > 2.0:
            raise InvalidParameterError(f"d/r + 2/q = {total} exceeds 2")

    @property
    def index(self):
        return self.d / self.r + 2.0 / self.q


def lps_exponents(b):
    if b.kind in ("bounded_smooth", "mollified") or (b.kind == "difference" and not b.is_singular):
        return LpsExponents(math.inf, math.inf, b.d, False)
    if b.kind == "lps_power":
        a = b.params["a"]
        if a >= 1.0:
            return None
        return LpsExponents(math.inf, b.d / a, b.d, False)
    return None


# ---------------------------------------------------------------------------
# form-bound certificates

@dataclass(frozen=True)
class RadialFamily:
    """Test functions r^{-(d-2)/2} w(log r), w spanned by log-spaced bumps.

    ``decades`` lists the refinement levels (log-range widths); the bumps are
    cubic B-splines in log r, ``per_decade`` of them per decade.
    """

    per_decade: int = 8
    decades: tuple = (8, 16, 32)
    center_log10: float = 0.0
    quad_nodes: int = 8

    def describe(self):
        return (f"radial-logbump(per_decade={self.per_decade},decades={list(self.decades)},"
                f"center=1e{self.center_log10:g})")


@dataclass(frozen=True)
class FormBoundCertificate:
    delta: float
    g_delta: object
    tolerance: float
    method: str
    field_id: str = ""
    family: str = ""
    grid: str = ""
    levels: tuple = ()
    one_sided: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidParameterError("certificate delta must be positive")
        g = np.atleast_1d(np.asarray(self.g_delta if not callable(self.g_delta) else 0.0, dtype=float))
        if np.any(g < 0):
            raise InvalidParameterError("g_delta must be nonnegative")
        if self.method not in ("analytic", "rayleigh_numeric"):
            raise InvalidParameterError(f"unknown certificate method {self.method!r}")
        if self.method == "rayleigh_numeric" and not (self.family and self.grid):
            raise InvalidParameterError("numeric certificates must record family and grid")

    def g(self, t=0.0):
        if callable(self.g_delta):
            return float(self.g_delta(t))
        g = np.asarray(self.g_delta, dtype=float)
        if g.ndim == 0:
            return float(g)
        # sampled table (t_i, g_i)
        return float(np.interp(t, g[:, 0], g[:, 1]))

    def csv_row(self, b):
        return [b.kind, b.d, _params_str(b), repr(float(self.delta)), repr(self.g()),
                repr(float(self.tolerance)), self.method]


CERT_CSV_HEADER = ["kind", "d", "params", "delta", "g", "tolerance", "method"]


def _rayleigh_matrices(b, fam, decades):
    d = b.d
    step = math.log(10.0) / fam.per_decade
    half = decades * math.log(10.0) / 2.0
    s0 = fam.center_log10 * math.log(10.0)
    centers = s0 + np.arange(-half, half + 1e-12, step)
    nb = centers.size
    # quadrature on every knot interval; bumps are cubic polynomials there
    knots = np.arange(centers[0] - 2 * step, centers[-1] + 2 * step + 1e-12, step)
    gx, gw = np.polynomial.legendre.leggauss(fam.quad_nodes)
    sq = (0.5 * (knots[:-1, None] + knots[1:, None]) + 0.5 * step * gx[None, :]).ravel()
    wq = np.tile(0.5 * step * gw, knots.size - 1)
    t = (sq[None, :] - centers[:, None]) / step
    at = np.abs(t)
    inner = at < 1.0
    outer = (at >= 1.0) & (at < 2.0)
    # cubic B-spline: C^2 bump, exact partition of unity
    B = np.where(inner, (4.0 - 6.0 * t ** 2 + 3.0 * at ** 3) / 6.0,
                 np.where(outer, (2.0 - at) ** 3 / 6.0, 0.0))
    dB = np.where(inner, -2.0 * t + 1.5 * t * at,
                  np.where(outer, -0.5 * np.sign(t) * (2.0 - at) ** 2, 0.0)) / step
    k = (d - 2) / 2.0
    grad = dB - k * B
    r = np.exp(sq)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        pot = (b.psi(r) * r) ** 2
    if not np.all(np.isfinite(pot)):
        bad = float(np.nanmax(np.where(np.isfinite(pot), np.nan, np.inf)))
        raise FormBoundError(f"{b.id}: |b|^2 is not integrable against the test family", bad)
    K = (grad * wq) @ grad.T
    A = (B * (pot * wq)) @ B.T
    return A, K, nb


def _rayleigh_sup(b, fam, decades):
    A, K, nb = _rayleigh_matrices(b, fam, decades)
    lam = linalg.eigh(A, K, eigvals_only=True, subset_by_index=[nb - 1, nb - 1])[0]
    return max(float(lam), 0.0)


def certify_form_bound(b, family=None, method="rayleigh", tol=0.05):
    """Certify b in F_delta (g_delta = 0 for numeric certificates).

    ``method="rayleigh"`` maximizes the discrete Rayleigh quotient
    int |b xi|^2 / int |grad xi|^2 over the span of ``family`` at each
    refinement level; the result is a lower bound on the true form bound.
    ``method="analytic"`` uses the Hardy constant for inverse-square fields
    and sup|b|^2 for bounded ones.
    """
    family = family or RadialFamily()
    if method == "auto":
        method = "analytic" if b.kind in ("inverse_square", "bounded_smooth") else "rayleigh"
    if method == "analytic":
        if b.kind == "inverse_square":
            return FormBoundCertificate(b.params["delta"], 0.0, tol, "analytic", b.id)
        if b.kind == "bounded_smooth":
            return FormBoundCertificate(tol, b.sup_norm() ** 2, tol, "analytic", b.id)
        raise InvalidParameterError(f"no analytic certificate for kind {b.kind}")
    if b.has_const:
        raise InvalidParameterError(
            f"{b.id}: Rayleigh certification needs a radial |b|; use method='analytic'")
    levels = tuple(_rayleigh_sup(b, family, D) for D in family.decades)
    if not all(math.isfinite(v) for v in levels):
        raise FormBoundError(f"{b.id}: non-finite Rayleigh quotient", levels[-1])
    if len(levels) >= 3 and levels[-1] > 2.0 * levels[-2] > 4.0 * levels[-3] > 0:
        raise FormBoundError(f"{b.id}: Rayleigh quotient diverges under refinement", levels[-1])
    grid = f"gauss-legendre {family.quad_nodes}/interval on log r"
    return FormBoundCertificate(max(levels[-1], tol), 0.0, tol, "rayleigh_numeric", b.id,
                                family.describe(), grid, levels, one_sided=True)


def random_family_quotients(b, n_funcs=8, seed=0, h=0.05, half_width=1.0):
    """Rayleigh quotients of random smooth compactly supported functions on a 3D cell grid.

    Cross-check only: each value must not exceed the certified form bound.
    """
    rng = np.random.default_rng(seed)
    ax = np.arange(-half_width + h / 2, half_width, h)
    grids = np.meshgrid(*([ax] * b.d), indexing="ij")
    X = np.stack(grids, axis=-1)
    r2 = np.sum(X ** 2, axis=-1)
    cut = np.where(r2 < half_width ** 2, (1 - r2 / half_width ** 2) ** 3, 0.0)
    bb = np.sum(b.eval(0.0, X) ** 2, axis=-1)
    out = []
    for _ in range(n_funcs):
        xi = np.zeros_like(r2)
        for _ in range(4):
            c = rng.uniform(-0.3, 0.3, size=b.d)
            s = rng.uniform(0.05, 0.4)
            xi += rng.normal() * np.exp(-np.sum((X - c) ** 2, axis=-1) / (2 * s * s))
        xi *= cut
        g = np.gradient(xi, h)
        den = sum(np.sum(gi ** 2) for gi in g)
        out.append(float(np.sum(bb * xi ** 2) / den))
    return out


# ---------------------------------------------------------------------------
# catalog ids

def _params_str(b):
    return ";".join(f"{k}={v}" for k, v in b.params.items())


def drift_id(b):
    if b.kind == "inverse_square":
        return f"inverse-square:d={b.d}:delta={b.params['delta']!r}"
    if b.kind == "bounded_smooth":
        amp, c = b.params["amp"], b.params["c"]
        if amp == 0 and not any(c):
            return f"zero:d={b.d}"
        base = f"bounded-smooth:d={b.d}:amp={amp!r}"
        if any(c):
            base += ":c=" + ",".join(repr(v) for v in c)
        return base
    if b.kind == "lps_power":
        return f"lps-power:d={b.d}:a={b.params['a']!r}:coef={b.params['coef']!r}"
    if b.kind == "mollified":
        p = b.params
        default = (p["width"] == 1.0 / p["n"] and p["value_cap"] == p["n"]
                   and p["space_cap"] == p["n"] and p["time_cap"] == p["n"])
        if default:
            return f"{p['base']}@n={p['n']}"
        return (f"{p['base']}@n={p['n']},width={p['width']!r},value_cap={p['value_cap']!r},"
                f"space_cap={p['space_cap']!r},time_cap={p['time_cap']!r}")
    return f"diff({b.params['left']}|{b.params['right']})"


def parse_drift_id(text):
    """Inverse of :func:`drift_id` for catalog and mollified entries."""
    text = text.strip()
    if text.startswith("diff(") and text.endswith(")"):
        inner = text[5:-1]
        depth = 0
        for i, ch in enumerate(inner):
            depth += ch == "("
            depth -= ch == ")"
            if ch == "|" and depth == 0:
                return difference(parse_drift_id(inner[:i]), parse_drift_id(inner[i + 1:]))
        raise InvalidParameterError(f"malformed difference id {text!r}")
    base, _, moll = text.partition("@")
    parts = base.split(":")
    name, kv = parts[0], {}
    for item in parts[1:]:
        k, sep, v = item.partition("=")
        if not sep:
            raise InvalidParameterError(f"malformed drift id component {item!r} in {text!r}")
        kv[k] = v
    try:
        d = int(kv.pop("d"))
        if name == "inverse-square":
            b = make_inverse_square(d, float(kv.pop("delta")))
        elif name == "zero":
            b = make_zero(d)
        elif name == "bounded-smooth":
            c = kv.pop("c", None)
            const = None if c is None else [float(v) for v in c.split(",")]
            b = make_bounded_smooth(d, float(kv.pop("amp", 1.0)), const)
        elif name == "lps-power":
            b = make_lps_power(d, float(kv.pop("a")), float(kv.pop("coef", 1.0)))
        else:
            raise InvalidParameterError(f"unknown catalog entry {name!r}")
    except KeyError as exc:
        raise InvalidParameterError(f"drift id {text!r} lacks parameter {exc}") from None
    if kv:
        raise InvalidParameterError(f"unknown drift parameters {sorted(kv)} in {text!r}")
    if moll:
        opts = dict(item.split("=", 1) for item in moll.split(","))
        n = int(opts.pop("n"))
        sched = MollificationSchedule(n, **{k: float(v) for k, v in
                                            (("mollifier_width" if k == "width" else k, v)
                                             for k, v in opts.items())})
        b = mollify(b, sched)
    return b


def certificates_csv(rows):
    """Serialize (field, certificate) pairs as CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CERT_CSV_HEADER)
    for b, cert in rows:
        w.writerow(cert.csv_row(b))
    return buf.getvalue()
