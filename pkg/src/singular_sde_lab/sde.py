"""Euler-Maruyama engine for dX = -b dt + sqrt(2) dB with tabulated smooth drifts.

Paths are never stored: an ensemble keeps its recipe (drift, x0, dt, T, M,
seed) and per-path summaries, and every functional regenerates the
trajectories from the counter-based normals.  Path ``i`` at step ``k`` always
sees the same normals, so results do not depend on chunking or workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit
from scipy import linalg as sla
from scipy import signal, stats

from .drift_catalog import DriftField
from .energy import Weight, default_theta
from .errors import InvalidParameterError, SimulationError
from .rng import fill_normals, fill_normals_row

LANES = 8
OBS_NONE, OBS_OCCUPATION, OBS_MARTINGALE = 0, 1, 2
CAP_FACTOR = 10.0


# ---------------------------------------------------------------------------
# kernels

@njit(cache=True, inline="always")
def _lookup(vals, a, du, r):
    u = math.log1p(r / a) / du
    n = vals.shape[0]
    if u >= n - 1:
        return vals[n - 1]
    j = int(u)
    w = u - j
    return vals[j] * (1.0 - w) + vals[j + 1] * w


@njit(cache=True, inline="always")
def _drift_coeffs(xs, s, a, du, psi, chi, hasc):
    """(|x|, psi(|x|)/|x|, chi(|x|)) at row ``s`` of ``xs``; b(x) = sc x + c const."""
    r2 = 0.0
    for i in range(xs.shape[1]):
        r2 += xs[s, i] * xs[s, i]
    r = math.sqrt(r2)
    sc = 0.0
    if r > 0.0:
        sc = _lookup(psi, a, du, r) / r
    c = 0.0
    if hasc:
        c = _lookup(chi, a, du, r)
    return r, sc, c


@njit(cache=True, inline="always")
def _drift(x, out, a, du, psi, chi, cst, hasc):
    """Drift at ``x`` written to ``out``; returns |x|."""
    r, sc, c = _drift_coeffs(x.reshape((1, x.shape[0])), 0, a, du, psi, chi, hasc)
    for i in range(x.shape[0]):
        out[i] = sc * x[i] + c * cst[i]
    return r


@njit(cache=True, inline="always")
def _step(xs, s, z, seed, path, k, dt, sig, cap, a, du, psi, chi, cst, hasc):
    """Advance row ``s`` of ``xs`` in place (same arithmetic as the engine); 1 if capped."""
    d = xs.shape[1]
    _, sc, c = _drift_coeffs(xs, s, a, du, psi, chi, hasc)
    fill_normals_row(seed, path, k, z, s)
    n2 = 0.0
    for i in range(d):
        z[s, i] = -(sc * xs[s, i] + c * cst[i]) * dt + sig * z[s, i]
        n2 += z[s, i] * z[s, i]
    capped = 0
    scale = 1.0
    if n2 > cap * cap:
        scale = cap / math.sqrt(n2)
        capped = 1
    for i in range(d):
        xs[s, i] += scale * z[s, i]
    return capped


@njit(cache=True, inline="always")
def _bump_row(xs, s, R):
    """Bump (1 - |x|^2/R^2)^3_+ at row ``s``: (value, |grad|, Laplacian, g) with grad = g x."""
    d = xs.shape[1]
    r2 = 0.0
    for i in range(d):
        r2 += xs[s, i] * xs[s, i]
    q = r2 / (R * R)
    if q >= 1.0:
        return 0.0, 0.0, 0.0, 0.0
    om = 1.0 - q
    g = -6.0 * om * om / (R * R)
    lap = -6.0 * om / (R * R) * (d * om - 4.0 * q)
    return om * om * om, -g * math.sqrt(r2), lap, g


@njit(cache=True, inline="always")
def _observable(obs, xs, s, R, fcode, ea, edu, epsi, echi, ecst, ehasc):
    """Per-step integrand: |h| f (obs 1) or -Lap phi + b . grad phi (obs 2)."""
    r, sc, c = _drift_coeffs(xs, s, ea, edu, epsi, echi, ehasc)
    xc = 0.0
    cc = 0.0
    if ehasc:
        for i in range(xs.shape[1]):
            xc += xs[s, i] * ecst[i]
            cc += ecst[i] * ecst[i]
    _, gmag, lap, g = _bump_row(xs, s, R)
    if obs == OBS_OCCUPATION:
        m = math.sqrt(max(sc * sc * r * r + 2.0 * sc * c * xc + c * c * cc, 0.0))
        return m * gmag if fcode == 1 else m
    return -lap + g * (sc * r * r + c * xc)


@njit(cache=True, nogil=True)
def _engine_kernel(x0, nsteps, dt, lo, hi, seed, a, du, psi, chi, cst, hasc, stop_r,
                   obs, R, fcode, ea, edu, epsi, echi, ecst, ehasc, win, k0, gcode,
                   minr, hit, final, caps, bad, acc):
    """Euler-Maruyama for paths lo..hi-1 with optional path functionals.

    obs 0: hitting data only.  obs 1: acc[j, w] is the trapezoid integral of
    |h| f over the step range win[w].  obs 2: acc[j] = (M_T - M_{k0 dt}, G)
    for the bump of radius R, T = nsteps dt.

    Paths advance in LANES interleaved slots so independent dependency
    chains overlap; a slot is refilled with the next path when its path ends.
    """
    d = x0.shape[0]
    sig = math.sqrt(2.0 * dt)
    cap = CAP_FACTOR * sig
    xs = np.empty((LANES, d))
    z = np.empty((LANES, d))
    pid = np.full(LANES, -1, dtype=np.int64)
    ks = np.zeros(LANES, dtype=np.int64)
    mrs = np.zeros(LANES)
    ncs = np.zeros(LANES, dtype=np.int64)
    prev = np.zeros(LANES)
    integ = np.zeros(LANES)
    avg = np.zeros(LANES)
    m0 = np.zeros(LANES)
    gval = np.ones(LANES)
    phi0 = np.zeros(LANES)
    px1 = np.zeros(LANES)
    nw = win.shape[0]
    r02 = 0.0
    for i in range(d):
        r02 += x0[i] * x0[i]
    r0 = math.sqrt(r02)
    nxt = lo
    live = 0
    while True:
        for s in range(LANES):
            while pid[s] < 0 and nxt < hi:
                j = nxt - lo
                nxt += 1
                hit[j] = -1
                bad[j] = 0
                for i in range(d):
                    xs[s, i] = x0[i]
                if obs == OBS_OCCUPATION:
                    for w in range(nw):
                        acc[j, w] = 0.0
                elif obs == OBS_MARTINGALE:
                    integ[s] = 0.0
                    avg[s] = 0.0
                    m0[s] = 0.0
                    gval[s] = 1.0
                    phi0[s] = _bump_row(xs, s, R)[0]
                    px1[s] = x0[0]
                    if k0 == 0 and gcode == 1:
                        gval[s] = min(max(phi0[s], -1.0), 1.0)
                    acc[j, 0] = 0.0
                    acc[j, 1] = gval[s]
                if r0 <= stop_r or nsteps == 0:
                    hit[j] = 0 if r0 <= stop_r else -1
                    minr[j] = r0
                    caps[j] = 0
                    for i in range(d):
                        final[j, i] = x0[i]
                    continue
                if obs != OBS_NONE:
                    prev[s] = _observable(obs, xs, s, R, fcode, ea, edu, epsi, echi, ecst, ehasc)
                pid[s] = j + lo
                ks[s] = 0
                mrs[s] = r0
                ncs[s] = 0
                live += 1
        if live == 0:
            break
        for s in range(LANES):
            p = pid[s]
            if p < 0:
                continue
            # the step is written out here rather than via a helper: the
            # inlined helper costs about a factor of two in this loop
            r2 = 0.0
            for i in range(d):
                r2 += xs[s, i] * xs[s, i]
            r = math.sqrt(r2)
            sc = 0.0
            if r > 0.0:
                sc = _lookup(psi, a, du, r) / r
            c = 0.0
            if hasc:
                c = _lookup(chi, a, du, r)
            k = ks[s]
            fill_normals_row(seed, p, k, z, s)
            n2 = 0.0
            for i in range(d):
                z[s, i] = -(sc * xs[s, i] + c * cst[i]) * dt + sig * z[s, i]
                n2 += z[s, i] * z[s, i]
            scale = 1.0
            if n2 > cap * cap:
                scale = cap / math.sqrt(n2)
                ncs[s] += 1
            r2 = 0.0
            for i in range(d):
                xs[s, i] += scale * z[s, i]
                r2 += xs[s, i] * xs[s, i]
            ks[s] = k + 1
            r = math.sqrt(r2)
            j = p - lo
            if obs != OBS_NONE:
                cur = _observable(obs, xs, s, R, fcode, ea, edu, epsi, echi, ecst, ehasc)
                if obs == OBS_OCCUPATION:
                    for w in range(nw):
                        if win[w, 0] <= k and k + 1 <= win[w, 1]:
                            acc[j, w] += 0.5 * dt * (prev[s] + cur)
                else:
                    integ[s] += 0.5 * dt * (prev[s] + cur)
                    if k < k0:
                        avg[s] += 0.5 * dt * (px1[s] + xs[s, 0])
                    px1[s] = xs[s, 0]
                    if k + 1 == k0:
                        val = _bump_row(xs, s, R)[0]
                        m0[s] = val - phi0[s] + integ[s]
                        if gcode == 1:
                            gval[s] = min(max(val, -1.0), 1.0)
                        elif gcode == 2:
                            gval[s] = min(max(avg[s] / (k0 * dt), -1.0), 1.0)
                prev[s] = cur
            done = False
            if not math.isfinite(r):
                bad[j] = 1
                done = True
            else:
                if r < mrs[s]:
                    mrs[s] = r
                if r <= stop_r:
                    hit[j] = k + 1
                    done = True
                elif k + 1 >= nsteps:
                    done = True
            if done:
                minr[j] = mrs[s]
                caps[j] = ncs[s]
                for i in range(d):
                    final[j, i] = xs[s, i]
                if obs == OBS_MARTINGALE:
                    val = _bump_row(xs, s, R)[0]
                    acc[j, 0] = val - phi0[s] + integ[s] - m0[s]
                    acc[j, 1] = gval[s]
                pid[s] = -1
                live -= 1


@njit(cache=True, nogil=True)
def _paths_kernel(x0, nsteps, dt, paths, seed, a, du, psi, chi, cst, hasc, out):
    d = x0.shape[0]
    sig = math.sqrt(2.0 * dt)
    cap = CAP_FACTOR * sig
    xs = np.empty((1, d))
    z = np.empty((1, d))
    for j in range(paths.shape[0]):
        for i in range(d):
            xs[0, i] = x0[i]
            out[j, 0, i] = x0[i]
        for k in range(nsteps):
            _step(xs, 0, z, seed, paths[j], k, dt, sig, cap, a, du, psi, chi, cst, hasc)
            for i in range(d):
                out[j, k + 1, i] = xs[0, i]


@njit(cache=True, nogil=True)
def _radial_kernel(d, r0, nsteps, dt, lo, hi, seed, kind, coef, a, du, psi, eps, use_cap,
                   scheme, minr, final):
    """Radial chains; kind 0 uses psi = coef / y, kind 1 the tabulated profile.

    scheme 0 is the exact radius of the Cartesian Euler chain,
    scheme 1 is Euler for dY = ((d-1)/Y - psi(Y)) dt + sqrt(2) dW.
    """
    sig = math.sqrt(2.0 * dt)
    cap = CAP_FACTOR * sig
    z = np.empty(d)
    for p in range(lo, hi):
        j = p - lo
        y = r0
        mr = y
        k = 0
        while k < nsteps and mr > eps:
            fill_normals(seed, p, k, z)
            if kind == 0:
                ps = coef / y
            else:
                ps = _lookup(psi, a, du, y)
            if scheme == 0:
                par = -ps * dt + sig * z[0]
                perp2 = 0.0
                for i in range(1, d):
                    perp2 += sig * sig * z[i] * z[i]
                if use_cap:
                    n2 = par * par + perp2
                    if n2 > cap * cap:
                        s = cap / math.sqrt(n2)
                        par *= s
                        perp2 *= s * s
                y = math.sqrt((y + par) ** 2 + perp2)
            else:
                y = y + ((d - 1) / y - ps) * dt + sig * z[0]
                if y < 0.0:
                    y = -y
            if y < mr:
                mr = y
            k += 1
        minr[j] = mr
        final[j] = y


# ---------------------------------------------------------------------------
# scheduling

def default_jobs(jobs=None):
    if jobs is not None:
        return max(1, int(jobs))
    env = os.environ.get("SSL_LAB_JOBS")
    return max(1, int(env)) if env else 1


def _chunks(M, jobs):
    edges = np.linspace(0, M, max(1, min(jobs, M)) + 1).astype(np.int64)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(len(edges) - 1)]


def _run_chunks(fn, M, jobs):
    parts = _chunks(M, jobs)
    if len(parts) == 1:
        fn(*parts[0])
        return
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        list(pool.map(lambda lh: fn(*lh), parts))


def _table_args(b):
    tab = b.tabulate()
    return (float(tab.a), float(tab.du), np.ascontiguousarray(tab.psi, dtype=float),
            np.ascontiguousarray(tab.chi, dtype=float), np.ascontiguousarray(tab.const, dtype=float),
            bool(np.any(tab.const != 0)))


# ---------------------------------------------------------------------------
# ensembles

@dataclass(frozen=True)
class PathEnsemble:
    d: int
    x0: tuple
    dt: float
    T: float
    M: int
    seed: int
    drift_id: str
    drift: DriftField = field(repr=False)
    stop_radius: float
    min_radius: np.ndarray = field(repr=False)
    hit_step: np.ndarray = field(repr=False)
    final: np.ndarray = field(repr=False)
    cap_count: int
    nonfinite: int
    jobs: int = 1
    _bad: np.ndarray = field(repr=False, default=None)

    @property
    def steps(self):
        return int(round(self.T / self.dt))

    @property
    def valid(self):
        return ~self._bad

    @property
    def cap_fraction(self):
        return self.cap_count / max(1, self.M * self.steps)

    def paths(self, indices, steps=None):
        """Regenerate full trajectories, shape (len(indices), steps + 1, d)."""
        idx = np.asarray(indices, dtype=np.int64)
        n = self.steps if steps is None else int(steps)
        out = np.empty((idx.size, n + 1, self.d))
        _paths_kernel(np.asarray(self.x0, dtype=float), n, self.dt, idx, np.uint64(self.seed),
                      *_table_args(self.drift), out)
        return out

    def with_dt(self, dt):
        return simulate(self.drift, self.x0, dt, self.T, self.M, self.seed,
                        stop_radius=None if self.stop_radius < 0 else self.stop_radius,
                        jobs=self.jobs)


def _run_engine(b_n, x0, dt, nsteps, M, seed, stop, jobs, obs=OBS_NONE, R=1.0, fcode=0,
                field=None, win=None, k0=0, gcode=0):
    """Drive :func:`_engine_kernel` over M paths split across ``jobs`` threads."""
    d = b_n.d
    minr = np.empty(M)
    hit = np.empty(M, dtype=np.int64)
    final = np.empty((M, d))
    caps = np.zeros(M, dtype=np.int64)
    bad = np.zeros(M, dtype=np.int8)
    win = np.zeros((0, 2), dtype=np.int64) if win is None else np.asarray(win, dtype=np.int64)
    acc = np.zeros((M, max(2, win.shape[0])))
    targs = _table_args(b_n)
    eargs = _table_args(b_n if field is None else field)
    x0 = np.asarray(x0, dtype=float)

    def run(lo, hi):
        _engine_kernel(x0, nsteps, dt, lo, hi, np.uint64(seed), *targs, stop, obs, float(R),
                       fcode, *eargs, win, k0, gcode, minr[lo:hi], hit[lo:hi], final[lo:hi],
                       caps[lo:hi], bad[lo:hi], acc[lo:hi])

    _run_chunks(run, M, jobs)
    return minr, hit, final, caps, bad, acc


def simulate(b_n, x0, dt, T, M, seed, stop_radius=None, jobs=None):
    """Euler-Maruyama ensemble X_{k+1} = X_k - b_n(X_k) dt + sqrt(2 dt) xi_k.

    ``stop_radius`` ends a path once |X| <= stop_radius (enough for hitting
    statistics at any epsilon >= stop_radius).  Per-step displacements are
    capped at 10 sqrt(2 dt); activations are counted.
    """
    if b_n.is_singular:
        raise InvalidParameterError(f"{b_n.id} is singular; simulate a mollified drift")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (b_n.d,):
        raise InvalidParameterError(f"x0 must have shape ({b_n.d},)")
    if not dt > 0 or not T > 0:
        raise InvalidParameterError("dt and T must be positive")
    if int(M) != M or M < 1:
        raise InvalidParameterError("M must be a positive integer")
    if T > b_n.time_cap:
        raise InvalidParameterError("horizon exceeds the drift's time truncation")
    M = int(M)
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9 * max(1.0, T):
        raise InvalidParameterError("T must be a multiple of dt")
    jobs = default_jobs(jobs)
    stop = -1.0 if stop_radius is None else float(stop_radius)
    minr, hit, final, caps, bad, _ = _run_engine(b_n, x0, float(dt), nsteps, M, seed, stop, jobs)
    ens = PathEnsemble(b_n.d, tuple(x0.tolist()), float(dt), float(T), M, int(seed), b_n.id, b_n,
                       stop, minr, hit, final, int(caps.sum()), int(bad.sum()), jobs,
                       bad.astype(bool))
    return ens


# ---------------------------------------------------------------------------
# hitting statistics

@dataclass(frozen=True)
class HittingStats:
    epsilon: float
    p_hat: float
    ci95: float
    M: int
    dt: float
    T: float
    refined: Optional["HittingStats"] = None
    label: str = ""

    def csv_row(self, delta=float("nan")):
        return [delta, self.epsilon, self.dt, self.M, self.p_hat, self.ci95]

    def agrees_with(self, other, z=1.96):
        """True when the difference lies within the joint 95% interval."""
        se = math.sqrt(self.p_hat * (1 - self.p_hat) / self.M + other.p_hat * (1 - other.p_hat) / other.M)
        return abs(self.p_hat - other.p_hat) <= z * se


HITTING_CSV_HEADER = ["delta", "epsilon", "dt", "M", "p_hat", "ci95"]


def _binomial(hits, M, epsilon, dt, T, label=""):
    p = hits / M
    return HittingStats(float(epsilon), float(p), 1.96 * math.sqrt(p * (1 - p) / M), int(M),
                        float(dt), float(T), label=label)


def hitting_probability(ens, epsilon, refine=False):
    """Fraction of paths with min_k |X_k| <= epsilon, optionally repeated at dt/2."""
    if not epsilon > 0:
        raise InvalidParameterError("epsilon must be positive")
    if ens.stop_radius > 0 and epsilon < ens.stop_radius:
        raise InvalidParameterError("ensemble was stopped at a larger radius than epsilon")
    ok = ens.valid
    M = int(ok.sum())
    if M == 0:
        raise SimulationError("no finite paths in the ensemble")
    hits = int(np.count_nonzero(ens.min_radius[ok] <= epsilon))
    out = _binomial(hits, M, epsilon, ens.dt, ens.T, ens.drift_id)
    if refine:
        out = replace(out, refined=hitting_probability(ens.with_dt(ens.dt / 2), epsilon))
    return out


def bessel_dimension(d, delta):
    """delta_B = d - sqrt(delta) (d - 2) / 2; the origin is reached iff delta_B < 2."""
    return d - math.sqrt(delta) * (d - 2) / 2.0


@dataclass(frozen=True)
class RadialRun:
    stats: HittingStats
    min_radius: np.ndarray = field(repr=False)
    final_radius: np.ndarray = field(repr=False)
    bessel_dim: float = float("nan")


def radial_oracle(d, delta, r0, dt, T, M, seed, epsilon=0.05, scheme="chain", profile=None,
                  cap=True, jobs=None):
    """One-dimensional radial simulation of the inverse-square SDE.

    scheme="chain": the radius of the Cartesian Euler chain, computed from
    Y' = Y - psi(Y) dt as sqrt((Y' + s xi_1)^2 + s^2 (xi_2^2 + ... + xi_d^2)),
    s = sqrt(2 dt), with the same displacement cap as the engine.
    scheme="euler": Euler steps of dY = ((d-1) - sqrt(delta)(d-2)/2)/Y dt + sqrt(2) dW.
    ``profile`` replaces psi = sqrt(delta)(d-2)/(2y) by a tabulated (mollified)
    radial profile; absorption then is optional (epsilon=0 disables it).
    """
    if d < 3:
        raise InvalidParameterError("radial oracle needs d >= 3")
    if not delta > 0 or not r0 > 0:
        raise InvalidParameterError("delta and r0 must be positive")
    if profile is None and not epsilon > 0:
        raise InvalidParameterError("the raw singular drift needs an absorbing radius epsilon > 0")
    schemes = {"chain": 0, "euler": 1}
    if scheme not in schemes:
        raise InvalidParameterError(f"unknown radial scheme {scheme!r}")
    nsteps = int(round(T / dt))
    coef = math.sqrt(delta) * (d - 2) / 2.0
    if profile is None:
        kind, a, du, psi = 0, 1.0, 1.0, np.zeros(2)
    else:
        tab = profile.tabulate()
        kind, a, du, psi = 1, float(tab.a), float(tab.du), np.ascontiguousarray(tab.psi)
    minr = np.empty(M)
    final = np.empty(M)

    def run(lo, hi):
        _radial_kernel(d, float(r0), nsteps, float(dt), lo, hi, np.uint64(seed), kind, coef, a, du,
                       psi, float(epsilon), bool(cap), schemes[scheme], minr[lo:hi], final[lo:hi])

    _run_chunks(run, M, default_jobs(jobs))
    hits = int(np.count_nonzero(minr <= epsilon)) if epsilon > 0 else 0
    st = _binomial(hits, M, epsilon, dt, T, f"radial-{scheme}:d={d}:delta={delta!r}")
    return RadialRun(st, minr, final, bessel_dimension(d, delta))


def bessel_hitting_pde(d, delta, r0, epsilon, T, r_far=12.0, n=4000, nt=4000):
    """P(inf_{t<=T} Y_t <= epsilon) for the continuous radial process.

    Solves v_t = v_yy + ((d-1) - psi_coef)/y v_y on (epsilon, r_far) with
    v = 1 at epsilon and v = 0 at r_far by Crank-Nicolson on a grid
    geometric in y; v(T, r0) is the hitting probability.
    """
    k = (d - 1) - math.sqrt(delta) * (d - 2) / 2.0
    s = np.linspace(math.log(epsilon), math.log(r_far), n + 1)
    hs = s[1] - s[0]
    y = np.exp(s)
    # in s = log y: v_y = v_s / y, v_yy = (v_ss - v_s) / y^2
    inner = slice(1, n)
    yi = y[inner]
    cm = 1.0 / (yi ** 2 * hs ** 2) - (k - 1.0) / (yi ** 2 * 2 * hs)
    cp = 1.0 / (yi ** 2 * hs ** 2) + (k - 1.0) / (yi ** 2 * 2 * hs)
    c0 = -2.0 / (yi ** 2 * hs ** 2)
    dt = T / nt
    m = n - 1
    ab = np.zeros((3, m))
    ab[0, 1:] = -0.5 * dt * cp[:-1]
    ab[1] = 1.0 - 0.5 * dt * c0
    ab[2, :-1] = -0.5 * dt * cm[1:]
    v = np.zeros(m)
    for _ in range(nt):
        rhs = v * (1.0 + 0.5 * dt * c0)
        rhs[1:] += 0.5 * dt * cm[1:] * v[:-1]
        rhs[:-1] += 0.5 * dt * cp[:-1] * v[1:]
        rhs[0] += dt * cm[0] * 1.0  # boundary value 1 at both time levels
        v = sla.solve_banded((1, 1), ab, rhs)
    return float(np.interp(math.log(r0), s[inner], v))


def ks_distance(a, b):
    return float(stats.ks_2samp(a, b).statistic)


# ---------------------------------------------------------------------------
# martingale problem

@dataclass(frozen=True)
class TestFunction:
    """Radial bump phi(x) = (1 - |x|^2/R^2)^3_+ with analytic gradient and Laplacian."""

    name: str
    R: float

    def __call__(self, x):
        s = np.sum(np.asarray(x) ** 2, axis=-1) / self.R ** 2
        return np.where(s < 1, (1 - s) ** 3, 0.0)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x ** 2, axis=-1) / self.R ** 2
        return np.where(s < 1, -6 * (1 - s) ** 2 / self.R ** 2, 0.0)[..., None] * x

    def grad_norm(self, x):
        return np.linalg.norm(self.grad(x), axis=-1)

    def laplacian(self, x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        s = np.sum(x ** 2, axis=-1) / self.R ** 2
        return np.where(s < 1, -6 * (1 - s) / self.R ** 2 * (d * (1 - s) - 4 * s), 0.0)


PHI_CATALOG = {"bump": TestFunction("bump", 1.0), "bump2": TestFunction("bump2", 2.0)}
G_CATALOG = {"one": 0, "phi_t0": 1, "avg_x1": 2}


@dataclass(frozen=True)
class MartingaleDefect:
    phi: str
    t0: float
    t1: float
    G: str
    defect: float
    stderr: float
    M: int
    dt: float
    drift_id: str

    def csv_row(self, n=""):
        return [self.phi, self.t0, self.t1, n, self.defect, self.stderr]

    @property
    def z_score(self):
        return abs(self.defect) / self.stderr if self.stderr > 0 else 0.0


DEFECT_CSV_HEADER = ["phi", "t0", "t1", "n", "defect", "stderr"]


def _step_index(ens, t, name):
    k = int(round(t / ens.dt))
    if abs(k * ens.dt - t) > 1e-9 or not 0 <= k <= ens.steps:
        raise InvalidParameterError(f"{name}={t} is not a step time inside [0, T]")
    return k


def martingale_defect(ens, phi="bump", b_eval=None, t0=0.25, t1=0.5, G="one", jobs=None):
    """Estimate E[(M_{t1} - M_{t0}) G] with M^phi_t = phi(w_t) - phi(w_0) + int (-Lap phi + b . grad phi).

    Time integrals use the trapezoid rule on the Euler grid.  ``G`` is
    B_{t0}-measurable: "one", "phi_t0" (phi(w_{t0}) clipped to [-1, 1]) or
    "avg_x1" (time average of the first coordinate on [0, t0], clipped).
    """
    if not t0 < t1:
        raise InvalidParameterError("need t0 < t1")
    if phi not in PHI_CATALOG:
        raise InvalidParameterError(f"unknown test function {phi!r}")
    if G not in G_CATALOG:
        raise InvalidParameterError(f"unknown functional {G!r}")
    if G == "avg_x1" and t0 == 0:
        raise InvalidParameterError("avg_x1 needs t0 > 0")
    k0, k1 = _step_index(ens, t0, "t0"), _step_index(ens, t1, "t1")
    if ens.stop_radius > 0:
        raise InvalidParameterError("martingale statistics need an unstopped ensemble")
    b_eval = ens.drift if b_eval is None else b_eval
    jobs = default_jobs(jobs if jobs is not None else ens.jobs)
    *_, bad, out = _run_engine(ens.drift, ens.x0, ens.dt, k1, ens.M, ens.seed, -1.0, jobs,
                               obs=OBS_MARTINGALE, R=PHI_CATALOG[phi].R, field=b_eval, k0=k0,
                               gcode=G_CATALOG[G])
    vals = (out[:, 0] * out[:, 1])[bad == 0]
    return MartingaleDefect(phi, t0, t1, G, float(np.mean(vals)),
                            float(np.std(vals, ddof=1) / math.sqrt(vals.size)), int(vals.size),
                            ens.dt, b_eval.id)


# ---------------------------------------------------------------------------
# occupation functionals

def occupation_integrals(ens, h_field, f="one", windows=((0.0, 1.0),), jobs=None):
    """Per-path trapezoid integrals of |h(w_s)| f(w_s) over each window; shape (M, len(windows))."""
    fcode = {"one": 0, "grad_phi": 1}.get(f)
    if fcode is None:
        raise InvalidParameterError(f"unknown integrand {f!r}")
    if ens.stop_radius > 0:
        raise InvalidParameterError("occupation statistics need an unstopped ensemble")
    win = np.array([[_step_index(ens, a, "t0"), _step_index(ens, b, "t1")] for a, b in windows],
                   dtype=np.int64)
    if np.any(win[:, 0] >= win[:, 1]):
        raise InvalidParameterError("windows need t0 < t1")
    jobs = default_jobs(jobs if jobs is not None else ens.jobs)
    *_, bad, out = _run_engine(ens.drift, ens.x0, ens.dt, int(win[:, 1].max()), ens.M, ens.seed,
                               -1.0, jobs, obs=OBS_OCCUPATION, R=PHI_CATALOG["bump"].R,
                               fcode=fcode, field=h_field, win=win)
    return out[bad == 0, :len(win)]


def _split_power(hmag, p):
    return np.where(hmag >= 1.0, 1.0, hmag ** p)


def krylov_rhs(h_field, f, p, theta, t0, t1, weight=None, L=4.0, h=0.1):
    """sup over integer z in [-L, L]^d of (int <(h-split)^{theta'} |f|^{p theta'} rho_z^2>)^{1/(p theta')}.

    The drifts in use are time independent, so the time integral is (t1 - t0)
    times the spatial one; the translates are evaluated at once by an FFT
    correlation with rho^2.
    """
    d = h_field.d
    weight = weight or Weight(d)
    tp = theta / (theta - 1.0)
    n = int(round(L / h))
    if abs(n * h - L) > 1e-9 or abs(1.0 / h - round(1.0 / h)) > 1e-9:
        raise InvalidParameterError("L/h and 1/h must be integers")
    ax = np.arange(-n, n + 1) * h
    X = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1)
    with np.errstate(invalid="ignore"):
        hm = h_field.magnitude(0.0, X)
    hm = np.nan_to_num(hm, nan=np.inf)
    fv = np.ones(X.shape[:-1]) if f == "one" else PHI_CATALOG["bump"].grad_norm(X)
    F = _split_power(hm, p) ** tp * np.abs(fv) ** (p * tp)
    if not np.any(F > 0):
        return 0.0
    kax = np.arange(-2 * n, 2 * n + 1) * h
    K = np.stack(np.meshgrid(*([kax] * d), indexing="ij"), -1)
    rho2 = weight(K) ** 2
    # rho^2 is even, so the convolution is the correlation sum_x F(x) rho^2(x - z);
    # output index m carries z = (m - 3n) h
    full = signal.fftconvolve(F, rho2, mode="full")
    step = int(round(1.0 / h))
    zs = np.arange(-int(math.floor(L)), int(math.floor(L)) + 1)
    idx = 3 * n + zs * step
    sub = full[np.ix_(*([idx] * d))] * h ** d * (t1 - t0)
    return float(np.max(np.maximum(sub, 0.0))) ** (1.0 / (p * tp))


@dataclass(frozen=True)
class KrylovPair:
    t0: float
    t1: float
    lhs: float
    rhs: float
    stderr: float

    @property
    def degenerate(self):
        return self.rhs == 0.0

    @property
    def fitted_C(self):
        return self.lhs / self.rhs if self.rhs > 0 else float("nan")

    def csv_row(self):
        return [self.t0, self.t1, self.lhs, self.rhs, self.fitted_C]


KRYLOV_CSV_HEADER = ["t0", "t1", "lhs", "rhs", "fitted_C"]


def krylov_statistic(ens, h_field, f="one", p=2.5, theta=None, t0=0.0, t1=0.5, weight=None,
                     delta=None, L=4.0, h=0.1):
    """Monte Carlo occupation integral against the weighted space-time norm bound."""
    from .energy import check_exponent
    d = ens.d
    theta = default_theta(d) if theta is None else theta
    if not 1.0 < theta < d / (d - 1.0):
        raise InvalidParameterError(f"theta must lie in (1, {d / (d - 1.0):.6g})")
    if delta is not None:
        check_exponent(p, delta)
    if not (0 <= t0 < t1 <= ens.T + 1e-12):
        raise InvalidParameterError("window must lie inside [0, T]")
    vals = occupation_integrals(ens, h_field, f, [(t0, t1)])[:, 0]
    lhs = abs(float(np.mean(vals)))
    rhs = krylov_rhs(h_field, f, p, theta, t0, t1, weight, L, h)
    return KrylovPair(t0, t1, lhs, rhs, float(np.std(vals, ddof=1) / math.sqrt(vals.size)))


@dataclass(frozen=True)
class ScalingFit:
    mu: float
    intercept: float
    r2: float
    lengths: tuple
    values: tuple


def drift_integral_scaling(ens, b_n=None, windows=None):
    """Slope of log E int_{t0}^{t1} |b_n(w_s)| ds against log(t1 - t0)."""
    b_n = ens.drift if b_n is None else b_n
    windows = windows or [(0.0, 0.05), (0.0, 0.1), (0.0, 0.2), (0.0, 0.4), (0.0, 0.8)]
    lengths = np.array([b - a for a, b in windows], dtype=float)
    if len(windows) < 4 or np.unique(np.round(lengths, 12)).size < 2:
        raise InvalidParameterError("need at least 4 windows with distinct lengths")
    vals = occupation_integrals(ens, b_n, "one", windows).mean(axis=0)
    fit = stats.linregress(np.log(lengths), np.log(vals))
    return ScalingFit(float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2),
                      tuple(lengths.tolist()), tuple(vals.tolist()))
