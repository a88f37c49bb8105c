"""Dispatch validated configs to the library and write CSV artifacts.

Every CSV starts with one comment line ``# manifest=<hash> version=<semver>``
followed by a single header row; files are written to a temporary name and
renamed into place.  Timings live only in ``manifest.json`` so that the CSV
bodies of two runs with the same seeds are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .drift_catalog import (CERT_CSV_HEADER, certify_form_bound, make_bounded_smooth,
                            make_constant, make_inverse_square, make_zero, mollify)
from .energy import (SUPBOUND_CSV_HEADER, dg_iterate, energy_identity_residual, energy_report,
                     scan_ratio, sup_bound_check, ENERGY_CSV_HEADER)
from .kolmogorov import (Grid, GridSolution, SourceSpec, duhamel_gaussian, gaussian_source,
                         relative_error_in_ball, solve_cauchy)
from .sde import (DEFECT_CSV_HEADER, HITTING_CSV_HEADER, KRYLOV_CSV_HEADER,
                  drift_integral_scaling, hitting_probability, krylov_statistic,
                  martingale_defect, simulate)
from .suite import CHECKS, bump_source, run_check

CAP_LIMIT = 1e-3


@dataclass
class RunManifest:
    config_hash: str
    version: str
    experiment: str
    wall_time: float = 0.0
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    files: list = field(default_factory=list)

    @property
    def exit_code(self):
        return 1 if self.warnings else 0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def csv_text(header, rows, manifest_hash):
    buf = io.StringIO()
    buf.write(f"# manifest={manifest_hash} version={__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_atomic(path, data):
    """Write text or bytes to ``path`` through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_body(path):
    """Everything after the manifest comment line."""
    text = Path(path).read_text()
    return text.split("\n", 1)[1] if text.startswith("#") else text


class _Run:
    """Collects tables, timings and warnings for one invocation."""

    def __init__(self, cfg_hash, experiment, out_dir, log):
        self.manifest = RunManifest(cfg_hash, __version__, experiment)
        self.out = Path(out_dir)
        self.log = log
        self._t = time.perf_counter()

    def stage(self, name, t0):
        self.manifest.timings[name] = round(time.perf_counter() - t0, 3)

    def warn(self, msg):
        self.manifest.warnings.append(msg)
        self.log(f"warning: {msg}")

    def table(self, name, header, rows):
        path = write_atomic(self.out / f"{name}.csv",
                            csv_text(header, rows, self.manifest.config_hash))
        self.manifest.files.append(path.name)
        return path

    def blob(self, name, data):
        path = write_atomic(self.out / name, data)
        self.manifest.files.append(path.name)

    def finish(self):
        self.manifest.wall_time = round(time.perf_counter() - self._t, 3)
        write_atomic(self.out / "manifest.json", self.manifest.to_json() + "\n")
        return self.manifest


# ---------------------------------------------------------------------------
# config -> library objects

def build_drift(cfg: ExperimentConfig, delta=None, n=None, mollified=True):
    dr = cfg.drift
    d = dr["d"]
    kind = dr["kind"]
    if kind == "inverse-square":
        b = make_inverse_square(d, dr["delta"] if delta is None else delta)
        return mollify(b, dr["n"] if n is None else n) if mollified else b
    if kind == "bounded-smooth":
        return make_bounded_smooth(d, dr["amp"], dr["const"])
    if kind == "zero":
        return make_zero(d)
    return make_constant(d, dr["const"])


def build_grid(cfg, level=0):
    g = cfg.grid
    f = 2 ** level
    return Grid(cfg.drift["d"], g["L"], g["h"] / f, g["tau"] / f, g["T"])


def _deltas(cfg):
    return cfg.drift["deltas"] or (cfg.drift["delta"],)


def _ensemble(cfg, b, jobs, stop=None):
    mc = cfg.mc
    return simulate(b, mc["x0"], mc["dt"], mc["T"], mc["M"], mc["seed"], stop_radius=stop, jobs=jobs)


def _check_ensemble(run, ens):
    if ens.nonfinite:
        run.warn(f"{ens.drift_id}: {ens.nonfinite} non-finite paths excluded")
    if ens.cap_fraction >= CAP_LIMIT:
        run.warn(f"{ens.drift_id}: displacement cap fired on {ens.cap_fraction:.2e} of steps")


# ---------------------------------------------------------------------------
# experiments

def _certify(cfg, run, jobs, explain):
    rows = []
    for delta in _deltas(cfg):
        b = build_drift(cfg, delta=delta, mollified=False)
        cert = certify_form_bound(b, method=cfg.analysis["method"])
        rows.append(cert.csv_row(b))
        run.log(f"{b.id}: delta_hat = {cert.delta:.6g}")
    run.table("certificates", CERT_CSV_HEADER, rows)


def _solve(cfg, run, jobs, explain):
    b = build_drift(cfg)
    amp, sigma = 1.0, 0.4
    src = SourceSpec(None, gaussian_source(amp, sigma))
    rows = []
    for lvl in range(cfg.grid["refinements"]):
        grid = build_grid(cfg, lvl)
        t0 = time.perf_counter()
        sol = solve_cauchy(b, src, grid)
        run.stage(f"solve_level{lvl}", t0)
        for w in sol.warnings:
            run.warn(f"level {lvl}: {w}")
        err = ""
        if b.kind == "bounded_smooth" and b.params["amp"] == 0:
            c = b.const if b.has_const else None
            err = relative_error_in_ball(sol, lambda t, x: duhamel_gaussian(t, x, amp, sigma, c))
        rows.append([lvl, grid.h, grid.tau, float(np.max(sol.values)), err])
        last = lvl
    run.table("solve_levels", ["level", "h", "tau", "max_u", "rel_error_oracle"], rows)
    final = GridSolution(sol.grid, sol.values[-1:], times=sol.times[-1:])
    write_atomic(run.out / "solution_final.csv", final.to_csv())
    run.manifest.files.append("solution_final.csv")
    run.blob(f"solution_level{last}.kgsol", sol.to_bytes())


def _energy(cfg, run, jobs, explain):
    b = build_drift(cfg)
    src = bump_source()
    p = cfg.analysis["p"]
    T = cfg.grid["T"]
    window = (T / 2, T)
    rows, res_rows, prev = [], [], None
    for lvl in range(cfg.grid["refinements"]):
        grid = build_grid(cfg, lvl)
        sol = solve_cauchy(b, src, grid)
        umax = float(np.max(sol.values))
        res = energy_identity_residual(sol, b, src, p, window)
        factor = prev / res.residual if prev else ""
        prev = res.residual
        res_rows.append([lvl, grid.h, grid.tau, res.residual, res.scale, factor])
        for frac in cfg.analysis["c_levels"]:
            rep = energy_report(sol, b, src, p, window, c=frac * umax)
            rows.append([lvl, grid.h, grid.tau] + rep.csv_row())
            if not rep.satisfied:
                run.warn(f"energy inequality fails at level {lvl}, c={frac}*max u")
            if explain:
                run.log(rep.explain())
        if isinstance(factor, float) and factor < 1.5:
            run.warn(f"identity residual reduced by only {factor:.3f} at level {lvl}")
    run.table("energy", ["level", "h", "tau"] + ENERGY_CSV_HEADER, rows)
    run.table("identity_residual", ["level", "h", "tau", "residual", "scale", "factor"], res_rows)


def _supbound(cfg, run, jobs, explain):
    src = bump_source()
    p = cfg.analysis["p"]
    levels = cfg.drift["levels"] or (cfg.drift["n"],)
    rows, Ks = [], []
    grid = build_grid(cfg)
    for delta in _deltas(cfg):
        for n in levels:
            b = build_drift(cfg, delta=delta, n=n)
            sol = solve_cauchy(b, src, grid)
            rep = sup_bound_check(sol, src, p, cfg.analysis["theta"], mode=cfg.analysis["mode"],
                                  delta=delta)
            rows.append([delta, n] + rep.csv_row())
            Ks.append(rep.ratio_constant)
    run.table("supbound", ["delta", "n"] + SUPBOUND_CSV_HEADER, rows)
    if len(Ks) > 1 and scan_ratio(Ks) > 5.0:
        run.warn(f"implied constants vary by a factor {scan_ratio(Ks):.3f} across the scan")


def _dgiter(cfg, run, jobs, explain):
    an = cfg.analysis
    seq = dg_iterate(an["N"], an["C0"], an["alpha"], an["y0"], an["max_m"],
                     exact=an["exact"] == "true")
    run.table("dg_sequence", ["m", "y"], seq.csv_rows())
    run.log(f"converged={str(seq.converged).lower()} diverged={str(seq.diverged).lower()} "
            f"threshold={seq.threshold:.6g} exceeds_one_index={seq.exceeds_one_index}")


def _hitting(cfg, run, jobs, explain):
    eps = cfg.mc["epsilon"]
    rows, ps = [], []
    for delta in _deltas(cfg):
        b = build_drift(cfg, delta=delta)
        ens = _ensemble(cfg, b, jobs, stop=eps)
        _check_ensemble(run, ens)
        st = hitting_probability(ens, eps)
        rows.append(st.csv_row(delta))
        ps.append(st.p_hat)
        run.log(f"delta={delta:g}: p_hat={st.p_hat:.5f} +- {st.ci95:.5f}")
    run.table("hitting", HITTING_CSV_HEADER, rows)
    if any(a > b for a, b in zip(ps, ps[1:])):
        run.warn("hitting probabilities are not monotone in delta")


def _martingale(cfg, run, jobs, explain):
    an = cfg.analysis
    rows = []
    for n in cfg.drift["levels"] or (cfg.drift["n"],):
        b = build_drift(cfg, n=n)
        ens = _ensemble(cfg, b, jobs)
        _check_ensemble(run, ens)
        md = martingale_defect(ens, an["phi"], t0=an["t0"], t1=an["t1"], G=an["G"])
        rows.append(md.csv_row(n if cfg.drift["kind"] == "inverse-square" else ""))
        if md.z_score > 3:
            run.warn(f"{b.id}: defect {md.defect:.3g} exceeds 3 standard errors")
    run.table("defects", DEFECT_CSV_HEADER, rows)


def _krylov(cfg, run, jobs, explain):
    an = cfg.analysis
    b = build_drift(cfg)
    ens = _ensemble(cfg, b, jobs)
    _check_ensemble(run, ens)
    delta = cfg.drift["delta"] if cfg.drift["kind"] == "inverse-square" else None
    pairs = [krylov_statistic(ens, b, an["f"], an["p"], an["theta"], a, c, delta=delta)
             for a, c in an["windows"]]
    run.table("krylov", KRYLOV_CSV_HEADER, [kp.csv_row() for kp in pairs])
    Cs = [kp.fitted_C for kp in pairs if not kp.degenerate]
    if Cs and max(Cs) / min(Cs) > 2.0:
        run.warn(f"fitted_C varies by {max(Cs) / min(Cs):.3f} across windows")


def _scaling(cfg, run, jobs, explain):
    b = build_drift(cfg)
    ens = _ensemble(cfg, b, jobs)
    _check_ensemble(run, ens)
    fit = drift_integral_scaling(ens, b, list(cfg.analysis["windows"]))
    rows = [[L, v] for L, v in zip(fit.lengths, fit.values)]
    run.table("scaling", ["length", "mean_integral"], rows)
    run.log(f"mu_hat={fit.mu:.4f} R^2={fit.r2:.4f}")
    if not (fit.mu > 0.1 and fit.r2 >= 0.9):
        run.warn(f"scaling fit mu={fit.mu:.3f}, R^2={fit.r2:.3f}")


HANDLERS = {"certify": _certify, "solve": _solve, "energy": _energy, "supbound": _supbound,
            "dgiter": _dgiter, "hitting-scan": _hitting, "martingale": _martingale,
            "krylov": _krylov, "scaling": _scaling}


def run(cfg: ExperimentConfig, out_dir=None, jobs=None, explain=False, log=print):
    """Execute one experiment; returns its :class:`RunManifest` (also written to disk)."""
    r = _Run(cfg.hash, cfg.experiment, out_dir or cfg.output, log)
    t0 = time.perf_counter()
    try:
        HANDLERS[cfg.experiment](cfg, r, jobs, explain)
    except Exception as exc:
        raise type(exc)(f"[{cfg.experiment}] {exc}") from exc
    r.stage(cfg.experiment, t0)
    return r.finish()


def suite_hash(scale, criteria):
    blob = json.dumps({"suite": scale, "criteria": sorted(criteria)}, sort_keys=True)
    import hashlib
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_suite(out_dir, scale="quick", criteria=None, jobs=None, log=print):
    """Run the acceptance checks; one CSV per produced table plus criteria.csv."""
    criteria = sorted(criteria or CHECKS)
    r = _Run(suite_hash(scale, criteria), "suite", out_dir, log)
    rows, results = [], []
    for num in criteria:
        res = run_check(num, scale, jobs=jobs)
        results.append(res)
        r.manifest.timings[f"criterion_{num}"] = round(res.seconds, 3)
        log(res.line())
        for name, tab in res.tables.items():
            r.table(f"c{num}_{name}", tab.header, tab.rows)
        rows.append([num, res.name, int(res.passed), res.summary])
        if not res.passed:
            r.warn(f"criterion {num} failed: {res.summary}")
    r.table("criteria", ["criterion", "name", "passed", "summary"], rows)
    return r.finish(), results
