"""INI-style experiment configuration with line-numbered, collect-all validation.

A config is a set of ``[section]`` blocks holding ``key = value`` lines;
``#`` starts a comment.  :func:`parse_config` never stops at the first
problem: every unknown key, type mismatch, duplicate and cross-field
violation is reported with its line number.  Command-line overrides are
applied as extra lines tagged ``<cli>``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .drift_catalog import p_critical

EXPERIMENTS = ("certify", "solve", "energy", "supbound", "dgiter", "hitting-scan",
               "martingale", "krylov", "scaling")
DRIFT_KINDS = ("inverse-square", "bounded-smooth", "zero", "constant")


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _windows(text):
    out = []
    for item in text.split(","):
        a, sep, b = item.partition(":")
        if not sep:
            raise ValueError(f"window {item.strip()!r} is not of the form t0:t1")
        out.append((float(a), float(b)))
    return tuple(out)


def _y0(text):
    return "threshold" if text.strip() == "threshold" else float(text)


def _enum(*choices):
    def conv(text):
        if text not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}")
        return text
    conv.__name__ = "one of " + "|".join(choices)
    return conv


# section -> key -> (converter, default)
SCHEMA = {
    "experiment": {
        "name": (_enum(*EXPERIMENTS), None),
        "output": (str, "out"),
    },
    "drift": {
        "kind": (_enum(*DRIFT_KINDS), "inverse-square"),
        "d": (int, 3),
        "delta": (float, 1.0),
        "deltas": (_float_list, None),
        "n": (int, 8),
        "levels": (_int_list, None),
        "amp": (float, 1.0),
        "const": (_float_list, None),
    },
    "grid": {
        "L": (float, 2.0),
        "h": (float, 0.1),
        "tau": (float, 0.005),
        "T": (float, 0.2),
        "refinements": (int, 3),
    },
    "mc": {
        "M": (int, 10000),
        "dt": (float, 1e-4),
        "T": (float, 1.0),
        "seed": (int, 2024),
        "x0": (_float_list, (0.5, 0.0, 0.0)),
        "epsilon": (float, 0.05),
    },
    "analysis": {
        "p": (float, 2.5),
        "theta": (float, None),
        "kappa": (float, 0.01),
        "beta": (float, None),
        "windows": (_windows, ((0.0, 0.25), (0.0, 0.5), (0.25, 0.75))),
        "c_levels": (_float_list, (0.0, 0.25, 0.5)),
        "t0": (float, 0.25),
        "t1": (float, 0.5),
        "phi": (_enum("bump", "bump2"), "bump"),
        "G": (_enum("one", "phi_t0", "avg_x1"), "one"),
        "f": (_enum("one", "grad_phi"), "one"),
        "mode": (_enum("local_ball", "weighted_global"), "local_ball"),
        "method": (_enum("rayleigh", "analytic", "auto"), "rayleigh"),
        "N": (float, 1.0),
        "C0": (float, 2.0),
        "alpha": (float, 1.0),
        "y0": (_y0, "threshold"),
        "max_m": (int, 200),
        "exact": (_enum("true", "false"), "false"),
    },
}

# per-experiment defaults that replace the schema defaults above
EXPERIMENT_DEFAULTS = {
    "solve": {("drift", "kind"): "zero", ("grid", "h"): 0.2, ("grid", "tau"): 0.01,
              ("grid", "T"): 0.1},
    "energy": {("grid", "h"): 0.2, ("grid", "tau"): 0.01},
    "supbound": {("grid", "refinements"): 1},
    "hitting-scan": {("drift", "n"): 256, ("mc", "M"): 100000},
    "martingale": {("mc", "T"): 0.5, ("mc", "M"): 100000},
    "krylov": {("mc", "M"): 20000},
    "scaling": {("mc", "M"): 20000,
                ("analysis", "windows"): ((0.0, 0.05), (0.0, 0.1), (0.0, 0.2), (0.0, 0.4),
                                          (0.0, 0.8))},
}

# analyses whose exponent must clear the gate p > max(p_delta, 2)
_NEEDS_P = ("energy", "supbound", "krylov")
_NEEDS_THETA = ("supbound", "krylov")


@dataclass(frozen=True)
class ConfigIssue:
    line: object  # int, or "<cli>" for overrides
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


class ConfigError(ValueError):
    """All problems found in a config, in line order."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("\n".join(str(i) for i in self.issues))


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    drift: dict
    grid: dict
    mc: dict
    analysis: dict
    output: str
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def section(self, name):
        return getattr(self, name)

    def as_dict(self):
        return {"experiment": self.experiment, "drift": self.drift, "grid": self.grid,
                "mc": self.mc, "analysis": self.analysis}

    @property
    def hash(self):
        """Short content hash of the resolved settings (output path excluded)."""
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _tokenize(text, issues):
    """Yield (line, section, key, raw value) for every assignment."""
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                issues.append(ConfigIssue(no, f"malformed section header {line!r}"))
                section = None
                continue
            section = line[1:-1].strip()
            if section not in SCHEMA:
                issues.append(ConfigIssue(no, f"unknown section [{section}]"))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            issues.append(ConfigIssue(no, f"expected 'key = value', got {line!r}"))
            continue
        if section is None:
            issues.append(ConfigIssue(no, f"key {key.strip()!r} outside any section"))
            continue
        yield no, section, key.strip(), value.strip()


def parse_config(text, overrides=None):
    """Parse and validate; returns an :class:`ExperimentConfig` or raises :class:`ConfigError`.

    ``overrides`` maps ``"section.key"`` to a string value and wins over the file.
    """
    issues = []
    raw = {}
    where = {}
    for no, sec, key, value in _tokenize(text, issues):
        if sec not in SCHEMA:
            continue
        if key not in SCHEMA[sec]:
            issues.append(ConfigIssue(no, f"unknown key {key!r} in [{sec}]"))
            continue
        if (sec, key) in where:
            issues.append(ConfigIssue(no, f"duplicate key {sec}.{key} (lines {where[sec, key]} and {no})"))
            continue
        raw[sec, key] = value
        where[sec, key] = no
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            issues.append(ConfigIssue("<cli>", f"unknown key {dotted!r}"))
            continue
        raw[sec, key] = str(value)
        where[sec, key] = "<cli>"

    values = {sec: {} for sec in SCHEMA}
    exp_defaults = EXPERIMENT_DEFAULTS.get(raw.get(("experiment", "name")), {})
    for sec, keys in SCHEMA.items():
        for key, (conv, default) in keys.items():
            default = exp_defaults.get((sec, key), default)
            if (sec, key) not in raw:
                values[sec][key] = default
                continue
            try:
                values[sec][key] = conv(raw[sec, key])
            except ValueError as exc:
                issues.append(ConfigIssue(where[sec, key],
                                          f"{sec}.{key}: cannot read {raw[sec, key]!r} ({exc})"))
                values[sec][key] = default

    issues.extend(_cross_checks(values, where))
    if issues:
        issues.sort(key=lambda i: (isinstance(i.line, str), i.line if isinstance(i.line, int) else 0))
        raise ConfigError(issues)
    return ExperimentConfig(values["experiment"]["name"], values["drift"], values["grid"],
                            values["mc"], values["analysis"], values["experiment"]["output"],
                            dict(where))


def _cross_checks(v, where):
    out = []

    def at(*keys):
        lines = [where.get(k) for k in keys if where.get(k) is not None]
        return lines[0] if lines else 0

    def names(*keys):
        return " and ".join(
            f"{s}.{k} (line {where[s, k]})" if (s, k) in where else f"{s}.{k} (default)"
            for s, k in keys)

    exp = v["experiment"]["name"]
    if exp is None:
        out.append(ConfigIssue(0, "experiment.name is required"))
    dr, gr, mc, an = v["drift"], v["grid"], v["mc"], v["analysis"]
    d = dr["d"]
    if d is not None and d < 3:
        out.append(ConfigIssue(at(("drift", "d")), f"drift.d must be at least 3, got {d}"))
    deltas = dr["deltas"] or (dr["delta"],)
    if any(x is None or x <= 0 for x in deltas):
        out.append(ConfigIssue(at(("drift", "deltas"), ("drift", "delta")),
                               "form-bound values must be positive"))
    if dr["n"] is not None and dr["n"] < 1:
        out.append(ConfigIssue(at(("drift", "n")), "drift.n must be a positive integer"))
    if dr["kind"] == "constant" and (dr["const"] is None or len(dr["const"]) != d):
        out.append(ConfigIssue(at(("drift", "const"), ("drift", "kind")),
                               f"drift.const needs {d} components for kind=constant"))

    if exp in _NEEDS_P and all(x is not None and x > 0 for x in deltas):
        dmax = max(deltas)
        need = max(p_critical(dmax), 2.0) if dmax < 4 else None
        if need is None:
            out.append(ConfigIssue(at(("drift", "delta"), ("drift", "deltas")),
                                   f"{exp} needs every delta below 4, got {dmax}"))
        elif not an["p"] > need:
            out.append(ConfigIssue(
                at(("analysis", "p"), ("drift", "delta"), ("drift", "deltas")),
                f"{names(('analysis', 'p'), ('drift', 'deltas' if dr['deltas'] else 'delta'))}: "
                f"p = {an['p']} must exceed max(p_delta, 2) = {need:.6g} for delta = {dmax}"))
    if exp in _NEEDS_THETA and an["theta"] is not None and d is not None and d >= 3:
        if not 1.0 < an["theta"] < d / (d - 1.0):
            out.append(ConfigIssue(at(("analysis", "theta")),
                                   f"analysis.theta must lie in (1, {d / (d - 1.0):.6g})"))

    if gr["h"] <= 0 or gr["tau"] <= 0 or gr["T"] <= 0:
        out.append(ConfigIssue(at(("grid", "h"), ("grid", "tau"), ("grid", "T")),
                               "grid.h, grid.tau and grid.T must be positive"))
    else:
        if abs(2 * gr["L"] / gr["h"] - round(2 * gr["L"] / gr["h"])) > 1e-9:
            out.append(ConfigIssue(at(("grid", "L"), ("grid", "h")),
                                   f"{names(('grid', 'L'), ('grid', 'h'))}: 2L/h must be an integer"))
        if abs(gr["T"] / gr["tau"] - round(gr["T"] / gr["tau"])) > 1e-9:
            out.append(ConfigIssue(at(("grid", "T"), ("grid", "tau")),
                                   f"{names(('grid', 'T'), ('grid', 'tau'))}: T/tau must be an integer"))

    if mc["M"] < 1:
        out.append(ConfigIssue(at(("mc", "M")), "mc.M must be positive"))
    if mc["dt"] <= 0 or mc["T"] <= 0:
        out.append(ConfigIssue(at(("mc", "dt"), ("mc", "T")), "mc.dt and mc.T must be positive"))
    elif abs(mc["T"] / mc["dt"] - round(mc["T"] / mc["dt"])) > 1e-6:
        out.append(ConfigIssue(at(("mc", "T"), ("mc", "dt")),
                               f"{names(('mc', 'T'), ('mc', 'dt'))}: T/dt must be an integer"))
    if d is not None and len(mc["x0"]) != d:
        out.append(ConfigIssue(at(("mc", "x0"), ("drift", "d")),
                               f"{names(('mc', 'x0'), ('drift', 'd'))}: x0 has {len(mc['x0'])} "
                               f"components, d = {d}"))
    if exp in ("martingale", "krylov") and not 0 <= an["t0"] < an["t1"] <= mc["T"]:
        out.append(ConfigIssue(at(("analysis", "t0"), ("analysis", "t1")),
                               "need 0 <= analysis.t0 < analysis.t1 <= mc.T"))
    if exp in ("krylov", "scaling"):
        for a, b in an["windows"]:
            if not 0 <= a < b <= mc["T"]:
                out.append(ConfigIssue(at(("analysis", "windows")),
                                       f"window {a}:{b} must satisfy 0 <= t0 < t1 <= mc.T"))
    if exp == "dgiter":
        if an["N"] <= 0 or an["C0"] <= 1 or an["alpha"] <= 0:
            out.append(ConfigIssue(at(("analysis", "N"), ("analysis", "C0"), ("analysis", "alpha")),
                                   "dgiter needs N > 0, C0 > 1, alpha > 0"))
    return out
