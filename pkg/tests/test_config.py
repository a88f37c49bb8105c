import pytest

from singular_sde_lab.config import ConfigError, parse_config

MINIMAL_HITTING = """\
[experiment]
name = hitting-scan

[drift]
kind = inverse-square
d = 3
delta = 9
[mc]
M = 100000
"""


def _messages(text, overrides=None):
    with pytest.raises(ConfigError) as info:
        parse_config(text, overrides)
    return info.value.issues


def test_minimal_hitting_scan_is_valid():
    cfg = parse_config(MINIMAL_HITTING)
    assert cfg.experiment == "hitting-scan"
    assert cfg.drift["delta"] == 9.0 and cfg.mc["M"] == 100000
    # experiment defaults: the hitting scan runs on a fine mollification
    assert cfg.drift["n"] == 256
    assert cfg.lines["drift", "delta"] == 7


def test_exponent_below_the_gate_names_both_keys():
    issues = _messages("[experiment]\nname = energy\n[drift]\ndelta = 1\n[analysis]\np = 1.5\n")
    assert len(issues) == 1
    msg = str(issues[0])
    assert "analysis.p" in msg and "drift.delta" in msg
    assert "line 6" in msg and "line 4" in msg


def test_duplicate_key_reports_both_lines():
    issues = _messages("[experiment]\nname = dgiter\n[analysis]\nN = 1\n# comment\nN = 2\n")
    assert "lines 4 and 6" in str(issues[0])


def test_all_problems_are_collected():
    text = "[experiment]\nname = krylov\nbogus = 1\n[mc]\nM = many\ndt = 0.3\n[warp]\nx = 1\n"
    lines = sorted(i.line for i in _messages(text))
    assert lines == [3, 5, 6, 7]


@pytest.mark.parametrize("text, fragment", [
    ("[experiment]\nname = supbound\n[analysis]\ntheta = 2\n", "theta"),
    ("[experiment]\nname = solve\n[grid]\nh = 0.3\n", "2L/h"),
    ("[experiment]\nname = solve\n[grid]\ntau = 0.03\n", "T/tau"),
    ("[experiment]\nname = martingale\n[mc]\nx0 = 0.5, 0\n", "x0"),
    ("[experiment]\nname = martingale\n[analysis]\nt0 = 0.5\nt1 = 0.25\n", "t0"),
    ("[experiment]\nname = scaling\n[analysis]\nwindows = 0:0.5, 0.5:2\n", "window"),
    ("[experiment]\nname = dgiter\n[analysis]\nC0 = 0.5\n", "C0"),
    ("[experiment]\nname = energy\n[drift]\ndelta = 4\n", "below 4"),
    ("[experiment]\nname = solve\n[drift]\nkind = constant\n", "drift.const"),
    ("[drift]\nd = 3\n", "experiment.name"),
    ("[experiment]\nname = solve\nkey without value\n", "key = value"),
    ("d = 3\n", "outside any section"),
])
def test_cross_field_and_syntax_errors(text, fragment):
    assert any(fragment in str(i) for i in _messages(text))


def test_overrides_win_and_are_tagged():
    cfg = parse_config(MINIMAL_HITTING, {"mc.M": "10", "drift.deltas": "1,4"})
    assert cfg.mc["M"] == 10 and cfg.drift["deltas"] == (1.0, 4.0)
    assert cfg.lines["mc", "M"] == "<cli>"
    issues = _messages(MINIMAL_HITTING, {"mc.N": "1"})
    assert issues[0].line == "<cli>"


def test_hash_depends_on_settings_only():
    a = parse_config(MINIMAL_HITTING)
    b = parse_config("# leading comment\n" + MINIMAL_HITTING + "[experiment]\n".replace("[experiment]\n", ""))
    c = parse_config(MINIMAL_HITTING, {"experiment.output": "elsewhere"})
    d = parse_config(MINIMAL_HITTING, {"mc.seed": "1"})
    assert a.hash == b.hash == c.hash != d.hash
    assert len(a.hash) == 16


def test_windows_and_keywords():
    cfg = parse_config("[experiment]\nname = dgiter\n[analysis]\nwindows = 0:0.1, 0.1:0.3\ny0 = threshold\n")
    assert cfg.analysis["windows"] == ((0.0, 0.1), (0.1, 0.3))
    assert cfg.analysis["y0"] == "threshold"
