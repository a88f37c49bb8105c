import csv
import json
import os

import pytest

from singular_sde_lab import __version__
from singular_sde_lab.cli import FLAGS, main, parse_drift_spec
from singular_sde_lab.runner import csv_body, csv_text, write_atomic


def _read(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.reader(lines[1:]))


def _run(tmp_path, *args):
    out = tmp_path / "out"
    rc = main([*args, "--out", str(out)])
    return rc, out


def test_dgiter_example(tmp_path, capsys):
    rc, out = _run(tmp_path, "dgiter", "--N", "1", "--C0", "2", "--alpha", "1", "--y0", "0.5")
    assert rc == 0
    assert "converged=true" in capsys.readouterr().out
    head, rows = _read(out / "dg_sequence.csv")
    manifest = json.loads((out / "manifest.json").read_text())
    assert head == f"# manifest={manifest['config_hash']} version={__version__}"
    assert rows[0] == ["m", "y"]
    assert [float(r[1]) for r in rows[1:4]] == [0.5, 0.25, 0.125]


def test_certify_example(tmp_path):
    rc, out = _run(tmp_path, "certify", "--drift", "inverse-square:d=3:delta=1")
    assert rc == 0
    _, rows = _read(out / "certificates.csv")
    assert float(rows[1][rows[0].index("delta")]) == pytest.approx(1.0, rel=0.05)


def test_invalid_config_exits_with_status_two(tmp_path, capsys):
    rc, _ = _run(tmp_path, "energy", "--p", "1.5", "--delta", "1")
    assert rc == 2
    err = capsys.readouterr().err
    assert "analysis.p" in err and "drift.delta" in err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[experiment]\nname = dgiter\n[analysis]\nN = 1\nC0 = 2\nalpha = 1\ny0 = 0.9\nmax_m = 5\n")
    rc, out = _run(tmp_path, "dgiter", "--config", str(cfg), "--y0", "0.5", "--set", "analysis.max_m=3")
    assert rc == 0
    _, rows = _read(out / "dg_sequence.csv")
    assert len(rows) == 1 + 4 and float(rows[1][1]) == 0.5


def test_small_hitting_scan(tmp_path):
    rc, out = _run(tmp_path, "hitting-scan", "--deltas", "0.25,9", "--M", "2000", "--n", "16",
                   "--mc-T", "0.2", "--dt", "1e-3", "--epsilon", "0.2")
    _, rows = _read(out / "hitting.csv")
    p = [float(r[rows[0].index("p_hat")]) for r in rows[1:]]
    assert p[0] < p[1] and rc == 0


def test_martingale_runs_are_reproducible(tmp_path):
    args = ["martingale", "--drift", "bounded-smooth:d=3:amp=1", "--M", "500", "--dt", "1e-3"]
    rc1 = main(args + ["--out", str(tmp_path / "a")])
    rc2 = main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"])
    assert rc1 == rc2 == 0
    assert (tmp_path / "a" / "defects.csv").read_bytes() == (tmp_path / "b" / "defects.csv").read_bytes()


def test_energy_explain(tmp_path, capsys):
    rc, out = _run(tmp_path, "energy", "--refinements", "1", "--h", "0.4", "--tau", "0.02",
                   "--n", "4", "--explain")
    text = capsys.readouterr().out
    assert "epsilons" in text and "C1 *" in text
    assert (out / "energy.csv").exists() and (out / "identity_residual.csv").exists()
    assert rc == 0


@pytest.mark.parametrize("args, files", [
    (["solve", "--refinements", "2", "--h", "0.4", "--tau", "0.02"],
     ["solve_levels.csv", "solution_final.csv", "solution_level1.kgsol"]),
    (["supbound", "--h", "0.4", "--tau", "0.02", "--levels", "4,8"], ["supbound.csv"]),
    (["krylov", "--M", "300", "--dt", "1e-3", "--n", "4"], ["krylov.csv"]),
    (["scaling", "--M", "300", "--dt", "1e-3", "--n", "4"], ["scaling.csv"]),
])
def test_other_subcommands_write_their_tables(tmp_path, args, files):
    rc, out = _run(tmp_path, *args)
    assert rc in (0, 1)
    manifest = json.loads((out / "manifest.json").read_text())
    for name in files:
        assert (out / name).exists() and name in manifest["files"]
    assert set(manifest) >= {"config_hash", "version", "wall_time", "timings", "warnings"}


def test_jobs_environment_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SSL_LAB_JOBS", "2")
    rc, out = _run(tmp_path, "dgiter", "--y0", "0.1")
    assert rc == 0


def test_suite_single_criterion(tmp_path, capsys):
    rc, out = _run(tmp_path, "suite", "--criterion", "2")
    assert rc == 0
    assert "[PASS] criterion 2" in capsys.readouterr().out
    _, rows = _read(out / "criteria.csv")
    assert rows[1][:3] == ["2", "iteration lemma", "1"]


def test_flag_table_has_prefixed_duplicates():
    assert FLAGS["grid-T"] == "grid.T" and FLAGS["mc-T"] == "mc.T"
    assert FLAGS["delta"] == "drift.delta"


def test_drift_spec_parsing():
    assert parse_drift_spec("inverse_square:d=3:delta=2") == {
        "drift.kind": "inverse-square", "drift.d": "3", "drift.delta": "2"}


def test_atomic_writes_leave_no_temporaries(tmp_path):
    path = write_atomic(tmp_path / "x" / "t.csv", csv_text(["a", "b"], [[1, 0.1], [True, "s"]], "h"))
    assert os.listdir(tmp_path / "x") == ["t.csv"]
    assert csv_body(path) == "a,b\n1,0.1\n1,s\n"
