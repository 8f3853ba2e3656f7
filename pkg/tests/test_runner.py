import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkrflow import cli
from mkrflow.config import ConfigError, load_config, preset_config
from mkrflow.diagnostics import read_csv
from mkrflow.expr import ExpressionError, evaluate
from mkrflow.snapshot import SnapshotError, read_snapshot, write_snapshot
from mkrflow.torus import TorusGrid

TWO_PI = 2 * math.pi


# -- expressions ---------------------------------------------------------------


def test_expression_matches_numpy():
    g = TorusGrid(2, 8, (1.0, 2.0, 1.0, 0.5))
    x1, y1, x2, y2 = g.coords()
    got = evaluate("0.3*sin(x1) + 0.2*cos(y2 - 2*x2) - 1/4 + cos(y1)*0.1", g)
    want = 0.3 * np.sin(TWO_PI * x1) + 0.2 * np.cos(TWO_PI * (y2 / 0.5 - 2 * x2)) - 0.25 + 0.1 * np.cos(TWO_PI * y1 / 2)
    assert got.shape == g.shape and np.max(np.abs(got - want)) < 1e-14


@pytest.mark.parametrize(
    "text",
    ["x1", "sin(x1)*cos(y1)", "sin(0.5*x1)", "exp(x1)", "sin(x3)", "__import__('os')", "a.b", "2**3", "sin(x1", "1/0"],
)
def test_expression_rejects(text):
    with pytest.raises(ExpressionError):
        evaluate(text, TorusGrid(2, 8))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.integers(-3, 3), st.integers(-3, 3))
def test_expression_is_periodic_trig(c, a, b):
    g = TorusGrid(1, 8)
    x, y = g.coords()
    got = evaluate(f"{c!r}*cos({a}*x1 + {b}*y1)", g)
    assert np.max(np.abs(got - c * np.cos(TWO_PI * (a * x + b * y)))) < 1e-12


# -- snapshots -----------------------------------------------------------------


def test_snapshot_round_trip_bit_exact(tmp_path):
    g = TorusGrid(2, 8, (1.0, 2.0, 3.0, 4.0))
    u = np.random.default_rng(0).standard_normal(g.shape)
    u.flat[3] = -0.0
    path = tmp_path / "s.bin"
    write_snapshot(path, g, 1.25, u, "canonical")
    snap = read_snapshot(path)
    assert snap.grid == g and snap.t == 1.25 and snap.flow_kind == "canonical"
    assert snap.u.tobytes() == u.tobytes()
    raw = path.read_bytes()
    assert raw[:5] == b"MKRF1"
    assert struct.unpack_from("<III", raw, 5) == (1, 2, 8)
    assert len(raw) == 5 + 12 + 32 + 9 + 8 * g.size


def test_snapshot_errors(tmp_path):
    g = TorusGrid(1, 8)
    path = tmp_path / "s.bin"
    with pytest.raises(SnapshotError):
        write_snapshot(path, g, 0.0, np.zeros((4, 4)))
    write_snapshot(path, g, 0.0, np.zeros(g.shape))
    data = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXXX" + data[5:])
    with pytest.raises(SnapshotError):
        read_snapshot(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(data[:-8])
    with pytest.raises(SnapshotError):
        read_snapshot(tmp_path / "short.bin")


# -- configuration ---------------------------------------------------------------


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_presets_validate():
    for name in ("fixed_point", "kahler_limit", "ricci_flat", "finite_time", "canonical_flow", "custom"):
        cfg = preset_config(name)
        assert cfg.scenario == name
    bg = preset_config("kahler_limit").background()
    assert abs(bg.grid.integrate(bg.h) - 1.0) < 1e-14


@pytest.mark.parametrize(
    "text",
    [
        "[run]\nscenario = nope\n",
        "[run]\nscenario = custom\nbogus = 1\n",
        "[nosection]\na = 1\n",
        "[background]\nomega0_real = 1 2 3 4\n",
        "[background]\nomega0_real = 1 0 0\n",
        "[background]\nlog_h = exp(x1)\n",
        "[step]\ndt = fast\n",
        "[step]\nsafety = 2\n",
        "[run]\nscenario = finite_time\n[background]\nomega_inf_real = 1\n",
        "[run]\nscenario = kahler_limit\n[background]\nomega_inf_real = 1 0 0 -1\n",
        "[run]\npoints_per_axis = 12\n",
        "not an ini file",
    ],
)
def test_config_errors(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_config_overrides_preset(tmp_path):
    cfg = load_config(write(tmp_path, "[run]\nscenario = kahler_limit\ncadence = 0.5\n[step]\nt_max = 2\n"))
    assert cfg.cadence == 0.5 and cfg.policy.t_max == 2.0 and cfg.policy.safety == 1.0


# -- command line ------------------------------------------------------------------


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    pairs = dict(line.split("=", 1) for line in out.strip().splitlines() if "=" in line)
    return code, pairs


def test_cli_singular_time(tmp_path, capsys):
    code, pairs = run_cli(capsys, "singular-time", "--config", write(tmp_path, "[run]\nscenario = finite_time\n"))
    assert code == 0 and abs(float(pairs["T"]) - math.log(3)) < 1e-12
    assert pairs["n1_smoke_test"] == "True"
    code, pairs = run_cli(capsys, "singular-time", "--config", write(tmp_path, "[run]\nscenario = kahler_limit\n"))
    assert pairs["T"] == "inf"


def test_cli_fixed_point_run_and_diag(tmp_path, capsys):
    cfg = write(tmp_path, "[run]\nscenario = fixed_point\n")
    out = tmp_path / "out"
    code, pairs = run_cli(capsys, "run", "--config", cfg, "--out", str(out))
    assert code == 0 and pairs["halt_reason"] == "converged"
    assert float(pairs["sup_abs_u"]) <= 1e-10
    for name in ("manifest.json", "diagnostics.csv", "summary.json", "state.bin"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["format_version"] == 1 and manifest["scenario"] == "fixed_point"
    code, pairs = run_cli(capsys, "diag", str(out / "state.bin"), "--config", cfg)
    assert code == 0 and float(pairs["E"]) == 0 and float(pairs["osc"]) == 0


def test_cli_solve_limit_manufactured(tmp_path, capsys):
    cfg = write(
        tmp_path,
        "[run]\nscenario = custom\nn_complex = 1\npoints_per_axis = 32\n"
        "[background]\nomega_inf_real = 1\nlog_h = 0.2*cos(x1) + 0.1*sin(x1 + y1)\nnormalize_h = true\n",
    )
    code, pairs = run_cli(capsys, "solve-limit", "--config", cfg, "--out", str(tmp_path / "lim"))
    assert code == 0 and float(pairs["residual"]) <= 1e-10
    assert read_snapshot(pairs["output"]).u.shape == (32, 32)


def test_cli_oracle_failure_is_reported_not_fatal(tmp_path, capsys):
    # On 8 points per axis the data leaves a residual floor in the Nyquist
    # modes; the flow run itself is fine and must still succeed.
    cfg = write(tmp_path, "[run]\nscenario = kahler_limit\npoints_per_axis = 8\n[step]\nt_max = 0.1\n")
    code, pairs = run_cli(capsys, "run", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 0 and "Nyquist" in pairs["oracle_error"]


def test_cli_config_error_exit_code(tmp_path, capsys):
    code = cli.main(["run", "--config", write(tmp_path, "[step]\ndt = -1\n"), "--out", str(tmp_path / "o")])
    assert code == 2
    code = cli.main(["run", "--config", str(tmp_path / "missing.ini")])
    assert code == 2


def test_cli_flow_error_exit_code_keeps_artifacts(tmp_path, capsys):
    cfg = write(
        tmp_path,
        "[run]\nscenario = custom\nn_complex = 1\npoints_per_axis = 16\ncadence = 0.25\n"
        "[background]\nomega0_real = 1\nomega_inf_real = 1\nlog_h = 2*sin(x1)\n"
        "[step]\nmode = fixed\ndt = 0.5\nt_max = 2\n",
    )
    out = tmp_path / "o"
    code, pairs = run_cli(capsys, "run", "--config", cfg, "--out", str(out))
    assert code == 3 and pairs["halt_reason"] == "error"
    assert (out / "diagnostics.csv").exists() and (out / "summary.json").exists()
    assert len(read_csv(out / "diagnostics.csv")) >= 1


SMALL = (
    "[run]\nscenario = ricci_flat\npoints_per_axis = 8\ncadence = 0.05\nsnapshot_every = 0.1\n"
    "[step]\nmode = fixed\ndt = 0.005\nt_max = {t}\n"
)


def test_cli_resume_matches_single_run(tmp_path, capsys):
    single = tmp_path / "single"
    code, _ = run_cli(capsys, "run", "--config", write(tmp_path, SMALL.format(t=0.2), "a.ini"), "--out", str(single))
    assert code == 0
    part = tmp_path / "part"
    code, _ = run_cli(capsys, "run", "--config", write(tmp_path, SMALL.format(t=0.1), "b.ini"), "--out", str(part))
    code, _ = run_cli(
        capsys, "run", "--config", write(tmp_path, SMALL.format(t=0.2), "c.ini"), "--out", str(part),
        "--resume", str(part / "state.bin"),
    )
    assert code == 0
    a = np.loadtxt(single / "diagnostics.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(part / "diagnostics.csv", delimiter=",", skiprows=1)
    assert a.shape == b.shape == (5, 12)
    assert np.allclose(a, b, rtol=0.0, atol=1e-12, equal_nan=True)
    assert read_snapshot(single / "state.bin").u.tobytes() == read_snapshot(part / "state.bin").u.tobytes()
    assert sorted(p.name for p in (single / "snapshots").iterdir()) == [
        "snap_t00000.000000.bin", "snap_t00000.100000.bin", "snap_t00000.200000.bin"
    ]


def test_cli_run_is_deterministic(tmp_path, capsys):
    cfg = write(tmp_path, SMALL.format(t=0.1))
    run_cli(capsys, "run", "--config", cfg, "--out", str(tmp_path / "r1"))
    run_cli(capsys, "run", "--config", cfg, "--out", str(tmp_path / "r2"))
    assert (tmp_path / "r1" / "diagnostics.csv").read_bytes() == (tmp_path / "r2" / "diagnostics.csv").read_bytes()
    assert (tmp_path / "r1" / "state.bin").read_bytes() == (tmp_path / "r2" / "state.bin").read_bytes()
