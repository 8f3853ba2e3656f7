import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkrflow import diagnostics as dg
from mkrflow.flow import Background, StepPolicy, initial_state, make_state, run
from mkrflow.torus import FormSpec, TorusGrid

TWO_PI = 2 * math.pi


def bg_of(n=2, N=8, c0=2.0, cinf=1.0, log_h=0.0, weight_s=None, rho0=None):
    g = TorusGrid(n, N)
    return Background(g, FormSpec(c0 * np.eye(n), rho0), FormSpec(cinf * np.eye(n)), log_h, weight_s=weight_s)


def smooth_bg(N=8, **kw):
    g = TorusGrid(2, N)
    x1, y1, x2, y2 = g.coords()
    log_h = np.broadcast_to(0.3 * np.sin(TWO_PI * x1) + 0.2 * np.cos(TWO_PI * y2), g.shape)
    return Background(g, FormSpec(2 * np.eye(2)), FormSpec(np.eye(2)), log_h, **kw)


def test_normalized_potential_examples():
    bg = smooth_bg()
    s = make_state(bg, 0.0, np.full(bg.grid.shape, 0.7))
    assert np.max(np.abs(dg.normalized_potential(s, bg))) < 1e-15
    bg1 = bg_of(c0=1.0)
    x1 = bg1.grid.coords()[0]
    u = np.broadcast_to(0.01 * np.sin(TWO_PI * x1), bg1.grid.shape)
    v = dg.normalized_potential(make_state(bg1, 0.0, u), bg1)
    assert np.max(np.abs(v - u)) < 1e-16
    # u already mean-zero against Omega
    u2 = u - dg.omega_mean(u, bg)
    assert np.max(np.abs(dg.normalized_potential(make_state(bg, 0.0, u2), bg) - u2)) < 1e-16


def test_A_examples_and_brute_force():
    bg = bg_of(c0=1.0)
    assert dg.min_quantity_A(initial_state(bg), bg) == 0
    bg = bg_of(c0=2.0)
    res = run(bg, StepPolicy(mode="fixed", dt=0.01, t_max=0.5), cadence=0.5)
    s = res.state
    assert dg.min_quantity_A(s, bg) == pytest.approx(2 * math.log1p(math.exp(-0.5)), abs=1e-12)

    bg = smooth_bg()
    res = run(bg, StepPolicy(t_max=0.1), cadence=0.1)
    s = res.state
    v = dg.normalized_potential(s, bg)
    brute = min(s.rhs.flat[i] + v.flat[i] for i in range(s.u.size))
    assert dg.min_quantity_A(s, bg) == brute


def test_energy_examples_and_identities():
    bg = bg_of(c0=1.0)
    psi, E = dg.energy(initial_state(bg), bg)
    assert E == 0 and np.all(psi == 0)
    bg = bg_of()
    psi, E = dg.energy(initial_state(bg), bg)
    assert E < 1e-28 and np.max(np.abs(psi)) < 1e-14

    bg = smooth_bg()
    s = run(bg, StepPolicy(t_max=0.1), cadence=0.1).state
    psi, E = dg.energy(s, bg)
    vol = np.exp(s.log_det)
    assert abs(bg.grid.integrate(psi, vol)) < 1e-12
    assert E >= 0
    assert abs(E - dg.energy_variance(s, bg)) < 1e-10


def test_fit_exp_rate_examples():
    t = np.linspace(0, 5, 21)
    fit = dg.fit_exp_rate(t, 3.0 * np.exp(-2 * t))
    assert fit.rate == pytest.approx(2.0, abs=1e-12) and fit.r2 == pytest.approx(1.0, abs=1e-12)
    fit = dg.fit_exp_rate(t, np.full(t.shape, 0.5))
    assert fit.rate == pytest.approx(0.0, abs=1e-12)
    fit = dg.fit_exp_rate(t, np.exp(-t), window=(1.0, 4.0))
    assert fit.samples == 13 and fit.rate == pytest.approx(1.0)
    vals = np.exp(-t)
    vals[15:] = 0.0
    fit = dg.fit_exp_rate(t, vals)
    assert fit.floored and fit.samples == 15
    with pytest.raises(ValueError):
        dg.fit_exp_rate(t[:5], np.exp(-t[:5]))


def test_fit_A_inequality_on_exact_solution():
    # A' = -C + A + C e^{-A} with C = 1 solved accurately; the fit must
    # reproduce a non-negative margin (up to differencing error).
    from scipy.integrate import solve_ivp

    sol = solve_ivp(lambda t, a: -1 + a + np.exp(-a), (0, 2), [0.5], dense_output=True, rtol=1e-12, atol=1e-14)
    t = np.linspace(0, 2, 400)
    C, margin = dg.fit_A_inequality(t, sol.sol(t)[0])
    assert C == pytest.approx(1.0, rel=0.05)
    assert margin > -1e-2


def test_weight_config_validation():
    with pytest.raises(ValueError):
        dg.WeightConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        dg.WeightConfig(epsilon=0.7)
    with pytest.raises(ValueError):
        dg.WeightConfig(variant="other")


def test_degenerate_monitor_examples():
    bg = bg_of(c0=1.0, weight_s=1.0)
    assert dg.degenerate_monitor(initial_state(bg), bg, dg.WeightConfig(0.1)) == 0
    g = TorusGrid(2, 8)
    x1 = g.coords()[0]
    s = np.broadcast_to(np.sin(math.pi * x1) ** 2, g.shape)
    bg = bg_of(c0=2.0, weight_s=s)
    st0 = initial_state(bg)
    c = 2 * math.log(2)
    val = dg.degenerate_monitor(st0, bg, dg.WeightConfig(0.1))
    assert val == pytest.approx(c - 0.1 * math.log(np.max(s)), abs=1e-12)
    assert val == pytest.approx(c, abs=1e-12)  # max s = 1 on this grid
    with pytest.raises(ValueError):
        dg.degenerate_monitor(st0, bg_of(), dg.WeightConfig(0.1))
    with pytest.raises(ValueError):
        dg.degenerate_monitor(st0, bg, dg.WeightConfig(0.1, variant="finite"))


def test_degenerate_monitor_finite_variant():
    g = TorusGrid(1, 16)
    x, _ = g.coords()
    s = np.broadcast_to(np.sin(math.pi * x) ** 2, g.shape)
    bg = Background(g, FormSpec([[2.0]]), FormSpec([[-1.0]]), 0.0, weight_s=s)
    st0 = initial_state(bg)
    T = math.log(3)
    cfg = dg.WeightConfig(0.1, T_virtual=T + 0.1, variant="finite")
    mask = s > 0
    expected = np.min(((1 - math.exp(-(T + 0.1))) * math.log(2) - 0.1 * np.log(s[mask])))
    assert dg.degenerate_monitor(st0, bg, cfg) == pytest.approx(expected, abs=1e-13)
    cfg_T = dg.WeightConfig(0.1, variant="finite")
    expected_T = np.min(((1 - math.exp(-T)) * math.log(2) - 0.1 * np.log(s[mask])))
    assert dg.degenerate_monitor(st0, bg, cfg_T) == pytest.approx(expected_T, abs=1e-13)


def test_third_order_S_examples():
    bg = bg_of()
    assert np.all(dg.third_order_S(initial_state(bg), bg) == 0)
    # n = 1 with metric 1 + i ddbar u: S = |u_{z zbar z}|^2 / g^3.
    g = TorusGrid(1, 32)
    x, y = g.coords()
    amp = 0.01
    u = np.broadcast_to(amp * np.cos(TWO_PI * x) + 0 * y, g.shape)
    bg = Background(g, FormSpec([[1.0]]), FormSpec([[1.0]]), 0.0)
    st_ = make_state(bg, 0.0, u)
    metric = 1 - amp * math.pi**2 * np.cos(TWO_PI * x)
    third = 0.5 * amp * TWO_PI * math.pi**2 * np.sin(TWO_PI * x)
    assert np.max(np.abs(dg.third_order_S(st_, bg) - third**2 / metric**3)) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.sampled_from(["sin", "cos"]))
def test_S_nonnegative_and_zero_iff_no_third_derivatives(k1, k2, k3, k4, trig):
    g = TorusGrid(2, 8)
    x1, y1, x2, y2 = g.coords()
    phase = TWO_PI * (k1 * x1 + k2 * y1 + k3 * x2 + k4 * y2)
    u = np.broadcast_to(0.002 * getattr(np, trig)(phase), g.shape)
    bg = Background(g, FormSpec(np.eye(2)), FormSpec(np.eye(2)), 0.0)
    S = dg.third_order_S(make_state(bg, 0.0, u), bg)
    assert np.all(S >= 0)
    if (k1, k2, k3, k4) == (0, 0, 0, 0):
        assert np.all(S == 0)
    else:
        assert S.max() > 0


def test_volume_floor_examples():
    bg = bg_of(c0=1.0, cinf=1.5)
    assert dg.volume_floor(initial_state(bg)) == pytest.approx(1.0)
    bg = bg_of(c0=2.0, cinf=1.0)
    t = 0.3
    s = run(bg, StepPolicy(mode="fixed", dt=0.01, t_max=t), cadence=0.3).state
    c = 1 + math.exp(-t)
    assert dg.volume_floor(s) == pytest.approx(c * c, rel=1e-12)


def test_max_principle_chain_on_short_run():
    bg = smooth_bg()
    margins = []

    def observe(s):
        lhs, mid, right = dg.max_principle_chain(s, bg)
        margins.append(mid - right)

    run(bg, StepPolicy(t_max=0.2), cadence=0.1, observer=observe)
    assert min(margins) >= -1e-12


def test_record_and_csv_round_trip(tmp_path):
    g = TorusGrid(2, 8)
    x1 = g.coords()[0]
    s = np.broadcast_to(np.sin(math.pi * x1) ** 2, g.shape)
    bg = smooth_bg(weight_s=s)
    st_ = run(bg, StepPolicy(t_max=0.1), cadence=0.1).state
    rec = dg.record(st_, bg, dg.WeightConfig(0.1))
    assert rec.osc_dudt == pytest.approx(rec.max_dudt - rec.min_dudt) and rec.osc_dudt >= 0
    assert rec.E >= 0 and rec.min_det > 0 and rec.weighted_min is not None
    rec2 = dg.record(st_, bg)
    path = tmp_path / "d.csv"
    path.write_text(dg.csv_header() + "\n" + dg.format_row(rec) + "\n" + dg.format_row(rec2) + "\n")
    back = dg.read_csv(path)
    assert back[0] == rec
    assert back[1].weighted_min is None and back[1].S_max == rec2.S_max
    assert path.read_text().splitlines()[0] == (
        "t,osc_dudt,min_dudt,max_dudt,A,E,min_det,v_sup,weighted_min,S_max,S_mean,class_volume"
    )
