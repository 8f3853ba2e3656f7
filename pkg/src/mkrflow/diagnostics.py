"""Monitored quantities along a flow: normalized potential, A(t), energy, weighted
monitors, the third-order quantity S, plus decay-rate fitting and CSV output.

Volume forms follow the determinant convention of :mod:`mkrflow.torus`: the
evolving volume is ``det(metric) dV`` and ``Omega = h dV``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .flow import class_constant, singular_time
from .torus import (
    PositivityError,
    amgm_margin,
    det_field,
    inverse_field,
    osc,
    realize,
    third_derivatives,
    trace_pair,
)

S_FLOOR = 1e-300
CSV_COLUMNS = (
    "t",
    "osc_dudt",
    "min_dudt",
    "max_dudt",
    "A",
    "E",
    "min_det",
    "v_sup",
    "weighted_min",
    "S_max",
    "S_mean",
    "class_volume",
)


@dataclass
class DiagnosticsRecord:
    t: float
    osc_dudt: float
    min_dudt: float
    max_dudt: float
    A: float
    E: float
    min_det: float
    v_sup: float
    weighted_min: float = None
    S_max: float = math.nan
    S_mean: float = math.nan
    class_volume: float = math.nan

    def as_row(self):
        return [math.nan if getattr(self, c) is None else float(getattr(self, c)) for c in CSV_COLUMNS]


@dataclass
class WeightConfig:
    """Parameters of the degenerate monitors.

    ``variant="infinite"`` monitors ``du/dt - eps log s``; ``"finite"`` monitors
    ``(1 - e^{t - T_hat}) du/dt + v - eps log s`` with ``T_hat`` the virtual time
    when given, otherwise the singular time.
    """

    epsilon: float = 0.1
    T_virtual: float = None
    variant: str = "infinite"

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.5:
            raise ValueError("epsilon must lie in (0, 0.5]")
        if self.variant not in ("infinite", "finite"):
            raise ValueError(f"variant must be 'infinite' or 'finite', got {self.variant!r}")


@dataclass
class RateFit:
    rate: float
    r2: float
    floored: bool = False
    samples: int = 0


def omega_mean(f, bg):
    """Average of ``f`` against the unit-mass normalization of ``Omega``."""
    h = bg.h
    return bg.grid.integrate(f, h) / bg.grid.integrate(h)


def normalized_potential(state, bg):
    """``v = u - int u Omega_hat``."""
    return state.u - omega_mean(state.u, bg)


def dvdt(state, bg):
    """``dv/dt = du/dt - int (du/dt) Omega_hat``, an exact identity (no time differencing)."""
    return state.rhs - omega_mean(state.rhs, bg)


def min_quantity_A(state, bg):
    """``A(t) = min_X (du/dt + v)``."""
    return float(np.min(state.rhs + normalized_potential(state, bg)))


def energy(state, bg):
    """``psi = du/dt - <du/dt>`` against ``det(metric) dV`` and ``E = int psi^2 det(metric) dV``."""
    grid = bg.grid
    vol = np.exp(state.log_det)
    mean = grid.integrate(state.rhs, vol) / grid.integrate(vol)
    psi = state.rhs - mean
    return psi, grid.integrate(psi * psi, vol)


def energy_variance(state, bg):
    """``E`` through ``int (du/dt)^2 vol - (int du/dt vol)^2 / int vol``."""
    grid = bg.grid
    vol = np.exp(state.log_det)
    m1 = grid.integrate(state.rhs, vol)
    m2 = grid.integrate(state.rhs * state.rhs, vol)
    return m2 - m1 * m1 / grid.integrate(vol)


def fit_exp_rate(t, values, window=None, min_samples=10):
    """Least-squares fit of ``log(value) = c - a t`` over ``window``.

    Returns ``RateFit(a, r2)``. Non-positive values inside the window mean the
    series already reached the numerical floor; the fit is then made on the
    positive prefix and ``floored`` is set.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(values, dtype=float)
    if window is not None:
        keep = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
        t, y = t[keep], y[keep]
    floored = False
    bad = ~(y > 0)
    if bad.any():
        floored = True
        first = int(np.argmax(bad))
        t, y = t[:first], y[:first]
    if t.size < min_samples:
        raise ValueError(f"need at least {min_samples} positive samples, got {t.size}")
    logy = np.log(y)
    slope, intercept = np.polyfit(t, logy, 1)
    resid = logy - (slope * t + intercept)
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return RateFit(-float(slope), r2, floored, int(t.size))


def fit_A_inequality(t, A):
    """Fit ``C >= 0`` to ``dA/dt >= -C + A + C e^{-A}`` and report the worst margin.

    ``dA/dt`` is taken as the forward difference between consecutive records.
    Returns ``(C, margin)`` where ``margin`` is the minimum over samples of
    ``dA/dt - (-C + A + C e^{-A})``; a non-negative margin means the series is
    consistent with the inequality for the fitted constant.
    """
    t = np.asarray(t, dtype=float)
    A = np.asarray(A, dtype=float)
    slope = np.diff(A) / np.diff(t)
    a = A[:-1]
    coef = np.expm1(-a)  # e^{-A} - 1
    lhs = slope - a
    # lhs >= C * coef: positive A gives lower bounds on C.
    need = lhs[coef < 0] / coef[coef < 0] if np.any(coef < 0) else np.array([])
    C = max(0.0, float(np.max(need))) if need.size else 0.0
    margin = float(np.min(lhs - C * coef)) if lhs.size else math.nan
    return C, margin


def degenerate_monitor(state, bg, cfg, T=None):
    """Minimum of the weighted monitor over the points where ``s > S_FLOOR``."""
    if bg.weight_s is None:
        raise ValueError("degenerate monitor needs a weight field weight_s")
    s = bg.weight_s
    mask = s > S_FLOOR
    log_s = np.log(np.where(mask, s, 1.0))
    if cfg.variant == "infinite":
        field_ = state.rhs - cfg.epsilon * log_s
    else:
        T_hat = cfg.T_virtual
        if T_hat is None:
            T_hat = singular_time(bg) if T is None else T
        if not math.isfinite(T_hat):
            raise ValueError("finite variant needs a finite singular time or T_virtual")
        factor = -math.expm1(state.t - T_hat)
        field_ = factor * state.rhs + normalized_potential(state, bg) - cfg.epsilon * log_s
    return float(np.min(field_[mask]))


def third_order_S(state, bg):
    """``S = g^{i jbar} g^{k lbar} g^{m nbar} phi_{i lbar m} conj(phi_{j kbar n})``.

    ``phi`` is the full potential (interpolant potential plus ``u``); on the
    flat torus covariant derivatives of the background are coordinate ones.
    """
    metric = state.metric
    if not state.min_eigenvalue > 0:
        raise PositivityError("metric is not positive definite", eigenvalue=state.min_eigenvalue)
    rho = bg.potential(state.t)
    phi = state.u if rho is None else state.u + rho
    T = third_derivatives(bg.grid, phi)
    G = inverse_field(metric)
    S = np.einsum("...ji,...lk,...nm,...ilm,...jkn->...", G, G, G, T, T.conj(), optimize=True)
    return np.maximum(S.real, 0.0)


def volume_floor(state):
    """``min_X det(metric)``."""
    return float(np.exp(np.min(state.log_det)))


def class_volume(state, bg):
    return bg.grid.integrate(np.exp(state.log_det))


def interpolant_volume(bg, t):
    """Volume of the class at time ``t`` (constant representative)."""
    return bg.grid.total_volume * float(np.linalg.det(class_constant(bg, t)).real)


def measure_identity_error(state, bg):
    """Relative gap between ``int e^{du/dt} Omega`` and ``int det(metric) dV``."""
    grid = bg.grid
    lhs = grid.integrate(np.exp(state.log_det - bg.log_h), bg.h)
    rhs = grid.integrate(np.exp(state.log_det))
    return abs(lhs - rhs) / rhs


def limit_metric_margin(state, bg):
    """Pointwise AM-GM margin ``tr(g^{-1} omega_inf) - n (det omega_inf / det g)^{1/n}``."""
    return amgm_margin(state.metric, realize(bg.grid, bg.omega_inf))


def max_principle_chain(state, bg):
    """Terms of ``n - dv/dt >= <metric, omega_inf> >= n (det omega_inf / det metric)^{1/n}``
    evaluated at the grid argmin of ``du/dt + v``.

    Returns ``(lhs, middle, right)``.
    """
    n = bg.grid.n_complex
    idx = np.unravel_index(int(np.argmin(state.rhs + normalized_potential(state, bg))), bg.grid.shape)
    g = state.metric[idx][None]
    w = realize(bg.grid, bg.omega_inf)[idx][None]
    middle = float(trace_pair(g, w)[0])
    ratio = max(float(det_field(w)[0]), 0.0) / float(det_field(g)[0])
    right = n * ratio ** (1.0 / n)
    lhs = n - float(dvdt(state, bg)[idx])
    return lhs, middle, right


def record(state, bg, weight=None, T=None, with_S=True):
    """One :class:`DiagnosticsRecord` for ``state``."""
    v = normalized_potential(state, bg)
    _, E = energy(state, bg)
    weighted = None
    if weight is not None and bg.weight_s is not None:
        weighted = degenerate_monitor(state, bg, weight, T)
    S_max = S_mean = math.nan
    if with_S:
        S = third_order_S(state, bg)
        S_max, S_mean = float(S.max()), float(S.mean())
    rhs = state.rhs
    return DiagnosticsRecord(
        t=float(state.t),
        osc_dudt=osc(rhs),
        min_dudt=float(rhs.min()),
        max_dudt=float(rhs.max()),
        A=float(np.min(rhs + v)),
        E=E,
        min_det=volume_floor(state),
        v_sup=float(np.max(np.abs(v))),
        weighted_min=weighted,
        S_max=S_max,
        S_mean=S_mean,
        class_volume=class_volume(state, bg),
    )


def format_row(rec):
    return ",".join("%.17g" % x for x in rec.as_row())


def csv_header():
    return ",".join(CSV_COLUMNS)


def read_csv(path):
    """Records from a diagnostics CSV (``weighted_min`` is None when nan)."""
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for line in fh:
            if not line.strip():
                continue
            vals = dict(zip(CSV_COLUMNS, (float(x) for x in line.split(","))))
            if math.isnan(vals["weighted_min"]):
                vals["weighted_min"] = None
            out.append(DiagnosticsRecord(**vals))
    return out


def records_to_columns(records):
    """Dict of numpy arrays keyed by field name."""
    names = [f.name for f in fields(DiagnosticsRecord)]
    rows = [asdict(r) for r in records]
    return {k: np.array([np.nan if r[k] is None else r[k] for r in rows], dtype=float) for k in names}


__all__ = [
    "CSV_COLUMNS",
    "DiagnosticsRecord",
    "RateFit",
    "WeightConfig",
    "class_volume",
    "csv_header",
    "degenerate_monitor",
    "dvdt",
    "energy",
    "energy_variance",
    "fit_A_inequality",
    "fit_exp_rate",
    "format_row",
    "interpolant_volume",
    "limit_metric_margin",
    "max_principle_chain",
    "measure_identity_error",
    "min_quantity_A",
    "normalized_potential",
    "omega_mean",
    "read_csv",
    "record",
    "records_to_columns",
    "third_order_S",
    "volume_floor",
]
