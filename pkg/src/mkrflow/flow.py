"""Method-of-lines integration of the modified and canonical Kahler-Ricci flows.

The modified flow evolves a potential ``u`` by

    du/dt = log det(C(t) + i ddbar (rho(t) + u)) - log h,   u(0) = 0,

with ``C(t) = C_inf + e^{-t} (C_0 - C_inf)`` and the same interpolation for the
form potentials ``rho``. The canonical flow subtracts ``u`` on the right-hand
side. Time stepping is classical RK4 with a Kahler-cone guard at every stage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from ._kernels import logdet_min_eig
from .torus import (
    FormSpec,
    PositivityError,
    TorusGrid,
    assemble,
    check_finite,
    hessian_components,
    osc,
    realize,
    require_positive,
)

log = logging.getLogger(__name__)

FLOW_KINDS = ("modified", "canonical")
DT_UNDERFLOW = 1e-12


class FlowError(RuntimeError):
    """The integrator cannot continue (positivity loss, dt underflow)."""


@dataclass
class Background:
    """Fixed data of a run: initial and limit forms, volume density, extras.

    ``log_h`` is the log of the density of ``Omega`` against Lebesgue measure.
    ``f`` is an optional gauge potential with ``omega_inf + i ddbar f > 0``;
    ``weight_s`` is an optional model of ``|sigma|^2`` with values in [0, 1].
    """

    grid: TorusGrid
    omega0: FormSpec
    omega_inf: FormSpec
    log_h: np.ndarray
    f: np.ndarray = None
    weight_s: np.ndarray = None

    def __post_init__(self):
        n = self.grid.n_complex
        for name in ("omega0", "omega_inf"):
            form = getattr(self, name)
            if form.constant.shape != (n, n):
                raise ValueError(f"{name} has shape {form.constant.shape}, expected {(n, n)}")
        self.log_h = np.broadcast_to(np.asarray(self.log_h, dtype=float), self.grid.shape).copy()
        check_finite(self.log_h, "log_h")
        require_positive(realize(self.grid, self.omega0), what="omega0")
        if self.weight_s is not None:
            s = np.broadcast_to(np.asarray(self.weight_s, dtype=float), self.grid.shape).copy()
            if s.min() < 0 or s.max() > 1:
                raise ValueError("weight_s must take values in [0, 1]")
            self.weight_s = s

    @property
    def h(self):
        return np.exp(self.log_h)

    def potential(self, t):
        """Interpolated form potential ``rho(t)`` (None when both are absent)."""
        p0, pinf = self.omega0.potential, self.omega_inf.potential
        if p0 is None and pinf is None:
            return None
        p0 = 0.0 if p0 is None else p0
        pinf = 0.0 if pinf is None else pinf
        return np.broadcast_to(pinf + math.exp(-t) * (p0 - pinf), self.grid.shape)


def interpolant_class(bg, t):
    """``omega_t = omega_inf + e^{-t} (omega_0 - omega_inf)`` as a FormSpec."""
    if t < 0:
        raise ValueError("t must be non-negative")
    c0, cinf = bg.omega0.constant, bg.omega_inf.constant
    constant = cinf if math.isinf(t) else cinf + math.exp(-t) * (c0 - cinf)
    potential = bg.omega_inf.potential if math.isinf(t) else bg.potential(t)
    return FormSpec(constant, None if potential is None else np.array(potential))


@dataclass(frozen=True)
class SingularTime:
    T: float
    degenerate_limit: bool
    pencil: np.ndarray

    def __float__(self):
        return self.T


def pencil_singular_time(c0, c_inf, tol=1e-12):
    """First time the class ``C_inf + e^{-t}(C_0 - C_inf)`` stops being positive.

    With ``M = C_0^{-1/2} C_inf C_0^{-1/2}`` having eigenvalues ``mu``, the class
    at ``s = e^{-t}`` is congruent to ``(1 - s) M + s I``, which degenerates at
    ``s = -mu / (1 - mu)`` for each ``mu < 0``; hence ``T = log(1 + 1/|mu_min|)``.
    """
    c0 = np.atleast_2d(np.asarray(c0, dtype=complex))
    c_inf = np.atleast_2d(np.asarray(c_inf, dtype=complex))
    if np.linalg.eigvalsh(c0)[0] <= 0:
        raise ValueError("C_0 is not positive definite")
    mu = scipy.linalg.eigh(c_inf, c0, eigvals_only=True)
    mu_min = float(mu[0])
    scale = max(1.0, float(np.max(np.abs(mu))))
    degenerate = abs(mu_min) <= tol * scale
    if mu_min >= 0 or degenerate:
        return SingularTime(math.inf, degenerate, mu)
    return SingularTime(math.log1p(-1.0 / mu_min), False, mu)


def singular_time(bg, full_output=False):
    """Maximal existence time from the cohomology pencil; ``inf`` if C_inf > 0."""
    res = pencil_singular_time(bg.omega0.constant, bg.omega_inf.constant)
    return res if full_output else res.T


@dataclass
class FlowState:
    """Accepted state with its cached log-determinant, velocity and metric.

    ``rhs`` is ``du/dt`` at this state. The Hermitian metric field is assembled
    lazily from the stored Hessian components.
    """

    t: float
    u: np.ndarray
    log_det: np.ndarray
    rhs: np.ndarray
    flow_kind: str = "modified"
    min_eigenvalue: float = math.nan
    components: list = field(default=None, repr=False)

    @property
    def dudt(self):
        return self.rhs

    @cached_property
    def metric(self):
        return assemble(self.components, self.u.ndim // 2)


def class_constant(bg, t):
    c0, cinf = bg.omega0.constant, bg.omega_inf.constant
    return cinf + math.exp(-t) * (c0 - cinf)


def metric_components(bg, t, u):
    """Real Hessian components of ``omega_t + i ddbar u`` (constant included)."""
    rho = bg.potential(t)
    total = u if rho is None else u + rho
    comps = hessian_components(bg.grid, total)
    c = class_constant(bg, t)
    n = bg.grid.n_complex
    for j in range(n):
        comps[j] += c[j, j].real
    pos = n
    for j in range(n):
        for k in range(j + 1, n):
            comps[pos] += c[j, k].real
            comps[pos + 1] += c[j, k].imag
            pos += 2
    return comps


def build_metric(bg, t, u):
    """Coefficient matrices of ``omega_t + i ddbar u``."""
    return assemble(metric_components(bg, t, u), bg.grid.n_complex)


def make_state(bg, t, u, flow_kind="modified", delta_pd=0.0, stage=None):
    if flow_kind not in FLOW_KINDS:
        raise ValueError(f"unknown flow kind {flow_kind!r}")
    u = np.asarray(u, dtype=float)
    comps = metric_components(bg, t, u)
    log_det, lam, idx = logdet_min_eig(comps, bg.grid.n_complex)
    if not lam > delta_pd:
        where = np.unravel_index(idx, bg.grid.shape)
        msg = f"metric left the Kahler cone at t={t:.6f}, point {where}: min eigenvalue {lam:.6e}"
        if stage is not None:
            msg += f" (stage {stage})"
        raise PositivityError(msg, index=idx, eigenvalue=lam, stage=stage)
    rhs = log_det - bg.log_h
    if flow_kind == "canonical":
        rhs = rhs - u
    return FlowState(t, u, log_det, rhs, flow_kind, lam, comps)


def initial_state(bg, flow_kind="modified", delta_pd=0.0):
    return make_state(bg, 0.0, np.zeros(bg.grid.shape), flow_kind, delta_pd)


def _require_pd(state):
    if not state.min_eigenvalue > 0:
        raise PositivityError("metric is not positive definite", eigenvalue=state.min_eigenvalue)


def flow_rhs(state, bg):
    """``du/dt = log det(metric) - log h`` for the modified flow."""
    _require_pd(state)
    return state.log_det - bg.log_h


def canonical_rhs(state, bg):
    """``dphi/dt = log det(metric) - log h - phi``."""
    _require_pd(state)
    return state.log_det - bg.log_h - state.u


@dataclass
class StepPolicy:
    mode: str = "adaptive"
    dt: float = 1e-2
    safety: float = 0.5
    delta_pd: float = 1e-8
    t_max: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")


def stable_dt(state, grid, policy):
    """Explicit-stability step ``safety / (lambda_max(g^{-1}) k_max^2)``."""
    return policy.safety * state.min_eigenvalue / grid.k_max**2


def choose_dt(state, grid, policy):
    if policy.mode == "fixed":
        return policy.dt
    return min(policy.dt, stable_dt(state, grid, policy))


def step(state, bg, policy, dt=None, t_end=None):
    """One classical RK4 step; every stage is checked against the Kahler cone.

    ``t_end`` pins the new time exactly (used when landing on output times).
    """
    if dt is None:
        dt = choose_dt(state, bg.grid, policy) if t_end is None else t_end - state.t
    if dt < DT_UNDERFLOW:
        raise FlowError(f"time step underflow: dt = {dt:.3e} at t = {state.t:.6f}")
    kind, floor = state.flow_kind, policy.delta_pd
    t, u = state.t, state.u
    k1 = state.rhs
    k2 = make_state(bg, t + 0.5 * dt, u + (0.5 * dt) * k1, kind, floor, stage=2).rhs
    k3 = make_state(bg, t + 0.5 * dt, u + (0.5 * dt) * k2, kind, floor, stage=3).rhs
    k4 = make_state(bg, t + dt, u + dt * k3, kind, floor, stage=4).rhs
    u_new = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return make_state(bg, t + dt if t_end is None else t_end, u_new, kind, floor, stage="accept")


def gauge_shift(u, f, t):
    """``w = u - (1 - e^{-t}) f``."""
    return u - (1.0 - math.exp(-t)) * f


def shifted_interpolant(bg, t):
    """``omega_t + (1 - e^{-t}) i ddbar f``, so that ``metric = it + i ddbar w``."""
    form = interpolant_class(bg, t)
    extra = (1.0 - math.exp(-t)) * bg.f
    potential = extra if form.potential is None else form.potential + extra
    return FormSpec(form.constant, potential)


@dataclass
class RunResult:
    """Trajectory handle returned by :func:`run`."""

    state: FlowState
    halt_reason: str
    records: list = field(default_factory=list)
    steps: int = 0
    singular_time: float = math.inf


def _on_grid(t, cadence):
    q = t / cadence
    return abs(q - round(q)) <= 1e-9 * max(1.0, abs(q))


def run(
    bg,
    policy,
    flow_kind="modified",
    cadence=0.1,
    state=None,
    steady_tol=None,
    diagnose=None,
    observer=None,
):
    """Integrate until ``t_max``, just before the singular time, or steady state.

    ``diagnose(state)`` is called at every multiple of ``cadence`` (and at the
    halting time) and its return values are collected in ``records``;
    ``observer(state)`` sees every accepted state. Passing ``state`` resumes
    from a stored state. Steady state means ``osc(du/dt) < steady_tol`` for the
    modified flow and ``max |dphi/dt| < steady_tol`` for the canonical one; it
    is only tested when the limit class is Kahler.
    """
    T = singular_time(bg)
    resumed = state is not None
    if state is None:
        state = initial_state(bg, flow_kind, policy.delta_pd)
    elif state.flow_kind != flow_kind:
        raise ValueError("resumed state has a different flow kind")
    margin = policy.dt
    t_stop = min(policy.t_max, T - margin)
    stop_reason = "t_max" if t_stop == policy.t_max else "singular_time"
    result = RunResult(state, "", singular_time=T)

    def emit(s):
        if diagnose is not None:
            result.records.append(diagnose(s))

    def is_steady(s):
        if steady_tol is None or math.isfinite(T):
            return False
        size = osc(s.rhs) if flow_kind == "modified" else float(np.max(np.abs(s.rhs)))
        return size < steady_tol

    last_emit = None
    if not resumed or _on_grid(state.t, cadence):
        emit(state)
        last_emit = state.t
        if is_steady(state):
            result.halt_reason = "converged"
            return result

    k_next = math.floor(state.t / cadence + 1e-9) + 1
    while True:
        if state.t >= t_stop - 1e-12 * max(1.0, t_stop):
            result.halt_reason = stop_reason
            break
        dt = choose_dt(state, bg.grid, policy)
        target = min(k_next * cadence, t_stop)
        remaining = target - state.t
        landing = remaining <= dt * (1 + 1e-9)
        if not landing and remaining < 2 * dt:
            dt = 0.5 * remaining
        if landing:
            state = step(state, bg, policy, target - state.t, t_end=target)
        else:
            state = step(state, bg, policy, dt)
        result.steps += 1
        if observer is not None:
            observer(state)
        if landing and target == k_next * cadence:
            k_next += 1
            emit(state)
            last_emit = state.t
            if is_steady(state):
                result.halt_reason = "converged"
                break
    if last_emit != state.t:
        emit(state)
    result.state = state
    log.info("run halted at t=%.6f (%s) after %d steps", state.t, result.halt_reason, result.steps)
    return result
