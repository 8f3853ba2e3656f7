"""Direct Newton solver for ``det(omega_inf + i ddbar u) = h`` on a flat torus.

Each Newton correction solves the linearized equation
``det(g) Delta_g delta = -det(g) F`` with ``F = log det g - log h``. In the
continuum ``det(g) Delta_g`` has the divergence form

    sum_j d_j ( sum_k Q_kj dbar_k delta ),    Q = adj(g),

which is exactly symmetric for the discrete spectral derivatives and is solved
by conjugate gradients, preconditioned with the same operator at the grid
average of ``Q``. On the grid the two forms differ by aliasing, so the CG solve
is wrapped in a defect-correction loop against the pointwise (exact) Jacobian;
this keeps Newton quadratically convergent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.sparse.linalg as spla

from ._kernels import logdet_min_eig
from .torus import FormSpec, TorusGrid, assemble, complex_hessian, det_field, hessian_components, inverse_field, realize

log = logging.getLogger(__name__)

COMPATIBILITY_TOL = 1e-12


class IncompatibleProblem(ValueError):
    """``int h dV`` does not match the volume of the limit class."""


class NewtonError(RuntimeError):
    pass


@dataclass
class EllipticProblem:
    grid: TorusGrid
    omega_inf: FormSpec
    log_h: np.ndarray
    tol: float = 1e-10
    max_newton: int = 50

    def __post_init__(self):
        self.log_h = np.broadcast_to(np.asarray(self.log_h, dtype=float), self.grid.shape).copy()


@dataclass
class NewtonReport:
    residuals: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    converged: bool = False

    @property
    def residual(self):
        return self.residuals[-1] if self.residuals else math.nan

    def tail_ratios(self, below=1e-3):
        r = np.asarray(self.residuals)
        return [r[i + 1] / r[i] for i in range(len(r) - 1) if r[i] < below]


def class_volume(grid, form):
    return grid.integrate(det_field(realize(grid, form)))


def check_compatibility(problem, rescale_h=False):
    """Relative mismatch ``|int h - vol| / vol``; optionally rescale ``h`` to fix it."""
    vol = class_volume(problem.grid, problem.omega_inf)
    mass = problem.grid.integrate(np.exp(problem.log_h))
    mismatch = abs(mass - vol) / vol
    if rescale_h:
        problem.log_h = problem.log_h + math.log(vol / mass)
    return mismatch


def _components(grid, form, u):
    potential = u if form.potential is None else u + form.potential
    comps = hessian_components(grid, potential)
    n = grid.n_complex
    c = form.constant
    for j in range(n):
        comps[j] += c[j, j].real
    pos = n
    for j in range(n):
        for k in range(j + 1, n):
            comps[pos] += c[j, k].real
            comps[pos + 1] += c[j, k].imag
            pos += 2
    return comps


def residual(problem, u, log_h=None):
    """``log det(omega_inf + i ddbar u) - log h`` and the metric field."""
    log_h = problem.log_h if log_h is None else log_h
    comps = _components(problem.grid, problem.omega_inf, u)
    log_det, lam, _ = logdet_min_eig(comps, problem.grid.n_complex)
    return log_det - log_h, assemble(comps, problem.grid.n_complex), lam


class _SpectralTools:
    """rfft-based constant-coefficient inverse and null-space projector."""

    def __init__(self, grid):
        self.grid = grid
        n = grid.points_per_axis
        ks = []
        for a in range(grid.ndim):
            k = grid.wavenumbers(a)
            if a == grid.ndim - 1:
                k = k[: n // 2 + 1].copy()
                k[-1] = 0.0
            shape = [1] * grid.ndim
            shape[a] = k.size
            ks.append(k.reshape(shape))
        self.zeta = [ks[2 * j] + 1j * ks[2 * j + 1] for j in range(grid.n_complex)]
        norm = sum(np.abs(z) ** 2 for z in self.zeta)
        self.mask = norm > 0

    def symbol(self, q_mean):
        # Symbol of -L for constant Q: (1/4) sum_jk conj(zeta_j) Q_kj zeta_k.
        n = self.grid.n_complex
        s = 0.0
        for j in range(n):
            for k in range(n):
                s = s + np.conj(self.zeta[j]) * q_mean[k, j] * self.zeta[k]
        return 0.25 * s.real

    def project(self, f):
        fh = scipy.fft.rfftn(f)
        fh[~self.mask] = 0.0
        return scipy.fft.irfftn(fh, s=f.shape)

    def inverse(self, sym):
        inv = np.zeros_like(sym)
        inv[self.mask] = 1.0 / sym[self.mask]

        def apply(f):
            return scipy.fft.irfftn(inv * scipy.fft.rfftn(f), s=f.shape)

        return apply


def divergence_operator(grid, metric):
    """``delta -> -sum_j d_j(sum_k Q_kj dbar_k delta)`` with ``Q = adj(metric)``."""
    n = grid.n_complex
    Q = det_field(metric)[..., None, None] * inverse_field(metric)

    def apply(delta):
        dbar = [0.5 * (grid.diff(delta, 2 * k) + 1j * grid.diff(delta, 2 * k + 1)) for k in range(n)]
        out = np.zeros(grid.shape)
        for j in range(n):
            c = sum(Q[..., k, j] * dbar[k] for k in range(n))
            out -= 0.5 * (grid.diff(np.ascontiguousarray(c.real), 2 * j) + grid.diff(np.ascontiguousarray(c.imag), 2 * j + 1))
        return out

    return apply, Q


def exact_jacobian(grid, Q):
    """``delta -> -sum_jk Q_kj d_j dbar_k delta = -det(g) tr(g^{-1} i ddbar delta)``."""

    def apply(delta):
        H = complex_hessian(grid, delta)
        return -np.einsum("...kj,...jk->...", Q, H).real

    return apply


def _linear_solve(grid, metric, rhs, rtol, tools, max_outer=30):
    """Solve ``J delta = rhs`` (``J`` the exact Jacobian) by CG-based defect correction."""
    shape, size = grid.shape, grid.size
    apply_A, Q = divergence_operator(grid, metric)
    apply_J = exact_jacobian(grid, Q)
    precond = tools.inverse(tools.symbol(Q.reshape(-1, *Q.shape[-2:]).mean(axis=0)))
    A = spla.LinearOperator((size, size), matvec=lambda x: apply_A(x.reshape(shape)).ravel())
    M = spla.LinearOperator((size, size), matvec=lambda x: precond(x.reshape(shape)).ravel())
    delta = np.zeros(shape)
    r = rhs
    target = rtol * np.linalg.norm(rhs)
    iters = 0
    best = (np.linalg.norm(rhs), delta)
    for _ in range(max_outer):
        counter = []
        corr, info = spla.cg(A, tools.project(r).ravel(), rtol=1e-3, atol=0.0, maxiter=500, M=M,
                             callback=counter.append)
        iters += len(counter)
        if info < 0:
            raise NewtonError(f"conjugate gradients broke down (info={info})")
        delta = delta + tools.project(corr.reshape(shape))
        r = rhs - apply_J(delta)
        norm = np.linalg.norm(tools.project(r))
        if norm < best[0]:
            best = (norm, delta)
        elif norm > 2 * best[0]:
            break  # defect correction diverging; keep the best iterate
        if norm <= target:
            break
    return best[1], iters


def _newton(problem, log_h, u, tol, report, tools):
    grid = problem.grid
    F, metric, lam = residual(problem, u, log_h)
    if not lam > 0:
        raise NewtonError("initial guess is not admissible (metric not positive definite)")
    res = float(np.max(np.abs(F)))
    report.residuals.append(res)
    for _ in range(problem.max_newton):
        if res <= tol:
            return u
        # With J = -det(g) Delta_g, the Newton equation reads J delta = det(g) F.
        rhs = tools.project(det_field(metric) * F)
        rtol = min(1e-4, max(1e-13, 1e-3 * res))
        delta, iters = _linear_solve(grid, metric, rhs, rtol, tools)
        report.cg_iterations.append(iters)

        alpha = 1.0
        for _halving in range(31):
            trial = u + alpha * delta
            F_new, metric_new, lam_new = residual(problem, trial, log_h)
            res_new = float(np.max(np.abs(F_new))) if lam_new > 0 else math.inf
            if res_new < res:
                break
            alpha *= 0.5
        else:
            raise NewtonError("line search failed after 30 halvings")
        if res_new > 0.9 * res:
            report.residuals.append(res_new)
            raise NewtonError(
                f"Newton stalled at residual {res_new:.3e} "
                f"({100 * nyquist_share(F_new):.0f}% of it in Nyquist modes, which no correction can reach)"
            )
        u, F, metric, res = trial - trial.mean(), F_new, metric_new, res_new
        report.residuals.append(res)
        log.debug("newton residual %.3e (alpha=%g, cg=%d)", res, alpha, iters)
    if res <= tol:
        return u
    raise NewtonError(f"max_newton={problem.max_newton} exceeded (residual {res:.3e})")


def nyquist_share(F):
    """Fraction of ``sum F^2`` carried by modes that sit on a Nyquist plane.

    Derivatives vanish on those modes, so a residual concentrated there marks
    a grid too coarse for the data rather than a solver failure.
    """
    Fh = np.abs(np.fft.fftn(F)) ** 2
    total = Fh.sum()
    if total == 0:
        return 0.0
    nyq = np.zeros(F.shape, dtype=bool)
    for a, n in enumerate(F.shape):
        if n % 2 == 0:
            idx = [slice(None)] * F.ndim
            idx[a] = n // 2
            nyq[tuple(idx)] = True
    return float(Fh[nyq].sum() / total)


def omega_mean(grid, u, log_h):
    h = np.exp(log_h)
    return grid.integrate(u, h) / grid.integrate(h)


def solve(problem, u0=None, full_output=False):
    """Potential ``u`` with ``det(omega_inf + i ddbar u) = h``, Omega-mean zero.

    Plain Newton is tried first; if it stalls, the density is deformed along
    ``h_theta = (1 - theta) det(omega_inf) + theta h`` from ``theta = 0``.
    """
    grid = problem.grid
    mismatch = check_compatibility(problem)
    if mismatch > COMPATIBILITY_TOL:
        raise IncompatibleProblem(f"relative mass mismatch {mismatch:.3e}; rescale h first")
    tools = _SpectralTools(grid)
    report = NewtonReport()
    u = np.zeros(grid.shape) if u0 is None else np.array(u0, dtype=float)
    try:
        report.thetas.append(1.0)
        u = _newton(problem, problem.log_h, u, problem.tol, report, tools)
    except NewtonError as exc:
        log.info("plain Newton failed (%s); switching to continuation", exc)
        try:
            u = _continuation(problem, tools, report)
        except NewtonError as exc2:
            raise NewtonError(f"{exc}; continuation also failed: {exc2}") from exc2
    report.converged = True
    u = u - omega_mean(grid, u, problem.log_h)
    if full_output:
        return u, report
    return u


def _continuation(problem, tools, report):
    grid = problem.grid
    det0 = det_field(realize(grid, problem.omega_inf))
    h = np.exp(problem.log_h)
    u = np.zeros(grid.shape)
    theta, dtheta = 0.0, 0.25
    while theta < 1.0:
        nxt = min(1.0, theta + dtheta)
        log_h_theta = np.log((1.0 - nxt) * det0 + nxt * h)
        tol = problem.tol if nxt == 1.0 else max(problem.tol, 1e-8)
        try:
            u = _newton(problem, log_h_theta, u, tol, report, tools)
        except NewtonError:
            dtheta *= 0.5
            if dtheta < 1.0 / 256:
                raise
            continue
        theta = nxt
        report.thetas.append(theta)
        dtheta = min(0.5, 2 * dtheta)
    return u
