"""Flat complex tori: grids, spectral differentiation and Hermitian form fields.

Fields are plain numpy arrays. A scalar field has shape ``grid.shape``; a
Hermitian field has shape ``grid.shape + (n, n)`` with complex entries
``H[..., j, k]`` holding the coefficient of ``sqrt(-1) dz_j ^ dzbar_k``.

Real axes are ordered ``x_1, y_1, ..., x_n, y_n`` with ``z_j = x_j + i y_j``.
Volume forms are identified with ``det H * dV`` (Lebesgue reference), so the
``n!`` factor of ``omega^n`` is dropped on both sides of every identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

HERMITIAN_TOL = 1e-12


class PositivityError(ArithmeticError):
    """A Hermitian field that must be positive definite is not.

    Carries the flat grid index of the worst point, its smallest eigenvalue
    and, when raised inside a time step, the Runge-Kutta stage.
    """

    def __init__(self, message, index=None, eigenvalue=None, stage=None):
        super().__init__(message)
        self.index = index
        self.eigenvalue = eigenvalue
        self.stage = stage


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic lattice on an ``n_complex``-dimensional flat torus."""

    n_complex: int
    points_per_axis: int
    periods: tuple = None

    def __post_init__(self):
        if self.n_complex not in (1, 2):
            raise ValueError(f"n_complex must be 1 or 2, got {self.n_complex}")
        n = self.points_per_axis
        if n < 8 or n & (n - 1):
            raise ValueError(f"points_per_axis must be a power of two >= 8, got {n}")
        periods = self.periods
        if periods is None:
            periods = (1.0,) * (2 * self.n_complex)
        periods = tuple(float(p) for p in periods)
        if len(periods) != 2 * self.n_complex or min(periods) <= 0:
            raise ValueError(f"need {2 * self.n_complex} positive periods, got {periods}")
        object.__setattr__(self, "periods", periods)

    @property
    def ndim(self):
        return 2 * self.n_complex

    @property
    def shape(self):
        return (self.points_per_axis,) * self.ndim

    @property
    def size(self):
        return self.points_per_axis ** self.ndim

    @cached_property
    def spacing(self):
        return tuple(p / self.points_per_axis for p in self.periods)

    @cached_property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @cached_property
    def total_volume(self):
        return float(np.prod(self.periods))

    def coords(self):
        """Sparse (broadcastable) coordinate arrays, one per real axis."""
        axes = [np.arange(self.points_per_axis) * h for h in self.spacing]
        return np.meshgrid(*axes, indexing="ij", sparse=True)

    def wavenumbers(self, axis):
        """Angular wavenumbers along ``axis``; the Nyquist mode is dropped."""
        n = self.points_per_axis
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=self.spacing[axis])
        k[n // 2] = 0.0
        return k

    @cached_property
    def k_max(self):
        """Largest resolved angular wavenumber over all axes."""
        return max(np.abs(self.wavenumbers(a)).max() for a in range(self.ndim))

    @cached_property
    def _diff_matrices(self):
        # Dense circulant Fourier differentiation matrices, one pair per axis.
        n = self.points_per_axis
        eye_hat = np.fft.fft(np.eye(n), axis=0)
        mats = []
        for a in range(self.ndim):
            k = self.wavenumbers(a)
            d1 = np.fft.ifft((1j * k)[:, None] * eye_hat, axis=0).real
            d2 = np.fft.ifft((-k * k)[:, None] * eye_hat, axis=0).real
            mats.append((np.ascontiguousarray(d1), np.ascontiguousarray(d2)))
        return mats

    def diff(self, f, axis, order=1):
        """Spectral derivative of the real field ``f`` along a real axis."""
        mat = self._diff_matrices[axis][order - 1]
        n = self.points_per_axis
        before = n ** axis
        after = f.size // (before * n)
        if before == 1:
            out = mat @ f.reshape(n, after)
        elif after == 1:
            out = f.reshape(before, n) @ mat.T
        else:
            out = np.matmul(mat, f.reshape(before, n, after))
        return out.reshape(f.shape)

    def integrate(self, f, density=None):
        """Riemann sum of ``f * density`` over the torus."""
        g = f if density is None else f * density
        return float(np.sum(g) * self.cell_volume)

    def mean(self, f):
        return float(np.mean(f))


@dataclass
class FormSpec:
    """A real (1,1)-form given by a constant class matrix plus a potential."""

    constant: np.ndarray
    potential: np.ndarray = None

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.constant, dtype=complex))
        if c.shape[0] != c.shape[1]:
            raise ValueError(f"constant part must be square, got shape {c.shape}")
        if np.max(np.abs(c - c.conj().T)) > HERMITIAN_TOL:
            raise ValueError("constant part is not Hermitian")
        self.constant = 0.5 * (c + c.conj().T)


def check_finite(f, what="field"):
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{what} has non-finite values")


def check_hermitian(H, tol=HERMITIAN_TOL):
    err = np.max(np.abs(H - np.conj(np.swapaxes(H, -1, -2)))) if H.size else 0.0
    if err > tol:
        raise AssertionError(f"Hermitian check failed: max |M - M*| = {err:.3e}")
    return err


def _wirtinger(grid, f, j, conj=False):
    """``d f / dz_j`` (or ``d f / dzbar_j``) of a real or complex field."""
    fx = _diff_any(grid, f, 2 * j)
    fy = _diff_any(grid, f, 2 * j + 1)
    if conj:
        return 0.5 * (fx + 1j * fy)
    return 0.5 * (fx - 1j * fy)


def _diff_any(grid, f, axis):
    if np.iscomplexobj(f):
        return grid.diff(f.real, axis) + 1j * grid.diff(f.imag, axis)
    return grid.diff(f, axis)


def hessian_components(grid, rho):
    """Real components of the complex Hessian.

    Returns the diagonal entries followed by ``(Re, Im)`` of each entry above
    the diagonal in row-major order: ``[a]`` for n=1, ``[a, d, Re b, Im b]``
    for n=2 where ``H = [[a, b], [conj(b), d]]``.
    """
    rho = np.asarray(rho, dtype=float)
    check_finite(rho, "potential")
    n = grid.n_complex
    diag, firsts, upper = [], [], []
    for j in range(n):
        xx = grid.diff(rho, 2 * j, order=2)
        yy = grid.diff(rho, 2 * j + 1, order=2)
        diag.append(0.25 * (xx + yy))
        if j < n - 1:
            firsts.append((grid.diff(rho, 2 * j), grid.diff(rho, 2 * j + 1)))
    for j in range(n):
        for k in range(j + 1, n):
            rx, ry = firsts[j]
            xk, yk = 2 * k, 2 * k + 1
            upper.append(0.25 * (grid.diff(rx, xk) + grid.diff(ry, yk)))
            upper.append(0.25 * (grid.diff(rx, yk) - grid.diff(ry, xk)))
    return diag + upper


def assemble(components, n, constant=None):
    """Hermitian field from :func:`hessian_components` output plus a constant."""
    shape = components[0].shape
    H = np.empty(shape + (n, n), dtype=complex)
    for j in range(n):
        H[..., j, j] = components[j]
    pos = n
    for j in range(n):
        for k in range(j + 1, n):
            re, im = components[pos], components[pos + 1]
            pos += 2
            H[..., j, k] = re + 1j * im
            H[..., k, j] = re - 1j * im
    if constant is not None:
        H += constant
    return H


def complex_hessian(grid, rho):
    """Matrix field ``d^2 rho / dz_j dzbar_k`` of a real potential."""
    return assemble(hessian_components(grid, rho), grid.n_complex)


def third_derivatives(grid, phi):
    """``T[..., i, l, m] = d^3 phi / dz_i dzbar_l dz_m`` for a real potential."""
    n = grid.n_complex
    H = complex_hessian(grid, phi)
    T = np.empty(grid.shape + (n, n, n), dtype=complex)
    for i in range(n):
        for l in range(n):
            for m in range(n):
                T[..., i, l, m] = _wirtinger(grid, H[..., i, l], m)
    return T


def constant_field(grid, matrix):
    matrix = np.asarray(matrix, dtype=complex)
    return np.broadcast_to(matrix, grid.shape + matrix.shape).copy()


def realize(grid, form):
    """Pointwise coefficient matrices of ``constant + sqrt(-1) ddbar potential``."""
    if form.constant.shape != (grid.n_complex, grid.n_complex):
        raise ValueError("form dimension does not match grid")
    if form.potential is None:
        return constant_field(grid, form.constant)
    return complex_hessian(grid, form.potential) + form.constant


def det_field(H):
    """Real determinant per point."""
    n = H.shape[-1]
    if n == 1:
        return H[..., 0, 0].real.copy()
    if n == 2:
        b = H[..., 0, 1]
        return H[..., 0, 0].real * H[..., 1, 1].real - (b.real**2 + b.imag**2)
    return np.linalg.det(H).real


def min_eig(H):
    """Smallest eigenvalue per point."""
    n = H.shape[-1]
    if n == 1:
        return H[..., 0, 0].real.copy()
    if n == 2:
        a = H[..., 0, 0].real
        d = H[..., 1, 1].real
        b = H[..., 0, 1]
        half = 0.5 * (a - d)
        return 0.5 * (a + d) - np.sqrt(half * half + b.real**2 + b.imag**2)
    return np.linalg.eigvalsh(H)[..., 0]


def max_eig(H):
    n = H.shape[-1]
    if n <= 2:
        tr = np.trace(H, axis1=-2, axis2=-1).real
        return tr - min_eig(H) if n == 2 else tr
    return np.linalg.eigvalsh(H)[..., -1]


def require_positive(H, floor=0.0, what="metric", stage=None):
    """Raise :class:`PositivityError` unless ``min_eig(H) > floor`` everywhere."""
    lam = min_eig(H)
    idx = int(np.argmin(lam))
    worst = float(lam.flat[idx])
    if not worst > floor:
        where = np.unravel_index(idx, lam.shape)
        msg = f"{what} not positive definite at grid point {where}: min eigenvalue {worst:.6e}"
        if stage is not None:
            msg += f" (stage {stage})"
        raise PositivityError(msg, index=idx, eigenvalue=worst, stage=stage)
    return lam


def inverse_field(H):
    n = H.shape[-1]
    if n == 1:
        return 1.0 / H
    if n == 2:
        det = det_field(H)[..., None, None]
        inv = np.empty_like(H)
        inv[..., 0, 0] = H[..., 1, 1]
        inv[..., 1, 1] = H[..., 0, 0]
        inv[..., 0, 1] = -H[..., 0, 1]
        inv[..., 1, 0] = -H[..., 1, 0]
        return inv / det
    return np.linalg.inv(H)


def trace_pair(A, B):
    """``tr(A^{-1} B)`` per point; ``A`` must be positive definite."""
    require_positive(A, what="first argument of trace_pair")
    return np.einsum("...ij,...ji->...", inverse_field(A), B).real


def amgm_margin(A, B):
    """``tr(A^{-1}B) - n (det B / det A)^{1/n}`` per point, for PSD ``B``."""
    n = A.shape[-1]
    ratio = np.clip(det_field(B), 0.0, None) / det_field(A)
    return trace_pair(A, B) - n * ratio ** (1.0 / n)


def osc(f):
    return float(np.max(f) - np.min(f))
