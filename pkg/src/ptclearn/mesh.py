"""Real-valued MZI mesh algebra.

Planar rotators, the triangular (Reck-style) unitary parametrization

    U = D * prod_{i=k..2} prod_{j=1..i-1} R_ij(phi_ij)

and a one-sided Jacobi SVD for small k x k blocks. Every routine accepts
arbitrary leading batch dimensions so a whole grid of blocks can be processed
in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

TWO_PI = 2.0 * np.pi


class MeshError(ValueError):
    """Invalid mesh input or a decomposition that cannot be carried out."""


def rotator(phi: float) -> np.ndarray:
    """2x2 planar rotator ``[[cos, -sin], [sin, cos]]``."""
    phi = float(phi)
    if not np.isfinite(phi):
        raise MeshError(f"rotator phase must be finite, got {phi!r}")
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


def mzi_phase_settings(phi: float) -> tuple[float, float, float, float]:
    """Physical shifter settings (theta_T, theta_L, omega_P, omega_W) realizing ``rotator(phi)``.

    The common-mode arm phase is pinned to pi and the differential mode is
    ``pi - 2 phi``.
    """
    phi = float(phi)
    if not np.isfinite(phi):
        raise MeshError(f"MZI phase must be finite, got {phi!r}")
    delta_omega = np.pi - 2.0 * phi
    return np.pi / 2, 3 * np.pi / 2, np.pi + delta_omega / 2, np.pi - delta_omega / 2


def mzi_transfer_matrix(theta_t: float, theta_l: float, omega_p: float, omega_w: float) -> np.ndarray:
    """Complex 2x2 transfer matrix of a 4-shifter MZI built from two 50:50 couplers."""
    t = kappa = np.sqrt(2) / 2
    coupler = np.array([[t, 1j * kappa], [1j * kappa, t]])
    arms = np.diag([np.exp(1j * omega_p), np.exp(1j * omega_w)])
    inputs = np.diag([np.exp(1j * theta_t), np.exp(1j * theta_l)])
    return coupler @ arms @ coupler @ inputs


def num_phases(k: int) -> int:
    return k * (k - 1) // 2


@lru_cache(maxsize=None)
def rotation_order(k: int) -> tuple[tuple[int, int], ...]:
    """Zero-based (i, j) plane of every rotator, in product order.

    Index ``r`` of a phase vector belongs to ``rotation_order(k)[r]``; the
    product runs i = k-1 .. 1 (outer) and j = 0 .. i-1 (inner).
    """
    return tuple((i, j) for i in range(k - 1, 0, -1) for j in range(i))


@dataclass
class UnitaryPhases:
    """Phases of one triangular mesh plus its diagonal sign vector.

    ``phis`` may carry leading batch dimensions ``(..., k(k-1)/2)`` with a
    matching ``d`` of shape ``(..., k)``.
    """

    phis: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.phis = np.asarray(self.phis, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        k = self.d.shape[-1]
        if self.phis.shape[-1] != num_phases(k):
            raise MeshError(f"expected {num_phases(k)} phases for k={k}, got {self.phis.shape[-1]}")
        if not np.all(np.abs(self.d) == 1.0):
            raise MeshError("diagonal sign vector must contain only +1/-1")

    @property
    def k(self) -> int:
        return self.d.shape[-1]

    @classmethod
    def identity(cls, k: int) -> "UnitaryPhases":
        return cls(np.zeros(num_phases(k)), np.ones(k))


def reconstruct(phis: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Batched mesh product ``D * R_k1 ... R_21`` for phase arrays ``(..., n)``."""
    phis = np.asarray(phis, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    k = d.shape[-1]
    batch = np.broadcast_shapes(phis.shape[:-1], d.shape[:-1])
    c, s = np.cos(phis), np.sin(phis)
    # Build the product column-wise: M <- M @ R_ij mixes columns i and j.
    # R_ij is rotator(phi) on the (j, i) plane, j < i.
    m = np.broadcast_to(np.eye(k), batch + (k, k)).copy()
    for r, (i, j) in enumerate(rotation_order(k)):
        cr = c[..., r, None]
        sr = s[..., r, None]
        ci = m[..., :, i].copy()
        cj = m[..., :, j]
        m[..., :, i] = cr * ci - sr * cj
        m[..., :, j] = cr * cj + sr * ci
    return d[..., :, None] * m


def reconstruct_unitary(p: UnitaryPhases) -> np.ndarray:
    return reconstruct(p.phis, p.d)


def decompose_unitary(u: np.ndarray, tol: float = 1e-6) -> UnitaryPhases:
    """Givens elimination of a real orthogonal matrix (batched).

    Rotations are peeled off in product order: for i = k-1 .. 1 the rows
    (i, j), j = 0 .. i-1, are mixed to clear column i. The sign of each pivot
    is preserved, so the leftover diagonal is +-1 and lands in ``d``. All
    phases are reported in [0, 2pi).
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < 2 or u.shape[-1] != u.shape[-2]:
        raise MeshError(f"expected square matrices, got shape {u.shape}")
    k = u.shape[-1]
    residual = np.linalg.norm(np.swapaxes(u, -1, -2) @ u - np.eye(k), axis=(-2, -1))
    if np.any(residual > tol) or not np.all(np.isfinite(u)):
        raise MeshError(f"matrix is not orthogonal (residual {np.max(residual):.3e})")

    m = u.copy()
    phis = np.zeros(u.shape[:-2] + (num_phases(k),))
    for r, (i, j) in enumerate(rotation_order(k)):
        pivot = m[..., i, i]
        sgn = np.where(pivot < 0, -1.0, 1.0)
        phi = np.arctan2(sgn * m[..., j, i], sgn * pivot)
        c, s = np.cos(phi)[..., None], np.sin(phi)[..., None]
        row_i = m[..., i, :].copy()
        row_j = m[..., j, :]
        m[..., i, :] = c * row_i + s * row_j
        m[..., j, :] = c * row_j - s * row_i
        phis[..., r] = phi
    d_right = np.where(np.diagonal(m, axis1=-2, axis2=-1) < 0, -1.0, 1.0)
    # U = P D  ==>  U = D (D P D); conjugating R_ij by D flips phi when d_i != d_j.
    ii = np.array([ij[0] for ij in rotation_order(k)], dtype=int)
    jj = np.array([ij[1] for ij in rotation_order(k)], dtype=int)
    # elimination angles are the negated mesh phases
    phis = -phis * d_right[..., ii] * d_right[..., jj]
    phis = np.mod(phis, TWO_PI) + 0.0
    phis[phis >= TWO_PI] = 0.0
    return UnitaryPhases(phis, d_right)


@dataclass
class SvdTriple:
    u: np.ndarray
    sigma: np.ndarray
    v_t: np.ndarray

    def matrix(self) -> np.ndarray:
        return (self.u * self.sigma[..., None, :]) @ self.v_t


def _complete_basis(a: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``a`` not flagged in ``keep`` by an orthonormal completion.

    Kept columns must form a prefix (singular values are sorted), so column
    ``i`` is filled from the standard basis vector with the largest residual
    after projecting out columns ``0..i-1``.
    """
    k = a.shape[-1]
    out = np.where(keep[..., None, :], a, 0.0)
    eye = np.eye(k)
    for i in range(k):
        fill = ~keep[..., i]
        if not fill.any():
            continue
        q = out[..., :, :i]
        qt = np.swapaxes(q, -1, -2)
        res = eye - q @ qt
        res = res - q @ (qt @ res)
        norms = np.linalg.norm(res, axis=-2)
        best = np.argmax(norms, axis=-1)
        vec = np.take_along_axis(res, best[..., None, None], axis=-1)[..., 0]
        vec = vec / np.take_along_axis(norms, best[..., None], axis=-1)
        out[..., :, i] = np.where(fill[..., None], vec, out[..., :, i])
    return out


def svd(w: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60) -> SvdTriple:
    """One-sided (Hestenes) Jacobi SVD of square blocks, batched over leading dims.

    Sweeps column pairs until every pair is orthogonal to ``tol`` (relative)
    or ``max_sweeps`` is hit. Singular values come back non-increasing.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2 or w.shape[-1] != w.shape[-2]:
        raise MeshError(f"expected square matrices, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise MeshError("svd input contains non-finite entries")
    k = w.shape[-1]
    a = w.copy()
    v = np.broadcast_to(np.eye(k), w.shape).copy()
    pairs = [(i, j) for i in range(k - 1) for j in range(i + 1, k)]
    # columns at rounding level of the block norm count as converged zeros
    floor = 1e-28 * np.einsum("...rc,...rc->...", w, w)
    for _ in range(max_sweeps):
        rotated = False
        for i, j in pairs:
            ai, aj = a[..., :, i], a[..., :, j]
            alpha = np.einsum("...r,...r->...", ai, ai)
            beta = np.einsum("...r,...r->...", aj, aj)
            gamma = np.einsum("...r,...r->...", ai, aj)
            need = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not np.any(need):
                continue
            rotated = True
            g = np.where(need, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(need, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(need, c * t, 0.0)
            c, s = c[..., None], s[..., None]
            ai_new = c * ai - s * aj
            a[..., :, j] = s * ai + c * aj
            a[..., :, i] = ai_new
            vi, vj = v[..., :, i].copy(), v[..., :, j].copy()
            v[..., :, j] = s * vi + c * vj
            v[..., :, i] = c * vi - s * vj
        if not rotated:
            break

    sigma = np.linalg.norm(a, axis=-2)
    order = np.argsort(-sigma, axis=-1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=-1)
    a = np.take_along_axis(a, order[..., None, :], axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    scale = np.max(sigma, axis=-1, keepdims=True)
    keep = sigma > 1e-13 * np.maximum(scale, 1e-300)
    u = a / np.where(keep, sigma, 1.0)[..., None, :]
    sigma = np.where(keep, sigma, 0.0)
    if not keep.all():
        u = _complete_basis(u, keep)
    return SvdTriple(u, sigma, np.swapaxes(v, -1, -2))
