"""Photonic tensor core simulation behind an observability firewall.

A core realizes ``W = U diag(sigma) V*`` with two triangular MZI meshes and a
column of attenuators. Callers program phases and may only observe optical
port vectors and the monitored attenuator values; realized mesh matrices and
the hidden manufacturing state live in underscore attributes. Verification
code that needs them goes through :mod:`ptclearn.oracle`.

:class:`PTCArray` simulates a whole grid of cores at once; every method takes
an optional ``index`` of flat block ids to restrict work to a subset.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

import numpy as np

from . import mesh
from .mesh import UnitaryPhases, num_phases
from .noise import HiddenNoiseState, NoiseConfig, effective_sigma, effective_unitary_phases, quantize_phase


@dataclass
class PhaseProgram:
    """Programmed phases of one k x k core; the only user-controllable state."""

    phi_u: UnitaryPhases
    phi_v: UnitaryPhases
    phi_sigma: np.ndarray
    sigma_scale: float

    def __post_init__(self):
        self.phi_sigma = np.asarray(self.phi_sigma, dtype=np.float64)
        self.sigma_scale = float(self.sigma_scale)
        if not self.sigma_scale > 0:
            raise ValueError(f"sigma_scale must be positive, got {self.sigma_scale}")
        if self.phi_sigma.shape != (self.k,) or self.phi_v.k != self.k:
            raise ValueError("phase program dimensions disagree")

    @property
    def k(self) -> int:
        return self.phi_u.k

    @classmethod
    def identity(cls, k: int) -> "PhaseProgram":
        return cls(UnitaryPhases.identity(k), UnitaryPhases.identity(k), np.zeros(k), 1.0)

    @classmethod
    def from_matrix(cls, w: np.ndarray) -> "PhaseProgram":
        """Exact (noise-free) program for ``w`` via SVD and mesh decomposition."""
        t = mesh.svd(w)
        phi_sigma, scale = sigma_to_phases(t.sigma)
        return cls(mesh.decompose_unitary(t.u), mesh.decompose_unitary(t.v_t), phi_sigma, float(scale))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "phi_u": self.phi_u.phis.tolist(),
            "d_u": self.phi_u.d.tolist(),
            "phi_v": self.phi_v.phis.tolist(),
            "d_v": self.phi_v.d.tolist(),
            "phi_sigma": self.phi_sigma.tolist(),
            "sigma_scale": self.sigma_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseProgram":
        prog = cls(
            UnitaryPhases(d["phi_u"], d["d_u"]),
            UnitaryPhases(d["phi_v"], d["d_v"]),
            d["phi_sigma"],
            d["sigma_scale"],
        )
        if prog.k != int(d["k"]):
            raise ValueError(f"checkpoint says k={d['k']} but phases imply k={prog.k}")
        return prog

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PhaseProgram":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SignFlipMatrix:
    """Diagonal +-1 matrix; its own inverse."""

    signs: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.signs, dtype=np.float64)
        if not np.all(np.abs(s) == 1):
            raise ValueError("sign-flip entries must be +-1")
        object.__setattr__(self, "signs", s)

    def matrix(self) -> np.ndarray:
        return np.diag(self.signs)

    def __matmul__(self, other):
        if isinstance(other, SignFlipMatrix):
            return SignFlipMatrix(self.signs * other.signs)
        return self.signs[:, None] * np.asarray(other)


def sigma_to_phases(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attenuator re-parametrization: ``phi_S = arccos(sigma / max|sigma|)``.

    An all-zero block gets scale 1 and every phase at pi/2. Negative values
    stay negative (phi_S in (pi/2, pi]).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    scale = np.max(np.abs(sigma), axis=-1)
    zero = scale == 0
    scale = np.where(zero, 1.0, scale)
    phi = np.arccos(np.clip(sigma / scale[..., None], -1.0, 1.0))
    phi = np.where(zero[..., None], np.pi / 2, phi)
    return phi, scale


class PTCArray:
    """A grid of independently programmed photonic tensor cores.

    Programmed state (``phi_u``, ``d_u``, ``phi_v``, ``d_v``, ``phi_sigma``,
    ``sigma_scale``) is stored flat over blocks; ``grid`` gives the logical
    shape. ``ref_u``/``ref_v`` hold the programs that realized an identity
    (up to sign flips) at the last calibration and serve as zero references.
    """

    def __init__(self, grid, k: int = 9, noise: NoiseConfig | None = None, stream=(), hidden: HiddenNoiseState | None = None):
        if not 2 <= k <= 32:
            raise ValueError(f"block size must be in [2, 32], got {k}")
        self.grid = tuple(int(g) for g in grid)
        self.k = k
        self.noise = noise if noise is not None else NoiseConfig()
        nb = int(np.prod(self.grid)) if self.grid else 1
        n = num_phases(k)
        if hidden is None:
            hidden = HiddenNoiseState.draw(self.noise, k, self.grid, tuple(stream))
        if hidden.grid != self.grid:
            raise ValueError(f"hidden state grid {hidden.grid} does not match {self.grid}")
        self._hidden = hidden
        self._flat_hidden = {
            "gamma_u": hidden.gamma_u.reshape(nb, n),
            "gamma_v": hidden.gamma_v.reshape(nb, n),
            "bias_u": hidden.bias_u.reshape(nb, n),
            "bias_v": hidden.bias_v.reshape(nb, n),
            "sign": hidden.sign_flip.reshape(nb, k),
        }
        self.nblocks = nb
        self.phi_u = np.zeros((nb, n))
        self.d_u = np.ones((nb, k))
        self.phi_v = np.zeros((nb, n))
        self.d_v = np.ones((nb, k))
        self.phi_sigma = np.zeros((nb, k))
        self.sigma_scale = np.ones(nb)
        self.ref_u = np.zeros((nb, n))
        self.ref_v = np.zeros((nb, n))
        self.calls = {"forward": 0, "adjoint": 0, "probe": 0, "osp": 0}
        self._lock = threading.Lock()
        self._u = np.empty((nb, k, k))
        self._vh = np.empty((nb, k, k))
        self._sigma = np.empty((nb, k))
        self._refresh_all()

    def _count(self, key: str, n: int):
        # blocks may be optimized from several threads; counters are shared
        with self._lock:
            self.calls[key] += n

    # -- programming -----------------------------------------------------
    def _idx(self, index) -> np.ndarray:
        if index is None:
            return np.arange(self.nblocks)
        return np.atleast_1d(np.asarray(index, dtype=int))

    def _realize(self, which: str, phis: np.ndarray, d: np.ndarray, idx: np.ndarray) -> np.ndarray:
        h = self._flat_hidden
        eff = effective_unitary_phases(
            phis, h["gamma_" + which][idx], h["bias_" + which][idx], self._hidden.crosstalk, self.noise.bitwidth_unitary
        )
        m = mesh.reconstruct(eff, d)
        sign = h["sign"][idx]
        # hidden sign flips sit on the inner side: columns of U, rows of V*
        return m * sign[:, None, :] if which == "u" else m * sign[:, :, None]

    def _refresh_all(self):
        idx = self._idx(None)
        self._u[idx] = self._realize("u", self.phi_u, self.d_u, idx)
        self._vh[idx] = self._realize("v", self.phi_v, self.d_v, idx)
        self._sigma[idx] = effective_sigma(self.phi_sigma, self.sigma_scale, self.noise.bitwidth_sigma)

    def set_unitary_phases(self, which: str, phis, index=None, d=None):
        """Program the U (``which='u'``) or V* (``'v'``) mesh of the selected blocks."""
        idx = self._idx(index)
        phis = np.broadcast_to(np.asarray(phis, dtype=np.float64), (len(idx), num_phases(self.k)))
        if which == "u":
            self.phi_u[idx] = phis
            if d is not None:
                self.d_u[idx] = d
            self._u[idx] = self._realize("u", self.phi_u[idx], self.d_u[idx], idx)
        elif which == "v":
            self.phi_v[idx] = phis
            if d is not None:
                self.d_v[idx] = d
            self._vh[idx] = self._realize("v", self.phi_v[idx], self.d_v[idx], idx)
        else:
            raise ValueError(f"which must be 'u' or 'v', got {which!r}")

    def set_sigma_phases(self, phi_sigma, sigma_scale, index=None):
        idx = self._idx(index)
        self.phi_sigma[idx] = phi_sigma
        self.sigma_scale[idx] = sigma_scale
        self._sigma[idx] = effective_sigma(self.phi_sigma[idx], self.sigma_scale[idx], self.noise.bitwidth_sigma)

    def set_sigma(self, values, index=None):
        """Write attenuator values through the arccos re-parametrization (quantized on realization)."""
        idx = self._idx(index)
        phi, scale = sigma_to_phases(np.broadcast_to(values, (len(idx), self.k)))
        self.set_sigma_phases(phi, scale, idx)

    def program(self, block: int) -> PhaseProgram:
        return PhaseProgram(
            UnitaryPhases(self.phi_u[block].copy(), self.d_u[block].copy()),
            UnitaryPhases(self.phi_v[block].copy(), self.d_v[block].copy()),
            self.phi_sigma[block].copy(),
            float(self.sigma_scale[block]),
        )

    def set_program(self, block: int, prog: PhaseProgram):
        if prog.k != self.k:
            raise ValueError(f"program is for k={prog.k}, array has k={self.k}")
        self.set_unitary_phases("u", prog.phi_u.phis, [block], prog.phi_u.d)
        self.set_unitary_phases("v", prog.phi_v.phis, [block], prog.phi_v.d)
        self.set_sigma_phases(prog.phi_sigma, prog.sigma_scale, [block])

    def program_matrices(self, w: np.ndarray, index=None, offset: bool = True):
        """Program SVD-derived phases for target blocks ``w`` of shape ``(len(index), k, k)``.

        With ``offset`` the calibrated reference phases are added, so the
        programmed mesh lands on the target relative to the calibrated
        identity instead of relative to the raw (biased) device.
        """
        idx = self._idx(index)
        t = mesh.svd(np.asarray(w, dtype=np.float64).reshape(len(idx), self.k, self.k))
        pu = mesh.decompose_unitary(t.u)
        pv = mesh.decompose_unitary(t.v_t)
        base_u = self.ref_u[idx] if offset else 0.0
        base_v = self.ref_v[idx] if offset else 0.0
        self.set_unitary_phases("u", pu.phis + base_u, idx, pu.d)
        self.set_unitary_phases("v", pv.phis + base_v, idx, pv.d)
        self.set_sigma(t.sigma, idx)

    def mark_calibrated(self, index=None):
        """Record the current mesh programs as the identity reference."""
        idx = self._idx(index)
        self.ref_u[idx] = self.phi_u[idx]
        self.ref_v[idx] = self.phi_v[idx]

    # -- optical passes --------------------------------------------------
    def read_sigma(self, index=None) -> np.ndarray:
        """Monitored attenuator values of the selected blocks."""
        return self._sigma[self._idx(index)].copy()

    def forward(self, x, index=None) -> np.ndarray:
        """Per-block ``U Sigma V* x`` for inputs shaped ``(..., len(index), k)``."""
        idx = self._idx(index)
        x = np.asarray(x, dtype=np.float64)
        self._count("forward", int(np.prod(x.shape[:-1])))
        xv = np.einsum("nij,...nj->...ni", self._vh[idx], x)
        return np.einsum("nij,...nj->...ni", self._u[idx], xv * self._sigma[idx])

    def adjoint_u(self, z, index=None) -> np.ndarray:
        """Reverse propagation through the U mesh: ``U^T z`` (reciprocity)."""
        idx = self._idx(index)
        z = np.asarray(z, dtype=np.float64)
        self._count("adjoint", int(np.prod(z.shape[:-1])))
        return np.einsum("nji,...nj->...ni", self._u[idx], z)

    def adjoint_v(self, x, index=None) -> np.ndarray:
        """Response of the V* mesh to ``x``: the right factor seen by the subspace gradient."""
        idx = self._idx(index)
        x = np.asarray(x, dtype=np.float64)
        self._count("adjoint", int(np.prod(x.shape[:-1])))
        return np.einsum("nij,...nj->...ni", self._vh[idx], x)

    def backward(self, z, index=None) -> np.ndarray:
        """Full reverse pass ``W^T z = V*^T Sigma U^T z`` per block."""
        idx = self._idx(index)
        z = np.asarray(z, dtype=np.float64)
        self._count("adjoint", int(np.prod(z.shape[:-1])))
        zu = np.einsum("nji,...nj->...ni", self._u[idx], z)
        return np.einsum("nji,...nj->...ni", self._vh[idx], zu * self._sigma[idx])

    def probe(self, index=None) -> np.ndarray:
        """Transfer matrices measured by shining the k basis vectors through each block."""
        idx = self._idx(index)
        self._count("probe", len(idx) * self.k)
        return (self._u[idx] * self._sigma[idx][:, None, :]) @ self._vh[idx]

    def subspace_grad(self, x, dy, index=None) -> np.ndarray:
        """In-situ attenuator gradient ``sum_batch (U^T dy) * (V* x)``; sign flips cancel."""
        g = self.adjoint_u(dy, index) * self.adjoint_v(x, index)
        return g.reshape((-1,) + g.shape[-2:]).sum(axis=0)

    def osp_project(self, w_target, index=None, ideal_passes: bool = False) -> np.ndarray:
        """Optimal singular-value projection for fixed meshes; returns the projected values.

        The two-pass procedure runs the target through the reciprocal core:
        with V* set to its calibrated reference and Sigma = I, ``W`` enters the
        output ports and ``~I U^T W`` leaves the inputs; then with U at its
        reference the adjoint field is sent forward and the diagonal read out.
        Sign flips of a common calibration cancel on that diagonal. With
        ``ideal_passes`` the reference meshes are taken as exact identities.
        """
        idx = self._idx(index)
        w = np.asarray(w_target, dtype=np.float64).reshape(len(idx), self.k, self.k)
        u, vh = self._u[idx], self._vh[idx]
        if ideal_passes:
            sigma = np.einsum("nji,njl,nil->ni", u, w, vh)
        else:
            ref_vh = self._realize("v", self.ref_v[idx], np.ones((len(idx), self.k)), idx)
            ref_u = self._realize("u", self.ref_u[idx], np.ones((len(idx), self.k)), idx)
            first = np.swapaxes(u @ ref_vh, -1, -2) @ w
            second = (ref_u @ vh) @ np.swapaxes(first, -1, -2)
            sigma = np.diagonal(second, axis1=-2, axis2=-1).copy()
        self._count("osp", 2 * len(idx) * self.k)
        self.set_sigma(sigma, idx)
        return sigma

    # -- checkpointing ---------------------------------------------------
    def to_dict(self) -> dict:
        blocks = []
        for b, pos in enumerate(np.ndindex(*self.grid)):
            entry = self.program(b).to_dict()
            entry["index"] = list(pos)
            entry["ref_u"] = self.ref_u[b].tolist()
            entry["ref_v"] = self.ref_v[b].tolist()
            blocks.append(entry)
        return {"grid": list(self.grid), "k": self.k, "blocks": blocks}

    def load_dict(self, d: dict):
        if tuple(d["grid"]) != self.grid or int(d["k"]) != self.k:
            raise ValueError(f"checkpoint grid {d['grid']}/k={d['k']} does not match {self.grid}/k={self.k}")
        for b, entry in enumerate(d["blocks"]):
            self.set_program(b, PhaseProgram.from_dict(entry))
            self.ref_u[b] = entry.get("ref_u", np.zeros(num_phases(self.k)))
            self.ref_v[b] = entry.get("ref_v", np.zeros(num_phases(self.k)))


class PTCBlock:
    """A single core with vector-level port access."""

    def __init__(self, k: int = 9, noise: NoiseConfig | None = None, program: PhaseProgram | None = None, stream=(), hidden=None):
        self._array = PTCArray((), k, noise, stream, hidden)
        if program is not None:
            self.set_program(program)

    @property
    def k(self) -> int:
        return self._array.k

    @property
    def noise(self) -> NoiseConfig:
        return self._array.noise

    @property
    def program(self) -> PhaseProgram:
        return self._array.program(0)

    @property
    def calls(self) -> dict:
        return self._array.calls

    def set_program(self, program: PhaseProgram):
        self._array.set_program(0, program)

    def forward(self, x) -> np.ndarray:
        return self._array.forward(np.asarray(x)[..., None, :])[..., 0, :]

    def adjoint_u(self, z) -> np.ndarray:
        return self._array.adjoint_u(np.asarray(z)[..., None, :])[..., 0, :]

    def adjoint_v(self, x) -> np.ndarray:
        return self._array.adjoint_v(np.asarray(x)[..., None, :])[..., 0, :]

    def read_sigma(self) -> np.ndarray:
        return self._array.read_sigma()[0]

    def probe(self) -> np.ndarray:
        return self._array.probe()[0]

    def osp_project(self, w_target, ideal_passes: bool = False) -> np.ndarray:
        return self._array.osp_project(np.asarray(w_target)[None], ideal_passes=ideal_passes)[0]

    def subspace_grad(self, x, dy) -> np.ndarray:
        return self._array.subspace_grad(np.asarray(x)[..., None, :], np.asarray(dy)[..., None, :])[0]


def quantized_sigma_error(sigma, bits: int) -> np.ndarray:
    """Worst-case realized-value error of writing ``sigma`` at ``bits`` resolution (diagnostic)."""
    phi, scale = sigma_to_phases(sigma)
    return np.abs(scale[..., None] * np.cos(quantize_phase(phi, bits)) - sigma)
