"""Circuit non-ideality: phase quantization, shifter variation, crosstalk, phase bias.

Programmed unitary phases become effective phases through

    effective = Omega @ (Gamma * Q_b(phi)) + phi_bias

while the attenuator (Sigma) phases are only quantized, at a finer bitwidth,
because they are the one monitored and closed-loop tuned part of a core.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .mesh import TWO_PI, num_phases


class NoiseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    bitwidth_unitary: int = 8
    bitwidth_sigma: int = 16
    gamma_std: float = 0.002
    crosstalk_factor: float = 0.005
    phase_bias_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("bitwidth_unitary", "bitwidth_sigma"):
            b = getattr(self, name)
            if not (isinstance(b, (int, np.integer)) and 1 <= b <= 32):
                raise NoiseConfigError(f"{name} must be an integer in [1, 32], got {b!r}")
        if not self.gamma_std >= 0:
            raise NoiseConfigError(f"gamma_std must be >= 0, got {self.gamma_std}")
        if not 0 <= self.crosstalk_factor < 1:
            raise NoiseConfigError(f"crosstalk_factor must lie in [0, 1), got {self.crosstalk_factor}")

    @classmethod
    def ideal(cls, seed: int = 0) -> "NoiseConfig":
        """Everything off; 32-bit quantization is the only residual effect."""
        return cls(32, 32, 0.0, 0.0, False, seed)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise NoiseConfigError(f"unknown noise keys: {sorted(unknown)}")
        return cls(**d)


def quantize_phase(phi, bits: int):
    """Uniform b-bit phase quantization over [0, 2pi], rounding half away from zero."""
    if bits < 1:
        raise NoiseConfigError(f"bits must be >= 1, got {bits}")
    levels = 2.0**bits - 1.0
    x = np.mod(np.asarray(phi, dtype=np.float64), TWO_PI) * levels / TWO_PI
    # x >= 0, so half-away-from-zero is floor(x + 1/2)
    return np.floor(x + 0.5) * (TWO_PI / levels)


def crosstalk_matrix(n: int, factor: float) -> np.ndarray:
    """Coupling matrix for a 1-D chain of ``n`` MZIs: unit self-coupling, ``factor`` to each chain neighbour."""
    omega = np.eye(n)
    idx = np.arange(n - 1)
    omega[idx, idx + 1] = factor
    omega[idx + 1, idx] = factor
    return omega


@dataclass(frozen=True)
class HiddenNoiseState:
    """Frozen manufacturing state for a grid of blocks (leading shape ``grid``).

    ``sign_flip`` is ground truth for tests only: it is folded onto the inner
    side of both meshes (columns of U, rows of V*) and is never observable.
    """

    gamma_u: np.ndarray
    gamma_v: np.ndarray
    bias_u: np.ndarray
    bias_v: np.ndarray
    crosstalk: np.ndarray
    sign_flip: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            getattr(self, f.name).setflags(write=False)

    @property
    def grid(self) -> tuple[int, ...]:
        return self.gamma_u.shape[:-1]

    @classmethod
    def draw(cls, cfg: NoiseConfig, k: int, grid: tuple[int, ...] = (), stream: tuple[int, ...] = ()) -> "HiddenNoiseState":
        """Draw per-block variations; block ``idx`` uses seed ``(cfg.seed, *stream, *idx)``.

        Draws are made whether or not a given effect is enabled, so toggling one
        effect never reshuffles the others.
        """
        n = num_phases(k)
        gamma = np.empty(grid + (2, n))
        bias = np.empty(grid + (2, n))
        for idx in np.ndindex(*grid):
            rng = np.random.default_rng([int(cfg.seed), *map(int, stream), *idx])
            gamma[idx] = 1.0 + rng.normal(0.0, 1.0, size=(2, n)) * cfg.gamma_std
            bias[idx] = rng.uniform(0.0, TWO_PI, size=(2, n))
        if not cfg.phase_bias_enabled:
            bias[...] = 0.0
        return cls(
            gamma_u=gamma[..., 0, :].copy(),
            gamma_v=gamma[..., 1, :].copy(),
            bias_u=bias[..., 0, :].copy(),
            bias_v=bias[..., 1, :].copy(),
            crosstalk=crosstalk_matrix(n, cfg.crosstalk_factor),
            sign_flip=np.ones(grid + (k,)),
        )

    def with_sign_flip(self, signs: np.ndarray) -> "HiddenNoiseState":
        signs = np.broadcast_to(np.asarray(signs, dtype=np.float64), self.sign_flip.shape).copy()
        if not np.all(np.abs(signs) == 1):
            raise NoiseConfigError("sign flips must be +-1")
        return HiddenNoiseState(
            *(np.array(getattr(self, f.name)) for f in fields(self) if f.name != "sign_flip"), sign_flip=signs
        )

    def select(self, index) -> "HiddenNoiseState":
        """Sub-grid view (e.g. a single block) of the hidden state."""
        return HiddenNoiseState(
            np.array(self.gamma_u[index]),
            np.array(self.gamma_v[index]),
            np.array(self.bias_u[index]),
            np.array(self.bias_v[index]),
            np.array(self.crosstalk),
            np.array(self.sign_flip[index]),
        )


def effective_unitary_phases(phis, gamma, bias, crosstalk, bits: int) -> np.ndarray:
    """Programmed -> effective mesh phases, batched over leading dims."""
    varied = np.asarray(gamma) * quantize_phase(phis, bits)
    # elementwise reduction rather than a BLAS product: the result of one
    # block must not depend on how many blocks are evaluated together
    return np.sum(varied[..., None, :] * np.asarray(crosstalk), axis=-1) + bias


def effective_sigma(phi_sigma, sigma_scale, bits: int) -> np.ndarray:
    """Realized attenuator values ``scale * cos(Q(phi_S))``."""
    return np.asarray(sigma_scale)[..., None] * np.cos(quantize_phase(phi_sigma, bits))


@dataclass
class EffectivePhases:
    u: np.ndarray
    v: np.ndarray
    sigma: np.ndarray


def apply_noise(program, state: HiddenNoiseState, cfg: NoiseConfig) -> EffectivePhases:
    """Effective phases of a :class:`~ptclearn.ptc.PhaseProgram` under ``state``.

    ``sigma`` in the result holds realized attenuator values, not phases.
    """
    if program.phi_u.phis.shape[-1] != state.gamma_u.shape[-1] or program.phi_v.phis.shape[-1] != state.gamma_v.shape[-1]:
        raise NoiseConfigError(
            f"program has {program.phi_u.phis.shape[-1]} phases per mesh, hidden state expects {state.gamma_u.shape[-1]}"
        )
    u = effective_unitary_phases(program.phi_u.phis, state.gamma_u, state.bias_u, state.crosstalk, cfg.bitwidth_unitary)
    v = effective_unitary_phases(program.phi_v.phis, state.gamma_v, state.bias_v, state.crosstalk, cfg.bitwidth_unitary)
    sigma = effective_sigma(program.phi_sigma, program.sigma_scale, cfg.bitwidth_sigma)
    return EffectivePhases(u, v, sigma)
