"""Multi-level sparsity for subspace training: feedback blocks, im2col columns, whole iterations.

Every density ``alpha`` here is the fraction *kept*.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

FEEDBACK_MODES = ("uniform", "topk", "btopk", "none")
NORM_MODES = ("none", "exp", "var")


class SamplingConfigError(ValueError):
    pass


def _check_density(name: str, value: float):
    if not 0 < value <= 1:
        raise SamplingConfigError(f"{name} must lie in (0, 1], got {value}")


@dataclass(frozen=True)
class SamplingPlan:
    feedback_mode: str = "btopk"
    alpha_w: float = 1.0
    feedback_norm: str = "exp"
    column_alpha_c: float = 1.0
    column_norm: str = "none"
    data_alpha_d: float = 1.0
    stochastic_btopk: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.feedback_mode not in FEEDBACK_MODES:
            raise SamplingConfigError(f"feedback_mode must be one of {FEEDBACK_MODES}, got {self.feedback_mode!r}")
        for name in ("feedback_norm", "column_norm"):
            if getattr(self, name) not in NORM_MODES:
                raise SamplingConfigError(f"{name} must be one of {NORM_MODES}, got {getattr(self, name)!r}")
        _check_density("alpha_w", self.alpha_w)
        _check_density("column_alpha_c", self.column_alpha_c)
        _check_density("data_alpha_d", self.data_alpha_d)

    @classmethod
    def dense(cls, seed: int = 0) -> "SamplingPlan":
        return cls("none", 1.0, "none", 1.0, "none", 1.0, False, seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingPlan":
        return cls(**d)


def normalization(kept: int, total: int, alpha: float, mode: str) -> float:
    """Scale applied to a sampled sum: none 1, exp ``total/kept``, var ``1/sqrt(alpha)``."""
    if kept == 0 or mode == "none":
        return 1.0
    if mode == "exp":
        return total / kept
    if mode == "var":
        return 1.0 / math.sqrt(alpha)
    raise SamplingConfigError(f"unknown normalization {mode!r}")


def _top_indices(values: np.ndarray, count: int) -> np.ndarray:
    # stable sort on -value: ties go to the lower index
    return np.argsort(-values, kind="stable")[:count]


def build_feedback_mask(norms: np.ndarray, plan: SamplingPlan, rng: np.random.Generator | None = None):
    """Feedback mask ``S_W`` of shape ``(Q, P)`` and its scale.

    ``norms`` holds per-block squared Frobenius norms on the same ``(Q, P)``
    grid (available on chip as ``sum(sigma**2)``).
    """
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 2:
        raise SamplingConfigError(f"norm grid must be 2-D (Q, P), got shape {norms.shape}")
    if np.any(norms < 0):
        raise SamplingConfigError("block norms must be non-negative")
    q, p = norms.shape
    if plan.feedback_mode == "none" or plan.alpha_w == 1:
        return np.ones((q, p), dtype=bool), 1.0
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    mask = np.zeros((q, p), dtype=bool)
    per_row = math.ceil(plan.alpha_w * p)
    if plan.feedback_mode == "topk":
        mask.flat[_top_indices(norms.ravel(), math.ceil(plan.alpha_w * p * q))] = True
    elif plan.feedback_mode == "uniform":
        for r in range(q):
            mask[r, rng.choice(p, size=per_row, replace=False)] = True
    elif plan.stochastic_btopk:
        for r in range(q):
            w = norms[r]
            prob = w / w.sum() if w.sum() > 0 and np.count_nonzero(w) >= per_row else None
            mask[r, rng.choice(p, size=per_row, replace=False, p=prob)] = True
    else:
        for r in range(q):
            mask[r, _top_indices(norms[r], per_row)] = True
    scale = normalization(int(mask.sum()), p * q, plan.alpha_w, plan.feedback_norm)
    return mask, scale


def build_column_mask(h_out: int, w_out: int, alpha_c: float, rng: np.random.Generator) -> np.ndarray:
    """Keep ``ceil(alpha_c * H'W')`` uniformly chosen im2col columns (shared across the batch)."""
    _check_density("alpha_c", alpha_c)
    n = int(h_out) * int(w_out)
    mask = np.zeros(n, dtype=bool)
    if alpha_c == 1:
        mask[:] = True
    else:
        mask[rng.choice(n, size=math.ceil(alpha_c * n), replace=False)] = True
    return mask


def keep_iteration(alpha_d: float, rng: np.random.Generator) -> bool:
    """Stochastic mini-batch dropping: keep an iteration with probability ``alpha_d``."""
    return alpha_d == 1 or bool(rng.random() < alpha_d)


@dataclass(frozen=True)
class GradFidelity:
    angular_similarity: float
    normalized_distance: float

    @classmethod
    def compare(cls, true, approx) -> "GradFidelity":
        g = np.ravel(np.asarray(true, dtype=np.float64))
        h = np.ravel(np.asarray(approx, dtype=np.float64))
        return cls(angular_similarity(g, h), float(np.sum((g - h) ** 2) / np.sum(g**2)))


def angular_similarity(a, b) -> float:
    """``1 - arccos(cos angle) / pi``; 1 for positively parallel vectors, 0 for opposite ones."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(1 - np.arccos(np.clip(cos, -1.0, 1.0)) / np.pi)
