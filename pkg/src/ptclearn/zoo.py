"""Zeroth-order phase optimizers: coordinate descent (ZCD), three-point (ZTP) and ZO gradient descent (ZGD).

All optimizers are batched over independent problems ("blocks"). An
objective takes a parameter array ``(m, n)`` plus the block ids ``(m,)`` the
rows belong to and returns ``m`` losses; it is only ever called on the blocks
that need a fresh evaluation, so call counts are exact.

Each optimizer keeps a :class:`BestRecord` of the best point it has
*evaluated*, so recording never costs an extra objective call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TWO_PI


class ZooError(ArithmeticError):
    """The objective returned a non-finite value."""


@dataclass(frozen=True)
class ZooSchedule:
    """Step-size schedule bounded by the phase control resolution."""

    init_step: float = 0.1
    decay: float = 0.99
    step_upper: float = TWO_PI / 15
    step_lower: float = TWO_PI / 255

    def __post_init__(self):
        if not 0 < self.step_lower <= self.step_upper:
            raise ValueError(f"need 0 < step_lower <= step_upper, got {self.step_lower}, {self.step_upper}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if not self.init_step > 0:
            raise ValueError(f"init_step must be positive, got {self.init_step}")

    @classmethod
    def for_bitwidth(cls, bits: int, init_step: float = 0.1, decay: float = 0.99, coarse_bits: int = 4, fine_bits: int | None = None):
        """Bounds ``2pi/(2^min(b_l, b) - 1)`` and ``2pi/(2^min(b_m, b) - 1)``."""
        fine = bits if fine_bits is None else fine_bits
        if min(coarse_bits, bits, fine) < 1:
            raise ValueError(f"bitwidths must be >= 1, got {bits}, {coarse_bits}, {fine}")
        upper = TWO_PI / (2.0 ** min(coarse_bits, bits) - 1)
        lower = TWO_PI / (2.0 ** min(fine, bits) - 1)
        return cls(init_step, decay, upper, lower)

    @property
    def first_step(self) -> float:
        return float(np.clip(self.init_step, self.step_lower, self.step_upper))

    def next_step(self, step):
        return np.maximum(step * self.decay, self.step_lower)

    def to_dict(self) -> dict:
        return {"init_step": self.init_step, "decay": self.decay, "step_upper": self.step_upper, "step_lower": self.step_lower}


@dataclass
class BestRecord:
    """Best loss seen so far and the parameters that produced it (one row per block)."""

    best_loss: np.ndarray
    best_params: np.ndarray

    @classmethod
    def start(cls, loss, params) -> "BestRecord":
        return cls(np.array(loss, dtype=np.float64), np.array(params, dtype=np.float64))

    def update(self, loss, params, idx=None):
        loss = np.asarray(loss, dtype=np.float64)
        idx = np.arange(len(self.best_loss)) if idx is None else np.asarray(idx)
        better = loss < self.best_loss[idx]
        if np.any(better):
            self.best_loss[idx[better]] = loss[better]
            self.best_params[idx[better]] = params[better]


def _check(loss, what: str) -> np.ndarray:
    loss = np.asarray(loss, dtype=np.float64)
    if not np.all(np.isfinite(loss)):
        bad = np.flatnonzero(~np.isfinite(loss))
        raise ZooError(f"objective returned non-finite loss during {what} (rows {bad.tolist()})")
    return loss


class _ZerothOrder:
    """Shared state: current point, cached loss, per-block step size and call counter."""

    name = "zo"

    def __init__(self, objective, params, schedule: ZooSchedule | None = None, best: bool = True):
        self.objective = objective
        self.schedule = schedule or ZooSchedule()
        self.params = np.array(params, dtype=np.float64, ndmin=2)
        m = self.params.shape[0]
        self.blocks = np.arange(m)
        self.step_size = np.full(m, self.schedule.first_step)
        self.calls = np.zeros(m, dtype=np.int64)
        self.record = None
        self.loss = self._eval(self.params, self.blocks, "initial evaluation")
        if best:
            self.record = BestRecord.start(self.loss, self.params)

    def _eval(self, params, idx, what):
        self.calls[idx] += 1
        loss = _check(self.objective(params, idx), what)
        if self.record is not None:
            self.record.update(loss, params, idx)
        return loss

    def restore_best(self):
        """Move to the best recorded point (its loss is known, so no call is spent)."""
        if self.record is None:
            return
        self.params = self.record.best_params.copy()
        self.loss = self.record.best_loss.copy()


class ZCD(_ZerothOrder):
    """Coordinate descent exactly as in the mapping algorithm.

    Try ``+step`` on one sampled coordinate; keep it if the loss improves,
    otherwise move by ``-step`` unconditionally, then decay the step.
    """

    name = "zcd"

    def step(self, coords):
        coords = np.asarray(coords, dtype=int)
        rows = self.blocks
        delta = np.zeros_like(self.params)
        delta[rows, coords] = self.step_size
        trial = self.params + delta
        trial_loss = self._eval(trial, rows, "ZCD trial")
        better = trial_loss < self.loss
        new = np.where(better[:, None], trial, self.params - delta)
        new_loss = trial_loss.copy()
        rej = np.flatnonzero(~better)
        if len(rej):
            new_loss[rej] = self._eval(new[rej], rej, "ZCD minus branch")
        self.params, self.loss = new, new_loss
        self.step_size = self.schedule.next_step(self.step_size)


class ZTP(_ZerothOrder):
    """Three-point rule: keep the best of ``{x, x + step, x - step}`` on one coordinate."""

    name = "ztp"

    def step(self, coords):
        coords = np.asarray(coords, dtype=int)
        delta = np.zeros_like(self.params)
        delta[self.blocks, coords] = self.step_size
        plus = self.params + delta
        minus = self.params - delta
        lp = self._eval(plus, self.blocks, "ZTP plus")
        lm = self._eval(minus, self.blocks, "ZTP minus")
        cand = np.stack([self.loss, lp, lm])
        # ties keep the current point
        pick = np.argmin(cand, axis=0)
        self.params = np.choose(pick[:, None], [self.params, plus, minus])
        self.loss = cand[pick, self.blocks]
        self.step_size = self.schedule.next_step(self.step_size)


class ZGD(_ZerothOrder):
    """ZO gradient descent with momentum and symmetric random-direction estimates.

    ``g = n * mean_s (L(x + d u_s) - L(x - d u_s)) / (2 d) * u_s`` with unit-norm
    Gaussian ``u_s``; the factor ``n`` makes it unbiased for linear losses.
    """

    name = "zgd"

    def __init__(self, objective, params, schedule=None, best=True, lr: float = 0.01, momentum: float = 0.9, samples: int = 1):
        if samples < 1:
            raise ValueError(f"samples must be >= 1, got {samples}")
        super().__init__(objective, params, schedule, best)
        self.lr = lr
        self.momentum = momentum
        self.samples = samples
        self.velocity = np.zeros_like(self.params)

    def estimate(self, directions):
        """Gradient estimate from ``directions`` of shape ``(samples, m, n)`` (normalized here)."""
        u = np.asarray(directions, dtype=np.float64)
        u = u / np.linalg.norm(u, axis=-1, keepdims=True)
        n = self.params.shape[1]
        d = self.step_size[:, None]
        g = np.zeros_like(self.params)
        for us in u:
            lp = self._eval(self.params + d * us, self.blocks, "ZGD plus")
            lm = self._eval(self.params - d * us, self.blocks, "ZGD minus")
            g += ((lp - lm) / (2 * self.step_size))[:, None] * us
        return n * g / len(u)

    def step(self, directions):
        g = self.estimate(directions)
        self.velocity = self.momentum * self.velocity + g
        self.params = self.params - self.lr * self.velocity
        # the new point's loss is unknown until the next evaluation; keep the
        # best evaluated neighbour as the reference value
        self.loss = np.full_like(self.loss, np.nan)
        self.step_size = self.schedule.next_step(self.step_size)


OPTIMIZERS = {"zcd": ZCD, "ztp": ZTP, "zgd": ZGD}


def _scalar_objective(objective):
    def batched(params, idx):
        return np.array([float(objective(p)) for p in params])

    return batched


def zcd_step(objective, phis, schedule: ZooSchedule, coord: int, step: float | None = None):
    """One literal ZCD update of a single vector; returns ``(new_phis, new_step, calls)``."""
    phis = np.array(phis, dtype=np.float64)
    d = schedule.first_step if step is None else step
    base = _check(objective(phis), "ZCD")
    trial = phis.copy()
    trial[coord] += d
    new = trial if _check(objective(trial), "ZCD trial") < base else phis - np.eye(len(phis))[coord] * d
    return new, float(schedule.next_step(d)), 2


def ztp_step(objective, phis, schedule: ZooSchedule, coord: int, step: float | None = None):
    """One three-point update of a single vector; returns ``(new_phis, new_step, calls)``."""
    phis = np.array(phis, dtype=np.float64)
    d = schedule.first_step if step is None else step
    e = np.eye(len(phis))[coord] * d
    cands = [phis, phis + e, phis - e]
    losses = [_check(objective(c), "ZTP") for c in cands]
    return cands[int(np.argmin(losses))], float(schedule.next_step(d)), 3


def zgd_step(objective, phis, schedule: ZooSchedule, rng, velocity=None, lr=0.01, momentum=0.9, samples=1, step=None):
    """One ZGD update of a single vector; returns ``(new_phis, velocity, gradient_estimate, calls)``."""
    phis = np.array(phis, dtype=np.float64)
    d = schedule.first_step if step is None else step
    n = len(phis)
    g = np.zeros(n)
    for _ in range(samples):
        u = rng.standard_normal(n)
        u /= np.linalg.norm(u)
        g += (_check(objective(phis + d * u), "ZGD") - _check(objective(phis - d * u), "ZGD")) / (2 * d) * u
    g *= n / samples
    v = g if velocity is None else momentum * velocity + g
    return phis - lr * v, v, g, 2 * samples
