"""Normalized PTC energy (call counts) and time-step accounting.

For a layer with unfolded weight ``C_out x C_in K^2`` on a ``P x Q`` grid of
``k x k`` cores, per training iteration with batch ``B``:

    forward energy   C_out C_in K^2 B H' W'
    weight energy    2 Tr(S_C^T S_C) B P Q
    feedback energy  Tr(S_W^T S_W) B H W

    forward steps    (Q - 1)+ B H' W' + ceil(B H' W' / k)
    weight steps     4 Tr(S_C^T S_C) B
    feedback steps   ceil(C_in / P) ceil(log2 2k) ceil(max_q (sum S_W(q,:) - 1)+ / 2) B H W   (K > 1)
                     max_q (sum S_W(q,:) - 1)+ B H' W'                                         (K = 1)

``Tr(S_C^T S_C)`` is the number of kept im2col columns and ``Tr(S_W^T S_W)``
the number of kept feedback blocks. The K > 1 branch is used verbatim even
though it mixes a channel count with a block-row count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

PHASES = ("forward", "weight_grad", "feedback")


@dataclass(frozen=True)
class LayerDims:
    c_out: int
    c_in: int
    kernel: int = 1
    h_in: int = 1
    w_in: int = 1
    h_out: int = 1
    w_out: int = 1
    k: int = 9

    @property
    def p(self) -> int:
        return -(-self.c_out // self.k)

    @property
    def q(self) -> int:
        return -(-(self.c_in * self.kernel**2) // self.k)

    @classmethod
    def linear(cls, in_features: int, out_features: int, k: int = 9) -> "LayerDims":
        return cls(out_features, in_features, 1, 1, 1, 1, 1, k)

    @classmethod
    def conv(cls, c_in, c_out, kernel, h_in, w_in, stride=1, padding=0, k=9) -> "LayerDims":
        h_out = (h_in + 2 * padding - kernel) // stride + 1
        w_out = (w_in + 2 * padding - kernel) // stride + 1
        return cls(c_out, c_in, kernel, h_in, w_in, h_out, w_out, k)


def _kept_columns(dims: LayerDims, col_mask) -> int:
    return dims.h_out * dims.w_out if col_mask is None else int(np.count_nonzero(col_mask))


def _feedback_mask(dims: LayerDims, fb_mask) -> np.ndarray:
    return np.ones((dims.q, dims.p), dtype=bool) if fb_mask is None else np.asarray(fb_mask, dtype=bool)


def max_row_excess(fb_mask) -> int:
    """``max_q (sum_p S_W(q, p) - 1)+``: the longest extra accumulation path."""
    m = np.asarray(fb_mask, dtype=bool)
    if m.size == 0:
        return 0
    return int(max(0, m.sum(axis=1).max() - 1))


def mean_row_excess(fb_mask) -> float:
    m = np.asarray(fb_mask, dtype=bool)
    return float(np.mean(np.maximum(m.sum(axis=1) - 1, 0)))


def energy(dims: LayerDims, batch: int, col_mask=None, fb_mask=None) -> dict:
    """PTC calls per phase for one iteration."""
    s_w = _feedback_mask(dims, fb_mask)
    return {
        "forward": dims.c_out * dims.c_in * dims.kernel**2 * batch * dims.h_out * dims.w_out,
        "weight_grad": 2 * _kept_columns(dims, col_mask) * batch * dims.p * dims.q,
        "feedback": int(s_w.sum()) * batch * dims.h_in * dims.w_in,
    }


def timesteps(dims: LayerDims, batch: int, col_mask=None, fb_mask=None) -> dict:
    """Accumulation steps per phase for one iteration."""
    s_w = _feedback_mask(dims, fb_mask)
    spatial_out = batch * dims.h_out * dims.w_out
    excess = max_row_excess(s_w)
    if dims.kernel > 1:
        feedback = (
            math.ceil(dims.c_in / dims.p)
            * math.ceil(math.log2(2 * dims.k))
            * math.ceil(excess / 2)
            * batch
            * dims.h_in
            * dims.w_in
        )
    else:
        feedback = excess * spatial_out
    return {
        "forward": max(dims.q - 1, 0) * spatial_out + math.ceil(spatial_out / dims.k),
        "weight_grad": 4 * _kept_columns(dims, col_mask) * batch,
        "feedback": feedback,
    }


def stage_cost(stage: str, layers: int, n: int, k: int, iterations: int, batch: int = 1, h: int = 1, w: int = 1) -> dict:
    """Projected steps and PTC calls of a whole stage (``N x N`` weights in each of ``layers`` layers)."""
    stage = stage.upper()
    if stage == "IC":
        return {"steps": 2 * k * (k - 1) * iterations, "ptc_calls": 2 * layers * n * n * iterations}
    if stage == "PM":
        return {"steps": 2 * layers * n * n * (k - 1) * iterations / k + 3, "ptc_calls": 2 * layers * n * n * iterations}
    if stage == "SL":
        return {"steps": iterations * layers * n * batch * h * w / k, "ptc_calls": None}
    raise ValueError(f"unknown stage {stage!r}; expected IC, PM or SL")


@dataclass
class CostReport:
    """Accumulated energy and steps per phase, optionally compared to a named baseline."""

    energy: dict = field(default_factory=lambda: dict.fromkeys(PHASES, 0))
    steps: dict = field(default_factory=lambda: dict.fromkeys(PHASES, 0))
    baseline_name: str | None = None
    baseline_energy: int | None = None
    baseline_steps: int | None = None

    def add(self, e: dict, s: dict | None = None):
        for key in PHASES:
            self.energy[key] += e.get(key, 0)
            if s is not None:
                self.steps[key] += s.get(key, 0)

    def add_layer(self, dims: LayerDims, batch: int, col_mask=None, fb_mask=None, feedback: bool = True):
        e = energy(dims, batch, col_mask, fb_mask)
        s = timesteps(dims, batch, col_mask, fb_mask)
        if not feedback:
            e["feedback"] = s["feedback"] = 0
        self.add(e, s)

    @property
    def total_energy(self) -> int:
        return sum(self.energy.values())

    @property
    def total_steps(self) -> int:
        return sum(self.steps.values())

    def set_baseline(self, name: str, other: "CostReport"):
        self.baseline_name = name
        self.baseline_energy = other.total_energy
        self.baseline_steps = other.total_steps

    def ratios(self) -> dict:
        if self.baseline_name is None:
            return {}
        return {
            "energy_ratio": self.baseline_energy / self.total_energy if self.total_energy else math.inf,
            "step_ratio": self.baseline_steps / self.total_steps if self.total_steps else math.inf,
        }

    def to_dict(self) -> dict:
        return {
            "energy": dict(self.energy),
            "steps": dict(self.steps),
            "total_energy": self.total_energy,
            "total_steps": self.total_steps,
            "baseline": self.baseline_name,
            **self.ratios(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "energy", "steps", "energy_share", "step_share"])
        te, ts = self.total_energy or 1, self.total_steps or 1
        for key in PHASES:
            w.writerow([key, self.energy[key], self.steps[key], self.energy[key] / te, self.steps[key] / ts])
        w.writerow(["total", self.total_energy, self.total_steps, 1.0, 1.0])
        for key, value in self.ratios().items():
            w.writerow([key, value, "", "", ""])
        return buf.getvalue()
