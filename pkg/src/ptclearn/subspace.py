"""Subspace learning: first-order training of the attenuators only, with sparse sampling.

Mesh phases stay frozen; each kept iteration runs a forward pass, sparse
error feedback through reverse optical passes, in-situ attenuator gradients
and an AdamW step on the realized singular values.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .blocked import BlockedLinear
from .cost import CostReport
from .data import Split, batches
from .nn import AdamW, NumericalAbort, Sequential, cosine_lr, softmax_cross_entropy
from .sampling import SamplingPlan, build_column_mask, keep_iteration

STAGE_SL = 3


def sparse_error_feedback(layer: BlockedLinear, dy: np.ndarray, mask=None, scale: float = 1.0) -> np.ndarray:
    """``c_W`` times the masked reverse-pass sum; masked-out blocks cost nothing."""
    return layer.feedback(dy, mask, scale)


def subspace_weight_grad(layer: BlockedLinear, x_cols: np.ndarray, dy_cols: np.ndarray, column_mask=None, column_norm: str = "none") -> np.ndarray:
    """Attenuator gradients ``(P*Q, k)`` accumulated over the kept columns.

    ``x_cols``/``dy_cols`` are ``(columns, features)`` with columns grouped per
    sample as ``(B, L)`` when ``column_mask`` of length ``L`` is given.
    """
    x_cols = np.asarray(x_cols, dtype=np.float64)
    dy_cols = np.asarray(dy_cols, dtype=np.float64)
    scale = 1.0
    if column_mask is not None:
        keep = np.asarray(column_mask, dtype=bool)
        L = len(keep)
        x_cols = x_cols.reshape(-1, L, x_cols.shape[-1])[:, keep].reshape(-1, x_cols.shape[-1])
        dy_cols = dy_cols.reshape(-1, L, dy_cols.shape[-1])[:, keep].reshape(-1, dy_cols.shape[-1])
        alpha = keep.mean()
        scale = {"none": 1.0, "exp": 1 / alpha, "var": 1 / math.sqrt(alpha)}[column_norm] if alpha > 0 else 0.0
    if len(x_cols) == 0:
        return np.zeros((layer.nblocks, layer.k))
    # right-mesh pass for the kept columns (the forward intermediate is not stored on chip)
    b = x_cols.shape[0]
    xq = layer._split(x_cols, layer.in_features, layer.q)
    xin = np.broadcast_to(xq[:, None], (b, layer.p, layer.q, layer.k)).reshape(b, -1, layer.k)
    xv = layer.adjoint_v(xin)
    layer._count("adjoint", -(b * layer.nblocks))  # sigma_grad charges both passes
    return scale * layer.sigma_grad(xv, dy_cols)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    acc: float
    ptc_energy: int
    steps: int
    skipped_batches: int
    lr: float = 0.0
    test_loss: float = math.nan
    test_acc: float = math.nan

    def row(self) -> list:
        return [
            self.epoch,
            repr(self.loss),
            repr(self.acc),
            repr(self.test_loss),
            repr(self.test_acc),
            self.ptc_energy,
            self.steps,
            self.skipped_batches,
            repr(self.lr),
        ]


METRIC_HEADER = ["epoch", "loss", "acc", "test_loss", "test_acc", "ptc_energy", "steps", "skipped_batches", "lr"]


def metrics_csv(rows: list[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_HEADER)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()


def evaluate(model: Sequential, split: Split, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and accuracy (inference passes are not charged to training energy)."""
    energy = [dict(layer.ptc.energy) for layer in model.photonic_layers]
    calls = [dict(layer.ptc.calls) for layer in model.photonic_layers]
    total, correct = 0.0, 0
    for idx in batches(len(split), batch_size):
        logits = model.forward(split.x[idx])
        loss, _ = softmax_cross_entropy(logits, split.y[idx])
        total += loss * len(idx)
        correct += int(np.sum(np.argmax(logits, axis=1) == split.y[idx]))
    for layer, e, c in zip(model.photonic_layers, energy, calls):
        layer.ptc.energy, layer.ptc.calls = e, c
    return total / len(split), correct / len(split)


def _state_dump(model: Sequential) -> dict:
    return {f"layer{i}": layer.ptc.to_dict() for i, layer in enumerate(model.photonic_layers)}


def train_epoch(
    model: Sequential,
    data: Split,
    plan: SamplingPlan,
    optimizer: AdamW,
    epoch: int = 0,
    total_epochs: int = 1,
    batch_size: int = 32,
    seed: int = 0,
    train_electronic: bool = True,
    lr_min: float = 0.0,
    max_steps: int | None = None,
    cost: CostReport | None = None,
    baseline: CostReport | None = None,
) -> EpochMetrics:
    """One epoch of subspace learning; returns the epoch's training metrics.

    Each iteration is kept with probability ``plan.data_alpha_d``; the
    learning rate follows a cosine schedule over ``total_epochs``. When
    given, ``cost`` is charged per kept iteration with the masks actually
    drawn, and ``baseline`` with dense masks for every iteration.
    """
    model.configure_sampling(plan, seed, STAGE_SL)
    rng = np.random.default_rng([seed, STAGE_SL, epoch])
    lr = cosine_lr(epoch, total_epochs, optimizer.lr, lr_min)
    dims = model.profile_dims(data.x.shape[1:]) if (cost is not None or baseline is not None) else []
    before = model.energy()
    loss_sum, correct, seen, steps, skipped = 0.0, 0, 0, 0, 0
    for idx in batches(len(data), batch_size, rng):
        if max_steps is not None and steps >= max_steps:
            break
        if baseline is not None:
            for d, feedback in dims:
                baseline.add_layer(d, len(idx), feedback=feedback)
        if not keep_iteration(plan.data_alpha_d, rng):
            skipped += 1
            continue
        logits = model.forward(data.x[idx], train=True)
        loss, grad = softmax_cross_entropy(logits, data.y[idx])
        if not math.isfinite(loss):
            err = NumericalAbort(f"non-finite loss at epoch {epoch}, step {steps}")
            err.state = _state_dump(model)
            raise err
        model.backward(grad)
        if cost is not None:
            for (d, _), layer in zip(dims, model.photonic_layers):
                col_mask, fb_mask, feedback = layer.last_masks
                cost.add_layer(d, len(idx), col_mask, fb_mask, feedback=feedback)
        optimizer.step_model(model, lr, train_electronic)
        loss_sum += loss * len(idx)
        correct += int(np.sum(np.argmax(logits, axis=1) == data.y[idx]))
        seen += len(idx)
        steps += 1
    after = model.energy()
    energy = sum(after[key] - before[key] for key in after)
    return EpochMetrics(epoch, loss_sum / max(seen, 1), correct / max(seen, 1), energy, steps, skipped, lr)


def feedback_column_mask(h_out, w_out, plan: SamplingPlan, seed: int, layer: int, step: int):
    """The column mask a photonic conv layer draws at ``step`` (for profiling replays)."""
    if plan.column_alpha_c == 1:
        return np.ones(h_out * w_out, dtype=bool)
    return build_column_mask(h_out, w_out, plan.column_alpha_c, np.random.default_rng([seed, STAGE_SL, layer, step, 1]))


def metrics_dict(m: EpochMetrics) -> dict:
    return asdict(m)
