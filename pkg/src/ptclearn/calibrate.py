"""Identity calibration and parallel mapping, batched over every block of an array.

Both stages only observe blocks through basis-vector probes and the monitored
attenuators. Randomness for block ``b`` in epoch ``t`` comes from
``default_rng([*seed, stage, b, t])``, with ``seed`` an int or a tuple of
ints, so results do not depend on how blocks are batched or split across
workers.
"""

from __future__ import annotations

import csv
import io
import json
import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np

from .mesh import num_phases
from .ptc import PTCArray
from .zoo import OPTIMIZERS, ZooSchedule

STAGE_IC = 1
STAGE_PM = 2


class PreconditionError(ValueError):
    pass


def ic_sigma(k: int) -> np.ndarray:
    """Fixed, distinct, non-zero attenuator setting used during calibration: ``(k - i)/k``."""
    return (k - np.arange(k)) / k


def _chunks(n: int, workers: int):
    workers = max(1, min(int(workers), n))
    return np.array_split(np.arange(n), workers)


@dataclass
class _ChunkResult:
    params: np.ndarray
    best_loss: np.ndarray
    calls: np.ndarray
    counters: dict
    history: np.ndarray  # (epochs, blocks) best loss after each epoch
    call_history: np.ndarray  # (epochs, blocks) cumulative objective calls


_TASK = None  # (fn, chunks) inherited by forked workers


def _run_task(i: int) -> _ChunkResult:
    fn, chunks = _TASK
    return fn(chunks[i])


def _run_chunks(array: PTCArray, index: np.ndarray, fn, workers: int) -> list:
    """Run ``fn`` on contiguous chunks of ``index``; forked processes when ``workers > 1``.

    Chunks own disjoint blocks and draw from per-block generators, so the
    outcome is identical for any ``workers``. Worker results (final phases,
    call counters) are written back into ``array`` here.
    """
    global _TASK
    chunks = [index[c] for c in _chunks(len(index), workers)]
    if len(chunks) == 1 or "fork" not in mp.get_all_start_methods():
        results = [fn(c) for c in chunks]
        remote = False
    else:
        _TASK = (fn, chunks)
        try:
            with mp.get_context("fork").Pool(len(chunks)) as pool:
                results = pool.map(_run_task, range(len(chunks)))
        finally:
            _TASK = None
        remote = True
    n = num_phases(array.k)
    for sub, res in zip(chunks, results):
        array.set_unitary_phases("u", res.params[:, :n], sub)
        array.set_unitary_phases("v", res.params[:, n:], sub)
        if remote:
            for key, value in res.counters.items():
                array._count(key, value)
    return list(zip(chunks, results))


class _MeshObjective:
    """Loss of candidate mesh phases ``[phi_u | phi_v]`` for the given blocks, via probing."""

    def __init__(self, array: PTCArray, index: np.ndarray, loss):
        self.array = array
        self.index = index
        self.loss = loss
        self.n = num_phases(array.k)

    def __call__(self, params, rows):
        idx = self.index[rows]
        a = self.array
        pu, pv = params[:, : self.n], params[:, self.n :]
        if not np.array_equal(pu, a.phi_u[idx]):
            a.set_unitary_phases("u", pu, idx)
        if not np.array_equal(pv, a.phi_v[idx]):
            a.set_unitary_phases("v", pv, idx)
        return self.loss(a.probe(idx), rows)


def _zo_alternating(array, index, loss, optimizer, schedule, epochs, seed, stage, opt_kwargs):
    """Alternate full ZO sweeps over U coordinates and V coordinates from the current phases."""
    n = num_phases(array.k)
    key = [int(s) for s in np.atleast_1d(seed)]
    before = dict(array.calls)
    obj = _MeshObjective(array, index, loss)
    start = np.concatenate([array.phi_u[index], array.phi_v[index]], axis=1)
    opt = OPTIMIZERS[optimizer](obj, start, schedule, **opt_kwargs)
    m = len(index)
    history = np.empty((epochs, m))
    call_history = np.empty((epochs, m), dtype=np.int64)
    for t in range(epochs):
        rngs = [np.random.default_rng([*key, stage, int(b), t]) for b in index]
        for offset in (0, n):
            if optimizer == "zgd":
                dirs = np.zeros((1, m, 2 * n))
                dirs[0, :, offset : offset + n] = np.stack([r.standard_normal(n) for r in rngs])
                opt.step(dirs)
                continue
            coords = np.stack([r.integers(0, n, size=n) for r in rngs]) + offset
            for s in range(n):
                opt.step(coords[:, s])
        history[t] = opt.record.best_loss
        call_history[t] = opt.calls
    opt.restore_best()
    counters = {key: array.calls[key] - before[key] for key in before}
    return _ChunkResult(opt.params, opt.record.best_loss, opt.calls, counters, history, call_history)


def _trace_rows(history, call_history) -> list:
    if history is None or len(history) == 0:
        return []
    return [(t + 1, int(call_history[t].sum()), float(history[t].mean())) for t in range(len(history))]


@dataclass
class CalibrationReport:
    loss: np.ndarray
    calls: np.ndarray
    epochs: int
    optimizer: str
    history: np.ndarray | None = None
    call_history: np.ndarray | None = None

    def trace_rows(self) -> list:
        """``(epoch, total objective calls, mean best loss)`` per epoch."""
        return _trace_rows(self.history, self.call_history)

    def to_dict(self) -> dict:
        return {
            "stage": "IC",
            "optimizer": self.optimizer,
            "epochs": self.epochs,
            "loss": self.loss.tolist(),
            "calls": self.calls.tolist(),
        }


def identity_calibrate(
    array: PTCArray,
    optimizer: str = "zcd",
    schedule: ZooSchedule | None = None,
    epochs: int = 400,
    seed: int = 0,
    index=None,
    sigma=None,
    workers: int = 1,
    **opt_kwargs,
) -> CalibrationReport:
    """Tune both meshes of every block towards a sign-flip matrix.

    Minimizes ``||W Sigma^-1 - I||^2`` with ``Sigma`` held at a known distinct
    diagonal, keeps the best evaluated point, then records the result as the
    blocks' identity reference.
    """
    k = array.k
    idx = array._idx(index)
    sigma = ic_sigma(k) if sigma is None else np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (k,) or np.any(sigma == 0) or len(np.unique(np.abs(sigma))) != k:
        raise PreconditionError("calibration sigma must have k distinct non-zero magnitudes")
    schedule = schedule or ZooSchedule.for_bitwidth(array.noise.bitwidth_unitary)
    array.set_sigma(sigma, idx)
    inv = 1.0 / array.read_sigma(idx)
    eye = np.eye(k)

    def loss(w, rows):
        return np.sum((w * inv[rows][:, None, :] - eye) ** 2, axis=(1, 2))

    losses = np.empty(len(idx))
    calls = np.empty(len(idx), dtype=np.int64)
    history = np.empty((epochs, len(idx)))
    call_history = np.empty((epochs, len(idx)), dtype=np.int64)
    pos = {int(b): i for i, b in enumerate(idx)}

    def run(sub):
        rows = np.array([pos[int(b)] for b in sub])
        return _zo_alternating(array, sub, lambda w, r: loss(w, rows[r]), optimizer, schedule, epochs, seed, STAGE_IC, opt_kwargs)

    for sub, res in _run_chunks(array, idx, run, workers):
        rows = [pos[int(b)] for b in sub]
        losses[rows] = res.best_loss
        calls[rows] = res.calls
        history[:, rows] = res.history
        call_history[:, rows] = res.call_history
    array.mark_calibrated(idx)
    return CalibrationReport(losses, calls, epochs, optimizer, history, call_history)


@dataclass
class MappingReport:
    """Per-block normalized distances ``||W - W~||^2 / ||W||^2`` over non-padding entries."""

    grid: tuple
    dist_init: np.ndarray
    dist_before: np.ndarray
    dist_after: np.ndarray
    calls: np.ndarray
    converged: np.ndarray
    zero_blocks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    dist_osp: np.ndarray | None = None
    osp_kept: np.ndarray | None = None
    history: np.ndarray | None = None
    call_history: np.ndarray | None = None

    def trace_rows(self) -> list:
        return _trace_rows(self.history, self.call_history)

    @property
    def mean_after(self) -> float:
        return float(np.mean(self.dist_after))

    def to_dict(self) -> dict:
        return {
            "stage": "PM",
            "grid": list(self.grid),
            "dist_init": self.dist_init.tolist(),
            "dist_before": self.dist_before.tolist(),
            "dist_after": self.dist_after.tolist(),
            "calls": self.calls.tolist(),
            "converged": self.converged.tolist(),
            "dist_osp": None if self.dist_osp is None else self.dist_osp.tolist(),
            "osp_kept": None if self.osp_kept is None else self.osp_kept.tolist(),
            "mean_dist_after": self.mean_after,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "dist_before", "dist_after", "calls"])
        for b, pos in enumerate(np.ndindex(*self.grid)):
            row, col = (pos + (0, 0))[:2] if len(pos) < 2 else pos[-2:]
            w.writerow([row, col, repr(float(self.dist_before[b])), repr(float(self.dist_after[b])), int(self.calls[b])])
        return buf.getvalue()


def _distance(measured, target, mask):
    diff = np.where(mask, measured - target, 0.0)
    norm = np.sum(np.where(mask, target, 0.0) ** 2, axis=(1, 2))
    return np.sum(diff**2, axis=(1, 2)) / np.where(norm > 0, norm, 1.0)


def parallel_map(
    array: PTCArray,
    target_blocks: np.ndarray,
    optimizer: str = "zcd",
    schedule: ZooSchedule | None = None,
    epochs: int = 300,
    seed: int = 0,
    ideal_osp: bool = False,
    mask: np.ndarray | None = None,
    workers: int = 1,
    osp_guard: bool = True,
    offset: bool = True,
    **opt_kwargs,
) -> MappingReport:
    """Map ``target_blocks`` (``(nblocks, k, k)``) onto the array.

    SVD initialization relative to the calibrated reference, alternating ZO
    sweeps on the U and V meshes against the probed regression loss, then an
    optical singular-value projection. All-zero blocks skip the ZO stage.

    ``offset`` programs the SVD phases on top of the calibrated reference
    phases; without it they are programmed as absolute settings.

    With ``osp_guard`` each block is probed once more after the projection
    and keeps its previous attenuators if the measured loss went up; the
    raw projected distance is still reported as ``dist_osp``.
    """
    k = array.k
    w = np.asarray(target_blocks, dtype=np.float64).reshape(array.nblocks, k, k)
    if not np.all(np.isfinite(w)):
        raise PreconditionError("mapping target contains non-finite entries")
    mask = np.ones_like(w, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(w.shape)
    schedule = schedule or ZooSchedule.for_bitwidth(array.noise.bitwidth_unitary)
    all_idx = np.arange(array.nblocks)
    array.program_matrices(w, all_idx, offset=offset)
    dist_init = _distance(array.probe(), w, mask)
    zero = ~np.any(w != 0, axis=(1, 2))
    active = all_idx[~zero]
    norms = np.sum(w**2, axis=(1, 2))
    calls = np.zeros(array.nblocks, dtype=np.int64)
    history = np.zeros((epochs, array.nblocks))
    call_history = np.zeros((epochs, array.nblocks), dtype=np.int64)

    def loss(measured, rows):
        return np.sum((measured - w[rows]) ** 2, axis=(1, 2)) / norms[rows]

    if epochs > 0 and len(active):

        def run(sub):
            return _zo_alternating(array, sub, lambda m_, r: loss(m_, sub[r]), optimizer, schedule, epochs, seed, STAGE_PM, opt_kwargs)

        for sub, res in _run_chunks(array, active, run, workers):
            calls[sub] = res.calls
            history[:, sub] = res.history
            call_history[:, sub] = res.call_history
    dist_before = _distance(array.probe(), w, mask)
    phi_sigma, scale = array.phi_sigma.copy(), array.sigma_scale.copy()
    array.osp_project(w, ideal_passes=ideal_osp)
    dist_osp = _distance(array.probe(), w, mask)
    kept = np.ones(array.nblocks, dtype=bool)
    if osp_guard:
        kept = dist_osp <= dist_before
        revert = np.flatnonzero(~kept)
        if len(revert):
            array.set_sigma_phases(phi_sigma[revert], scale[revert], revert)
    dist_after = np.where(kept, dist_osp, dist_before)
    converged = dist_after <= dist_before
    return MappingReport(
        tuple(array.grid), dist_init, dist_before, dist_after, calls, converged, zero, dist_osp, kept, history, call_history
    )
