"""Ground-truth access behind the observability firewall.

For tests, diagnostics and reports flagged as oracle values only. Training and
calibration code never imports this module.
"""

from __future__ import annotations

import numpy as np

from .ptc import PTCArray, PTCBlock


def _array(obj) -> PTCArray:
    return obj._array if isinstance(obj, PTCBlock) else obj


def realized_u(obj) -> np.ndarray:
    a = _array(obj)
    return a._u.reshape(a.grid + (a.k, a.k)).copy()


def realized_vh(obj) -> np.ndarray:
    a = _array(obj)
    return a._vh.reshape(a.grid + (a.k, a.k)).copy()


def realized_weight(obj) -> np.ndarray:
    a = _array(obj)
    w = (a._u * a._sigma[:, None, :]) @ a._vh
    return w.reshape(a.grid + (a.k, a.k))


def hidden_state(obj):
    return _array(obj)._hidden


def identity_mse(obj) -> tuple[np.ndarray, np.ndarray]:
    """Per-block ``||abs(U) - I||^2 / k^2`` for both meshes (calibration quality)."""
    a = _array(obj)
    eye = np.eye(a.k)
    mse_u = np.sum((np.abs(a._u) - eye) ** 2, axis=(1, 2)) / a.k**2
    mse_v = np.sum((np.abs(a._vh) - eye) ** 2, axis=(1, 2)) / a.k**2
    return mse_u.reshape(a.grid), mse_v.reshape(a.grid)


def perturbed_sigma(obj, block: int, i: int, h: float):
    """Context-free helper: add ``h`` to realized sigma ``i`` of ``block`` (returns an undo callable)."""
    a = _array(obj)
    old = a._sigma[block, i]
    a._sigma[block, i] = old + h

    def undo():
        a._sigma[block, i] = old

    return undo
