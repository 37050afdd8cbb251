"""Dense matrices partitioned onto a P x Q grid of photonic tensor cores."""

from __future__ import annotations

import numpy as np

from .noise import NoiseConfig
from .ptc import PTCArray


def grid_shape(out_features: int, in_features: int, k: int) -> tuple[int, int]:
    return -(-out_features // k), -(-in_features // k)


def to_blocks(w: np.ndarray, k: int) -> np.ndarray:
    """Zero-pad an ``M x N`` matrix and split it into ``(P, Q, k, k)`` blocks."""
    w = np.asarray(w, dtype=np.float64)
    m, n = w.shape
    p, q = grid_shape(m, n, k)
    padded = np.zeros((p * k, q * k))
    padded[:m, :n] = w
    return padded.reshape(p, k, q, k).transpose(0, 2, 1, 3)


def from_blocks(blocks: np.ndarray, out_features: int, in_features: int) -> np.ndarray:
    p, q, k, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(p * k, q * k)[:out_features, :in_features]


class BlockedLinear(PTCArray):
    """An ``out_features x in_features`` weight realized by ``P x Q`` cores.

    Inputs are zero-padded up to ``Q k`` features and outputs truncated to
    ``out_features``; padded rows and columns are pinned to zero targets.
    ``energy`` accumulates PTC usage per phase in the profiler's units.
    """

    def __init__(self, in_features: int, out_features: int, k: int = 9, noise: NoiseConfig | None = None, stream=()):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError(f"feature counts must be positive, got {in_features}x{out_features}")
        super().__init__(grid_shape(out_features, in_features, k), k, noise, stream)
        self.energy = {"forward": 0, "weight_grad": 0, "feedback": 0}

    @property
    def p(self) -> int:
        return self.grid[0]

    @property
    def q(self) -> int:
        return self.grid[1]

    @property
    def padding(self) -> tuple[int, int]:
        return self.p * self.k - self.out_features, self.q * self.k - self.in_features

    def real_mask(self) -> np.ndarray:
        """``(P*Q, k, k)`` boolean mask of non-padding entries per block."""
        return to_blocks(np.ones((self.out_features, self.in_features)), self.k).reshape(-1, self.k, self.k) > 0

    def target_blocks(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.out_features, self.in_features):
            raise ValueError(f"target shape {w.shape} does not match layer {(self.out_features, self.in_features)}")
        if not np.all(np.isfinite(w)):
            raise ValueError("target weight contains non-finite entries")
        return to_blocks(w, self.k).reshape(-1, self.k, self.k)

    def set_weight(self, w: np.ndarray, offset: bool = True):
        """Initialize every block from the SVD of its target (no optimization)."""
        self.program_matrices(self.target_blocks(w), offset=offset)

    def measured_weight(self) -> np.ndarray:
        """Dense weight reassembled from basis-vector probes of every block."""
        return from_blocks(self.probe().reshape(self.p, self.q, self.k, self.k), self.out_features, self.in_features)

    def sigma_grid(self) -> np.ndarray:
        return self.read_sigma().reshape(self.p, self.q, self.k)

    def _split(self, x: np.ndarray, features: int, parts: int) -> np.ndarray:
        pad = parts * self.k - features
        if pad:
            x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
        return x.reshape(x.shape[:-1] + (parts, self.k))

    def matmul(self, x: np.ndarray, keep_intermediate: bool = False):
        """``W x`` for a batch ``(B, in_features)``.

        With ``keep_intermediate`` also returns the per-block right-mesh
        responses ``V* x`` of shape ``(B, P, Q, k)`` needed by the subspace
        gradient.
        """
        x = np.asarray(x, dtype=np.float64)
        b = x.shape[0]
        xq = self._split(x, self.in_features, self.q)  # (B, Q, k)
        xin = np.broadcast_to(xq[:, None], (b, self.p, self.q, self.k)).reshape(b, -1, self.k)
        xv = self.adjoint_v(xin).reshape(b, self.p, self.q, self.k)
        self._count("adjoint", -(b * self.nblocks))
        self._count("forward", b * self.nblocks)
        u = self._u.reshape(self.p, self.q, self.k, self.k)
        s = self._sigma.reshape(self.p, self.q, self.k)
        y = np.einsum("pqij,bpqj->bpi", u, xv * s).reshape(b, -1)[:, : self.out_features]
        self.energy["forward"] += b * self.out_features * self.in_features
        return (y, xv) if keep_intermediate else y

    def feedback(self, dy: np.ndarray, mask: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
        """``c_W * sum_{p in S_W(q,:)} W_pq^T dy_p`` via reverse passes; masked blocks are skipped.

        ``mask`` has shape ``(Q, P)`` (one row per input block column).
        """
        dy = np.asarray(dy, dtype=np.float64)
        b = dy.shape[0]
        dyp = self._split(dy, self.out_features, self.p)  # (B, P, k)
        sel = np.ones((self.q, self.p), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if sel.shape != (self.q, self.p):
            raise ValueError(f"feedback mask must have shape {(self.q, self.p)}, got {sel.shape}")
        qq, pp = np.nonzero(sel)
        dx = np.zeros((b, self.q, self.k))
        if len(qq):
            flat = pp * self.q + qq
            z = self.backward(dyp[:, pp], flat)  # (B, n_sel, k)
            np.add.at(dx, (slice(None), qq), z)
        self.energy["feedback"] += int(sel.sum()) * b
        return scale * dx.reshape(b, -1)[:, : self.in_features]

    def sigma_grad(self, xv: np.ndarray, dy: np.ndarray, columns: int | None = None) -> np.ndarray:
        """Subspace gradient per block, ``sum_b (U^T dy_p) * (V* x_q)``; shape ``(P*Q, k)``.

        ``xv`` are the right-mesh responses recorded by :meth:`matmul` for the
        same columns. ``columns`` is the number of kept columns charged to the
        profiler (defaults to the batch size).
        """
        dy = np.asarray(dy, dtype=np.float64)
        b = dy.shape[0]
        dyp = self._split(dy, self.out_features, self.p)
        dyin = np.broadcast_to(dyp[:, :, None], (b, self.p, self.q, self.k)).reshape(b, -1, self.k)
        uz = self.adjoint_u(dyin)
        g = np.einsum("bnk,bnk->nk", uz, xv.reshape(b, -1, self.k))
        self._count("adjoint", b * self.nblocks)  # the right-mesh pass of the gradient acquisition
        self.energy["weight_grad"] += 2 * (b if columns is None else columns) * self.nblocks
        return g

    def reset_energy(self):
        self.energy = {key: 0 for key in self.energy}
