"""A tour of one photonic tensor core.

A k x k block stores W = U diag(sigma) V*, where U and V* are triangular
meshes of 2-D rotators. We decompose a random orthogonal matrix into mesh
phases, rebuild it, and then watch what quantization, device variation and
thermal crosstalk do to the realized matrix as the block grows.

Run:  python3 demos/01_mesh_and_noise.py
"""

import numpy as np

from ptclearn import mesh, oracle
from ptclearn.blocked import BlockedLinear, from_blocks
from ptclearn.noise import NoiseConfig

rng = np.random.default_rng(0)

# 1. exact round trip through the phase representation
q, r = np.linalg.qr(rng.standard_normal((9, 9)))
u = q * np.sign(np.diag(r))
phases = mesh.decompose_unitary(u)
print(f"9x9 mesh: {phases.phis.size} phases, diagonal {phases.d.astype(int)}")
print(f"round-trip residual: {np.abs(mesh.reconstruct_unitary(phases) - u).max():.2e}")

# 2. the same weight realized on noisy hardware, for several block sizes
w = rng.standard_normal((128, 128))
print("\nblock  quant-only  all-noise  (relative matrix error)")
for k in (4, 8, 9, 16, 32):
    row = []
    for cfg in (NoiseConfig(gamma_std=0.0, crosstalk_factor=0.0, phase_bias_enabled=False), NoiseConfig(phase_bias_enabled=False)):
        layer = BlockedLinear(128, 128, k, cfg)
        layer.set_weight(w, offset=False)
        realized = from_blocks(oracle.realized_weight(layer), 128, 128)
        row.append(np.linalg.norm(realized - w) / np.linalg.norm(w))
    print(f"{k:5d}  {row[0]:10.4f}  {row[1]:9.4f}")

# 3. with the hidden phase bias switched on, nothing works until calibration
layer = BlockedLinear(18, 18, 9, NoiseConfig())
layer.set_weight(w[:18, :18], offset=False)
realized = from_blocks(oracle.realized_weight(layer), 18, 18)
print(f"\nuncalibrated block with phase bias: error {np.linalg.norm(realized - w[:18, :18]) / np.linalg.norm(w[:18, :18]):.3f}")
