import json

import numpy as np
import pytest

from ptclearn import mesh, oracle
from ptclearn.noise import NoiseConfig
from ptclearn.ptc import PhaseProgram, PTCArray, PTCBlock, SignFlipMatrix, sigma_to_phases

IDEAL = NoiseConfig.ideal()


def orth(k, rng):
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


class TestForward:
    def test_identity_program(self):
        blk = PTCBlock(5, IDEAL, PhaseProgram.identity(5))
        blk.set_program(PhaseProgram(blk.program.phi_u, blk.program.phi_v, np.zeros(5), 1.0))
        x = np.arange(5.0)
        np.testing.assert_allclose(blk.forward(x), x, atol=1e-8)

    def test_single_large_value(self):
        w = np.zeros((9, 9))
        w[0, 0] = 2.0
        blk = PTCBlock(9, IDEAL, PhaseProgram.from_matrix(w))
        np.testing.assert_allclose(blk.forward(np.eye(9)[0]), 2 * np.eye(9)[0], atol=1e-8)

    def test_random_matches_dense(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((9, 9))
        blk = PTCBlock(9, IDEAL, PhaseProgram.from_matrix(w))
        x = rng.standard_normal((4, 9))
        np.testing.assert_allclose(blk.forward(x), x @ w.T, atol=1e-8)

    def test_counts_calls(self):
        blk = PTCBlock(3, IDEAL)
        blk.forward(np.ones((6, 3)))
        blk.probe()
        assert blk.calls["forward"] == 6 and blk.calls["probe"] == 3


class TestReciprocity:
    def test_identity_adjoint(self):
        blk = PTCBlock(4, IDEAL)
        z = np.array([1.0, -2.0, 3.0, 0.5])
        np.testing.assert_allclose(blk.adjoint_u(z), z, atol=1e-8)

    def test_adjoint_inverts_mesh(self):
        rng = np.random.default_rng(1)
        u = orth(6, rng)
        p = mesh.decompose_unitary(u)
        blk = PTCBlock(6, IDEAL, PhaseProgram(p, mesh.UnitaryPhases.identity(6), np.zeros(6), 1.0))
        x = rng.standard_normal(6)
        np.testing.assert_allclose(blk.adjoint_u(blk.forward(x)), x, atol=1e-8)

    def test_noisy_mesh_still_orthogonal(self):
        arr = PTCArray((3,), 9, NoiseConfig(seed=4))
        arr.set_unitary_phases("u", np.random.default_rng(2).uniform(0, 2 * np.pi, (3, 36)))
        u = oracle.realized_u(arr)
        np.testing.assert_allclose(np.swapaxes(u, 1, 2) @ u, np.broadcast_to(np.eye(9), u.shape), atol=1e-9)
        # the adjoint port uses the same realized mesh
        z = np.random.default_rng(3).standard_normal((3, 9))
        np.testing.assert_allclose(arr.adjoint_u(z), np.einsum("nji,nj->ni", u, z), atol=1e-12)


class TestSigma:
    def test_reparametrization(self):
        phi, scale = sigma_to_phases(np.array([2.0, 1.0, 0.0, -1.0]))
        assert scale == 2.0
        np.testing.assert_allclose(phi, [0, np.pi / 3, np.pi / 2, 2 * np.pi / 3])

    def test_zero_block(self):
        phi, scale = sigma_to_phases(np.zeros(3))
        assert scale == 1.0
        np.testing.assert_allclose(phi, np.pi / 2)

    def test_write_read(self):
        arr = PTCArray((2,), 3, NoiseConfig(bitwidth_sigma=32))
        arr.set_sigma([[0.5, -0.25, 0.125], [1, 2, 3]])
        np.testing.assert_allclose(arr.read_sigma(), [[0.5, -0.25, 0.125], [1, 2, 3]], atol=1e-8)


class TestOSP:
    def test_identity_meshes(self):
        blk = PTCBlock(2, IDEAL)
        np.testing.assert_allclose(blk.osp_project(np.diag([2.0, 3.0])), [2, 3], atol=1e-8)

    def test_sign_flips_cancel(self):
        hidden = PTCBlock(2, IDEAL)._array._hidden.with_sign_flip([1.0, -1.0])
        blk = PTCBlock(2, IDEAL, hidden=hidden)
        np.testing.assert_allclose(blk.osp_project(np.diag([2.0, 3.0])), [2, 3], atol=1e-8)

    def test_least_squares_optimal(self):
        rng = np.random.default_rng(5)
        u, v, w = orth(3, rng), orth(3, rng), rng.standard_normal((3, 3))
        prog = PhaseProgram(mesh.decompose_unitary(u), mesh.decompose_unitary(v.T), np.zeros(3), 1.0)
        blk = PTCBlock(3, IDEAL, prog)
        sigma = blk.osp_project(w, ideal_passes=True)
        np.testing.assert_allclose(sigma, [u[:, i] @ w @ v[:, i] for i in range(3)], atol=1e-8)

        def err(s):
            return np.linalg.norm(u @ np.diag(s) @ v.T - w)

        base = err(sigma)
        for i in range(3):
            for h in (1e-3, -1e-3, 0.1, -0.1):
                s = sigma.copy()
                s[i] += h
                assert err(s) > base

    def test_two_pass_matches_ideal_when_references_exact(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((4, 4))
        blk = PTCBlock(4, IDEAL, PhaseProgram.from_matrix(rng.standard_normal((4, 4))))
        a = blk.osp_project(w, ideal_passes=True)
        b = blk.osp_project(w, ideal_passes=False)
        np.testing.assert_allclose(a, b, atol=1e-8)


class TestSubspaceGrad:
    def test_finite_difference(self):
        rng = np.random.default_rng(7)
        blk = PTCBlock(5, IDEAL, PhaseProgram.from_matrix(rng.standard_normal((5, 5))))
        x, t = rng.standard_normal(5), rng.standard_normal(5)
        y = blk.forward(x)
        grad = blk.subspace_grad(x, y - t)
        h = 1e-5
        for i in range(5):
            losses = []
            for sign in (1, -1):
                undo = oracle.perturbed_sigma(blk, 0, i, sign * h)
                losses.append(0.5 * np.sum((blk.forward(x) - t) ** 2))
                undo()
            fd = (losses[0] - losses[1]) / (2 * h)
            np.testing.assert_allclose(grad[i], fd, rtol=1e-5, atol=1e-9)

    def test_zero_input(self):
        blk = PTCBlock(4, NoiseConfig())
        np.testing.assert_array_equal(blk.subspace_grad(np.zeros(4), np.ones(4)), 0.0)

    def test_row_column_sign_flip_invariance(self):
        rng = np.random.default_rng(8)
        base = PTCBlock(4, IDEAL, PhaseProgram.from_matrix(rng.standard_normal((4, 4))))
        hidden = base._array._hidden.with_sign_flip([1.0, -1.0, -1.0, 1.0])
        flipped = PTCBlock(4, IDEAL, base.program, hidden=hidden)
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(flipped.forward(x), base.forward(x), atol=1e-12)
        np.testing.assert_allclose(flipped.subspace_grad(x, x), base.subspace_grad(x, x), atol=1e-12)


class TestProgram:
    def test_json_round_trip(self):
        prog = PhaseProgram.from_matrix(np.random.default_rng(9).standard_normal((3, 3)))
        back = PhaseProgram.from_json(prog.to_json())
        np.testing.assert_array_equal(back.phi_u.phis, prog.phi_u.phis)
        np.testing.assert_array_equal(back.phi_sigma, prog.phi_sigma)
        assert back.sigma_scale == prog.sigma_scale

    def test_k_mismatch(self):
        d = PhaseProgram.identity(3).to_dict()
        d["k"] = 4
        with pytest.raises(ValueError):
            PhaseProgram.from_dict(d)

    def test_array_checkpoint(self):
        rng = np.random.default_rng(10)
        a = PTCArray((2, 2), 3, NoiseConfig(seed=1))
        a.program_matrices(rng.standard_normal((4, 3, 3)), offset=False)
        a.mark_calibrated()
        b = PTCArray((2, 2), 3, NoiseConfig(seed=1))
        b.load_dict(json.loads(json.dumps(a.to_dict())))
        np.testing.assert_array_equal(b.probe(), a.probe())
        np.testing.assert_array_equal(b.ref_u, a.ref_u)

    def test_sign_flip_matrix(self):
        s = SignFlipMatrix([1, -1, -1])
        np.testing.assert_array_equal((s @ s).signs, 1.0)
        np.testing.assert_array_equal(s @ np.ones((3, 2)), [[1, 1], [-1, -1], [-1, -1]])
        with pytest.raises(ValueError):
            SignFlipMatrix([1, 2])


class TestFirewall:
    def test_no_public_realized_state(self):
        arr = PTCArray((2,), 3)
        public = {name for name in vars(arr) if not name.startswith("_")}
        assert not public & {"u", "vh", "sigma", "hidden"}

    def test_oracle_weight_matches_probe(self):
        arr = PTCArray((3,), 4, NoiseConfig(seed=2))
        arr.program_matrices(np.random.default_rng(11).standard_normal((3, 4, 4)))
        np.testing.assert_allclose(oracle.realized_weight(arr), arr.probe(), atol=1e-14)
