import numpy as np
import pytest

from ptclearn import noise
from ptclearn.mesh import num_phases


class TestQuantize:
    def test_zero(self):
        assert noise.quantize_phase(0.0, 8) == 0.0

    def test_full_turn_wraps(self):
        assert noise.quantize_phase(2 * np.pi, 8) == 0.0

    def test_half_rounds_away_from_zero(self):
        assert noise.quantize_phase(np.pi, 2) == pytest.approx(4 * np.pi / 3, abs=1e-12)
        assert noise.quantize_phase(np.pi, 2) == pytest.approx(4.18879, abs=1e-5)

    def test_error_bounded_by_half_step(self):
        phi = np.random.default_rng(0).uniform(0, 2 * np.pi, 1000)
        step = 2 * np.pi / 255
        q = noise.quantize_phase(phi, 8)
        assert np.max(np.abs(q - phi)) <= step / 2 + 1e-12

    def test_rejects_zero_bits(self):
        with pytest.raises(noise.NoiseConfigError):
            noise.quantize_phase(1.0, 0)


class TestEffectivePhases:
    def test_all_off_is_near_identity(self):
        cfg = noise.NoiseConfig.ideal()
        st = noise.HiddenNoiseState.draw(cfg, 4)
        phi = np.random.default_rng(1).uniform(0, 2 * np.pi, 6)
        eff = noise.effective_unitary_phases(phi, st.gamma_u, st.bias_u, st.crosstalk, 32)
        np.testing.assert_allclose(eff, phi, atol=1e-8)

    def test_crosstalk_pair(self):
        omega = noise.crosstalk_matrix(2, 0.005)
        eff = noise.effective_unitary_phases([0.7, 1.9], np.ones(2), np.zeros(2), omega, 32)
        np.testing.assert_allclose(eff, [0.7 + 0.005 * 1.9, 1.9 + 0.005 * 0.7], atol=1e-8)

    def test_zero_variation(self):
        eff = noise.effective_unitary_phases([1.25], np.ones(1), np.zeros(1), np.eye(1), 32)
        np.testing.assert_allclose(eff, [1.25], atol=1e-8)

    def test_crosstalk_matrix_chain(self):
        np.testing.assert_array_equal(noise.crosstalk_matrix(3, 0.1), [[1, 0.1, 0], [0.1, 1, 0.1], [0, 0.1, 1]])

    def test_batch_invariance(self):
        cfg = noise.NoiseConfig(seed=5)
        st = noise.HiddenNoiseState.draw(cfg, 9, (7,))
        phi = np.random.default_rng(2).uniform(0, 2 * np.pi, (7, 36))
        full = noise.effective_unitary_phases(phi, st.gamma_u, st.bias_u, st.crosstalk, 8)
        for b in range(7):
            one = noise.effective_unitary_phases(phi[b : b + 1], st.gamma_u[b : b + 1], st.bias_u[b : b + 1], st.crosstalk, 8)
            np.testing.assert_array_equal(one[0], full[b])


class TestHiddenState:
    def test_per_block_seeding(self):
        cfg = noise.NoiseConfig(seed=3)
        grid = noise.HiddenNoiseState.draw(cfg, 5, (2, 3), stream=(1,))
        single = noise.HiddenNoiseState.draw(noise.NoiseConfig(seed=3), 5, (), stream=(1, 1, 2))
        np.testing.assert_array_equal(grid.gamma_u[1, 2], single.gamma_u)
        np.testing.assert_array_equal(grid.bias_v[1, 2], single.bias_v)

    def test_bias_range_and_toggle(self):
        on = noise.HiddenNoiseState.draw(noise.NoiseConfig(), 9, (4,))
        assert np.all((on.bias_u >= 0) & (on.bias_u < 2 * np.pi))
        off = noise.HiddenNoiseState.draw(noise.NoiseConfig(phase_bias_enabled=False), 9, (4,))
        np.testing.assert_array_equal(off.bias_u, 0.0)
        # toggling one effect leaves the other draws untouched
        np.testing.assert_array_equal(off.gamma_u, on.gamma_u)

    def test_gamma_spread(self):
        st = noise.HiddenNoiseState.draw(noise.NoiseConfig(gamma_std=0.002), 9, (50,))
        assert abs(np.std(st.gamma_u) - 0.002) < 2e-4
        assert st.gamma_u.shape == (50, num_phases(9))

    def test_read_only(self):
        st = noise.HiddenNoiseState.draw(noise.NoiseConfig(), 3)
        with pytest.raises(ValueError):
            st.gamma_u[0] = 1.0

    def test_sign_flip_validation(self):
        st = noise.HiddenNoiseState.draw(noise.NoiseConfig(), 3)
        with pytest.raises(noise.NoiseConfigError):
            st.with_sign_flip([1, 0.5, 1])


class TestSigma:
    def test_zero_phase_gives_scale(self):
        np.testing.assert_allclose(noise.effective_sigma(np.zeros(3), 2.5, 16), 2.5)

    def test_quarter_is_zero(self):
        np.testing.assert_allclose(noise.effective_sigma([np.pi / 2], 1.0, 32), [0.0], atol=1e-8)

    def test_third(self):
        np.testing.assert_allclose(noise.effective_sigma([np.pi / 3], 2.0, 32), [1.0], atol=1e-8)


class TestConfig:
    def test_round_trip(self):
        cfg = noise.NoiseConfig(6, 12, 0.01, 0.02, False, 9)
        assert noise.NoiseConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "kw", [{"bitwidth_unitary": 0}, {"gamma_std": -1.0}, {"crosstalk_factor": 1.0}, {"bitwidth_sigma": 40}]
    )
    def test_invalid(self, kw):
        with pytest.raises(noise.NoiseConfigError):
            noise.NoiseConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(noise.NoiseConfigError):
            noise.NoiseConfig.from_dict({"bitwidth": 8})
