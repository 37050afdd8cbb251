import numpy as np
import pytest

from ptclearn.zoo import ZCD, ZGD, ZTP, BestRecord, ZooError, ZooSchedule, zcd_step, zgd_step, ztp_step


def bowl(params, idx):
    return np.sum(params**2, axis=1)


class TestSchedule:
    def test_bitwidth_bounds(self):
        s = ZooSchedule.for_bitwidth(8)
        assert s.step_upper == pytest.approx(2 * np.pi / 15)
        assert s.step_lower == pytest.approx(2 * np.pi / 255)
        assert s.first_step == pytest.approx(0.1)

    def test_clipped_first_step(self):
        assert ZooSchedule(init_step=5.0).first_step == pytest.approx(2 * np.pi / 15)

    def test_decay_floor(self):
        s = ZooSchedule()
        step = s.first_step
        for _ in range(1000):
            step = s.next_step(step)
        assert step == pytest.approx(s.step_lower)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ZooSchedule(decay=0.0)


class TestZCD:
    def test_accepts_improving_plus(self):
        new, _, calls = zcd_step(lambda p: (p[0] - 1) ** 2, [0.0], ZooSchedule(), 0, step=0.5)
        np.testing.assert_allclose(new, [0.5])
        assert calls == 2

    def test_rejected_plus_moves_minus(self):
        new, _, _ = zcd_step(lambda p: p[0] ** 2, [0.0], ZooSchedule(), 0, step=0.5)
        np.testing.assert_allclose(new, [-0.5])

    def test_best_record_keeps_start(self):
        sched = ZooSchedule(init_step=0.4)
        opt = ZCD(lambda p, idx: p[:, 0] ** 2, [[0.0]], sched)
        opt.step([0])
        np.testing.assert_allclose(opt.params, [[-0.4]])
        opt.restore_best()
        np.testing.assert_allclose(opt.params, [[0.0]])
        assert opt.calls[0] == 3

    def test_bowl_convergence(self):
        start = np.random.default_rng(0).uniform(-1, 1, (1, 10))
        opt = ZCD(bowl, start)
        initial = opt.loss[0]
        rng = np.random.default_rng(1)
        for _ in range(500):
            opt.step(rng.integers(0, 10, 1))
        assert opt.record.best_loss[0] <= 1e-2 * initial

    def test_batched_blocks_independent(self):
        rng = np.random.default_rng(2)
        start = rng.uniform(-1, 1, (3, 4))
        coords = rng.integers(0, 4, (50, 3))
        together = ZCD(bowl, start)
        for c in coords:
            together.step(c)
        for b in range(3):
            alone = ZCD(bowl, start[b : b + 1])
            for c in coords:
                alone.step(c[b : b + 1])
            np.testing.assert_array_equal(alone.params[0], together.params[b])

    def test_non_finite_raises(self):
        with pytest.raises(ZooError):
            ZCD(lambda p, idx: np.full(len(p), np.nan), [[0.0]])


class TestZTP:
    def test_keeps_minimum(self):
        new, _, calls = ztp_step(lambda p: p[0] ** 2, [0.0], ZooSchedule(), 0, step=0.5)
        np.testing.assert_allclose(new, [0.0])
        assert calls == 3

    def test_moves_towards_minimum(self):
        new, _, _ = ztp_step(lambda p: (p[0] - 1) ** 2, [0.0], ZooSchedule(), 0, step=0.5)
        np.testing.assert_allclose(new, [0.5])

    def test_monotone(self):
        opt = ZTP(bowl, np.random.default_rng(3).uniform(-1, 1, (1, 10)))
        rng = np.random.default_rng(4)
        prev = opt.loss[0]
        for _ in range(500):
            opt.step(rng.integers(0, 10, 1))
            assert opt.loss[0] <= prev
            prev = opt.loss[0]


class TestZGD:
    def test_linear_unbiased(self):
        c = np.array([1.0, -2.0, 0.5, 3.0])
        rng = np.random.default_rng(5)
        sched = ZooSchedule()
        draws = np.array([zgd_step(lambda p: c @ p, np.zeros(4), sched, rng)[2] for _ in range(10_000)])
        mean, se = draws.mean(axis=0), draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        assert np.all(np.abs(mean - c) <= 3 * se)

    def test_zero_objective(self):
        new, v, g, _ = zgd_step(lambda p: 0.0, np.ones(3), ZooSchedule(), np.random.default_rng(6))
        np.testing.assert_array_equal(g, 0.0)
        np.testing.assert_array_equal(new, 1.0)

    def test_bowl_halves(self):
        opt = ZGD(bowl, np.random.default_rng(7).uniform(-1, 1, (1, 10)), lr=0.01)
        initial = opt.loss[0]
        rng = np.random.default_rng(8)
        for _ in range(1000):
            opt.step(rng.standard_normal((1, 1, 10)))
        assert bowl(opt.params, None)[0] <= 0.5 * initial

    def test_needs_samples(self):
        with pytest.raises(ValueError):
            ZGD(bowl, [[0.0]], samples=0)


class TestBestRecord:
    def test_only_improvements(self):
        rec = BestRecord.start([1.0, 1.0], np.zeros((2, 1)))
        rec.update([0.5, 2.0], np.ones((2, 1)))
        np.testing.assert_array_equal(rec.best_loss, [0.5, 1.0])
        np.testing.assert_array_equal(rec.best_params[:, 0], [1.0, 0.0])
