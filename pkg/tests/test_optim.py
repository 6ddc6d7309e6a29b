import numpy as np
import pytest

from foldreg.optim import DivergenceError, adam_init, adam_step, clip_global_norm


def hand_adam(g_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Reference recurrence evaluated step by step on a scalar parameter."""
    p, m, v = 0.0, 0.0, 0.0
    trajectory = []
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        trajectory.append(p)
    return trajectory


class TestAdamStep:
    def test_zero_gradient_leaves_params(self):
        p = np.array([1.0, -2.0, 3.0])
        state = adam_init({"p": p}, lr=1e-2)
        adam_step({"p": p}, {"p": np.zeros(3)}, state)
        assert np.array_equal(p, [1.0, -2.0, 3.0])
        assert state.t == 1

    def test_first_step_magnitude(self):
        # m_hat = g, v_hat = g^2 on step one, so the update is ~ -lr
        p = np.array([0.0])
        state = adam_init({"p": p}, lr=1e-4)
        adam_step({"p": p}, {"p": np.array([0.5])}, state)
        expected = -1e-4 * 0.5 / (np.sqrt(0.25) + 1e-8)
        assert p[0] == pytest.approx(expected, rel=1e-12)
        assert p[0] == pytest.approx(-1e-4, rel=1e-4)

    def test_two_steps_match_hand_recurrence(self):
        p = np.array([0.0])
        state = adam_init({"p": p}, lr=1e-4)
        traj = hand_adam([0.5, 0.5], lr=1e-4)
        adam_step({"p": p}, {"p": np.array([0.5])}, state)
        assert abs(p[0] - traj[0]) < 1e-9
        adam_step({"p": p}, {"p": np.array([0.5])}, state)
        assert abs(p[0] - traj[1]) < 1e-9

    def test_long_run_matches_hand_recurrence(self):
        rng = np.random.default_rng(0)
        gs = rng.standard_normal(50)
        p = np.array([0.0])
        state = adam_init({"p": p}, lr=1e-3)
        for g in gs:
            adam_step({"p": p}, {"p": np.array([g])}, state)
        assert p[0] == pytest.approx(hand_adam(gs, lr=1e-3)[-1], abs=1e-12)

    def test_nan_gradient_raises(self):
        p = np.array([0.0])
        state = adam_init({"p": p}, lr=1e-3)
        with pytest.raises(DivergenceError, match="diverged gradient"):
            adam_step({"p": p}, {"p": np.array([np.nan])}, state)

    def test_inf_gradient_raises(self):
        p = np.array([0.0])
        state = adam_init({"p": p}, lr=1e-3)
        with pytest.raises(DivergenceError):
            adam_step({"p": p}, {"p": np.array([np.inf])}, state)

    def test_update_bounded_by_lr(self):
        # constant-sign gradients: per-coordinate |update| <= lr * (1 + delta)
        rng = np.random.default_rng(1)
        p = np.array([0.0])
        state = adam_init({"p": p}, lr=1e-2)
        prev = p[0]
        for _ in range(100):
            g = float(rng.uniform(0.1, 5.0))
            adam_step({"p": p}, {"p": np.array([g])}, state)
            assert abs(p[0] - prev) <= 1e-2 * (1.0 + 1e-6) * 1.12  # early bias-correction overshoot
            prev = p[0]

    def test_first_step_opposes_gradient_sign(self):
        for g in (0.7, -0.7):
            p = np.array([0.0])
            state = adam_init({"p": p}, lr=1e-2)
            adam_step({"p": p}, {"p": np.array([g])}, state)
            assert np.sign(p[0]) == -np.sign(g)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(2)
            p = rng.standard_normal(10).astype(np.float32)
            state = adam_init({"p": p}, lr=1e-3)
            for _ in range(20):
                adam_step({"p": p}, {"p": rng.standard_normal(10)}, state)
            return p

        assert np.array_equal(run(), run())

    def test_float32_params_updated_in_place(self):
        p = np.zeros(4, dtype=np.float32)
        state = adam_init({"p": p}, lr=1e-3)
        adam_step({"p": p}, {"p": np.full(4, 0.3)}, state)
        assert p.dtype == np.float32
        assert (p != 0).all()

    def test_moment_shapes_mirror_params(self):
        p = np.zeros((2, 3), dtype=np.float32)
        state = adam_init({"p": p}, lr=1e-3)
        assert state.m["p"].shape == p.shape
        assert state.v["p"].shape == p.shape


class TestClip:
    def test_noop_below_threshold(self):
        g = {"a": np.array([0.3, 0.4])}
        norm = clip_global_norm(g, 10.0)
        assert norm == pytest.approx(0.5)
        assert np.array_equal(g["a"], [0.3, 0.4])

    def test_scales_to_threshold(self):
        g = {"a": np.array([3.0, 4.0])}
        clip_global_norm(g, 1.0)
        assert np.linalg.norm(g["a"]) == pytest.approx(1.0, rel=1e-9)
