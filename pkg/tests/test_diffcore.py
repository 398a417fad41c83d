import numpy as np
import pytest

from frnf.diffcore import (AdamConfig, GEMM_CHUNK, ParamBlock, adam_step,
                           chunked_matmul, finite_diff_check, init_params)
from frnf.errors import ConfigError, DimensionError, NumericError


class TestInitParams:
    def test_zeros_scheme(self):
        blk = init_params(7, 2, 3, "zeros")
        assert blk.values.shape == (2, 3)
        assert np.all(blk.values == 0.0)
        assert np.all(blk.grads == 0.0)
        assert np.all(blk.adam_m == 0.0) and np.all(blk.adam_v == 0.0)

    def test_deterministic(self):
        a = init_params(7, 2, 3, "uniform_fanin")
        b = init_params(7, 2, 3, "uniform_fanin")
        assert np.array_equal(a.values, b.values)

    def test_fanin_bound(self):
        blk = init_params(7, 4, 4, "uniform_fanin")
        assert np.all(blk.values >= -0.5) and np.all(blk.values <= 0.5)

    def test_bad_dims(self):
        with pytest.raises(DimensionError):
            init_params(0, 0, 3)
        with pytest.raises(DimensionError):
            init_params(0, 3, -1)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            init_params(0, 2, 2, "xavier")


class TestAdamConfig:
    @pytest.mark.parametrize("kw", [
        {"learning_rate": 0.0}, {"learning_rate": -1.0},
        {"beta1": 0.0}, {"beta1": 1.0}, {"beta2": 1.5}, {"epsilon": 0.0},
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigError):
            AdamConfig(**kw)


class TestAdamStep:
    def test_zero_grad_is_identity(self):
        blk = init_params(3, 4, 4, "uniform_fanin")
        before = blk.values.copy()
        adam_step(blk, AdamConfig())
        assert np.array_equal(blk.values, before)
        assert blk.step_count == 1

    def test_zero_grad_identity_any_step_count(self):
        blk = init_params(3, 2, 2, "uniform_fanin")
        before = blk.values.copy()
        for _ in range(25):
            adam_step(blk, AdamConfig())
        assert np.array_equal(blk.values, before)
        assert blk.step_count == 25

    def test_scalar_hand_example(self):
        # m_hat = 1, v_hat = 1 on the first step; update = lr / (1 + eps)
        blk = init_params(0, 1, 1, "zeros")
        blk.values[:] = 1.0
        blk.grads[:] = 1.0
        adam_step(blk, AdamConfig(learning_rate=0.1))
        assert blk.values[0, 0] == pytest.approx(0.9, abs=1e-6)
        assert np.all(blk.grads == 0.0)

    def test_constant_grads_decrease_twice(self):
        blk = init_params(0, 1, 1, "zeros")
        blk.values[:] = 1.0
        vals = [1.0]
        for _ in range(2):
            blk.grads[:] = 0.5
            adam_step(blk, AdamConfig(learning_rate=0.05))
            vals.append(float(blk.values[0, 0]))
        assert vals[1] < vals[0] and vals[2] < vals[1]

    def test_nonfinite_grad_raises_with_name(self):
        blk = init_params(0, 2, 2, "zeros")
        blk.name = "head_density.w"
        blk.grads[0, 0] = np.nan
        with pytest.raises(NumericError, match="head_density.w"):
            adam_step(blk, AdamConfig())

    def test_trajectory_determinism(self):
        def run():
            blk = init_params(5, 3, 3, "uniform_fanin")
            rng = np.random.default_rng(9)
            for _ in range(10):
                blk.grads[:] = rng.standard_normal((3, 3)).astype(np.float32)
                adam_step(blk, AdamConfig())
            return blk.values.copy()

        assert np.array_equal(run(), run())


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        blk = init_params(2, 2, 2, "uniform_fanin")

        def loss():
            blk.grads[:] = 2.0 * blk.values
            return float(np.sum(blk.values.astype(np.float64) ** 2))

        err = finite_diff_check(loss, [blk], h=1e-4, n_probes=40, seed=0)
        assert err < 1e-6

    def test_constant_loss(self):
        blk = init_params(2, 2, 2, "uniform_fanin")

        def loss():
            blk.grads[:] = 0.0
            return 3.5

        assert finite_diff_check(loss, [blk], h=1e-4, n_probes=10, seed=0) == 0.0

    def test_separate_grad_fn(self):
        blk = init_params(4, 3, 2, "uniform_fanin")

        def loss():
            return float(np.sum(np.sin(blk.values.astype(np.float64))))

        def grad():
            blk.grads[:] = np.cos(blk.values)
            return loss()

        err = finite_diff_check(loss, [blk], h=1e-5, n_probes=30, seed=1, grad_fn=grad)
        assert err < 1e-5

    def test_bad_h(self):
        blk = init_params(2, 1, 1, "zeros")
        with pytest.raises(ConfigError):
            finite_diff_check(lambda: 0.0, [blk], h=0.0)

    def test_values_restored(self):
        blk = init_params(2, 2, 2, "uniform_fanin")
        before = blk.values.copy()

        def loss():
            blk.grads[:] = 1.0
            return float(np.sum(blk.values))

        finite_diff_check(loss, [blk], h=1e-3, n_probes=8, seed=0)
        assert np.array_equal(blk.values, before)


class TestChunkedMatmul:
    def test_matches_plain_matmul(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((700, 40)).astype(np.float32)
        w = rng.standard_normal((40, 24)).astype(np.float32)
        assert np.allclose(chunked_matmul(x, w), x @ w, atol=1e-5)

    def test_rows_independent_of_batch(self):
        # each row's product must be bitwise identical however points are batched
        rng = np.random.default_rng(1)
        w = rng.standard_normal((64, 48)).astype(np.float32)
        probe = rng.standard_normal(64).astype(np.float32)
        outs = []
        for n, pos in ((1, 0), (17, 5), (GEMM_CHUNK + 3, GEMM_CHUNK - 1), (500, 499)):
            x = rng.standard_normal((n, 64)).astype(np.float32)
            x[pos] = probe
            outs.append(chunked_matmul(x, w)[pos].copy())
        for o in outs[1:]:
            assert np.array_equal(o, outs[0])

    def test_empty_input(self):
        w = np.ones((4, 5), np.float32)
        out = chunked_matmul(np.zeros((0, 4), np.float32), w)
        assert out.shape == (0, 5)
