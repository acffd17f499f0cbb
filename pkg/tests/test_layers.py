"""Layer semantics against independent oracles."""

import math

import numpy as np
import pytest

from deepair.layers import (
    BatchNormState,
    LstmParams,
    affine,
    batch_norm,
    center_pixel,
    global_avg_pool,
    lstm_step,
    sgd_step,
    squared_error,
)
from deepair.rng import Rng
from deepair.tensor import Parameter, Tape, Tensor, backward, sub, sum_all


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def lstm_step_pure(x, h, c, w, u, b):
    """Scalar-by-scalar reimplementation of the gated update."""
    d_h = len(h)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))

    def gate(name, act):
        vals = []
        for r in range(d_h):
            s = b[name][r]
            for k in range(len(x)):
                s += w[name][r][k] * x[k]
            for k in range(d_h):
                s += u[name][r][k] * h[k]
            vals.append(act(s))
        return vals

    gi = gate("i", sig)
    gf = gate("f", sig)
    go = gate("o", sig)
    gc = gate("c", math.tanh)
    c_new = [gf[r] * c[r] + gi[r] * gc[r] for r in range(d_h)]
    h_new = [math.tanh(c_new[r]) * go[r] for r in range(d_h)]
    return np.array(h_new), np.array(c_new)


def make_lstm(d_in, d_h, seed=0):
    return LstmParams("lstm", d_in, d_h, Rng(seed))


def zero_lstm(params):
    for p in params.parameters():
        p.tensor.data[:] = 0.0


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

class TestBatchNorm:
    def test_constant_input_gives_zeros_in_train_mode(self):
        x = Tensor(np.stack([np.full((4, 4), 3.0), np.full((4, 4), -7.0)]))
        st = BatchNormState(2)
        out = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), st, "train")
        np.testing.assert_array_equal(out.data, np.zeros((2, 4, 4)))

    def test_zero_gamma_gives_beta(self):
        rng = Rng(3)
        x = Tensor(rng.normal(shape=(3, 2, 2)))
        beta = np.array([1.0, -2.0, 0.5])
        st = BatchNormState(3)
        out = batch_norm(x, Tensor(np.zeros(3)), Tensor(beta), st, "train")
        for c in range(3):
            np.testing.assert_array_equal(out.data[c], np.full((2, 2), beta[c]))

    def test_train_mode_statistics_recomputed_directly(self):
        # channel variance ~16 keeps the epsilon bias var/(var+1e-5) within 1e-6
        rng = Rng(4)
        x = Tensor(rng.normal(2.0, 4.0, (4, 6, 6)))
        st = BatchNormState(4)
        out = batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), st, "train").data
        for c in range(4):
            assert abs(out[c].mean()) < 1e-10
            assert abs(out[c].var() - 1.0) < 1e-6

    def test_eval_before_any_train_rejected(self):
        st = BatchNormState(2)
        with pytest.raises(ValueError, match="uninitialized"):
            batch_norm(Tensor(np.zeros((2, 2, 2))), Tensor(np.ones(2)),
                       Tensor(np.zeros(2)), st, "eval")

    def test_running_stats_seed_then_ema(self):
        rng = Rng(5)
        x1, x2 = rng.normal(shape=(1, 3, 3)), rng.normal(5.0, 2.0, (1, 3, 3))
        st = BatchNormState(1)
        g, b = Tensor(np.ones(1)), Tensor(np.zeros(1))
        batch_norm(Tensor(x1), g, b, st, "train")
        np.testing.assert_allclose(st.running_mean, [x1.mean()])
        batch_norm(Tensor(x2), g, b, st, "train")
        np.testing.assert_allclose(
            st.running_mean, [0.9 * x1.mean() + 0.1 * x2.mean()]
        )
        # eval mode now uses the running stats
        out = batch_norm(Tensor(x2), g, b, st, "eval").data
        want = (x2 - st.running_mean[0]) / np.sqrt(st.running_var[0] + 1e-5)
        np.testing.assert_allclose(out, want, rtol=1e-12)


# ---------------------------------------------------------------------------
# pooling and selection
# ---------------------------------------------------------------------------

class TestPooling:
    def test_constant_field(self):
        x = Tensor(np.stack([np.full((3, 5), 2.5), np.full((3, 5), -1.0)]))
        np.testing.assert_array_equal(global_avg_pool(x).data, [2.5, -1.0])

    def test_2x2_mean(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(global_avg_pool(x).data, [2.5])

    def test_matches_summation_oracle(self):
        rng = Rng(6)
        x = rng.normal(shape=(3, 4, 7))
        got = global_avg_pool(Tensor(x)).data
        want = x.sum(axis=(1, 2)) / (4 * 7)
        np.testing.assert_array_equal(got, want)

    def test_batched_pool_and_center(self):
        rng = Rng(7)
        x = rng.normal(shape=(4, 3, 5, 5))
        np.testing.assert_array_equal(
            global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3))
        )
        np.testing.assert_array_equal(
            center_pixel(Tensor(x)).data, x[:, :, 2, 2]
        )


# ---------------------------------------------------------------------------
# lstm step
# ---------------------------------------------------------------------------

class TestLstmStep:
    def test_zero_params_closed_form(self):
        params = make_lstm(3, 4)
        zero_lstm(params)
        v = np.array([0.5, -1.0, 2.0, 0.0])
        h, c = lstm_step(Tensor(np.zeros(3)), Tensor(np.zeros(4)), Tensor(v), params)
        np.testing.assert_allclose(c.data, 0.5 * v, rtol=1e-15)
        np.testing.assert_allclose(h.data, np.tanh(0.5 * v) * 0.5, rtol=1e-15)

    def test_zero_state_zero_bias_gives_zero(self):
        params = make_lstm(3, 4, seed=11)
        for g in params.GATES:
            params.b[g].tensor.data[:] = 0.0
        h, c = lstm_step(Tensor(np.zeros(3)), Tensor(np.zeros(4)),
                         Tensor(np.zeros(4)), params)
        np.testing.assert_array_equal(h.data, np.zeros(4))
        np.testing.assert_array_equal(c.data, np.zeros(4))

    def test_random_instance_matches_scalar_oracle(self):
        rng = Rng(12)
        params = make_lstm(5, 4, seed=12)
        x = rng.normal(shape=(5,))
        h0 = rng.normal(shape=(4,))
        c0 = rng.normal(shape=(4,))
        h, c = lstm_step(Tensor(x), Tensor(h0), Tensor(c0), params)
        hw, cw = lstm_step_pure(
            x, h0, c0,
            {g: params.w[g].data for g in params.GATES},
            {g: params.u[g].data for g in params.GATES},
            {g: params.b[g].data for g in params.GATES},
        )
        assert np.abs(h.data - hw).max() <= 1e-12
        assert np.abs(c.data - cw).max() <= 1e-12

    def test_dimension_mismatch_rejected(self):
        params = make_lstm(3, 4)
        with pytest.raises(ValueError, match="lstm_step"):
            lstm_step(Tensor(np.zeros(2)), Tensor(np.zeros(4)),
                      Tensor(np.zeros(4)), params)

    def test_forget_bias_initialized_to_one(self):
        params = make_lstm(3, 4, seed=1)
        np.testing.assert_array_equal(params.b["f"].data, np.ones(4))
        np.testing.assert_array_equal(params.b["i"].data, np.zeros(4))


# ---------------------------------------------------------------------------
# sgd
# ---------------------------------------------------------------------------

class TestSgd:
    def test_basic_update(self):
        p = Parameter("p", np.array([1.0]))
        p.tensor.grad = np.array([2.0])
        sgd_step([p], 0.1)
        np.testing.assert_array_equal(p.data, [0.8])
        assert p.tensor.grad is None

    def test_zero_grad_no_move(self):
        p = Parameter("p", np.array([1.25, -3.0]))
        p.tensor.grad = np.zeros(2)
        before = p.data.copy()
        sgd_step([p], 0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad_rejected_by_name(self):
        p = Parameter("head.weight", np.ones(2))
        with pytest.raises(ValueError, match="head.weight"):
            sgd_step([p], 0.1)

    def test_quadratic_bowl_converges(self):
        # (p-3)^2 contracts by 0.8 per step at lr 0.1
        p = Parameter("p", np.array(0.0))
        for _ in range(100):
            with Tape() as tape:
                loss = squared_error(p.tensor, np.array(3.0))
            backward(loss, tape)
            sgd_step([p], 0.1)
        assert abs(p.data - 3.0) < 1e-6


class TestAffine:
    def test_values_and_batch(self):
        w = Tensor(np.array([[1.0, 2.0], [0.0, -1.0]]))
        b = Tensor(np.array([10.0, 20.0]))
        out = affine(Tensor(np.array([3.0, 4.0])), w, b)
        np.testing.assert_array_equal(out.data, [21.0, 16.0])
        xb = Tensor(np.array([[3.0, 4.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(
            affine(xb, w, b).data, [[21.0, 16.0], [11.0, 20.0]]
        )

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="affine"):
            affine(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_squared_error_values():
    pred = Tensor(np.array([1.0, 4.0]))
    assert squared_error(pred, np.array([0.0, 2.0]), "sum").item() == 5.0
    assert squared_error(pred, np.array([0.0, 2.0]), "mean").item() == 2.5
