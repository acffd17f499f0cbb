"""Network wiring against manually composed pipelines."""

import numpy as np
import pytest

from deepair.layers import batch_norm, conv1x1, conv2d, global_avg_pool, lstm_step
from deepair.model import (
    AirResConfig,
    DeepAirModel,
    LstmBaselineModel,
    LstmConfig,
    ResidualUnit,
    load_checkpoint,
    save_checkpoint,
)
from deepair.rng import Rng
from deepair.tensor import Tape, Tensor, add, backward, relu, sum_all

from test_layers import lstm_step_pure


def small_model(seed=0, use_1x1=True, variant="estimation", horizon=0, window=3,
                channels=4, f=4, hidden=8, units=2, layers=1):
    return DeepAirModel(
        channels,
        AirResConfig(num_units=units, feature_width=f, use_1x1=use_1x1),
        LstmConfig(num_layers=layers, hidden_size=hidden, input_size=f),
        window, variant, horizon, Rng(seed),
    )


def zero_params(params):
    for p in params:
        p.tensor.data[:] = 0.0


# ---------------------------------------------------------------------------
# residual unit
# ---------------------------------------------------------------------------

class TestResidualUnit:
    def test_zero_branch_is_identity_on_nonnegative_input(self):
        unit = ResidualUnit("u", 3, 2, Rng(1))
        zero_params(unit.parameters())
        x = Tensor(Rng(2).uniform(0.0, 2.0, (3, 5, 5)))
        out = unit.forward(x, "train")
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input_zero_bias_gives_zero(self):
        unit = ResidualUnit("u", 3, 2, Rng(3))
        for conv in unit.convs:
            conv.bias.tensor.data[:] = 0.0
        for bn in unit.bns:
            bn.beta.tensor.data[:] = 0.0
        out = unit.forward(Tensor(np.zeros((3, 4, 4))), "train")
        np.testing.assert_array_equal(out.data, np.zeros((3, 4, 4)))

    def test_matches_hand_composed_pipeline(self):
        unit = ResidualUnit("u", 4, 2, Rng(4))
        x = Tensor(Rng(5).normal(shape=(4, 5, 5)))
        got = unit.forward(x, "train").data

        h = x
        for i, (conv, bn) in enumerate(zip(unit.convs, unit.bns)):
            h = conv2d(h, conv.weight.tensor, conv.bias.tensor, padding=1)
            h = batch_norm(h, bn.gamma.tensor, bn.beta.tensor, bn.state, "train")
            if i < len(unit.convs) - 1:
                h = relu(h)
        want = relu(add(x, h)).data
        assert np.abs(got - want).max() <= 1e-12

    def test_wrong_channel_count_rejected(self):
        unit = ResidualUnit("u", 4, 2, Rng(6))
        with pytest.raises(ValueError, match="channels"):
            unit.forward(Tensor(np.zeros((3, 5, 5))), "train")


# ---------------------------------------------------------------------------
# airres trunk
# ---------------------------------------------------------------------------

def airres_manual(model, frames, mode):
    """Step-by-step recomposition of the documented trunk pipeline."""
    h = conv1x1(Tensor(frames), model.stem_weight.tensor, model.stem_bias.tensor)
    for i, unit in enumerate(model.units):
        h = unit.forward(h, mode)
        if model.airres_config.use_1x1 and i < len(model.units) - 1:
            h = conv1x1(h, model.inter_weights[i].tensor,
                        model.inter_biases[i].tensor)
    return global_avg_pool(h).data


class TestAirRes:
    def test_single_pixel_frame(self):
        m = small_model(seed=7, units=1)
        frame = Rng(8).normal(shape=(4, 1, 1))
        out = m.airres_forward(frame, "train")
        assert out.data.shape == (4,)
        assert np.all(np.isfinite(out.data))

    def test_identity_1x1_insertion_matches_disabled(self):
        m_on = small_model(seed=9, use_1x1=True, units=3)
        m_off = small_model(seed=9, use_1x1=False, units=3)
        # same seed: stem and units draw identically before the 1x1 layers,
        # so align the trunks by copying and set the 1x1 maps to identity
        for p_on, p_off in zip(
            [m_on.stem_weight, m_on.stem_bias], [m_off.stem_weight, m_off.stem_bias]
        ):
            p_off.tensor.data = p_on.tensor.data.copy()
        for u_on, u_off in zip(m_on.units, m_off.units):
            for a, b in zip(u_on.parameters(), u_off.parameters()):
                b.tensor.data = a.tensor.data.copy()
        for w in m_on.inter_weights:
            w.tensor.data = np.eye(4)
        for b in m_on.inter_biases:
            b.tensor.data[:] = 0.0
        frames = Rng(10).normal(shape=(2, 4, 5, 5))
        out_on = m_on.airres_forward(frames, "train").data
        out_off = m_off.airres_forward(frames, "train").data
        np.testing.assert_allclose(out_on, out_off, atol=1e-14)

    def test_matches_manual_composition(self):
        m = small_model(seed=11, f=4, units=2, window=2, channels=3)
        frames = Rng(12).normal(shape=(2, 3, 5, 5))
        got = m.airres_forward(frames, "train").data
        want = airres_manual(m, frames, "train")
        assert np.abs(got - want).max() <= 1e-12

    def test_identity_degeneracy_stem_then_pool(self):
        # zero residual branches + identity 1x1 layers; keep stem output
        # non-negative so the post-add relu passes values through unchanged
        m = small_model(seed=13, units=3)
        for unit in m.units:
            zero_params(unit.parameters())
        for w in m.inter_weights:
            w.tensor.data = np.eye(4)
        for b in m.inter_biases:
            b.tensor.data[:] = 0.0
        m.stem_weight.tensor.data = np.abs(m.stem_weight.tensor.data)
        m.stem_bias.tensor.data[:] = 0.1
        frames = Rng(14).uniform(0.0, 1.0, (2, 4, 5, 5))
        got = m.airres_forward(frames, "train").data
        stem = conv1x1(Tensor(frames), m.stem_weight.tensor, m.stem_bias.tensor)
        want = global_avg_pool(stem).data
        assert np.abs(got - want).max() <= 1e-12

    def test_channel_mismatch_rejected(self):
        m = small_model()
        with pytest.raises(ValueError, match="channels"):
            m.airres_forward(np.zeros((2, 3, 5, 5)), "train")


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

class TestForward:
    def test_shape_contract(self):
        m = small_model(window=3)
        out = m.forward(Rng(15).normal(shape=(3, 4, 5, 5)), "train")
        assert out.data.shape == (1,) and np.isfinite(out.data).all()
        mf = small_model(variant="forecast", horizon=4, window=3)
        outf = mf.forward(Rng(16).normal(shape=(3, 4, 5, 5)), "train")
        assert outf.data.shape == (4,) and np.isfinite(outf.data).all()

    def test_window_of_one_reduces_to_single_step(self):
        m = small_model(seed=17, window=1)
        patch = Rng(18).normal(shape=(1, 4, 5, 5))
        got = m.forward(patch, "train").data

        feats = m.airres_forward(Tensor(patch), "train")
        from deepair.tensor import row
        from deepair.layers import affine
        h, _ = lstm_step(row(feats, 0), Tensor(np.zeros(8)), Tensor(np.zeros(8)),
                         m.lstm_layers[0])
        want = affine(h, m.head_weight.tensor, m.head_bias.tensor).data
        np.testing.assert_array_equal(got, want)

    def test_identical_models_identical_outputs(self):
        patch = Rng(19).normal(shape=(3, 4, 5, 5))
        a = small_model(seed=20).forward(patch, "train").data
        b = small_model(seed=20).forward(patch, "train").data
        np.testing.assert_array_equal(a, b)

    def test_frame_order_matters(self):
        m = small_model(seed=21)
        patch = Rng(22).normal(shape=(3, 4, 5, 5))
        out = m.forward(patch, "train").data
        out_rev = m.forward(patch[::-1].copy(), "train").data
        assert np.abs(out - out_rev).max() > 1e-9

    def test_wrong_window_rejected(self):
        m = small_model(window=3)
        with pytest.raises(ValueError, match="frames"):
            m.forward(np.zeros((2, 4, 5, 5)), "train")

    def test_two_layer_stack(self):
        m = small_model(seed=23, layers=2)
        out = m.forward(Rng(24).normal(shape=(3, 4, 5, 5)), "train")
        assert out.data.shape == (1,) and np.isfinite(out.data).all()

    def test_gradient_reaches_every_parameter(self):
        m = small_model(seed=25, use_1x1=True, units=2)
        patch = Rng(26).normal(shape=(3, 4, 5, 5))
        with Tape() as tape:
            loss = sum_all(m.forward(patch, "train"))
        backward(loss, tape)
        for p in m.parameters():
            assert p.tensor.grad is not None, p.name
            assert np.abs(p.tensor.grad).max() > 0.0, p.name


# ---------------------------------------------------------------------------
# channel-history baseline
# ---------------------------------------------------------------------------

class TestLstmBaseline:
    def make(self, seed=27, window=2, channels=3, hidden=4):
        return LstmBaselineModel(
            channels, LstmConfig(1, hidden, channels), window, "estimation", 0,
            Rng(seed),
        )

    def test_zero_weights_window_one_gives_head_bias(self):
        m = self.make(window=1)
        zero_params(m.parameters())
        m.head_bias.tensor.data[:] = 2.5
        out = m.forward(np.zeros((1, 3, 5, 5)), "train")
        np.testing.assert_array_equal(out.data, [2.5])

    def test_invariant_to_non_center_cells(self):
        m = self.make()
        rng = Rng(28)
        patch = rng.normal(shape=(2, 3, 5, 5))
        out1 = m.forward(patch, "train").data
        tweaked = patch + rng.normal(shape=patch.shape)
        tweaked[:, :, 2, 2] = patch[:, :, 2, 2]
        out2 = m.forward(tweaked, "train").data
        np.testing.assert_array_equal(out1, out2)

    def test_matches_manual_unroll_oracle(self):
        m = self.make(seed=29, window=3)
        patch = Rng(30).normal(shape=(3, 3, 5, 5))
        got = m.forward(patch, "train").data

        lp = m.lstm_layers[0]
        w = {g: lp.w[g].data for g in lp.GATES}
        u = {g: lp.u[g].data for g in lp.GATES}
        b = {g: lp.b[g].data for g in lp.GATES}
        h = np.zeros(4)
        c = np.zeros(4)
        for t in range(3):
            h, c = lstm_step_pure(patch[t, :, 2, 2], h, c, w, u, b)
        want = m.head_weight.data @ h + m.head_bias.data
        assert np.abs(got - want).max() <= 1e-12


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        m = small_model(seed=31, window=2)
        patch = Rng(32).normal(shape=(2, 4, 5, 5))
        m.forward(patch, "train")  # initialize bn running stats
        want = m.forward(patch, "eval").data

        base = tmp_path / "ckpt"
        save_checkpoint(m, base, schema_hash="abc", normalization={"pm25": (1.0, 2.0)},
                        seed=7, target_channel="pm25")
        loaded, manifest = load_checkpoint(base, schema_hash="abc")
        got = loaded.forward(patch, "eval").data
        np.testing.assert_array_equal(got, want)
        assert manifest["model"]["airres"]["use_1x1"] is True
        assert manifest["target_channel"] == "pm25"

    def test_schema_hash_mismatch_rejected(self, tmp_path):
        m = small_model(seed=33)
        base = tmp_path / "ckpt"
        save_checkpoint(m, base, schema_hash="abc", normalization={}, seed=0,
                        target_channel="pm25")
        with pytest.raises(ValueError, match="schema hash"):
            load_checkpoint(base, schema_hash="different")

    def test_ablation_flag_recorded(self, tmp_path):
        m = small_model(seed=34, use_1x1=False)
        base = tmp_path / "ckpt"
        save_checkpoint(m, base, schema_hash="s", normalization={}, seed=0,
                        target_channel="pm25")
        _, manifest = load_checkpoint(base)
        assert manifest["model"]["airres"]["use_1x1"] is False

    def test_baseline_roundtrip(self, tmp_path):
        m = LstmBaselineModel(3, LstmConfig(1, 4, 3), 2, "forecast", 2, Rng(35))
        patch = Rng(36).normal(shape=(2, 3, 5, 5))
        want = m.forward(patch, "eval").data
        base = tmp_path / "ckpt"
        save_checkpoint(m, base, schema_hash="s", normalization={}, seed=0,
                        target_channel="pm25")
        loaded, _ = load_checkpoint(base)
        np.testing.assert_array_equal(loaded.forward(patch, "eval").data, want)
