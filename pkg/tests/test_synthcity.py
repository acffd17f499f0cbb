"""Synthetic city dynamics and planted oracle datasets."""

from datetime import datetime

import numpy as np
import pytest

from deepair.rng import Rng
from deepair.synthcity import (
    DIRECTION_OFFSETS,
    SynthConfig,
    diurnal_profile,
    generate,
    planted_interaction_dataset,
    planted_linear_dataset,
    shift_field,
    step_field,
    wind_direction_value,
)


def cfg(**kw):
    base = dict(rows=8, cols=8, hours=30, n_stations=4, seed=1)
    base.update(kw)
    return SynthConfig(**base)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

class TestConfig:
    def test_decay_range(self):
        with pytest.raises(ValueError, match="decay"):
            cfg(decay=1.5).validate()

    def test_advection_bound(self):
        with pytest.raises(ValueError, match="advection"):
            cfg(advection_cells_per_hour=2).validate()

    def test_negative_rate_rejected(self):
        with pytest.raises(ValueError, match="emission_rate"):
            cfg(emission_rate=-1.0).validate()


# ---------------------------------------------------------------------------
# field dynamics
# ---------------------------------------------------------------------------

class TestDynamics:
    def test_null_dynamics_stay_zero(self):
        c = cfg(noise_std=0.0, emission_rate=0.0, background=0.0, hours=10)
        truth, _, _ = generate(c)
        np.testing.assert_array_equal(truth.channel("pm25"), np.zeros((10, 8, 8)))

    def test_closed_form_accumulation(self):
        # decay 0, advection 0, noise 0: p(t) follows the traffic integral
        c = cfg(decay=0.0, advection_cells_per_hour=0, noise_std=0.0,
                background=0.0, hours=20)
        truth, _, _ = generate(c)
        pm = truth.channel("pm25")
        traffic = truth.channel("congestion")
        canyon = truth.channel("street_canyon")[0]
        expected = np.zeros((8, 8))
        for t in range(20):
            np.testing.assert_allclose(pm[t], expected, atol=1e-12)
            expected = expected + c.emission_rate * traffic[t] * (
                1.0 + c.canyon_amplification * canyon
            )

    def test_same_seed_bit_identical(self):
        a, _, obs_a = generate(cfg(seed=9))
        b, _, obs_b = generate(cfg(seed=9))
        np.testing.assert_array_equal(a.values, b.values)
        assert len(obs_a) == len(obs_b)
        assert all(
            (x.source_id, x.time, x.channel, x.value)
            == (y.source_id, y.time, y.channel, y.value)
            for x, y in zip(obs_a, obs_b)
        )

    def test_different_seed_differs(self):
        a, _, _ = generate(cfg(seed=1))
        b, _, _ = generate(cfg(seed=2))
        assert not np.array_equal(a.values, b.values)


class TestConservation:
    def test_toroidal_advection_preserves_mass(self):
        rng = Rng(3)
        p = rng.uniform(0.0, 10.0, (6, 6))
        moved = shift_field(p, (1, -2), "toroidal", 0.0)
        assert moved.sum() == pytest.approx(p.sum(), abs=1e-9)
        # and the values are a permutation of the originals
        np.testing.assert_allclose(np.sort(moved.ravel()), np.sort(p.ravel()))

    def test_decay_mass_non_increasing(self):
        rng = Rng(4)
        p = rng.uniform(0.0, 10.0, (6, 6))
        canyon = np.zeros((6, 6))
        mass = p.sum()
        for k in range(5):
            p = step_field(p, np.zeros((6, 6)), (1, 0), decay=0.2, emission=0.0,
                           amplification=0.0, canyon=canyon, boundary="toroidal")
            assert p.sum() <= mass + 1e-9
            mass = p.sum()

    def test_inflow_fills_vacated_edge_with_background(self):
        p = np.arange(9.0).reshape(3, 3)
        moved = shift_field(p, (-1, 0), "inflow", 7.0)
        np.testing.assert_array_equal(moved[2], np.full(3, 7.0))
        np.testing.assert_array_equal(moved[0], p[1])


def test_canyon_witness_under_identical_traffic():
    # uniform traffic everywhere; canyon cells must end up strictly dirtier
    rng = Rng(5)
    canyon = (rng.uniform(0.0, 1.0, (8, 8)) < 0.3).astype(float)
    traffic = np.ones((8, 8))
    p = np.zeros((8, 8))
    acc = np.zeros((8, 8))
    for t in range(50):
        p = step_field(p, traffic, (0, 1), decay=0.1, emission=1.0,
                       amplification=0.8, canyon=canyon, boundary="toroidal")
        acc += p
    avg = acc / 50
    assert avg[canyon == 1].mean() > avg[canyon == 0].mean()

    # without advection the separation is cellwise strict
    p = np.zeros((8, 8))
    for t in range(50):
        p = step_field(p, traffic, (0, 0), decay=0.1, emission=1.0,
                       amplification=0.8, canyon=canyon, boundary="toroidal")
    assert p[canyon == 1].min() > p[canyon == 0].max()


def test_direction_encoding_and_offsets():
    assert wind_direction_value("E") == 0.0
    assert wind_direction_value("NE") == 0.125
    assert wind_direction_value("SE") == 0.875
    assert DIRECTION_OFFSETS["N"] == (-1, 0)
    assert DIRECTION_OFFSETS["S"] == (1, 0)


def test_diurnal_profile_two_peaks():
    prof = diurnal_profile(np.arange(24))
    assert prof[8] > prof[12] and prof[18] > prof[12]
    assert prof.min() > 0


def test_generated_observations_feed_pipeline_channels():
    truth, registry, observations = generate(cfg(missing_rate=0.2))
    channels = {o.channel for o in observations}
    assert {"pm25", "wind_dir", "congestion", "street_canyon"} <= channels
    assert len(registry) == 4
    # station observations match the truth cube exactly
    sid = registry.ids()[0]
    r, c = registry.cell(sid)
    pm_idx = truth.schema.index("pm25")
    for o in observations[:200]:
        if o.source_id == sid and o.channel == "pm25":
            t = int((o.time - truth.start_time).total_seconds() // 3600)
            assert o.value == truth.values[t, pm_idx, r, c]


# ---------------------------------------------------------------------------
# planted datasets
# ---------------------------------------------------------------------------

class TestPlantedInteraction:
    def test_zero_field_gives_noise_level_targets(self):
        c = cfg(noise_std=0.01, hours=15)
        ds = planted_interaction_dataset(c)
        a = ds.cube.channel("field_a")
        ds.cube.values[:, ds.cube.schema.index("field_a")] = 0.0
        # rebuild targets by the same recipe with a zeroed: all ~ 0
        # (here we just check the stored targets are centred, since a and b
        #  are zero-mean the product mean is near zero on average)
        vals = np.array(list(ds.targets.values()))
        assert abs(vals.mean()) < 0.2
        assert a.shape == (15, 8, 8)

    def test_recomputation_oracle_pre_noise(self):
        c = cfg(noise_std=0.0, hours=10)
        ds = planted_interaction_dataset(c)
        a = ds.cube.channel("field_a")
        b = ds.cube.channel("field_b")
        half = ds.patch_size // 2
        for (sid, t), want in list(ds.targets.items())[:40]:
            r, cc = ds.registry.cell(sid)
            rows = np.clip(np.arange(r - half, r + half + 1), 0, 7)
            cols = np.clip(np.arange(cc - half, cc + half + 1), 0, 7)
            got = (a[t][rows[:, None], cols[None, :]]
                   * b[t][rows[:, None], cols[None, :]]).mean()
            assert abs(got - want) <= 1e-12

    def test_constant_one_fields_give_target_one(self):
        c = cfg(noise_std=0.0, hours=5)
        ds = planted_interaction_dataset(c)
        ia = ds.cube.schema.index("field_a")
        ib = ds.cube.schema.index("field_b")
        ds.cube.values[:, ia] = 1.0
        ds.cube.values[:, ib] = 1.0
        # recompute with the dataset's own recipe
        from deepair.synthcity import _patch_mean
        for sid in ds.registry.ids():
            r, cc = ds.registry.cell(sid)
            got = _patch_mean(ds.cube.values[0, ia] * ds.cube.values[0, ib],
                              r, cc, ds.patch_size)
            assert got == 1.0


class TestPlantedLinear:
    def test_zero_coefficients_give_pure_noise(self):
        c = cfg(noise_std=0.5, hours=10)
        ds = planted_linear_dataset(c, [0.0, 0.0, 0.0])
        vals = np.array(list(ds.targets.values()))
        assert abs(vals.mean()) < 0.25
        assert 0.2 < vals.std() < 0.9

    def test_single_coefficient_on_constant_channel(self):
        c = cfg(noise_std=0.0, hours=5)
        ds = planted_linear_dataset(c, [2.0])
        ia = ds.cube.schema.index("field_a")
        ds.cube.values[:, ia] = 1.0
        from deepair.synthcity import _patch_mean
        got = 2.0 * _patch_mean(ds.cube.values[0, ia], 3, 3, ds.patch_size)
        assert got == 2.0

    def test_recomputation_oracle_pre_noise(self):
        c = cfg(noise_std=0.0, hours=8)
        coeffs = [3.0, -2.0, 0.0]
        ds = planted_linear_dataset(c, coeffs, patch_size=5)
        planes = [ds.cube.channel(f"field_{ch}") for ch in "abc"]
        half = 2
        for (sid, t), want in list(ds.targets.items())[:40]:
            r, cc = ds.registry.cell(sid)
            rows = np.clip(np.arange(r - half, r + half + 1), 0, 7)
            cols = np.clip(np.arange(cc - half, cc + half + 1), 0, 7)
            got = sum(
                k * planes[i][t][rows[:, None], cols[None, :]].mean()
                for i, k in enumerate(coeffs)
            )
            assert abs(got - want) <= 1e-12

    def test_determinism(self):
        a = planted_linear_dataset(cfg(hours=6), [1.0, 2.0])
        b = planted_linear_dataset(cfg(hours=6), [1.0, 2.0])
        np.testing.assert_array_equal(a.cube.values, b.cube.values)
        assert a.targets == b.targets
