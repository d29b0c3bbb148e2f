"""Boundary predictor and soft window masks."""

import numpy as np
import pytest

from etcbound import autodiff as ad
from etcbound.autodiff import backward, grad_check, value_of
from etcbound.core import GroundingInstance, TemporalBoundary
from etcbound.model import (
    ConfigurationError,
    LiftedPredictor,
    PredictorParams,
    flatten_params,
    init_params,
    load_params,
    pool_boundary_feature,
    predict_boundary,
    predict_boundary_values,
    save_params,
    shifted_outside_masks,
    soft_window_mask,
    unflatten_params,
)


def make_instance(t=12, c=6, seed=0):
    rng = np.random.default_rng(seed)
    return GroundingInstance(
        video_id="v0",
        frames=rng.standard_normal((t, c)),
        query_tokens=("q",),
        query_embedding=rng.standard_normal(c),
    )


def zero_params(c=6, h=4, **kw):
    return PredictorParams(np.zeros((h, 2 * c)), np.zeros(h), np.zeros((2, h)), np.zeros(2), **kw)


def hard_indicator(sta, end, timeline):
    return ((timeline >= sta) & (timeline <= end)).astype(float)


class TestPredictBoundary:
    def test_all_zero_params_give_half_half(self):
        inst = make_instance()
        b = predict_boundary(inst, inst.query_embedding, zero_params())
        assert value_of(b.center) == 0.5
        assert value_of(b.width) == 0.5

    def test_saturated_logits(self):
        inst = make_instance()
        params = zero_params()
        params.b2[:] = [20.0, -20.0]
        b = predict_boundary(inst, inst.query_embedding, params)
        assert abs(value_of(b.center) - 1.0) < 1e-8
        assert abs(value_of(b.width) - 0.0) < 1e-8

    def test_outputs_strictly_inside_unit_and_grad_check(self):
        inst = make_instance(seed=3)
        params = init_params(6, hidden_dim=4, seed=3, scale=0.5)
        b = predict_boundary(inst, inst.query_embedding, params)
        assert 0.0 < value_of(b.center) < 1.0
        assert 0.0 < value_of(b.width) < 1.0

        def f(p):
            lifted = LiftedPredictor(unflatten_params(p, params))
            bb = predict_boundary(inst, inst.query_embedding, lifted)
            return ad.mul(ad.add(bb.center, ad.mul(bb.width, 0.7)), 1.0), lifted.leaves()

        report = grad_check(f, flatten_params(params))
        assert report.passed, report.failures[:3]

    def test_dimension_mismatch_is_configuration_error(self):
        inst = make_instance(c=6)
        with pytest.raises(ConfigurationError):
            predict_boundary(inst, np.zeros(5), zero_params(c=6))
        with pytest.raises(ConfigurationError):
            predict_boundary(inst, inst.query_embedding, zero_params(c=7))

    def test_numpy_forward_matches_graph(self):
        inst = make_instance(seed=5)
        params = init_params(6, hidden_dim=8, seed=9, scale=0.4)
        b = predict_boundary(inst, inst.query_embedding, params)
        c, w = predict_boundary_values(inst, inst.query_embedding, params)
        assert value_of(b.center) == c
        assert value_of(b.width) == w


class TestSoftWindowMask:
    def test_whole_timeline_coverage(self):
        t = (np.arange(10) + 0.5) / 10
        mask = soft_window_mask(TemporalBoundary(0.5, 1.2), t, 500.0)
        assert np.all(mask.value > 0.999)

    def test_frame_at_start_edge_is_half(self):
        t = np.array([0.3, 0.9])
        mask = soft_window_mask(TemporalBoundary(0.65, 0.7), t, 500.0)
        # first frame exactly at sta = 0.3, end far away
        assert mask.value[0] == pytest.approx(0.5, abs=1e-6)

    def test_near_hard_indicator_away_from_edges(self):
        """Soft mask at k=500 matches the hard indicator away from edges."""
        t = (np.arange(64) + 0.5) / 64
        b = TemporalBoundary(0.5, 0.4)
        mask = soft_window_mask(b, t, 500.0).value
        hard = hard_indicator(0.3, 0.7, t)
        away = (np.abs(t - 0.3) >= 0.02) & (np.abs(t - 0.7) >= 0.02)
        assert np.max(np.abs(mask - hard)[away]) < 1e-3

    def test_strictly_inside_unit(self):
        t = (np.arange(32) + 0.5) / 32
        mask = soft_window_mask(TemporalBoundary(0.2, 0.1), t, 50.0).value
        assert np.all(mask > 0.0) and np.all(mask < 1.0)

    def test_monotone_in_width(self):
        """Widening the window never decreases any frame's membership."""
        t = (np.arange(32) + 0.5) / 32
        for c in (0.2, 0.5, 0.8):
            prev = None
            for w in np.linspace(0.05, 0.9, 12):
                m = soft_window_mask(TemporalBoundary(c, float(w)), t, 80.0).value
                if prev is not None:
                    assert np.all(m >= prev - 1e-15)
                prev = m

    def test_sharpness_convergence_monotone(self):
        """Mask-weighted mean of a step sequence approaches the hard inside
        mean monotonically as k grows."""
        t = (np.arange(64) + 0.5) / 64
        scores = ((t >= 0.3) & (t <= 0.7)).astype(float) * 0.8 + 0.1
        hard = scores[(t >= 0.32) & (t <= 0.68)].mean()
        errors = []
        for k in (50.0, 500.0, 5000.0):
            m = soft_window_mask(TemporalBoundary(0.5, 0.36), t, k).value
            soft_mean = float(np.dot(m, scores) / m.sum())
            errors.append(abs(soft_mean - hard))
        assert errors[0] > errors[1] > errors[2]

    def test_rejects_non_positive_k(self):
        with pytest.raises(ConfigurationError):
            soft_window_mask(TemporalBoundary(0.5, 0.4), np.array([0.5]), 0.0)


class TestShiftedOutsideMasks:
    def test_flank_window_positions(self):
        t = (np.arange(200) + 0.5) / 200
        out1, out2 = shifted_outside_masks(TemporalBoundary(0.5, 0.4), 0.25, t, 2000.0)
        # out1 covers [0.2, 0.3], out2 covers [0.7, 0.8]
        m1, m2 = out1.value, out2.value
        assert m1[(t > 0.21) & (t < 0.29)].min() > 0.99
        assert m1[(t < 0.19) | (t > 0.31)].max() < 0.01
        assert m2[(t > 0.71) & (t < 0.79)].min() > 0.99
        assert m2[(t < 0.69) | (t > 0.81)].max() < 0.01

    def test_off_timeline_window_vanishes(self):
        t = (np.arange(50) + 0.5) / 50
        out1, _ = shifted_outside_masks(TemporalBoundary(0.1, 0.4), 0.25, t, 500.0)
        # raw out1 window is [-0.2, -0.1]; all frame centers are >= 0.01
        assert float(np.sum(out1.value)) < 1e-8

    def test_tau_one_arithmetic(self):
        t = (np.arange(400) + 0.5) / 400
        out1, out2 = shifted_outside_masks(TemporalBoundary(0.5, 0.2), 1.0, t, 4000.0)
        assert out1.value[(t > 0.21) & (t < 0.39)].min() > 0.99
        assert out2.value[(t > 0.61) & (t < 0.79)].min() > 0.99

    def test_rejects_bad_tau(self):
        with pytest.raises(ConfigurationError):
            shifted_outside_masks(TemporalBoundary(0.5, 0.2), 0.0, np.array([0.5]), 50.0)


class TestPoolBoundaryFeature:
    def test_uniform_mask_is_plain_mean(self):
        inst = make_instance(t=9)
        mask = ad.DiffValue(np.full(9, 0.37))
        pooled = pool_boundary_feature(inst, mask)
        np.testing.assert_allclose(pooled.value, inst.frames.mean(axis=0), atol=1e-12)

    def test_one_hot_like_mask_selects_frame(self):
        """A very sharp window around one frame pools to that frame's feature."""
        inst = make_instance(t=16)
        t = inst.timeline
        mask = soft_window_mask(TemporalBoundary(float(t[5]), 1.5 / 16), t, 5000.0)
        pooled = pool_boundary_feature(inst, mask)
        assert np.max(np.abs(pooled.value - inst.frames[5])) < 1e-3

    def test_grad_check_through_center_width(self):
        inst = make_instance(t=10, seed=2)
        t = inst.timeline
        target = inst.frames[3]

        def f(p):
            c, w = ad.DiffValue(float(p[0])), ad.DiffValue(float(p[1]))
            mask = soft_window_mask(TemporalBoundary(c, w), t, 40.0)
            pooled = pool_boundary_feature(inst, mask)
            return ad.dot(pooled, target), [c, w]

        report = grad_check(f, np.array([0.45, 0.3]))
        assert report.passed, report.failures


class TestCheckpointFile:
    def test_roundtrip_bit_identical(self, tmp_path):
        params = init_params(6, hidden_dim=4, seed=11)
        params.step = 17
        path = tmp_path / "params.json"
        save_params(params, path)
        loaded = load_params(path)
        assert np.array_equal(loaded.w1, params.w1)
        assert np.array_equal(loaded.b1, params.b1)
        assert np.array_equal(loaded.w2, params.w2)
        assert np.array_equal(loaded.b2, params.b2)
        assert (loaded.k, loaded.seed, loaded.step) == (params.k, params.seed, params.step)
        save_params(loaded, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_invalid_shapes_rejected(self):
        with pytest.raises(ConfigurationError):
            PredictorParams(np.zeros((1, 4)), np.zeros(1), np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ConfigurationError):
            PredictorParams(np.zeros((4, 4)), np.zeros(4), np.zeros((2, 4)), np.zeros(2), k=0.0)
