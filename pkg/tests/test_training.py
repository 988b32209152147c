from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pifm.errors import ParameterError, TrainingError
from pifm.geometry import PointCloud, disc, gaussian
from pifm.model import AnalyticField, forward, init_params, lie_residual, load_checkpoint, save_checkpoint
from pifm.rng import RngStream
from pifm.training import (Adam, LossBreakdown, RotationScalingPath, TrainBatch, TrainConfig, clip_by_norm,
                           cond_fields, cond_mu, fm_loss, load_history_csv, pi_loss, pifm_loss,
                           sample_conditional_x, save_history_csv, train, train_cfm)
from pifm.transport import CoupledBatch, CoupledTuple

FAST = TrainConfig(n=2, batch_size=32, steps=20, lr=1e-3, width=16, depth=2)


def toy_batch(rng, B=6, n=2, d=2):
    a = rng.standard_normal((B, d))
    b = rng.standard_normal((B, n, d))
    z = CoupledBatch(a, b)
    t = rng.random((B, n))
    return TrainBatch.from_coupled(z, t, sample_conditional_x(z, t, 0.1, rng))


class TestConditionalPath:
    def test_examples(self):
        z = CoupledTuple((0.0, 0.0), ((1.0, 0.0), (0.0, 1.0)))
        np.testing.assert_array_equal(cond_mu(z, (0.0, 0.0)), [0.0, 0.0])
        np.testing.assert_array_equal(cond_mu(z, (1.0, 0.0)), [1.0, 0.0])
        np.testing.assert_array_equal(cond_mu(z, (0.0, 1.0)), [0.0, 1.0])
        np.testing.assert_array_equal(cond_mu(z, (0.5, 0.5)), [0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10_000))
    def test_boundaries(self, n, seed):
        gen = np.random.default_rng(seed)
        z = CoupledBatch(gen.standard_normal((5, 2)), gen.standard_normal((5, n, 2)))
        np.testing.assert_array_equal(cond_mu(z, np.zeros(n)), z.a)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            np.testing.assert_allclose(cond_mu(z, e), z.b[:, i], atol=1e-14)

    def test_sigma_zero(self, rng):
        z = CoupledTuple((1.0, 2.0), ((0.0, 0.0),))
        np.testing.assert_array_equal(sample_conditional_x(z, (0.3,), 0.0, rng), cond_mu(z, (0.3,)))

    def test_variance(self):
        a = np.zeros((8192, 2))
        z = CoupledBatch(a, np.ones((8192, 1, 2)))
        x = sample_conditional_x(z, [0.5], 0.2, RngStream(3, "noise"))
        np.testing.assert_allclose(x.var(axis=0), 0.04, rtol=0.1)

    def test_reproducible(self):
        z = CoupledBatch(np.zeros((10, 2)), np.ones((10, 2, 2)))
        x1 = sample_conditional_x(z, [0.1, 0.2], 0.5, RngStream(9, "noise"))
        x2 = sample_conditional_x(z, [0.1, 0.2], 0.5, RngStream(9, "noise"))
        np.testing.assert_array_equal(x1, x2)

    def test_negative_sigma(self, rng):
        with pytest.raises(ParameterError):
            sample_conditional_x(CoupledTuple((0.0,), ((1.0,),)), (0.5,), -1.0, rng)

    def test_cond_fields(self):
        np.testing.assert_array_equal(cond_fields(CoupledTuple((2.0, 2.0), ((2.0, 2.0), (2.0, 2.0)))), 0.0)
        np.testing.assert_array_equal(cond_fields(CoupledTuple((0.0, 0.0), ((1.0, 0.0),))), [[1.0, 0.0]])
        # curly pairing under the prescribed maps -I and 3I
        np.testing.assert_array_equal(cond_fields(CoupledTuple((1.0, 1.0), ((-1.0, -1.0), (3.0, 3.0)))),
                                      [[-2.0, -2.0], [2.0, 2.0]])


class TestRotationScalingPath:
    def test_corners(self, rng):
        path = RotationScalingPath(math.pi, 3.0)
        a = rng.standard_normal((5, 2))
        corner = lambda t, s: path.mean(a, None, np.tile([t, s], (5, 1)))
        np.testing.assert_allclose(corner(0, 0), a, atol=1e-14)
        np.testing.assert_allclose(corner(1, 0), -a, atol=1e-14)
        np.testing.assert_allclose(corner(0, 1), 3 * a, atol=1e-14)
        np.testing.assert_allclose(corner(1, 1), -3 * a, atol=1e-14)

    def test_velocities_are_derivatives(self, rng):
        path = RotationScalingPath(2.0, 2.5)
        a = rng.standard_normal((4, 2))
        t = rng.random((4, 2))
        h = 1e-6
        vel = path.velocities(a, None, t)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (path.mean(a, None, t + e) - path.mean(a, None, t - e)) / (2 * h)
            np.testing.assert_allclose(vel[:, i], fd, atol=1e-7)

    def test_conditional_fields_commute(self, rng):
        # along the path the two conditional flows commute: d_s u = d_t v
        path = RotationScalingPath(math.pi, 3.0)
        a = rng.standard_normal((4, 2))
        t = rng.random((4, 2))
        h = 1e-6
        ds_u = (path.velocities(a, None, t + [0, h])[:, 0] - path.velocities(a, None, t - [0, h])[:, 0]) / (2 * h)
        dt_v = (path.velocities(a, None, t + [h, 0])[:, 1] - path.velocities(a, None, t - [h, 0])[:, 1]) / (2 * h)
        np.testing.assert_allclose(ds_u, dt_v, atol=1e-6)


class TestLosses:
    def test_fm_zero_for_exact_field(self, rng):
        batch = toy_batch(rng)
        batch.velocity[:] = 0.0
        p = init_params(2, 2, 4, 1, RngStream(0))
        p.theta[:] = 0.0
        value, grad = fm_loss(p, batch)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_fm_example(self):
        z = CoupledBatch(np.zeros((1, 2)), np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        p = init_params(2, 2, 4, 1, RngStream(0))
        p.theta[:] = 0.0
        value, _ = fm_loss(p, TrainBatch.from_coupled(z, [0.3, 0.6], np.zeros((1, 2))))
        assert value == 2.0

    @pytest.mark.parametrize("lam", [0.0, 1.0])
    def test_total_gradient_finite_difference(self, rng, lam):
        p = init_params(2, 2, 8, 2, RngStream(1), head_hidden=1)
        batch = toy_batch(rng)
        loss, grad = pifm_loss(p, batch, lam)
        h = 1e-5
        for k in rng.choice(p.size, 30, replace=False):
            plus, minus = p.copy(), p.copy()
            plus.theta[k] += h
            minus.theta[k] -= h
            fd = (pifm_loss(plus, batch, lam, False)[0].total - pifm_loss(minus, batch, lam, False)[0].total) / (2 * h)
            assert abs(fd - grad[k]) <= 1e-4 * max(abs(fd), 1e-3)

    def test_pi_gradient_width_16(self, rng):
        p = init_params(3, 2, 16, 2, RngStream(2))
        batch = toy_batch(rng, n=3)
        value, grad = pi_loss(p, batch)
        assert value >= 0
        h = 1e-5
        for k in rng.choice(p.size, 25, replace=False):
            plus, minus = p.copy(), p.copy()
            plus.theta[k] += h
            minus.theta[k] -= h
            fd = (pi_loss(plus, batch)[0] - pi_loss(minus, batch)[0]) / (2 * h)
            assert abs(fd - grad[k]) <= 1e-4 * max(abs(fd), 1e-3)

    def test_pi_zero_on_constant_heads(self, rng):
        # zero every weight, keep the final head biases: each head is constant
        p = init_params(2, 2, 6, 2, RngStream(0))
        p.theta[:] = 0.0
        for i in range(2):
            last = p.head_layers(i)[-1]
            p.layer(last)[1][...] = rng.standard_normal(2)
        value, _ = pi_loss(p, toy_batch(rng))
        assert value == 0.0
        f = AnalyticField.constant(forward(p, np.zeros(2), np.zeros(2)))
        np.testing.assert_array_equal(lie_residual(f, np.ones(2), [0.5, 0.5], 0, 1), 0.0)

    def test_pi_needs_two_heads(self, rng):
        with pytest.raises(ParameterError):
            pi_loss(init_params(1, 2, 4, 1, RngStream(0)), toy_batch(rng, n=1))

    def test_total_consistency(self, rng):
        loss, _ = pifm_loss(init_params(2, 2, 8, 2, RngStream(0)), toy_batch(rng), 0.7)
        assert abs(loss.total - (loss.fm + 0.7 * loss.pi)) <= 1e-9
        assert loss.pi > 0


class TestOptimizer:
    def test_clip(self):
        np.testing.assert_allclose(clip_by_norm(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(clip_by_norm(np.array([0.3, 0.4]), 1.0), [0.3, 0.4])

    def test_adam_first_step(self):
        theta = np.array([1.0, -1.0])
        Adam(2, lr=0.1).step(theta, np.array([5.0, -0.01]))
        np.testing.assert_allclose(theta, [0.9, -0.9], atol=1e-6)

    def test_warmup(self):
        theta = np.zeros(1)
        Adam(1, lr=1.0, warmup=4).step(theta, np.ones(1))
        np.testing.assert_allclose(theta, [-0.25], atol=1e-6)


class TestTrain:
    def test_zero_steps_returns_init(self):
        cfg = replace(FAST, steps=0)
        params, history = train(cfg, disc((0, 0), 1.0), [disc((3, 0), 1.0), disc((0, 3), 1.0)])
        assert history == []
        init = init_params(2, 2, cfg.width, cfg.depth, RngStream(cfg.seed).child("params"))
        np.testing.assert_array_equal(params.theta, init.theta)

    def test_deterministic(self, tmp_path):
        src, tg = disc((0, 0), 1.0), [disc((3, 0), 1.0), disc((0, 3), 1.0)]
        p1, h1 = train(replace(FAST, lam=0.5), src, tg)
        p2, h2 = train(replace(FAST, lam=0.5), src, tg)
        assert h1 == h2
        save_checkpoint(p1, tmp_path / "a.ckpt")
        save_checkpoint(p2, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert load_checkpoint(tmp_path / "a.ckpt").config["lam"] == 0.5

    def test_target_count(self):
        with pytest.raises(ParameterError):
            train(FAST, disc((0, 0), 1.0), [disc((3, 0), 1.0)])

    def test_fm_decreases_on_gaussians(self):
        cfg = replace(FAST, steps=300, batch_size=64, lr=3e-3)
        _, hist = train(cfg, gaussian((0, 0), 0.25), [gaussian((4, 0), 0.25), gaussian((0, 4), 0.25)])
        fm = np.array([h.fm for h in hist])
        assert np.all(np.isfinite(fm))
        assert fm[-30:].mean() < 0.2 * fm[:30].mean()
        for h in hist:
            assert abs(h.total - (h.fm + h.lam * h.pi)) <= 1e-9

    def test_point_cloud_sources(self, rng):
        src = PointCloud.uniform(rng.standard_normal((50, 2)))
        tgt = PointCloud.uniform(rng.standard_normal((40, 2)) + 3)
        _, hist = train(replace(FAST, n=1, steps=5), src, [tgt])
        assert len(hist) == 5

    def test_non_finite_loss_names_step(self):
        cfg = replace(FAST, steps=5)
        with pytest.raises(TrainingError) as info:
            train(cfg, gaussian((0, 0), 1.0), [gaussian((1e200, 0), 1.0), gaussian((0, 1e200), 1.0)])
        assert info.value.step >= 0
        assert "step" in str(info.value)

    def test_prescribed_maps(self):
        cfg = replace(FAST, coupling="prescribed", lam=1.0, steps=3)
        _, hist = train(cfg, gaussian((0, 0), 1.0), maps=[-np.eye(2), 3 * np.eye(2)])
        assert len(hist) == 3 and all(np.isfinite(h.pi) for h in hist)

    def test_config_validation(self):
        for bad in ({"sigma": -1.0}, {"lam": -0.1}, {"batch_size": 0}, {"coupling": "nearest"}, {"path": "x"}):
            with pytest.raises(ParameterError):
                TrainConfig(**bad)


class TestCfmBaseline:
    def test_reduces_to_single_head_train(self):
        cfg = replace(FAST, n=1, steps=10)
        _, h1 = train_cfm(replace(cfg, n=2), disc((0, 0), 1.0), disc((3, 0), 1.0))
        _, h2 = train(cfg, disc((0, 0), 1.0), [disc((3, 0), 1.0)])
        assert h1 == h2

    def test_coupling_flag_only(self):
        cfg = replace(FAST, n=1, steps=5)
        _, hi = train_cfm(replace(cfg, coupling="independent"), disc((0, 0), 1.0), disc((3, 0), 1.0))
        _, ho = train_cfm(cfg, disc((0, 0), 1.0), disc((3, 0), 1.0))
        assert hi != ho and len(hi) == len(ho)

    def test_ot_direction_matches_translation(self):
        cfg = TrainConfig(n=1, batch_size=64, steps=300, lr=3e-3, width=32, depth=2, coupling="ot")
        shift = np.array([3.0, 1.0])
        params, _ = train_cfm(cfg, gaussian((0, 0), 1.0), gaussian(tuple(shift), 1.0))
        gen = np.random.default_rng(0)
        x = gen.standard_normal((512, 2))
        t = gen.random((512, 1))
        x = x + t * shift
        mean_dir = forward(params, x, t)[:, 0].mean(axis=0)
        cos = mean_dir @ shift / (np.linalg.norm(mean_dir) * np.linalg.norm(shift))
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))) <= 15.0


def test_history_csv_round_trip(tmp_path):
    hist = [LossBreakdown(1.0 / 3.0, 0.1, 0.5), LossBreakdown(0.25, 2e-17, 0.5)]
    save_history_csv(hist, tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,fm,pi,total"
    assert load_history_csv(tmp_path / "loss.csv", 0.5) == hist
