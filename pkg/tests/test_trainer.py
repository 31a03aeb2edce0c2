import numpy as np
import pytest

from quantmatch import (
    Corruption,
    PointCloud,
    TrainConfig,
    apply_corruption,
    evaluate_epoch,
    make_adapter,
    make_feature_map,
    select_references,
    sgd_step,
    six_blobs,
    train,
    two_moons,
)
from quantmatch.trainer import ConfigError, NonFiniteGradientError
from quantmatch.rng import SplitMix64

CORRUPTION = Corruption.linear([[1.25, 0.2], [-0.15, 0.9]])


def sixblobs_setup(noise=0.0, seed=7):
    clean = six_blobs(seed=seed)
    target = apply_corruption(clean, CORRUPTION)
    if noise > 0:
        target = apply_corruption(target, Corruption.gaussian_noise(noise), seed=13)
    fmap = make_feature_map("identity", 2)
    return clean, target, PointCloud(clean.cloud.points), fmap


def cfg_for(n, **kw):
    base = dict(
        epochs=50,
        batch_size=n,
        learning_rate=1e-2,
        momentum=0.9,
        reference_count=60,
        seed=5,
        full_batch=True,
        wasserstein_every=10,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestSgdStep:
    def _adapter(self):
        return make_adapter("affine", 2)

    def test_zero_gradient_keeps_parameters(self):
        ad = self._adapter()
        cfg = cfg_for(10)
        out, _ = sgd_step(ad, np.zeros(ad.n_params), cfg)
        np.testing.assert_array_equal(out.params, ad.params)

    def test_plain_step(self):
        ad = self._adapter()
        cfg = cfg_for(10, learning_rate=0.1, momentum=0.0)
        grad = np.zeros(ad.n_params)
        grad[0] = 1.0
        out, _ = sgd_step(ad, grad, cfg)
        assert out.params[0] == pytest.approx(ad.params[0] - 0.1, abs=1e-15)

    def test_momentum_matches_hand_recursion(self):
        ad = self._adapter()
        cfg = cfg_for(10, learning_rate=0.05, momentum=0.9)
        rng = SplitMix64.stream("sgd", 0)
        g1, g2 = rng.normals(ad.n_params), rng.normals(ad.n_params)

        out, vel = sgd_step(ad, g1, cfg)
        out, vel = sgd_step(out, g2, cfg, vel)

        v1 = g1
        theta1 = ad.params - 0.05 * v1
        v2 = 0.9 * v1 + g2
        theta2 = theta1 - 0.05 * v2
        np.testing.assert_allclose(out.params, theta2, atol=1e-12)

    def test_nonfinite_gradient_rejected(self):
        ad = self._adapter()
        grad = np.zeros(ad.n_params)
        grad[2] = np.inf
        with pytest.raises(NonFiniteGradientError):
            sgd_step(ad, grad, cfg_for(10))

    def test_wrong_length_rejected(self):
        with pytest.raises(ConfigError):
            sgd_step(self._adapter(), np.zeros(3), cfg_for(10))


class TestTrainBasics:
    def test_no_shift_stays_at_identity(self):
        clean, _, src, fmap = sixblobs_setup()
        adapter = make_adapter("affine", 2)
        cfg = cfg_for(clean.n, epochs=3)
        out, trace = train(src, clean.cloud, adapter, fmap, cfg, pairing=clean.pairing)
        assert trace.records[0].quantile_loss <= 1e-6
        np.testing.assert_allclose(out.params, adapter.params, atol=cfg.learning_rate * 1e-8)

    def test_config_validation(self):
        clean, target, src, fmap = sixblobs_setup()
        adapter = make_adapter("affine", 2)
        with pytest.raises(ConfigError):
            train(src, target.cloud, adapter, fmap, cfg_for(clean.n, epochs=0))
        with pytest.raises(ConfigError):
            train(src, target.cloud, adapter, fmap, cfg_for(clean.n, batch_size=clean.n + 1, full_batch=False))
        with pytest.raises(ConfigError):
            train(src, target.cloud, adapter, fmap, cfg_for(clean.n, learning_rate=0.0))

    def test_trace_has_one_record_per_epoch_plus_baseline(self):
        clean, target, src, fmap = sixblobs_setup()
        cfg = cfg_for(clean.n, epochs=7)
        _, trace = train(src, target.cloud, make_adapter("affine", 2), fmap, cfg, pairing=target.pairing)
        assert [r.epoch for r in trace.records] == list(range(8))
        assert all(r.quantile_loss >= 0 for r in trace.records)

    def test_determinism_bitwise(self):
        clean, target, src, fmap = sixblobs_setup(noise=0.1)
        cfg = cfg_for(clean.n, epochs=5, batch_size=64, full_batch=False)
        runs = []
        for _ in range(2):
            adapter = make_adapter("affine", 2)
            out, trace = train(src, target.cloud, adapter, fmap, cfg,
                               pairing=target.pairing, source_labels=clean.labels)
            runs.append((out.params.copy(), [r.quantile_loss for r in trace.records],
                         [r.grad_norm for r in trace.records]))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]
        assert runs[0][2] == runs[1][2]

    def test_full_batch_descent_is_monotone(self):
        clean, target, src, fmap = sixblobs_setup()
        cfg = cfg_for(clean.n, epochs=120, learning_rate=1e-3, momentum=0.0, wasserstein_every=10**9)
        _, trace = train(src, target.cloud, make_adapter("affine", 2), fmap, cfg)
        ql = trace.column("quantile_loss")
        assert np.all(ql[1:] <= ql[:-1] + 1e-9)


class TestTrendBehaviors:
    def test_sixblobs_good_initialization_both_losses_fall(self):
        clean, target, src, fmap = sixblobs_setup()
        cfg = cfg_for(clean.n, epochs=300)
        _, trace = train(src, target.cloud, make_adapter("affine", 2), fmap, cfg,
                         pairing=target.pairing, source_labels=clean.labels)
        first, last = trace.records[0], trace.records[-1]
        assert last.quantile_loss < 0.2 * first.quantile_loss
        assert last.paired_mse < 0.2 * first.paired_mse
        assert last.wasserstein2 < 0.5 * first.wasserstein2

    def test_twomoons_flip_initialization_mse_stalls(self):
        clean = two_moons(seed=3, n=200, noise_sigma=0.03)
        target = apply_corruption(clean, Corruption.rotation(180.0))
        fmap = make_feature_map("identity", 2)
        adapter = make_adapter("affine", 2, init_rotation_deg=45.0)
        cfg = cfg_for(200, epochs=80, learning_rate=0.5, reference_count=200)
        _, trace = train(PointCloud(clean.cloud.points), target.cloud, adapter, fmap, cfg,
                         pairing=target.pairing, source_labels=clean.labels)
        first, last = trace.records[0], trace.records[-1]
        assert last.quantile_loss < 0.5 * first.quantile_loss
        assert last.paired_mse > 0.9 * first.paired_mse  # conditionals swapped, MSE cannot recover

    def test_minibatch_tracks_full_batch(self):
        clean, target, src, fmap = sixblobs_setup(noise=0.1)
        finals = []
        for full, bs in ((True, clean.n), (False, 32)):
            cfg = cfg_for(clean.n, epochs=400, batch_size=bs, full_batch=full, wasserstein_every=10**9)
            _, trace = train(src, target.cloud, make_adapter("affine", 2), fmap, cfg,
                             pairing=target.pairing, source_labels=clean.labels)
            finals.append(trace.records[-1].quantile_loss)
        fb, mb = finals
        assert abs(mb - fb) <= 0.2 * fb

    def test_minibatch_variance_columns_populated(self):
        clean, target, src, fmap = sixblobs_setup(noise=0.1)
        cfg = cfg_for(clean.n, epochs=3, batch_size=32, full_batch=False)
        _, trace = train(src, target.cloud, make_adapter("affine", 2), fmap, cfg)
        rec = trace.records[-1]
        assert rec.crude_var > 0
        assert 0 <= rec.control_var < rec.crude_var


class TestEvaluateEpoch:
    def test_perfect_reconstruction(self):
        clean, target, src, fmap = sixblobs_setup()
        refs = select_references(src, 60, seed=5, labels=clean.labels)
        inverse = CORRUPTION.exact_inverse_matrix()
        adapter = make_adapter("affine", 2)
        adapter = adapter.with_params(np.concatenate([inverse.ravel(), np.zeros(2)]))
        rec = evaluate_epoch(adapter, fmap, src, target.cloud, refs, pairing=target.pairing)
        assert rec.paired_mse == pytest.approx(0.0, abs=1e-18)
        assert rec.quantile_loss == pytest.approx(0.0, abs=1e-18)
        assert rec.wasserstein2 == pytest.approx(0.0, abs=1e-9)

    def test_identity_on_shifted_data_all_positive(self):
        clean, target, src, fmap = sixblobs_setup()
        refs = select_references(src, 60, seed=5)
        rec = evaluate_epoch(make_adapter("identity", 2), fmap, src, target.cloud, refs,
                             pairing=target.pairing)
        assert rec.quantile_loss > 0
        assert rec.paired_mse > 0
        assert rec.wasserstein2 > 0

    def test_oversize_cloud_skips_wasserstein(self):
        clean, target, src, fmap = sixblobs_setup()
        refs = select_references(src, 10, seed=5)
        rec = evaluate_epoch(make_adapter("identity", 2), fmap, src, target.cloud, refs,
                             wasserstein_max_size=100)
        assert rec.wasserstein2 is None
        assert "wasserstein_skipped" in rec.flag
