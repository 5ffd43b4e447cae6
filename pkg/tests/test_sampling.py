"""Reverse-chain sampling: determinism, seed contracts, ensemble order,
STAPLE-fused prediction, and the train-only decoder guarantee."""

import numpy as np
import pytest

from crossdiff.data import synth_crack
from crossdiff.metrics import dice
from crossdiff.model import ModelConfig, build_model
from crossdiff.sampling import (binarize, ensemble_sample, fused_prediction,
                                sample_mask)
from crossdiff.staple import staple_fuse


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(image_side=64, diff_side=32, patch_size=8, enc_depth=1,
                      enc_width=8, enc_heads=2, unet_widths=(4, 8),
                      unet_attn_heads=2, d_t=8, temb_dim=16, T=10,
                      decoder_channel_floor=4, dtype="float32")
    m = build_model(cfg, seed=4)
    rng = np.random.default_rng(0)
    # non-degenerate outputs: randomize the zero-initialized layers
    for name, p in m.named_parameters():
        if p.data.ndim > 1 and np.all(p.data == 0):
            p.data = (rng.standard_normal(p.data.shape) * 0.05).astype(p.data.dtype)
    return m


@pytest.fixture(scope="module")
def image():
    return synth_crack(64, 1, (2, 3), np.random.default_rng(8), diff_side=32).image


class TestSampleMask:
    def test_deterministic_under_fixed_seed(self, model, image):
        a = sample_mask(model, image, np.random.default_rng(42))
        b = sample_mask(model, image, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_output_range_and_shape(self, model, image):
        m = sample_mask(model, image, np.random.default_rng(1))
        assert m.shape == (32, 32)
        assert m.min() >= 0.0 and m.max() <= 1.0

    def test_decoder_never_invoked(self, model, image):
        calls_before = model.cross_decoder.calls
        sample_mask(model, image, np.random.default_rng(2))
        ensemble_sample(model, image, n=2, seeds=[1, 2])
        fused_prediction(model, image, n=2, seeds=[3, 4])
        assert model.cross_decoder.calls == calls_before

    def test_wrong_image_shape_rejected(self, model):
        with pytest.raises(ValueError, match="mismatch"):
            sample_mask(model, np.zeros((3, 32, 32), dtype=np.float32),
                        np.random.default_rng(0))


class TestEnsembleSample:
    def test_singleton_equals_sample_mask(self, model, image):
        via_ensemble = ensemble_sample(model, image, n=1, seeds=[77])[0]
        direct = sample_mask(model, image, np.random.default_rng(77))
        np.testing.assert_array_equal(via_ensemble, direct)

    def test_distinct_seeds_distinct_masks(self, model, image):
        masks = ensemble_sample(model, image, n=5, seeds=[1, 2, 3, 4, 5])
        assert len(masks) == 5
        for i in range(5):
            for j in range(i + 1, 5):
                assert np.abs(masks[i] - masks[j]).max() > 0

    def test_seed_permutation_permutes_outputs(self, model, image):
        seeds = [11, 22, 33]
        a = ensemble_sample(model, image, n=3, seeds=seeds)
        b = ensemble_sample(model, image, n=3, seeds=[33, 11, 22])
        np.testing.assert_array_equal(a[0], b[1])
        np.testing.assert_array_equal(a[1], b[2])
        np.testing.assert_array_equal(a[2], b[0])

    def test_seed_count_must_match(self, model, image):
        with pytest.raises(ValueError):
            ensemble_sample(model, image, n=3, seeds=[1, 2])

    def test_duplicate_seeds_rejected(self, model, image):
        with pytest.raises(ValueError):
            ensemble_sample(model, image, n=3, seeds=[1, 1, 2])


class TestBinarize:
    def test_simple_threshold(self):
        out = binarize(np.array([0.4, 0.6]), 0.5)
        np.testing.assert_array_equal(out, [0, 1])

    def test_threshold_above_max_empties(self, rng):
        soft = rng.uniform(0, 0.8, (4, 4))
        assert binarize(soft, 0.81).sum() == 0

    def test_sweep_monotone_on_random_masks(self, rng):
        soft = rng.uniform(size=(16, 16))
        counts = [binarize(soft, t).sum() for t in np.arange(0.1, 0.96, 0.05)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    @pytest.mark.parametrize("theta", [0.0, 1.0, -0.5, 1.5])
    def test_rejects_out_of_range(self, theta):
        with pytest.raises(ValueError):
            binarize(np.zeros((2, 2)), theta)


class TestFusedPrediction:
    def test_unanimous_raters_pass_through(self, rng):
        """When the raters are identical binary masks, STAPLE + threshold
        returns that mask for any theta."""
        m = (rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)
        m[0, 0], m[7, 7] = 1, 0
        res = staple_fuse([m] * 5)
        for theta in (0.3, 0.5, 0.7):
            np.testing.assert_array_equal(binarize(res.consensus, theta), m)

    def test_deterministic_end_to_end(self, model, image):
        a = fused_prediction(model, image, n=3, seeds=[5, 6, 7])
        b = fused_prediction(model, image, n=3, seeds=[5, 6, 7])
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.consensus, b.consensus)

    def test_single_sample_bypasses_staple(self, model, image):
        pred = fused_prediction(model, image, theta=0.5, n=1, seeds=[9])
        assert pred.staple is None
        np.testing.assert_array_equal(pred.mask, binarize(pred.samples[0], 0.5))

    def test_fusion_beats_perturbed_raters(self, rng):
        """Five noisy perturbations of one mask fuse to within 0.02 Dice of
        the best single rater."""
        gt = np.zeros((24, 24), dtype=np.uint8)
        gt[10:13, 2:22] = 1
        raters = []
        for k in range(5):
            m = gt.copy().reshape(-1)
            flips = rng.choice(m.size, size=8, replace=False)
            m[flips] ^= 1
            raters.append(m.reshape(24, 24))
        fused = binarize(staple_fuse(raters).consensus, 0.5)
        best = max(dice(r, gt) for r in raters)
        assert dice(fused, gt) >= best - 0.02
