"""STAPLE fusion: unanimity fixpoint, exchangeability, EM log-likelihood
monotonicity, and per-iteration equivalence with an independent
brute-force EM."""

import numpy as np
import pytest

from crossdiff.staple import CLAMP_EPS, staple_fuse


def brute_force_staple(masks, prior, n_iter):
    """Independent EM transcription: explicit loops, no vectorization,
    same update equations and clamping. Returns per-iteration
    (W, p, q, ll) tuples."""
    d = [list(np.asarray(m).reshape(-1).astype(float)) for m in masks]
    j = len(d)
    npix = len(d[0])
    p = [0.99] * j
    q = [0.99] * j
    out = []
    for _ in range(n_iter):
        w = [0.0] * npix
        ll = 0.0
        for i in range(npix):
            a = prior
            b = 1.0 - prior
            for r in range(j):
                if d[r][i] == 1.0:
                    a *= p[r]
                    b *= 1.0 - q[r]
                else:
                    a *= 1.0 - p[r]
                    b *= q[r]
            w[i] = a / (a + b)
            ll += np.log(a + b)
        wsum = sum(w)
        cwsum = sum(1.0 - x for x in w)
        for r in range(j):
            num_p = sum(w[i] * d[r][i] for i in range(npix))
            num_q = sum((1.0 - w[i]) * (1.0 - d[r][i]) for i in range(npix))
            p[r] = min(max(num_p / wsum, CLAMP_EPS), 1.0 - CLAMP_EPS)
            q[r] = min(max(num_q / cwsum, CLAMP_EPS), 1.0 - CLAMP_EPS)
        out.append((list(w), list(p), list(q), ll))
    return out


class TestStapleBasics:
    def test_requires_two_masks(self):
        with pytest.raises(ValueError):
            staple_fuse([np.zeros((2, 2))])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            staple_fuse([np.zeros((2, 2)), np.zeros((3, 3))])

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            staple_fuse([np.full((2, 2), 0.5), np.zeros((2, 2))])

    def test_consensus_in_unit_interval(self, rng):
        masks = [(rng.uniform(size=(6, 6)) < 0.4).astype(np.uint8) for _ in range(4)]
        res = staple_fuse(masks)
        assert np.all(res.consensus >= 0.0) and np.all(res.consensus <= 1.0)

    def test_rates_respect_clamp(self, rng):
        masks = [np.ones((4, 4), dtype=np.uint8) for _ in range(3)]
        res = staple_fuse(masks)
        for arr in (res.sensitivities, res.specificities):
            assert np.all(arr >= CLAMP_EPS) and np.all(arr <= 1.0 - CLAMP_EPS)


class TestUnanimityFixpoint:
    def test_identical_raters_reproduce_mask(self, rng):
        m = (rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)
        m[0, 0] = 1  # ensure both classes present
        m[7, 7] = 0
        res = staple_fuse([m] * 4)
        np.testing.assert_allclose(res.consensus, m, atol=1e-4)
        # p_j, q_j driven to the clamp ceiling
        np.testing.assert_allclose(res.sensitivities, 1.0 - CLAMP_EPS, atol=1e-9)
        np.testing.assert_allclose(res.specificities, 1.0 - CLAMP_EPS, atol=1e-9)


class TestExchangeability:
    def test_rater_permutation(self, rng):
        masks = [(rng.uniform(size=(5, 7)) < 0.35).astype(np.uint8) for _ in range(4)]
        perm = [2, 0, 3, 1]
        a = staple_fuse(masks)
        b = staple_fuse([masks[i] for i in perm])
        np.testing.assert_allclose(a.consensus, b.consensus, atol=1e-12)
        np.testing.assert_allclose(a.sensitivities[perm], b.sensitivities, atol=1e-12)
        np.testing.assert_allclose(a.specificities[perm], b.specificities, atol=1e-12)


class TestLogLikelihoodMonotonicity:
    def test_nondecreasing_within_slack(self, rng):
        for trial in range(5):
            r = np.random.default_rng(trial)
            masks = [(r.uniform(size=(10, 10)) < 0.25).astype(np.uint8)
                     for _ in range(5)]
            res = staple_fuse(masks)
            lls = np.array(res.log_likelihoods)
            assert np.all(np.diff(lls) >= -1e-9), f"trial {trial}: {lls}"


class TestBruteForceEquivalence:
    def test_three_raters_four_pixels(self):
        """Spec instance: raters {1100, 1100, 1000}, prior 0.5."""
        masks = [np.array([1, 1, 0, 0]), np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0])]
        res = staple_fuse(masks, prior=0.5, max_iter=12, tol=0.0, record_trace=True)
        oracle = brute_force_staple(masks, 0.5, len(res.trace))
        for it, tr in enumerate(res.trace):
            w_o, p_o, q_o, ll_o = oracle[it]
            np.testing.assert_allclose(tr["W"], w_o, atol=1e-9)
            np.testing.assert_allclose(tr["p"], p_o, atol=1e-9)
            np.testing.assert_allclose(tr["q"], q_o, atol=1e-9)
            assert tr["ll"] == pytest.approx(ll_o, abs=1e-9)

    def test_random_instance_16_pixels(self, rng):
        masks = [(rng.uniform(size=16) < 0.4).astype(np.uint8) for _ in range(3)]
        res = staple_fuse(masks, prior=0.3, max_iter=8, tol=0.0, record_trace=True)
        oracle = brute_force_staple(masks, 0.3, len(res.trace))
        for it, tr in enumerate(res.trace):
            w_o, p_o, q_o, _ = oracle[it]
            np.testing.assert_allclose(tr["W"], w_o, atol=1e-9)
            np.testing.assert_allclose(tr["p"], p_o, atol=1e-9)
            np.testing.assert_allclose(tr["q"], q_o, atol=1e-9)


class TestConvergence:
    def test_stops_by_tolerance_on_agreeing_raters(self, rng):
        gt = (rng.uniform(size=(8, 8)) < 0.2).astype(np.uint8)
        masks = []
        for _ in range(4):
            m = gt.copy()
            m.reshape(-1)[rng.integers(0, 64, 3)] ^= 1
            masks.append(m)
        res = staple_fuse(masks, tol=1e-6, max_iter=100)
        assert res.converged
        assert res.iterations < 100

    def test_stops_at_max_iter_otherwise(self, rng):
        masks = [(rng.uniform(size=(6, 6)) < 0.3).astype(np.uint8) for _ in range(3)]
        res = staple_fuse(masks, tol=1e-12, max_iter=30)
        assert not res.converged
        assert res.iterations == 30

    def test_default_prior_is_mean_foreground(self, rng):
        masks = [np.zeros((4, 4), dtype=np.uint8) for _ in range(3)]
        masks[0][0, 0] = 1
        res = staple_fuse(masks, max_iter=3)
        assert res.prior == pytest.approx(1.0 / 48.0, rel=1e-12)
