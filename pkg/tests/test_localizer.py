import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from latentloc.encoders import encode_image, encode_poses
from latentloc.errors import DegenerateVectorError, InvalidArgumentError
from latentloc.geometry import Frame, NoiseVector, Pose, SceneFrame, average_pose_arrays
from latentloc.localizer import (
    CANDIDATE_COLUMNS,
    CandidateSet,
    LocalizerConfig,
    export_score_map,
    final_estimate,
    flops_estimate,
    initial_candidates,
    localize,
    mixture_components,
    noise_at,
    propose_next,
    sample_mixture,
    score_candidates,
    table_text,
    top_indices,
)
from latentloc.nn import cosine_score

from helpers import small_model


def cfg(**kw):
    base = dict(n_candidates=64, iterations=3, top_b=8, avg_count=16)
    base.update(kw)
    return LocalizerConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = LocalizerConfig()
        assert (c.n_candidates, c.iterations, c.top_b, c.avg_count) == (4096, 6, 100, 256)
        assert c.noise.to_list() == [8.0, 0.2, 8.0, 1.0, 5.0, 1.0]

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            LocalizerConfig(n_candidates=5, top_b=6)
        with pytest.raises(InvalidArgumentError):
            LocalizerConfig(iterations=-1)
        with pytest.raises(InvalidArgumentError):
            LocalizerConfig(init_mode="sphere")


class TestInitial:
    def test_single_reference(self):
        m = small_model(n_ref=1)
        cs = initial_candidates(m.scene("a"), cfg(n_candidates=8), np.random.default_rng(0))
        assert len(cs) == 8
        assert (cs.t == m.scene("a").initial_t[0]).all() and (cs.q == m.scene("a").initial_q[0]).all()

    def test_deterministic(self):
        s = small_model().scene("a")
        a = initial_candidates(s, cfg(), np.random.default_rng(7))
        b = initial_candidates(s, cfg(), np.random.default_rng(7))
        np.testing.assert_array_equal(a.t, b.t)

    def test_uniform_over_references(self):
        s = small_model(n_ref=20).scene("a")
        cs = initial_candidates(s, cfg(n_candidates=100000), np.random.default_rng(1))
        ref = {tuple(t): i for i, t in enumerate(s.initial_t)}
        counts = np.bincount([ref[tuple(t)] for t in cs.t], minlength=20)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_grid_mode(self):
        s = small_model(n_ref=30).scene("a")
        cs = initial_candidates(s, cfg(n_candidates=49, init_mode="grid2d"), np.random.default_rng(0))
        assert len(np.unique(cs.t[:, 0])) == 7 and len(np.unique(cs.t[:, 2])) == 7
        assert np.all(cs.t[:, 1] == np.median(s.initial_t[:, 1]))
        refq = {tuple(q) for q in s.initial_q}
        assert all(tuple(q) in refq for q in cs.q)


class TestScoring:
    def test_self_and_opposite(self):
        m = small_model()
        s = m.scene("a")
        cs = CandidateSet(s.initial_t[:5], s.initial_q[:5])
        lat = encode_poses(s.pose_encoder, (cs.t, cs.q))
        assert score_candidates(s, lat[0], cs).scores[0] == pytest.approx(1.0)
        assert score_candidates(s, -lat[0], cs).scores[0] == 0.0

    def test_batch_equals_items(self):
        m = small_model()
        s = m.scene("a")
        z = encode_image(m, np.random.default_rng(0).normal(size=8))
        cs = score_candidates(s, z, CandidateSet(s.initial_t, s.initial_q))
        lat = encode_poses(s.pose_encoder, (s.initial_t, s.initial_q))
        np.testing.assert_allclose(cs.scores, [cosine_score(z, l) for l in lat], atol=1e-15)
        assert (cs.scores >= 0).all() and (cs.scores <= 1).all()

    def test_zero_latent(self):
        s = small_model().scene("a")
        with pytest.raises(DegenerateVectorError):
            score_candidates(s, np.zeros(16), CandidateSet(s.initial_t, s.initial_q))


class TestProposer:
    def test_equal_scores_uniform_weights(self):
        idx, w = mixture_components(np.full(20, 0.3), np.full(20, 0.3), 5)
        np.testing.assert_array_equal(idx, [0, 1, 2, 3, 4])
        np.testing.assert_allclose(w, 0.2, rtol=0, atol=1e-15)

    def test_all_zero_fallback(self):
        raw = np.array([-0.5, -0.1, -0.9, -0.2])
        idx, w = mixture_components(np.zeros(4), raw, 2)
        np.testing.assert_array_equal(idx, [1, 3])
        np.testing.assert_array_equal(w, [0.5, 0.5])

    def test_stable_ties(self):
        np.testing.assert_array_equal(top_indices(np.array([1, 3, 3, 2, 3]), 3), [1, 2, 4])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=300), st.integers(1, 100))
    def test_weights_sum_to_one(self, scores, b):
        s = np.array(scores)
        idx, w = mixture_components(s, s - 0.5, min(b, len(s)))
        assert (w >= 0).all()
        assert abs(w.sum() - 1.0) < 1e-12
        assert len(set(idx.tolist())) == len(idx)

    def test_variance_halving(self):
        v = NoiseVector()
        assert noise_at(v, 0).v_t[0] == 8.0 and noise_at(v, 1).v_t[0] == 4.0
        for k in range(10):
            np.testing.assert_array_equal(noise_at(v, k).v_t, v.v_t / 2**k)
            np.testing.assert_array_equal(noise_at(v, k).v_r, v.v_r / 2**k)

    def test_single_hot_score_mean(self):
        frame = SceneFrame([0, 0, 0], 100.0)
        n = 2000
        t = np.random.default_rng(0).uniform(-0.4, 0.4, (10, 3))
        q = np.tile([0.0, 0.0, 0.0, 1.0], (10, 1))
        scores = np.zeros(10)
        scores[3] = 1.0
        c = cfg(n_candidates=n, top_b=10)
        std_t, _ = noise_at(c.noise, 0).normalized_std(frame)
        for seed in range(30):
            cs = propose_next(CandidateSet(t, q, 0, scores, scores), c, np.random.default_rng(seed), frame)
            assert np.all(np.abs(cs.t.mean(0) - t[3]) <= 3 * std_t / math.sqrt(n))
            assert cs.k == 1

    def test_sample_std(self):
        rng = np.random.default_rng(0)
        t, q = sample_mixture(np.zeros((1, 3)), np.tile([0, 0, 0, 1.0], (1, 1)), np.ones(1), 200000,
                              np.array([0.1, 0.01, 0.2]), np.zeros(3), rng)
        np.testing.assert_allclose(t.std(0), [0.1, 0.01, 0.2], rtol=0.01)

    def test_unscored_rejected(self):
        s = small_model().scene("a")
        with pytest.raises(InvalidArgumentError):
            propose_next(CandidateSet(s.initial_t, s.initial_q), cfg(), np.random.default_rng(0), s.frame)


class TestLocalize:
    def test_deterministic(self):
        m = small_model()
        f = np.random.default_rng(0).normal(size=8)
        a = localize(m, f, cfg(), np.random.default_rng(3))
        b = localize(m, f, cfg(), np.random.default_rng(3))
        np.testing.assert_array_equal(a.pose.t, b.pose.t)
        np.testing.assert_array_equal(a.pose.q, b.pose.q)
        assert a.pose.frame is Frame.WORLD
        assert len(a.diagnostics) == 4 and [c.k for c in a.diagnostics] == [0, 1, 2, 3]

    def test_zero_iterations(self):
        m = small_model()
        f = np.random.default_rng(0).normal(size=8)
        c = cfg(iterations=0)
        res = localize(m, f, c, np.random.default_rng(1))
        s = m.scene("a")
        init = score_candidates(s, encode_image(m, f), initial_candidates(s, c, np.random.default_rng(1)))
        t, q = final_estimate(init, c.avg_count)
        np.testing.assert_array_equal(res.pose.t, s.frame.to_world(t))

    def test_avg_count_clamped(self):
        cs = CandidateSet(np.arange(12.0).reshape(4, 3), np.tile([0, 0, 0, 1.0], (4, 1)), 0,
                          np.array([0.1, 0.2, 0.3, 0.4]), np.zeros(4))
        t, _ = final_estimate(cs, 256)
        want, _ = average_pose_arrays(cs.t, cs.q, cs.scores)
        np.testing.assert_allclose(t, want, rtol=1e-14)

    def test_final_weights_all_zero_averages_uniformly(self):
        cs = CandidateSet(np.arange(12.0).reshape(4, 3), np.tile([0, 0, 0, 1.0], (4, 1)), 0, np.zeros(4),
                          np.zeros(4))
        t, _ = final_estimate(cs, 2)
        np.testing.assert_array_equal(t, cs.t[:2].mean(0))

    def test_memory_independent_of_k(self):
        m = small_model()
        f = np.random.default_rng(0).normal(size=8)
        peaks = {localize(m, f, cfg(iterations=k), np.random.default_rng(0), keep_diagnostics=False)
                 .peak_live_candidates for k in (1, 3, 9)}
        assert peaks == {64 + 8 + 64}


class TestFlops:
    def test_linear_in_k_and_n(self):
        m = small_model()
        base = flops_estimate(m, cfg(iterations=3, n_candidates=64))
        assert flops_estimate(m, cfg(iterations=6, n_candidates=64))["pose_decode_flops"] == 2 * base["pose_decode_flops"]
        assert flops_estimate(m, cfg(iterations=3, n_candidates=128))["pose_decode_flops"] == 2 * base["pose_decode_flops"]

    def test_default_regression_constant(self):
        from latentloc.encoders import ModelConfig, build_model

        m = build_model({"s": (SceneFrame([0, 0, 0], 1.0), np.zeros((1, 3)), np.array([[0, 0, 0, 1.0]]))},
                        ModelConfig())
        f = flops_estimate(m)
        mlp = 2 * (161 * 256 + 3 * 256 * 256)
        assert f["image_head_flops"] == 2 * (64 * 256 + 256 * 256) == 163840
        assert f["per_candidate_flops"] == mlp + 4 * 256 == 476672
        assert f["pose_decode_flops"] == 6 * 4096 * 476672 == 11714691072
        assert f["total"] == 11714854912


class TestScoreMap:
    def test_rows(self):
        m = small_model()
        s = m.scene("a")
        z = encode_image(m, np.ones(8))
        assert export_score_map(m, z, np.zeros((0, 3)), np.zeros((0, 4))).shape == (0, 9)
        rows = export_score_map(m, z, s.initial_t, s.initial_q)
        assert rows.shape == (50, len(CANDIDATE_COLUMNS))
        np.testing.assert_allclose(rows[:, 1:4], s.frame.to_world(s.initial_t))

    def test_table_format(self):
        text = table_text(CANDIDATE_COLUMNS, [[0, 1.0, 2.5, 1 / 3, 0, 0, 0, 1, 0.123456789012]], ["seed = 1"])
        lines = text.splitlines()
        assert lines[0] == "# seed = 1"
        assert lines[1] == "k,tx,ty,tz,qx,qy,qz,qw,score"
        assert lines[2] == "0,1,2.5,0.333333333,0,0,0,1,0.123456789"
