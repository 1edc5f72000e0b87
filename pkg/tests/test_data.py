import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from latentloc.data import (
    DescriptorOracle,
    SceneDataset,
    SyntheticSceneConfig,
    checkpoint_bytes,
    dataset_stats,
    generate_synthetic_scene,
    load_checkpoint,
    load_descriptors,
    load_poses,
    load_scene_dir,
    make_dataset,
    model_from_bytes,
    read_pose_table,
    save_checkpoint,
    save_descriptors,
    save_scene_dir,
    write_pose_table,
)
from latentloc.encoders import encode_image, encode_poses
from latentloc.errors import (
    DimensionError,
    FormatError,
    InvalidArgumentError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from latentloc.geometry import SceneFrame, geodesic_distance
from latentloc.localizer import CandidateSet, score_candidates

from conftest import random_quats
from helpers import small_model

SMALL = SyntheticSceneConfig(n_train=300, n_test=60, runs=3, feature_dim=16)


class TestPoseTable:
    def write(self, tmp_path, text):
        p = tmp_path / "poses.csv"
        p.write_text(text)
        return p

    def test_identity_row(self, tmp_path):
        (name, pose), = load_poses(self.write(tmp_path, "image_id,tx,ty,tz,qx,qy,qz,qw\nimg0,0,0,0,0,0,0,1\n"))
        assert name == "img0"
        assert not pose.t.any() and geodesic_distance(pose.q, [0, 0, 0, 1]) == 0

    def test_renormalization_band(self, tmp_path):
        (_, pose), = load_poses(self.write(tmp_path, "image_id,tx,ty,tz,qx,qy,qz,qw\na,0,0,0,0,0,0,1.0009\n"))
        assert abs(np.linalg.norm(pose.q) - 1) < 1e-15
        with pytest.raises(FormatError):
            load_poses(self.write(tmp_path, "image_id,tx,ty,tz,qx,qy,qz,qw\na,0,0,0,0,0,0,0.9\n"))

    @pytest.mark.parametrize("text", [
        "image_id,tx,ty,tz,qx,qy,qz\na,0,0,0,0,0,0\n",
        "image_id,tx,ty,tz,qx,qy,qz,qw\na,nan,0,0,0,0,0,1\n",
        "image_id,tx,ty,tz,qx,qy,qz,qw\na,inf,0,0,0,0,0,1\n",
        "image_id,tx,ty,tz,qx,qy,qz,qw\na,0,0,0,0,0,0,1\na,1,0,0,0,0,0,1\n",
        "image_id,tx,ty,tz,qx,qy,qz,qw\na,zero,0,0,0,0,0,1\n",
        "image_id,tx,ty,tz,qx,qy,qz,qw\na,0,0,0\n",
        "",
    ])
    def test_rejections(self, tmp_path, text):
        with pytest.raises(FormatError):
            load_poses(self.write(tmp_path, text))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        t = rng.normal(scale=1e3, size=(1000, 3))
        q = random_quats(rng, 1000)
        ids = [f"im{i}" for i in range(1000)]
        write_pose_table(tmp_path / "p.csv", ids, t, q)
        ids2, t2, q2 = read_pose_table(tmp_path / "p.csv")
        assert ids2 == ids
        np.testing.assert_array_equal(t2, t)
        np.testing.assert_array_equal(q2, q)


class TestDescriptors:
    def test_empty(self, tmp_path):
        p = tmp_path / "e.impd"
        save_descriptors(p, [], np.zeros((0, 8)))
        assert os.path.getsize(p) == 16
        m, ids = load_descriptors(p)
        assert m.shape == (0, 8) and ids == []

    def test_round_trip_and_index(self, tmp_path):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(257, 13)).astype(np.float32)
        ids = [f"x{i:04d}" for i in range(257)][::-1]
        p = tmp_path / "d.impd"
        save_descriptors(p, ids, m)
        m2, ids2 = load_descriptors(p)
        assert m2.dtype == np.float32 and m2.tobytes() == m.tobytes()
        for i in range(257):
            assert ids2[i] == ids[i]
            np.testing.assert_array_equal(m2[i], m[i])

    def test_layout(self, tmp_path):
        p = tmp_path / "d.impd"
        save_descriptors(p, ["a", "b"], np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32))
        raw = p.read_bytes()
        assert raw[:4] == b"IMPD"
        assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)
        assert np.frombuffer(raw[16:], "<f4").tolist() == [1, 2, 3, 4, 5, 6]
        assert (tmp_path / "d.impd.ids.csv").read_text().splitlines() == ["image_id,row", "a,0", "b,1"]

    def test_errors(self, tmp_path):
        p = tmp_path / "d.impd"
        save_descriptors(p, ["a", "b"], np.ones((2, 4), np.float32))
        raw = p.read_bytes()
        p.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            load_descriptors(p)
        p.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with pytest.raises(VersionMismatchError):
            load_descriptors(p)
        p.write_bytes(raw[:-3])
        with pytest.raises(TruncatedPayloadError):
            load_descriptors(p)
        p.write_bytes(raw + b"\0\0\0\0")
        with pytest.raises(FormatError):
            load_descriptors(p)
        p.write_bytes(raw)
        (tmp_path / "d.impd.ids.csv").write_text("image_id,row\na,0\n")
        with pytest.raises(FormatError):
            load_descriptors(p)
        with pytest.raises(DimensionError):
            save_descriptors(p, ["a"], np.ones((2, 4)))


class TestSynthetic:
    def test_deterministic(self):
        a, b = generate_synthetic_scene(SMALL), generate_synthetic_scene(SMALL)
        assert a.features.tobytes() == b.features.tobytes() and a.t.tobytes() == b.t.tobytes()
        assert a.image_ids == b.image_ids

    def test_noise_free_same_pose(self):
        cfg = SyntheticSceneConfig(sigma_obs=0.0, sigma_run=0.0, feature_dim=16)
        oracle = DescriptorOracle.from_config(cfg)
        t = np.array([[10.0, 0.0, -3.0], [10.0, 0.0, -3.0]])
        e = oracle(t, np.array([0.4, 0.4]))
        np.testing.assert_array_equal(e[0], e[1])
        ds = generate_synthetic_scene(SyntheticSceneConfig(sigma_obs=0.0, sigma_run=0.0, n_train=50, n_test=0,
                                                           runs=1))
        yaw = 2 * np.arctan2(ds.q[:, 1], ds.q[:, 3])
        np.testing.assert_allclose(ds.features, DescriptorOracle.from_config(ds_cfg(ds))(ds.t, yaw), atol=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_unit_norm(self, seed):
        rng = np.random.default_rng(seed)
        oracle = DescriptorOracle.from_config(SyntheticSceneConfig(oracle_seed=seed % 1000))
        e = oracle(rng.uniform(-600, 600, size=(20, 3)), rng.uniform(-np.pi, np.pi, 20))
        np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_similarity_decays_with_distance(self, seed):
        ds = generate_synthetic_scene(SyntheticSceneConfig(oracle_seed=seed))
        rng = np.random.default_rng(seed)
        i, j = rng.integers(0, len(ds.image_ids), (2, 4000))
        f = ds.features / np.linalg.norm(ds.features, axis=1, keepdims=True)
        rho = spearmanr(np.linalg.norm(ds.t[i] - ds.t[j], axis=1), 1 - np.sum(f[i] * f[j], axis=1)).correlation
        assert rho > 0.5

    @pytest.mark.parametrize("trajectory", ["loop", "grid", "figure8"])
    def test_heading_tangent_and_splits(self, trajectory):
        ds = generate_synthetic_scene(SyntheticSceneConfig(trajectory=trajectory, n_train=400, n_test=50, runs=2,
                                                           lateral_std_m=0.0, altitude_std_m=0.0))
        tr, te = ds.split_indices("train"), ds.split_indices("test")
        assert len(tr) == 400 and len(te) == 50
        assert not set(ds.image_ids[i] for i in tr) & set(ds.image_ids[i] for i in te)
        assert set(ds.runs[te]) == {2}
        # consecutive samples of one run move along their heading
        run0 = tr[ds.runs[tr] == 0]
        step = np.diff(ds.t[run0], axis=0)
        fwd = np.column_stack([np.sin(2 * np.arctan2(ds.q[run0, 1], ds.q[run0, 3])), np.zeros(len(run0)),
                               np.cos(2 * np.arctan2(ds.q[run0, 1], ds.q[run0, 3]))])[:-1]
        cosang = np.sum(step * fwd, axis=1) / np.linalg.norm(step, axis=1)
        assert np.median(cosang) > 0.99
        assert np.abs(ds.frame.to_normalized(ds.t[tr])).max() <= 0.5 + 1e-12

    def test_invalid_config(self):
        with pytest.raises(InvalidArgumentError):
            SyntheticSceneConfig(extent_m=0)
        with pytest.raises(InvalidArgumentError):
            SyntheticSceneConfig(runs=0)
        with pytest.raises(InvalidArgumentError):
            SyntheticSceneConfig(trajectory="spiral")

    def test_dataset_invariants(self):
        ds = generate_synthetic_scene(SMALL)
        with pytest.raises(InvalidArgumentError):
            SceneDataset("s", ds.frame, ds.image_ids[:-1] + [ds.image_ids[0]], ds.t, ds.q, ds.features, ds.split)
        with pytest.raises(InvalidArgumentError):
            SceneDataset("s", SceneFrame([0, 0, 0], 1.0), ds.image_ids, ds.t, ds.q, ds.features, ds.split)


def ds_cfg(ds):
    return SyntheticSceneConfig(**ds.meta["synthetic"])


class TestStats:
    def test_unit_line(self):
        t = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        ds = make_dataset("l", [str(i) for i in range(10)], t, np.tile([0, 0, 0, 1.0], (10, 1)), np.ones((10, 2)),
                          ["train"] * 10)
        s = dataset_stats(ds)
        assert s["median_nn_spacing_m"] == 1.0 and s["map_diameter_m"] == 9.0 and s["n_train"] == 10

    def test_single_pose(self):
        ds = make_dataset("l", ["a"], np.zeros((1, 3)), [[0, 0, 0, 1.0]], np.ones((1, 2)), ["train"])
        assert dataset_stats(ds)["median_nn_spacing_m"] is None

    def test_quadratic_scan_oracle(self, kernel_backend):
        ds = generate_synthetic_scene(SMALL)
        p = ds.t[ds.split_indices("train")]
        nn = []
        for i in range(len(p)):
            best = np.inf
            for j in range(len(p)):
                if i != j:
                    best = min(best, float(np.sqrt(np.sum((p[i] - p[j]) ** 2))))
            nn.append(best)
        assert dataset_stats(ds)["median_nn_spacing_m"] == pytest.approx(np.median(nn), rel=1e-12)

    def test_scene_dir_round_trip(self, tmp_path):
        ds = generate_synthetic_scene(SMALL)
        save_scene_dir(ds, tmp_path / "scene")
        back = load_scene_dir(tmp_path / "scene")
        assert back.image_ids == ds.image_ids
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.t, ds.t)
        np.testing.assert_array_equal(back.runs, ds.runs)
        assert back.frame.scale == ds.frame.scale


class TestCheckpoint:
    def test_fixed_point(self, tmp_path):
        m = small_model(scenes=("a", "b"), score_fn="learned", schedule="geometric")
        blob = checkpoint_bytes(m, {"seed": 3})
        m2, extra = model_from_bytes(blob)
        assert extra == {"seed": 3}
        assert checkpoint_bytes(m2, {"seed": 3}) == blob
        save_checkpoint(m2, tmp_path / "m.impc")
        m3, _ = load_checkpoint(tmp_path / "m.impc")
        for (n1, a), (n2, b) in zip(m.named_parameters(), m3.named_parameters()):
            assert n1 == n2 and a.tobytes() == b.tobytes()
        s = m3.scene("b")
        assert s.pose_encoder.fourier.schedule == "geometric" and s.score_fn == "learned"
        assert s.initial_t.tobytes() == m.scene("b").initial_t.tobytes()
        assert s.frame.scale == m.scene("b").frame.scale

    def test_scores_identical(self):
        m = small_model(seed=4)
        m2, _ = model_from_bytes(checkpoint_bytes(m))
        rng = np.random.default_rng(0)
        t, q = rng.uniform(-0.5, 0.5, (100, 3)), random_quats(rng, 100)
        f = rng.normal(size=(100, 8))
        for mm in (m, m2):
            mm._scores = np.array([score_candidates(mm.scene("a"), encode_image(mm, f[i]), CandidateSet(t[i:i + 1], q[i:i + 1])).scores[0]
                                   for i in range(100)])
        assert np.abs(m._scores - m2._scores).max() == 0.0

    def test_errors(self):
        blob = checkpoint_bytes(small_model())
        for cut in (3, 20, len(blob) - 1):
            with pytest.raises(TruncatedPayloadError):
                model_from_bytes(blob[:cut])
        with pytest.raises(VersionMismatchError):
            model_from_bytes(blob[:4] + struct.pack("<I", 9) + blob[8:])
        with pytest.raises(FormatError):
            model_from_bytes(b"NOPE" + blob[4:])
        with pytest.raises(DimensionError):
            model_from_bytes(blob + b"\0" * 8)

    def test_inconsistent_dimensions(self):
        import json

        blob = checkpoint_bytes(small_model())
        n = struct.unpack("<Q", blob[8:16])[0]
        meta = json.loads(blob[16 : 16 + n])
        meta["blocks"][0]["shape"] = [meta["blocks"][0]["shape"][0] + 1, meta["blocks"][0]["shape"][1]]
        text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        bad = blob[:8] + struct.pack("<Q", len(text)) + text + blob[16 + n :]
        with pytest.raises((DimensionError, TruncatedPayloadError)):
            model_from_bytes(bad)
