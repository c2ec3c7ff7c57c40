import json

import numpy as np
import pytest

from votedet.geometry import points_in_box
from votedet.suppression import seed_labels, suppress_votes
from votedet.synth import (
    FeatureLayout,
    GeneratorSpec,
    derive_feature_points,
    gen_scene,
    load_scene,
    save_scene,
    scene_to_dict,
)


SMALL = dict(num_objects=3, num_clutter=80, num_seeds=128, points_per_object=25)


class TestGeneratorSpec:
    def test_defaults_valid(self):
        GeneratorSpec()

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            GeneratorSpec(num_objects=-1)
        with pytest.raises(ValueError):
            GeneratorSpec(size_range=(0.0, 1.0))
        with pytest.raises(ValueError):
            GeneratorSpec(points_per_object=2, min_points=5)

    def test_rejects_size_below_encoding_floor(self):
        with pytest.raises(ValueError):
            GeneratorSpec(size_range=(0.05, 1.0), base_box_size=0.5)

    def test_json_roundtrip(self, tmp_path):
        spec = GeneratorSpec(**SMALL)
        path = tmp_path / "spec.json"
        spec.to_json(path)
        assert GeneratorSpec.from_json(path) == spec

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"num_objects": 2, "frobnicate": 1}))
        with pytest.raises(ValueError, match="frobnicate"):
            GeneratorSpec.from_json(path)


class TestGenScene:
    def test_deterministic_byte_identical(self, tmp_path):
        spec = GeneratorSpec(**SMALL)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_scene(gen_scene(spec, seed=11), a)
        save_scene(gen_scene(spec, seed=11), b)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seeds_differ(self):
        spec = GeneratorSpec(**SMALL)
        s0, s1 = gen_scene(spec, seed=0), gen_scene(spec, seed=1)
        assert not np.array_equal(s0.points, s1.points)

    def test_zero_objects_clutter_only(self):
        scene = gen_scene(GeneratorSpec(num_objects=0, num_clutter=60, num_seeds=50), seed=2)
        assert scene.boxes == []
        assert np.all(scene.seed_object_index == -1)
        labels = seed_labels(scene.seeds(), scene.boxes)
        assert not labels.objectness.any()

    def test_every_object_keeps_min_surface_points(self):
        spec = GeneratorSpec(num_objects=5, min_points=5, points_per_object=40, num_seeds=2000, num_clutter=100)
        scene = gen_scene(spec, seed=3)
        for box in scene.boxes:
            inside = points_in_box(scene.points, box)
            assert inside.sum() >= spec.min_points

    def test_labels_match_generator_bookkeeping(self):
        for seed in range(4):
            scene = gen_scene(GeneratorSpec(**SMALL), seed=seed)
            labels = seed_labels(scene.seeds(), scene.boxes)
            np.testing.assert_array_equal(labels.objectness, (scene.seed_object_index >= 0).astype(int))

    def test_oriented_scene_labels_consistent(self):
        scene = gen_scene(GeneratorSpec(oriented=True, **SMALL), seed=5)
        assert any(b.heading != 0.0 for b in scene.boxes)
        labels = seed_labels(scene.seeds(), scene.boxes)
        np.testing.assert_array_equal(labels.objectness, (scene.seed_object_index >= 0).astype(int))

    def test_oracle_background_margin_at_least_three(self):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=6)
        bg = scene.seed_object_index < 0
        margin = scene.oracle.objectness_logits[bg, 0] - scene.oracle.objectness_logits[bg, 1]
        assert np.all(margin >= 3.0)

    def test_oracle_foreground_offsets_point_at_centers(self):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=7)
        for i, box in enumerate(scene.boxes):
            rows = scene.seed_object_index == i
            votes = scene.seed_positions[rows] + scene.oracle.offsets[rows]
            np.testing.assert_allclose(votes, np.tile(box.center, (rows.sum(), 1)), atol=1e-5)

    def test_infeasible_spec_raises(self):
        with pytest.raises(ValueError):
            gen_scene(GeneratorSpec(num_objects=40, extent=(2.0, 2.0, 2.0), min_center_gap=2.0), seed=0)

    def test_feature_layout_blocks(self):
        layout = FeatureLayout(num_classes=18, dim=256)
        assert layout.size_block == slice(18, 21)
        assert layout.heading_channel == 21
        assert layout.objectness_channel == 22
        assert layout.offset_block == slice(23, 26)
        assert layout.smooth_block == slice(26, 256)


class TestDeriveFeaturePoints:
    def test_seed_vote_concatenation_order(self):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=8)
        fp = derive_feature_points(scene, scene.oracle)
        m = scene.seed_positions.shape[0]
        assert fp.count == 2 * m
        np.testing.assert_array_equal(fp.positions[:m], scene.seed_positions)
        votes = suppress_votes(scene.seeds(), scene.oracle)
        np.testing.assert_array_equal(fp.positions[m:], votes.positions)

    def test_zero_offsets_duplicate_seeds(self):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=9)
        from votedet.suppression import VotePrediction

        m = scene.seed_positions.shape[0]
        pred = VotePrediction(
            np.zeros((m, 3)), np.zeros_like(scene.seed_features), np.zeros((m, 2))
        )
        fp = derive_feature_points(scene, pred)
        np.testing.assert_array_equal(fp.positions[m:], fp.positions[:m])

    def test_oracle_votes_land_inside_gt(self):
        scene = gen_scene(GeneratorSpec(num_objects=5), seed=10)
        fp = derive_feature_points(scene, scene.oracle)
        m = scene.seed_positions.shape[0]
        votes = fp.positions[m:]
        fg = scene.seed_object_index >= 0
        hits = 0
        for idx in np.flatnonzero(fg):
            box = scene.boxes[scene.seed_object_index[idx]]
            hits += points_in_box(votes[idx][None], box)[0]
        assert hits / fg.sum() >= 0.9

    def test_mismatched_counts_rejected(self):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=11)
        from votedet.suppression import VotePrediction

        bad = VotePrediction(np.zeros((3, 3)), np.zeros((3, 256)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            derive_feature_points(scene, bad)


class TestSceneSerialization:
    def test_roundtrip_preserves_arrays(self, tmp_path):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=12)
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        loaded = load_scene(path)
        np.testing.assert_array_equal(loaded.points, scene.points)
        np.testing.assert_array_equal(loaded.seed_positions, scene.seed_positions)
        np.testing.assert_array_equal(loaded.seed_features, scene.seed_features)
        np.testing.assert_array_equal(loaded.seed_object_index, scene.seed_object_index)
        np.testing.assert_array_equal(loaded.oracle.offsets, scene.oracle.offsets)
        assert len(loaded.boxes) == len(scene.boxes)
        for a, b in zip(loaded.boxes, scene.boxes):
            np.testing.assert_array_equal(a.center, b.center)
            assert a.label == b.label

    def test_schema_top_level_keys(self):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=13)
        doc = scene_to_dict(scene)
        assert set(doc) == {"boxes", "points", "seeds", "oracle"}
        assert set(doc["seeds"]) == {"positions", "features", "object_index"}
        assert set(doc["oracle"]) == {"offsets", "feature_offsets", "objectness_logits"}
        assert doc["seeds"]["features"]["dtype"] == "<f4"

    def test_oracle_free_scene(self, tmp_path):
        scene = gen_scene(GeneratorSpec(oracle=False, **SMALL), seed=14)
        assert scene.oracle is None
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        assert load_scene(path).oracle is None

    def test_scene_scale_positive(self):
        scene = gen_scene(GeneratorSpec(**SMALL), seed=15)
        assert np.all(scene.scene_scale() > 0)
