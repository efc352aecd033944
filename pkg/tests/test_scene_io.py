"""Fixture generation, toy embeddings, and bundle round-trips."""

import json

import numpy as np
import pytest

from ovseg3d.scene import (
    BundleFormatError,
    FixtureSpec,
    ToyTextEmbedder,
    bundles_equal,
    generate_fixture,
    load_bundle,
    save_bundle,
)


@pytest.fixture
def small_spec():
    return FixtureSpec(
        categories=["chair", "table"],
        instances_per_category=1,
        points_per_instance=40,
        noise_sigma=0.0,
        embed_dim=16,
        seed=7,
    )


class TestToyEmbedder:
    def test_deterministic(self):
        a = ToyTextEmbedder(32).embed("chair")
        b = ToyTextEmbedder(32).embed("chair")
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        emb = ToyTextEmbedder(24)
        for text in ["chair", "a blue chair in a scene.", "x 1 2 3"]:
            assert abs(np.linalg.norm(emb.embed(text)) - 1.0) < 1e-9

    def test_repeated_token_same_direction(self):
        emb = ToyTextEmbedder(32)
        cos = float(emb.embed("chair") @ emb.embed("chair chair"))
        assert cos == pytest.approx(1.0, abs=1e-12)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            ToyTextEmbedder(8).embed("   ")


class TestFixture:
    def test_zero_noise_features_equal_category_embedding(self, small_spec):
        bundle = generate_fixture(small_spec)
        emb = ToyTextEmbedder(small_spec.embed_dim)
        for j, rec in enumerate(bundle.mask_records):
            cat = rec.entities[0]
            rows = bundle.lifted_features[bundle.gt_masks[j]]
            assert np.array_equal(rows, np.tile(emb.embed(cat), (rows.shape[0], 1)))

    def test_deterministic_given_seed(self, small_spec):
        a = generate_fixture(small_spec)
        b = generate_fixture(small_spec)
        assert bundles_equal(a, b)

    def test_distractor_entities_counted(self, small_spec):
        small_spec.distractor_entities = ["room"]
        bundle = generate_fixture(small_spec)
        for rec in bundle.mask_records:
            assert len(rec.entities) == 2
            assert rec.entity_embeddings.shape[0] == 2

    def test_masks_disjoint_and_nonempty(self):
        spec = FixtureSpec(categories=["a", "b", "c"], instances_per_category=2, points_per_instance=25, seed=3)
        bundle = generate_fixture(spec)
        assert bundle.gt_masks.shape[0] == 6
        assert np.all(bundle.gt_masks.sum(axis=0) <= 1)
        assert np.all(bundle.gt_masks.any(axis=1))

    def test_impossible_placement_raises(self):
        spec = FixtureSpec(categories=[f"c{i}" for i in range(200)], instances_per_category=6, bounds=0.5, seed=0)
        with pytest.raises(Exception, match="disjoint"):
            generate_fixture(spec)

    def test_spec_json_round_trip(self, tmp_path, small_spec):
        path = tmp_path / "spec.json"
        small_spec.to_json(path)
        loaded = FixtureSpec.from_json(path)
        assert loaded == small_spec


class TestBundleIO:
    def test_round_trip_identity(self, tmp_path, small_spec):
        bundle = generate_fixture(small_spec)
        save_bundle(bundle, tmp_path / "scene")
        loaded = load_bundle(tmp_path / "scene")
        assert bundles_equal(bundle, loaded)
        assert np.array_equal(bundle.mask_categories, loaded.mask_categories)

    def test_truncated_array_names_offender(self, tmp_path, small_spec):
        bundle = generate_fixture(small_spec)
        save_bundle(bundle, tmp_path / "scene")
        target = tmp_path / "scene" / "points.bin"
        target.write_bytes(target.read_bytes()[:-12])
        with pytest.raises(BundleFormatError, match="points"):
            load_bundle(tmp_path / "scene")

    def test_zero_frames_loads(self, tmp_path, small_spec):
        bundle = generate_fixture(small_spec)
        assert bundle.frames == []
        save_bundle(bundle, tmp_path / "scene")
        loaded = load_bundle(tmp_path / "scene")
        assert loaded.frames == []

    def test_overlapping_masks_rejected(self, tmp_path, small_spec):
        bundle = generate_fixture(small_spec)
        bundle.gt_masks[1, 0] = True  # point 0 already belongs to mask 0
        save_bundle(bundle, tmp_path / "scene")
        with pytest.raises(BundleFormatError, match="overlap"):
            load_bundle(tmp_path / "scene")

    def test_non_unit_embedding_rejected(self, tmp_path, small_spec):
        bundle = generate_fixture(small_spec)
        bundle.lifted_features[3] *= 0.5
        save_bundle(bundle, tmp_path / "scene")
        with pytest.raises(BundleFormatError, match="lifted_features"):
            load_bundle(tmp_path / "scene")

    def test_manifest_mask_record_count_must_match(self, tmp_path, small_spec):
        bundle = generate_fixture(small_spec)
        save_bundle(bundle, tmp_path / "scene")
        manifest = json.loads((tmp_path / "scene" / "manifest.json").read_text())
        manifest["mask_records"] = manifest["mask_records"][:-1]
        (tmp_path / "scene" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(BundleFormatError):
            load_bundle(tmp_path / "scene")
