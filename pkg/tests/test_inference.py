"""Probability ensembling, DBSCAN refinement, query answering, boxes."""

import mpmath
import numpy as np
import pytest

from ovseg3d.inference import (
    ClassifierBank,
    EnsembleMode,
    QueryResult,
    answer_query,
    classify,
    dbscan,
    ensemble_probabilities,
    extract_box,
    pooled_mask_features,
    refine_mask,
)
from ovseg3d.autodiff import Tensor
from ovseg3d.model import Prediction, SegModel, SegModelConfig
from ovseg3d.scene import FixtureSpec, ToyTextEmbedder, generate_fixture


def soft_mean_oracle(a, b, tau, dps=50):
    with mpmath.workdps(dps):
        hi, lo = (mpmath.mpf(a), mpmath.mpf(b)) if a >= b else (mpmath.mpf(b), mpmath.mpf(a))
        return float(hi**mpmath.mpf(tau) * lo ** (1 - mpmath.mpf(tau)))


class TestEnsemble:
    def test_idempotent_on_equal_inputs(self):
        mode = EnsembleMode("soft_geometric", 0.667)
        p = np.array([0.1, 0.5, 0.9])
        np.testing.assert_allclose(ensemble_probabilities(p, p.copy(), mode), p, atol=1e-15)

    def test_tau_one_is_max(self):
        mode = EnsembleMode("soft_geometric", 1.0)
        a, b = np.array([0.2, 0.9]), np.array([0.7, 0.3])
        np.testing.assert_allclose(ensemble_probabilities(a, b, mode), np.maximum(a, b), atol=1e-15)

    def test_tau_half_is_geometric_mean(self):
        mode = EnsembleMode("soft_geometric", 0.5)
        a, b = np.array([0.4, 0.81]), np.array([0.9, 0.01])
        np.testing.assert_allclose(ensemble_probabilities(a, b, mode), np.sqrt(a * b), atol=1e-15)

    def test_symmetry(self):
        mode = EnsembleMode("soft_geometric", 0.7)
        rng = np.random.default_rng(0)
        a, b = rng.random(20), rng.random(20)
        np.testing.assert_allclose(
            ensemble_probabilities(a, b, mode), ensemble_probabilities(b, a, mode), atol=1e-15
        )

    def test_bounds_and_monotonicity(self):
        rng = np.random.default_rng(1)
        for tau in (0.5, 0.667, 0.9, 1.0):
            mode = EnsembleMode("soft_geometric", tau)
            a, b = rng.random(50), rng.random(50)
            out = ensemble_probabilities(a, b, mode)
            assert np.all(out <= np.maximum(a, b) + 1e-12)
            assert np.all(out >= np.minimum(a, b) - 1e-12)
            bigger = ensemble_probabilities(np.minimum(a * 1.1, 1.0), b, mode)
            assert np.all(bigger >= out - 1e-12)

    def test_known_value_against_oracle(self):
        mode = EnsembleMode("soft_geometric", 0.667)
        got = float(ensemble_probabilities(0.8, 0.2, mode))
        ref = soft_mean_oracle(0.8, 0.2, 0.667)
        assert abs(got - ref) < 1e-4
        assert got == pytest.approx(0.504, abs=1e-3)

    def test_hard_mode_is_order_dependent(self):
        mode = EnsembleMode("hard_geometric", 0.667)
        got = float(ensemble_probabilities(0.2, 0.8, mode))
        with mpmath.workdps(50):
            ref = float(mpmath.mpf(0.2) ** mpmath.mpf(0.667) * mpmath.mpf(0.8) ** mpmath.mpf(0.333))
        assert got == pytest.approx(ref, abs=1e-12)

    def test_none_mode_passthrough(self):
        mode = EnsembleMode("none", 0.667)
        a, b = np.array([0.3]), np.array([0.9])
        np.testing.assert_array_equal(ensemble_probabilities(a, b, mode), a)

    def test_tau_validated(self):
        with pytest.raises(ValueError, match="tau"):
            EnsembleMode("soft_geometric", 0.3)
        with pytest.raises(ValueError, match="mode"):
            EnsembleMode("median", 0.7)


def components_oracle(coords, eps):
    """Union-find single-linkage components at threshold eps."""
    n = len(coords)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.sum((coords[i] - coords[j]) ** 2) <= eps * eps:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


class TestDBSCAN:
    def test_single_point(self):
        labels = dbscan(np.zeros((1, 3)), eps=0.95, min_pts=1)
        assert labels.tolist() == [0]

    def test_all_close_is_one_cluster(self):
        rng = np.random.default_rng(2)
        coords = rng.random((15, 3)) * 0.2
        labels = dbscan(coords, eps=0.95, min_pts=1)
        assert set(labels.tolist()) == {0}

    def test_two_distant_blobs(self):
        rng = np.random.default_rng(3)
        a = rng.random((10, 3)) * 0.3
        b = rng.random((10, 3)) * 0.3 + np.array([5.0, 0, 0])
        coords = np.concatenate([a, b])
        labels = dbscan(coords, eps=0.95, min_pts=1)
        assert len(set(labels.tolist())) == 2
        assert len(set(labels[:10].tolist())) == 1
        assert len(set(labels[10:].tolist())) == 1

    def test_min_pts_one_equals_connected_components_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            coords = rng.random((n, 3)) * rng.uniform(0.5, 4.0)
            eps = float(rng.uniform(0.1, 1.0))
            labels = dbscan(coords, eps=eps, min_pts=1)
            got = {frozenset(np.flatnonzero(labels == c).tolist()) for c in set(labels.tolist())}
            assert got == components_oracle(coords, eps)

    def test_min_pts_two_marks_isolated_noise(self):
        coords = np.array([[0.0, 0, 0], [0.1, 0, 0], [9.0, 0, 0]])
        labels = dbscan(coords, eps=0.5, min_pts=2)
        assert labels[2] == -1
        assert labels[0] == labels[1] == 0


class TestRefineMask:
    def test_empty_mask(self):
        assert refine_mask(np.zeros((5, 3)), np.array([], dtype=int)) == []

    def test_partition_exact(self):
        rng = np.random.default_rng(5)
        points = rng.random((40, 3)) * 6
        idx = rng.choice(40, size=25, replace=False)
        subs = refine_mask(points, idx, eps=0.8)
        merged = np.concatenate(subs)
        assert sorted(merged.tolist()) == sorted(idx.tolist())
        assert len(merged) == len(set(merged.tolist()))

    def test_largest_first(self):
        points = np.concatenate([np.random.default_rng(6).random((12, 3)) * 0.2,
                                 np.random.default_rng(7).random((3, 3)) * 0.2 + 8.0])
        subs = refine_mask(points, np.arange(15), eps=0.95)
        assert [len(s) for s in subs] == [12, 3]


class TestExtractBox:
    def test_single_point_degenerate(self):
        pts = np.array([[1.0, 2.0, 3.0]])
        lo, hi = extract_box(pts, [0])
        np.testing.assert_array_equal(lo, [1, 2, 3])
        np.testing.assert_array_equal(hi, [1, 2, 3])

    def test_two_points_span(self):
        pts = np.array([[0.0, 5.0, 1.0], [2.0, 1.0, 4.0]])
        lo, hi = extract_box(pts, [0, 1])
        np.testing.assert_array_equal(lo, [0, 1, 1])
        np.testing.assert_array_equal(hi, [2, 5, 4])

    def test_unit_cube_corners(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        lo, hi = extract_box(corners, np.arange(8))
        np.testing.assert_array_equal(lo, [0, 0, 0])
        np.testing.assert_array_equal(hi, [1, 1, 1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            extract_box(np.zeros((3, 3)), [])


def make_prediction(heatmaps, mask_features):
    heatmaps = Tensor(np.asarray(heatmaps, dtype=np.float64))
    return Prediction(
        heatmaps=heatmaps,
        mask_features=Tensor(np.asarray(mask_features, dtype=np.float64)),
        masks=heatmaps.data > 0,
        query_positions=np.zeros((heatmaps.shape[0], 3)),
        query_indices=np.arange(heatmaps.shape[0]),
    )


class TestClassify:
    def test_empty_mask_falls_back_to_model_probability(self):
        provider = ToyTextEmbedder(8)
        bank = ClassifierBank.from_labels(["chair", "table"], provider)
        f_m = np.stack([provider.embed("chair"), provider.embed("table")])
        heat = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, -1.0]])  # query 0 predicts nothing
        pred = make_prediction(heat, f_m)
        lifted = np.tile(provider.embed("table"), (3, 1))
        probs = classify(pred, lifted, bank, EnsembleMode("soft_geometric", 0.667))
        model_only = classify(pred, lifted, bank, EnsembleMode("none", 0.667))
        np.testing.assert_allclose(probs[0], model_only[0], atol=1e-12)
        assert probs[1, 1] > probs[1, 0]  # lifted evidence favors "table"

    def test_bank_dim_checked(self):
        provider = ToyTextEmbedder(8)
        bank = ClassifierBank.from_labels(["x"], provider)
        pred = make_prediction(np.ones((1, 2)), np.ones((1, 4)) / 2.0)
        with pytest.raises(ValueError, match="dim"):
            classify(pred, np.zeros((2, 8)), bank, EnsembleMode())

    def test_bank_requires_unit_rows(self):
        with pytest.raises(ValueError, match="unit"):
            ClassifierBank(embeddings=np.ones((1, 4)), labels=["x"])


@pytest.fixture(scope="module")
def scene_and_model():
    spec = FixtureSpec(categories=["chair", "table"], instances_per_category=1,
                       points_per_instance=30, embed_dim=8, bounds=4.0, seed=9)
    bundle = generate_fixture(spec)
    config = SegModelConfig(embed_dim=8, backbone_dim=8, num_scales=2, num_queries=4,
                            num_blocks=1, num_heads=2, hidden_dim=16, base_voxel=0.25, seed=1)
    return bundle, SegModel(config)


class TestAnswerQuery:
    def test_top_k_zero_is_empty(self, scene_and_model):
        bundle, model = scene_and_model
        res = answer_query(model, bundle, "chair", ToyTextEmbedder(8), top_k=0)
        assert isinstance(res, QueryResult)
        assert res.items == []

    def test_deterministic(self, scene_and_model):
        bundle, model = scene_and_model
        a = answer_query(model, bundle, "chair", ToyTextEmbedder(8), top_k=3)
        b = answer_query(model, bundle, "chair", ToyTextEmbedder(8), top_k=3)
        assert len(a.items) == len(b.items)
        for x, y in zip(a.items, b.items):
            assert x.score == y.score and np.array_equal(x.point_indices, y.point_indices)

    def test_scores_non_increasing_and_indices_in_range(self, scene_and_model):
        bundle, model = scene_and_model
        res = answer_query(model, bundle, "a chair in a scene.", ToyTextEmbedder(8), top_k=10)
        scores = [item.score for item in res.items]
        assert scores == sorted(scores, reverse=True)
        for item in res.items:
            assert np.all(item.point_indices >= 0)
            assert np.all(item.point_indices < bundle.num_points)

    def test_empty_text_rejected(self, scene_and_model):
        bundle, model = scene_and_model
        with pytest.raises(ValueError, match="non-empty"):
            answer_query(model, bundle, "  ", ToyTextEmbedder(8))
