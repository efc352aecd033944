"""Open-vocabulary classification and free-form query answering.

Class probabilities from the model's mask features and from lifted features
pooled inside each predicted mask are combined with a soft geometric mean:
p = max(a, b)^tau * min(a, b)^(1-tau). Predicted masks are split into
spatially contiguous pieces by DBSCAN before ranking; with min_pts = 1 the
split is exactly eps-connected components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Prediction, SegModel
from .scene import EmbeddingProvider, SceneBundle

DBSCAN_EPS = 0.95  # meters
DBSCAN_MIN_PTS = 1

ENSEMBLE_MODES = ("none", "hard_geometric", "soft_geometric")


@dataclass
class EnsembleMode:
    mode: str = "soft_geometric"
    tau: float = 0.667

    def __post_init__(self):
        if self.mode not in ENSEMBLE_MODES:
            raise ValueError(f"mode must be one of {ENSEMBLE_MODES}")
        if not 0.5 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0.5, 1]")


@dataclass
class ClassifierBank:
    embeddings: np.ndarray  # (K, C) unit rows
    labels: list[str]

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("classifier bank needs at least one row")
        if len(self.labels) != self.embeddings.shape[0]:
            raise ValueError("labels and embeddings disagree")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("classifier rows must be unit-norm")

    @classmethod
    def from_labels(cls, labels: list[str], provider: EmbeddingProvider) -> "ClassifierBank":
        return cls(embeddings=np.stack([provider.embed(t) for t in labels]), labels=list(labels))


def ensemble_probabilities(p_model, p_lifted, mode: EnsembleMode) -> np.ndarray:
    """Combine two probabilities elementwise; no re-normalization."""
    p_model = np.asarray(p_model, dtype=np.float64)
    p_lifted = np.asarray(p_lifted, dtype=np.float64)
    if mode.mode == "none":
        return p_model
    if mode.mode == "hard_geometric":
        return p_model**mode.tau * p_lifted ** (1.0 - mode.tau)
    hi = np.maximum(p_model, p_lifted)
    lo = np.minimum(p_model, p_lifted)
    return hi**mode.tau * lo ** (1.0 - mode.tau)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def pooled_mask_features(prediction: Prediction, lifted_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized mean lifted feature inside each predicted mask; the flag
    marks queries whose pooled feature is usable."""
    n_q = prediction.masks.shape[0]
    pooled = np.zeros((n_q, lifted_features.shape[1]))
    usable = np.zeros(n_q, dtype=bool)
    for i in range(n_q):
        idx = np.flatnonzero(prediction.masks[i])
        if idx.size == 0:
            continue
        mean = lifted_features[idx].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm > 1e-12:
            pooled[i] = mean / norm
            usable[i] = True
    return pooled, usable


def classify(
    prediction: Prediction,
    lifted_features: np.ndarray,
    bank: ClassifierBank,
    mode: EnsembleMode,
    logit_scale: float = 10.0,
) -> np.ndarray:
    """Per-query class probabilities (N_q, K). Queries with an empty mask or
    no usable pooled feature fall back to the model-side probabilities."""
    if bank.embeddings.shape[1] != prediction.mask_features.shape[1]:
        raise ValueError("classifier bank dim does not match mask features")
    p_m = _softmax_rows(logit_scale * (prediction.mask_features.data @ bank.embeddings.T))
    pooled, usable = pooled_mask_features(prediction, lifted_features)
    p_p = _softmax_rows(logit_scale * (pooled @ bank.embeddings.T))
    combined = ensemble_probabilities(p_m, p_p, mode)
    return np.where(usable[:, None], combined, p_m)


# ---------------------------------------------------------------------------
# DBSCAN mask refinement
# ---------------------------------------------------------------------------


def dbscan(coords: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Standard density-based clustering; labels, noise = -1.

    Neighborhoods include the point itself. Scan order is by index, so
    labels are deterministic.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = coords.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    diff = coords[:, None, :] - coords[None, :, :]
    within = (diff * diff).sum(axis=2) <= eps * eps
    core = within.sum(axis=1) >= min_pts
    cluster = 0
    for start in range(n):
        if labels[start] != -1 or not core[start]:
            continue
        labels[start] = cluster
        frontier = [start]
        while frontier:
            p = frontier.pop()
            for q in np.flatnonzero(within[p]):
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        frontier.append(q)
        cluster += 1
    return labels


def refine_mask(
    points: np.ndarray,
    mask_indices: np.ndarray,
    eps: float = DBSCAN_EPS,
    min_pts: int = DBSCAN_MIN_PTS,
) -> list[np.ndarray]:
    """Split one mask into contiguous sub-masks (largest first).

    The sub-masks partition the input exactly; noise points (possible only
    for min_pts > 1) come back as singletons.
    """
    mask_indices = np.asarray(mask_indices, dtype=np.int64)
    if mask_indices.size == 0:
        return []
    labels = dbscan(points[mask_indices], eps, min_pts)
    groups = [mask_indices[labels == c] for c in range(labels.max() + 1) if np.any(labels == c)]
    groups.extend(mask_indices[i : i + 1] for i in np.flatnonzero(labels == -1))
    groups.sort(key=lambda g: (-g.size, int(g[0])))
    return groups


# ---------------------------------------------------------------------------
# query answering
# ---------------------------------------------------------------------------


@dataclass
class RankedMask:
    mask_id: int  # index of the parent query
    point_indices: np.ndarray
    score: float


@dataclass
class QueryResult:
    query_text: str
    mode: str  # "category" or "free-form"
    items: list[RankedMask] = field(default_factory=list)


def _candidate_masks(model, bundle, prediction, score_fn, eps, min_pts):
    """Refined sub-masks with scores: the largest fragment keeps the parent
    score, smaller fragments scale by their share of the parent."""
    points = np.asarray(bundle.points, dtype=np.float64)
    out = []
    for i in range(prediction.masks.shape[0]):
        idx = np.flatnonzero(prediction.masks[i])
        if idx.size == 0:
            continue
        parent_score = score_fn(i)
        for rank, sub in enumerate(refine_mask(points, idx, eps, min_pts)):
            fraction = 1.0 if rank == 0 else sub.size / idx.size
            out.append(RankedMask(mask_id=i, point_indices=sub, score=parent_score * fraction))
    return out


def answer_query(
    model: SegModel,
    bundle: SceneBundle,
    text: str,
    provider: EmbeddingProvider,
    top_k: int = 5,
    mode: EnsembleMode | None = None,
    seed: int = 0,
    eps: float = DBSCAN_EPS,
    min_pts: int = DBSCAN_MIN_PTS,
) -> QueryResult:
    """Free-form querying: the instruction embedding acts as a binary
    classifier over refined masks."""
    if not text.strip():
        raise ValueError("query text must be non-empty")
    mode = mode or EnsembleMode()
    q = provider.embed(text)
    prediction = model.forward(bundle, q[None, :], seed=seed)
    s = model.config.logit_scale
    pooled, usable = pooled_mask_features(prediction, bundle.lifted_features)
    s_model = _sigmoid(s * (prediction.mask_features.data @ q))
    s_lifted = _sigmoid(s * (pooled @ q))

    def score_fn(i: int) -> float:
        if not usable[i]:
            return float(s_model[i])
        return float(ensemble_probabilities(s_model[i], s_lifted[i], mode))

    candidates = _candidate_masks(model, bundle, prediction, score_fn, eps, min_pts)
    candidates.sort(key=lambda c: -c.score)
    return QueryResult(query_text=text, mode="free-form", items=candidates[: max(0, top_k)])


def classify_scene(
    model: SegModel,
    bundle: SceneBundle,
    bank: ClassifierBank,
    mode: EnsembleMode | None = None,
    seed: int = 0,
    eps: float = DBSCAN_EPS,
    min_pts: int = DBSCAN_MIN_PTS,
) -> list[tuple[RankedMask, int]]:
    """Category-mode instance listing for evaluation: each refined mask is
    scored by top-class probability times mean in-mask heatmap confidence."""
    mode = mode or EnsembleMode()
    prediction = model.forward(bundle, bank.embeddings, seed=seed)
    probs = classify(prediction, bundle.lifted_features, bank, mode, model.config.logit_scale)
    heat = _sigmoid(prediction.heatmaps.data)
    classes = probs.argmax(axis=1)

    def score_fn(i: int) -> float:
        idx = np.flatnonzero(prediction.masks[i])
        return float(probs[i, classes[i]] * heat[i, idx].mean())

    candidates = _candidate_masks(model, bundle, prediction, score_fn, eps, min_pts)
    ranked = [(c, int(classes[c.mask_id])) for c in candidates]
    ranked.sort(key=lambda pair: -pair[0].score)
    return ranked


def extract_box(points: np.ndarray, mask_indices) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box (min corner, max corner) of a mask."""
    mask_indices = np.asarray(mask_indices, dtype=np.int64)
    if mask_indices.size == 0:
        raise ValueError("cannot build a box from an empty mask")
    member = points[mask_indices]
    return member.min(axis=0), member.max(axis=0)
