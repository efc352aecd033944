"""Instance-segmentation average precision, 3D grounding accuracy, and
feature clustering.

AP follows the detection convention: predictions sorted by score, greedy
matching against unused ground truth of the same class at an IoU threshold,
area under the monotone (envelope-interpolated) precision-recall curve,
averaged over thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))  # 0.50 .. 0.95


@dataclass
class PredictedInstance:
    scene: str
    category: int
    score: float
    indices: np.ndarray


@dataclass
class GroundTruthInstance:
    scene: str
    category: int
    indices: np.ndarray


@dataclass
class EvalReport:
    per_category: dict[int, dict[str, float]]  # keys: ap, ap50, ap25
    mean_ap: float
    mean_ap50: float
    mean_ap25: float
    pr_curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    grounding: dict[str, float] | None = None

    def to_json(self, path: str | Path):
        payload = {
            "per_category": {str(k): v for k, v in self.per_category.items()},
            "mean_ap": self.mean_ap,
            "mean_ap50": self.mean_ap50,
            "mean_ap25": self.mean_ap25,
            "grounding": self.grounding,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    def pr_to_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["curve", "recall", "precision"])
            for name, curve in self.pr_curves.items():
                for r, p in zip(curve["recall"], curve["precision"]):
                    writer.writerow([name, r, p])


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask length mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _indices_iou(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = set(a.tolist()), set(b.tolist())
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def _greedy_match(preds: list[PredictedInstance], gts: list[GroundTruthInstance], threshold: float) -> list[bool]:
    """True/false-positive flags for score-ordered predictions: each takes
    the highest-IoU unused ground truth at or above the threshold."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    used = [False] * len(gts)
    tp_flags = [False] * len(preds)
    for rank, i in enumerate(order):
        pred = preds[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if used[j] or gt.scene != pred.scene or gt.category != pred.category:
                continue
            iou = _indices_iou(pred.indices, gt.indices)
            if iou >= threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            tp_flags[rank] = True
    return tp_flags


def _pr_curve(tp_flags: list[bool], num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    precision = tp / np.maximum(tp + fp, 1.0)
    recall = tp / num_gt
    return precision, recall


def _envelope_area(precision: np.ndarray, recall: np.ndarray) -> float:
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision(
    preds: list[PredictedInstance],
    gts: list[GroundTruthInstance],
    iou_threshold: float,
) -> dict[int, float]:
    """Per-category AP at one IoU threshold (categories with ground truth)."""
    out = {}
    for cat in sorted({g.category for g in gts}):
        cat_preds = [p for p in preds if p.category == cat]
        cat_gts = [g for g in gts if g.category == cat]
        if not cat_preds:
            out[cat] = 0.0
            continue
        flags = _greedy_match(cat_preds, cat_gts, iou_threshold)
        precision, recall = _pr_curve(flags, len(cat_gts))
        out[cat] = _envelope_area(precision, recall)
    return out


def evaluate_instances(
    preds: list[PredictedInstance],
    gts: list[GroundTruthInstance],
    grounding: dict[str, float] | None = None,
) -> EvalReport:
    """Full report: AP averaged over 0.50:0.05:0.95 plus AP50 and AP25."""
    if not gts:
        raise ValueError("evaluation needs at least one ground-truth instance")
    cats = sorted({g.category for g in gts})
    by_threshold = {t: average_precision(preds, gts, t) for t in AP_THRESHOLDS + (0.25,)}
    per_category = {}
    for cat in cats:
        per_category[cat] = {
            "ap": float(np.mean([by_threshold[t][cat] for t in AP_THRESHOLDS])),
            "ap50": by_threshold[0.5][cat],
            "ap25": by_threshold[0.25][cat],
        }
    curves = {}
    for cat in cats:
        cat_preds = [p for p in preds if p.category == cat]
        cat_gts = [g for g in gts if g.category == cat]
        if cat_preds:
            precision, recall = _pr_curve(_greedy_match(cat_preds, cat_gts, 0.5), len(cat_gts))
            curves[f"category_{cat}_iou50"] = {
                "precision": precision.tolist(),
                "recall": recall.tolist(),
            }
    return EvalReport(
        per_category=per_category,
        mean_ap=float(np.mean([v["ap"] for v in per_category.values()])),
        mean_ap50=float(np.mean([v["ap50"] for v in per_category.values()])),
        mean_ap25=float(np.mean([v["ap25"] for v in per_category.values()])),
        pr_curves=curves,
        grounding=grounding,
    )


# ---------------------------------------------------------------------------
# 3D visual grounding
# ---------------------------------------------------------------------------


def box_iou_3d(box_a: tuple[np.ndarray, np.ndarray], box_b: tuple[np.ndarray, np.ndarray]) -> float:
    lo_a, hi_a = box_a
    lo_b, hi_b = box_b
    inter = np.prod(np.maximum(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0))
    vol_a = np.prod(np.maximum(hi_a - lo_a, 0.0))
    vol_b = np.prod(np.maximum(hi_b - lo_b, 0.0))
    union = vol_a + vol_b - inter
    return float(inter / union) if union > 0 else 0.0


def grounding_accuracy(
    pred_boxes: list[tuple[np.ndarray, np.ndarray]],
    gt_boxes: list[tuple[np.ndarray, np.ndarray]],
    thresholds=(0.25, 0.5),
) -> dict[str, float]:
    """Fraction of queries whose predicted box reaches each IoU threshold."""
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError("one predicted box required per query")
    ious = [box_iou_3d(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    return {f"acc{int(t * 100)}": float(np.mean([iou >= t for iou in ious])) for t in thresholds}


# ---------------------------------------------------------------------------
# model evaluation protocol
# ---------------------------------------------------------------------------


def evaluate_model(model, bundles, provider=None, mode=None, seed: int = 0, with_grounding: bool = True) -> EvalReport:
    """Category-name classification over every scene, then AP; optionally a
    grounding pass that queries each mask's caption and compares boxes.

    This is the one place category labels are read.
    """
    from .inference import ClassifierBank, answer_query, classify_scene, extract_box
    from .scene import ToyTextEmbedder

    provider = provider or ToyTextEmbedder(model.config.embed_dim)
    labels = bundles[0].category_names
    if not labels:
        raise ValueError("evaluation needs bundle category names")
    bank = ClassifierBank.from_labels(labels, provider)

    preds: list[PredictedInstance] = []
    gts: list[GroundTruthInstance] = []
    pred_boxes, gt_boxes = [], []
    for idx, bundle in enumerate(bundles):
        if bundle.mask_categories is None:
            raise ValueError("evaluation needs per-mask category indices")
        scene_id = f"scene{idx}"
        for cand, cls in classify_scene(model, bundle, bank, mode, seed):
            preds.append(PredictedInstance(scene=scene_id, category=cls, score=cand.score, indices=cand.point_indices))
        points = np.asarray(bundle.points, dtype=np.float64)
        for j in range(bundle.num_masks):
            gt_idx = np.flatnonzero(bundle.gt_masks[j])
            gts.append(GroundTruthInstance(scene=scene_id, category=int(bundle.mask_categories[j]), indices=gt_idx))
            if with_grounding:
                text = bundle.mask_records[j].caption or labels[int(bundle.mask_categories[j])]
                result = answer_query(model, bundle, text, provider, top_k=1, mode=mode, seed=seed)
                gt_boxes.append(extract_box(points, gt_idx))
                if result.items:
                    pred_boxes.append(extract_box(points, result.items[0].point_indices))
                else:
                    far = np.full(3, np.finfo(np.float32).max)
                    pred_boxes.append((far, far))  # guaranteed miss
    grounding = grounding_accuracy(pred_boxes, gt_boxes) if with_grounding else None
    return evaluate_instances(preds, gts, grounding)


# ---------------------------------------------------------------------------
# feature clustering
# ---------------------------------------------------------------------------


def kmeans(features: np.ndarray, k: int, seed: int, max_iter: int = 100):
    """Lloyd's algorithm with farthest-point initialization.

    Returns (labels, centers, objective_history); the within-cluster sum of
    squares never increases across iterations. Deterministic given seed.
    """
    m = features.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds {m} samples")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = np.empty((k, features.shape[1]))
    first = int(rng.integers(m))
    centers[0] = features[first]
    d = np.sum((features - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d))
        centers[i] = features[nxt]
        np.minimum(d, np.sum((features - centers[i]) ** 2, axis=1), out=d)

    labels = np.full(m, -1, dtype=np.int64)
    history = []
    for _ in range(max_iter):
        dists = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(m), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = features[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return labels, centers, history
