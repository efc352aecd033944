"""Matching costs and training losses.

The matching cost couples three semantic affinities (softmax probabilities
of each query over ground-truth instances, one per association type) with
pairwise dice and BCE mask losses. After assignment, training minimizes a
per-mask dice+BCE term plus a focal+dice association term computed over the
full query-by-instance probability matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .associations import AssociationSet
from .matching import Assignment, hungarian
from .model import Prediction

DICE_EPS = 1e-6
LOGIT_CLAMP = 1e-7

ASSOCIATION_TYPES = ("mva", "mca", "mea")


@dataclass
class LossWeights:
    lambda_mma: float = 20.0
    lambda_dice: float = 2.0
    lambda_bce: float = 5.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        for name in ("lambda_mma", "lambda_dice", "lambda_bce", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must be in [0, 1]")


@dataclass
class MatchCostBreakdown:
    semantic: dict[str, np.ndarray]  # per association type, (N_q, N_m)
    dice: np.ndarray  # (N_q, N_m)
    bce: np.ndarray  # (N_q, N_m)
    total: np.ndarray  # (N_q, N_m)


@dataclass
class LossBreakdown:
    """Weighted loss components; ``total`` is their sum (a graph node)."""

    total: Tensor
    mma: Tensor
    dice: Tensor
    bce: Tensor
    assignment: Assignment
    per_association: dict[str, float] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        out = {
            "total": self.total.item(),
            "mma": self.mma.item(),
            "dice": self.dice.item(),
            "bce": self.bce.item(),
        }
        out.update({f"mma_{k}": v for k, v in self.per_association.items()})
        return out


# ---------------------------------------------------------------------------
# plain-array pieces (matching cost; no gradients flow through assignment)
# ---------------------------------------------------------------------------


def semantic_probability(mask_features: np.ndarray, association_rows: np.ndarray, logit_scale: float = 10.0) -> np.ndarray:
    """Each query's softmax distribution over ground-truth instances,
    from scaled feature dot products."""
    if association_rows.ndim != 2 or association_rows.shape[0] < 1:
        raise ValueError("need at least one ground-truth association row")
    logits = logit_scale * (mask_features @ association_rows.T)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def pairwise_dice(heat_probs: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    y = gt_masks.astype(np.float64)
    inter = heat_probs @ y.T
    denom = heat_probs.sum(axis=1)[:, None] + y.sum(axis=1)[None, :] + DICE_EPS
    return 1.0 - 2.0 * inter / denom


def pairwise_bce(heat_probs: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    y = gt_masks.astype(np.float64)
    m = heat_probs.shape[1]
    log_p = np.log(np.clip(heat_probs, LOGIT_CLAMP, 1.0))
    log_not = np.log(np.clip(1.0 - heat_probs, LOGIT_CLAMP, 1.0))
    return -(log_p @ y.T + log_not @ (1.0 - y).T) / m


def pairwise_bce_from_logits(logits: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Equivalent to pairwise_bce(sigmoid(logits), ...) but exact in the
    saturated tails: BCE = softplus(x) - x*y."""
    y = gt_masks.astype(np.float64)
    m = logits.shape[1]
    sp = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return (sp.sum(axis=1)[:, None] - logits @ y.T) / m


def match_costs(
    prediction: Prediction,
    associations: AssociationSet,
    gt_masks: np.ndarray,
    weights: LossWeights,
    logit_scale: float = 10.0,
    association_types=ASSOCIATION_TYPES,
) -> MatchCostBreakdown:
    """Pairwise query-to-instance costs: semantic affinities enter
    negatively, mask losses positively."""
    f_m = prediction.mask_features.data
    heat = _sigmoid(prediction.heatmaps.data)
    semantic = {}
    combined = np.zeros((f_m.shape[0], gt_masks.shape[0]))
    for name in association_types:
        rows = getattr(associations, f"f_{name}")
        p = semantic_probability(f_m, rows, logit_scale)
        semantic[name] = p
        combined += p
    dice = pairwise_dice(heat, gt_masks)
    bce = pairwise_bce_from_logits(prediction.heatmaps.data, gt_masks)
    total = -weights.lambda_mma * combined + weights.lambda_dice * dice + weights.lambda_bce * bce
    return MatchCostBreakdown(semantic=semantic, dice=dice, bce=bce, total=total)


def match(
    prediction: Prediction,
    associations: AssociationSet,
    gt_masks: np.ndarray,
    weights: LossWeights,
    logit_scale: float = 10.0,
    association_types=ASSOCIATION_TYPES,
) -> tuple[Assignment, MatchCostBreakdown]:
    costs = match_costs(prediction, associations, gt_masks, weights, logit_scale, association_types)
    return hungarian(costs.total), costs


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# differentiable losses
# ---------------------------------------------------------------------------


def mask_dice_loss(probs, target) -> Tensor:
    """1 - 2|X.Y| / (|X| + |Y| + eps) over flattened probabilities."""
    p = ad.as_tensor(probs)
    y = Tensor(np.asarray(target, dtype=np.float64))
    inter = ad.sum_(ad.mul(p, y))
    denom = ad.sum_(p) + float(y.data.sum()) + DICE_EPS
    return 1.0 - ad.div(ad.mul(inter, 2.0), denom)


def mask_bce_loss(probs, target) -> Tensor:
    """Mean binary cross-entropy; logs are clamped so saturated
    probabilities stay finite and exact predictions cost exactly zero."""
    p = ad.as_tensor(probs)
    y = np.asarray(target, dtype=np.float64)
    pos = ad.mul(ad.log(ad.clamp(p, LOGIT_CLAMP, 1.0)), y)
    neg = ad.mul(ad.log(ad.clamp(1.0 - p, LOGIT_CLAMP, 1.0)), 1.0 - y)
    return ad.mul(ad.sum_(pos + neg), -1.0 / p.data.size)


def focal_loss(probs, target, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Elementwise -alpha_t (1 - p_t)^gamma log(p_t); inputs clamp into
    (0, 1) rather than ever producing NaN."""
    p = ad.clamp(ad.as_tensor(probs), LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    y = np.asarray(target, dtype=np.float64)
    p_t = ad.add(ad.mul(p, y), ad.mul(1.0 - p, 1.0 - y))
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    focal_weight = ad.pow_const(1.0 - p_t, gamma) if gamma != 0.0 else 1.0
    return ad.mul(ad.mul(ad.mul(ad.log(p_t), focal_weight), Tensor(alpha_t)), -1.0)


def association_loss(
    mask_features: Tensor,
    associations: AssociationSet,
    assignment: Assignment,
    weights: LossWeights,
    logit_scale: float = 10.0,
    association_types=ASSOCIATION_TYPES,
) -> tuple[Tensor, dict[str, float]]:
    """Focal + dice over the full query-by-instance probability matrix of
    each association type; instances without lifted coverage drop out of
    the visual and entity terms."""
    n_q = mask_features.shape[0]
    n_m = associations.num_masks
    indicator = np.zeros((n_q, n_m))
    for j, i in assignment.as_query_for_gt().items():
        indicator[i, j] = 1.0

    total = Tensor(0.0)
    per_type: dict[str, float] = {}
    for name in association_types:
        rows = getattr(associations, f"f_{name}")
        cols = associations.covered if name in ("mva", "mea") else np.ones(n_m, dtype=bool)
        if not np.any(cols):
            per_type[name] = 0.0
            continue
        logits = ad.mul(ad.matmul(mask_features, Tensor(rows[cols].T)), logit_scale)
        p_hat = ad.sigmoid(logits)
        y = indicator[:, cols]
        term = ad.mean(focal_loss(p_hat, y, weights.focal_gamma, weights.focal_alpha)) + mask_dice_loss(p_hat, y)
        per_type[name] = term.item()
        total = total + term
    return total, per_type


def total_loss(
    prediction: Prediction,
    gt_masks: np.ndarray,
    associations: AssociationSet,
    weights: LossWeights | None = None,
    logit_scale: float = 10.0,
    association_types=ASSOCIATION_TYPES,
    assignment: Assignment | None = None,
) -> LossBreakdown:
    """Matched per-mask dice and BCE plus the weighted association loss.

    Queries left unmatched by the assignment contribute only through the
    association matrices (as negatives), never through mask terms.
    """
    weights = weights or LossWeights()
    n_m = gt_masks.shape[0]
    if n_m < 1:
        raise ValueError("scenes must contain at least one ground-truth instance")
    if assignment is None:
        assignment, _ = match(prediction, associations, gt_masks, weights, logit_scale, association_types)

    sigma = assignment.as_query_for_gt()
    order = sorted(sigma)  # ground-truth index order
    matched_rows = np.asarray([sigma[j] for j in order], dtype=np.int64)
    matched_logits = ad.gather_rows(prediction.heatmaps, matched_rows)
    heat = ad.sigmoid(matched_logits)
    targets = gt_masks[order].astype(np.float64)

    inter = ad.sum_(ad.mul(heat, Tensor(targets)), axis=1)
    denom = ad.sum_(heat, axis=1) + Tensor(targets.sum(axis=1)) + DICE_EPS
    dice_each = 1.0 - ad.div(ad.mul(inter, 2.0), denom)
    dice_term = ad.mean(dice_each)

    # softplus(x) - x*y == BCE(sigmoid(x), y), stable in the tails
    bce_term = ad.mean(ad.softplus(matched_logits) - ad.mul(matched_logits, Tensor(targets)))

    mma_term, per_type = association_loss(
        prediction.mask_features, associations, assignment, weights, logit_scale, association_types
    )

    mma = ad.mul(mma_term, weights.lambda_mma)
    dice = ad.mul(dice_term, weights.lambda_dice)
    bce = ad.mul(bce_term, weights.lambda_bce)
    return LossBreakdown(
        total=mma + dice + bce,
        mma=mma,
        dice=dice,
        bce=bce,
        assignment=assignment,
        per_association=per_type,
    )
