"""Per-mask multimodal supervision targets.

Three embeddings are built for every ground-truth mask: the pooled lifted
feature (mask-visual), the caption embedding (mask-caption), and an
attention-weighted combination of entity embeddings (mask-entity). The
entity weights are a plain softmax over dot products with the mask-visual
feature, no temperature, and the result is left un-normalized: it is a
convex combination of unit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import LiftedFeatures
from .scene import EmbeddingProvider, MaskRecord


@dataclass
class AssociationSet:
    """Supervision embeddings per ground-truth mask, plus the entity
    attention weights and a coverage flag.

    Masks with no lifted coverage keep zero visual rows and are excluded
    from visual/entity loss terms downstream (``covered`` carries the
    flag).
    """

    f_mva: np.ndarray  # (N_m, C)
    f_mca: np.ndarray  # (N_m, C)
    f_mea: np.ndarray  # (N_m, C)
    entity_weights: list[np.ndarray]  # ragged, one (N_e_i,) row per mask
    covered: np.ndarray  # (N_m,) bool

    @property
    def num_masks(self) -> int:
        return self.f_mva.shape[0]


def build_mva(lifted: LiftedFeatures, gt_masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean lifted feature over each mask's covered points.

    Returns (rows, covered): a mask whose points were never observed gets a
    zero row and covered=False rather than an error.
    """
    n_m = gt_masks.shape[0]
    c = lifted.features.shape[1]
    rows = np.zeros((n_m, c))
    covered = np.zeros(n_m, dtype=bool)
    for i in range(n_m):
        if not np.any(gt_masks[i]):
            raise ValueError(f"ground-truth mask {i} is empty")
        member = gt_masks[i] & (lifted.coverage_count > 0)
        if np.any(member):
            rows[i] = lifted.features[member].mean(axis=0)
            covered[i] = True
    return rows, covered


def build_mca(mask_records: list[MaskRecord], provider: EmbeddingProvider) -> np.ndarray:
    """Caption embedding per mask: precomputed rows pass through verbatim,
    otherwise the provider embeds the caption text."""
    rows = []
    for i, rec in enumerate(mask_records):
        if rec.caption_embedding is not None:
            rows.append(np.asarray(rec.caption_embedding, dtype=np.float64))
        elif rec.caption:
            rows.append(provider.embed(rec.caption))
        else:
            raise ValueError(f"mask record {i} has neither caption text nor a precomputed embedding")
    return np.stack(rows)


def build_mea(f_mva_row: np.ndarray, entity_embeddings: np.ndarray, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Soft-match one mask to its entities.

    weights = softmax_k(scale * f_mva . f_e[k]); output = sum_k w_k f_e[k].
    ``scale`` exists for the sharpening analysis; 1.0 is the definition.
    """
    if entity_embeddings.ndim != 2 or entity_embeddings.shape[0] < 1:
        raise ValueError("at least one entity embedding is required")
    dots = scale * (entity_embeddings @ f_mva_row)
    shifted = dots - dots.max()
    e = np.exp(shifted)
    weights = e / e.sum()
    return weights @ entity_embeddings, weights


def build_associations(
    lifted: LiftedFeatures,
    gt_masks: np.ndarray,
    mask_records: list[MaskRecord],
    provider: EmbeddingProvider,
) -> AssociationSet:
    """Assemble all three association types for one scene."""
    f_mva, covered = build_mva(lifted, gt_masks)
    f_mca = build_mca(mask_records, provider)
    f_mea = np.zeros_like(f_mva)
    weights = []
    for i, rec in enumerate(mask_records):
        row, w = build_mea(f_mva[i], rec.entity_embeddings)
        f_mea[i] = row
        weights.append(w)
    return AssociationSet(f_mva=f_mva, f_mca=f_mca, f_mea=f_mea, entity_weights=weights, covered=covered)
