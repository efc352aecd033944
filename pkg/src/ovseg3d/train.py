"""Training loop: per scene, build supervision targets, run the model with
that scene's caption features as text input, match, and descend."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .associations import AssociationSet, build_associations
from .losses import ASSOCIATION_TYPES, LossWeights, match_costs, total_loss
from .matching import hungarian
from .model import SegModel
from .optim import AdamW, cosine_restart_lr
from .projection import LiftedFeatures
from .scene import EmbeddingProvider, SceneBundle, ToyTextEmbedder


@dataclass
class TrainConfig:
    epochs: int = 100
    seed: int = 0
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    schedule_period: int | None = None  # steps per cosine cycle; None = one ramp
    weights: LossWeights = field(default_factory=LossWeights)
    use_text_associations: bool = True  # False drops caption/entity supervision

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        weights = LossWeights(**raw.pop("weights", {}))
        return cls(weights=weights, **raw)

    def to_json(self, path: str | Path):
        Path(path).write_text(json.dumps(asdict(self), indent=2))


@dataclass
class TrainResult:
    history: list[dict]  # one row of scalars per step

    @property
    def initial_loss(self) -> float:
        return self.history[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"]


def lifted_from_bundle(bundle: SceneBundle) -> LiftedFeatures:
    coverage = (np.linalg.norm(bundle.lifted_features, axis=1) > 0).astype(np.int64)
    return LiftedFeatures(features=bundle.lifted_features, coverage_count=coverage)


def prepare_scene(bundle: SceneBundle, provider: EmbeddingProvider | None = None, use_text: bool = True):
    """Associations for one scene plus the text rows the decoder sees during
    training: caption features, or the visual rows when captions are off."""
    provider = provider or ToyTextEmbedder(bundle.embed_dim)
    assoc = build_associations(lifted_from_bundle(bundle), bundle.gt_masks, bundle.mask_records, provider)
    text = assoc.f_mca if use_text else assoc.f_mva
    return assoc, text


def train(
    model: SegModel,
    bundles: list[SceneBundle],
    config: TrainConfig | None = None,
    provider: EmbeddingProvider | None = None,
) -> TrainResult:
    """Optimize the model on the given scenes; deterministic given the
    config seed. Aborts on the first NaN loss term, naming it."""
    config = config or TrainConfig()
    if not bundles:
        raise ValueError("training needs at least one scene")
    dims = {b.embed_dim for b in bundles}
    if len(dims) != 1 or dims.pop() != model.config.embed_dim:
        raise ValueError("all scenes must share the model's embedding dim")

    association_types = ASSOCIATION_TYPES if config.use_text_associations else ("mva",)
    scenes = [(b,) + prepare_scene(b, provider, config.use_text_associations) for b in bundles]

    opt = AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    total_steps = max(1, config.epochs * len(bundles))
    period = config.schedule_period or total_steps

    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        for scene_idx, (bundle, assoc, text) in enumerate(scenes):
            opt.lr = cosine_restart_lr(config.learning_rate, step, period)
            opt.zero_grad()
            pred = model.forward(bundle, text, seed=config.seed)
            costs = match_costs(
                pred, assoc, bundle.gt_masks, config.weights,
                logit_scale=model.config.logit_scale, association_types=association_types,
            )
            cost_terms = [(f"cost_{k}", v) for k, v in costs.semantic.items()]
            cost_terms += [("cost_dice", costs.dice), ("cost_bce", costs.bce)]
            for name, arr in cost_terms:
                if np.isnan(arr).any():
                    raise RuntimeError(f"loss term '{name}' became NaN at step {step} (scene {scene_idx})")
            out = total_loss(
                pred,
                bundle.gt_masks,
                assoc,
                config.weights,
                logit_scale=model.config.logit_scale,
                association_types=association_types,
                assignment=hungarian(costs.total),
            )
            scalars = out.scalars()
            for name in ("mma", "dice", "bce", "total"):
                if math.isnan(scalars[name]):
                    raise RuntimeError(f"loss term '{name}' became NaN at step {step} (scene {scene_idx})")
            ad.backward(out.total)
            opt.step()
            history.append({"step": step, "epoch": epoch, "scene": scene_idx, "lr": opt.lr, **scalars})
            step += 1
    return TrainResult(history=history)


def write_history_csv(history: list[dict], path: str | Path):
    if not history:
        raise ValueError("empty history")
    fields = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)
