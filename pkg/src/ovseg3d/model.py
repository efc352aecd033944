"""The segmentation network.

A small residual point encoder with voxel-mean message passing replaces a
sparse-conv UNet at desk scale; its features are concatenated with the
lifted per-point features and fed, over a stack of voxel resolutions, to a
decoder whose blocks run three attention layers each: queries over scene
features, queries over text features, query self-attention. Heads emit a
per-point heatmap logit per query and a unit-norm mask feature per query.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .projection import ScalePyramid, build_pyramid
from .scene import SceneBundle, read_array, write_array

FEATURE_MODES = ("ensemble", "lifted_only", "backbone_only")


@dataclass
class SegModelConfig:
    embed_dim: int  # C, shared with the embedding provider
    backbone_dim: int = 32  # D
    num_scales: int = 5
    num_queries: int = 150
    num_blocks: int = 4
    num_heads: int = 4
    hidden_dim: int = 128
    base_voxel: float = 0.04  # meters
    logit_scale: float = 10.0  # applied to feature dot products before sigmoid/softmax
    feature_mode: str = "ensemble"
    use_pos_enc: bool = True
    pos_scale: float = 8.0  # meters; wavelength reference for coordinate encoding
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "backbone_dim", "num_scales", "num_queries", "num_blocks", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")

    @property
    def point_feature_dim(self) -> int:
        if self.feature_mode == "lifted_only":
            return self.embed_dim
        if self.feature_mode == "backbone_only":
            return self.backbone_dim
        return self.embed_dim + self.backbone_dim


@dataclass
class Prediction:
    """Per-query outputs for one scene."""

    heatmaps: Tensor  # (N_q, M) logits
    mask_features: Tensor  # (N_q, C), unit rows
    masks: np.ndarray  # (N_q, M) bool, heatmap > 0
    query_positions: np.ndarray  # (N_q, 3)
    query_indices: np.ndarray  # (N_q,)


def farthest_point_sample(points: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Greedy FPS: seeded first pick, then repeatedly the point farthest
    from the chosen set (ties to the lowest index). If n exceeds the point
    count, the full ordering repeats cyclically."""
    m = points.shape[0]
    if m < 1:
        raise ValueError("cannot sample queries from an empty point cloud")
    rng = np.random.Generator(np.random.PCG64(seed))
    first = int(rng.integers(m))
    order = [first]
    d = np.sum((points - points[first]) ** 2, axis=1)
    d[first] = -1.0  # chosen points never win the argmax again
    while len(order) < min(n, m):
        nxt = int(np.argmax(d))
        order.append(nxt)
        dn = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(d, dn, out=d)
        d[nxt] = -1.0
    if n > m:
        order = [order[i % m] for i in range(n)]
    return np.asarray(order, dtype=np.int64)


_POS_BANDS = 4


def fourier_positions(xyz: np.ndarray, scale: float) -> np.ndarray:
    """sin/cos features of coordinates at doubling frequencies."""
    freqs = (2.0 ** np.arange(_POS_BANDS)) * (np.pi / scale)
    ang = xyz[:, :, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(xyz.shape[0], -1)


class SegModel:
    """Backbone + feature ensemble + decoder + heads.

    Read-only during forward (concurrent forwards are safe); training
    mutates parameters and needs exclusive access.
    """

    def __init__(self, config: SegModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.Generator(np.random.PCG64(config.seed))
        c, d = config.embed_dim, config.backbone_dim
        hid, fw = config.hidden_dim, config.point_feature_dim

        def param(name, fan_in, fan_out):
            std = math.sqrt(2.0 / (fan_in + fan_out))
            self.params[name + ".w"] = Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True)
            self.params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True)

        param("stem", 3, d)
        for s in range(config.num_scales):
            param(f"scale{s}.mix", d, d)
        param("point_ff1", d, 2 * d)
        param("point_ff2", 2 * d, d)

        self.params["pos.w"] = Tensor(
            rng.normal(0.0, math.sqrt(2.0 / (6 * _POS_BANDS + hid)), (6 * _POS_BANDS, hid)),
            requires_grad=True,
        )
        param("query_init", fw, hid)
        for L in range(config.num_blocks):
            for name, kv in ((f"block{L}.visual", fw), (f"block{L}.text", c), (f"block{L}.self", hid)):
                param(name + ".q", hid, hid)
                param(name + ".k", kv, hid)
                param(name + ".v", kv, hid)
                param(name + ".o", hid, hid)
            param(f"block{L}.ff1", hid, 2 * hid)
            param(f"block{L}.ff2", 2 * hid, hid)
        param("head_mask_feature", hid, c)
        param("head_heatmap_q", hid, hid)
        param("head_heatmap_p", fw, hid)

    # -- plumbing ----------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        """Parameters that participate in the configured feature mode (the
        backbone path is dead weight when only lifted features are used)."""
        skip = ("stem", "scale", "point_ff") if self.config.feature_mode == "lifted_only" else ()
        return [self.params[k] for k in sorted(self.params) if not k.startswith(skip)]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameters_for(self, *prefixes: str) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params) if k.startswith(prefixes)]

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return ad.matmul(x, self.params[name + ".w"]) + self.params[name + ".b"]

    def _pos_encode(self, xyz: np.ndarray) -> Tensor | None:
        if not self.config.use_pos_enc:
            return None
        feats = Tensor(fourier_positions(xyz, self.config.pos_scale))
        return ad.matmul(feats, self.params["pos.w"])

    # -- stages ------------------------------------------------------------

    def backbone_forward(self, colors: np.ndarray, pyramid: ScalePyramid) -> Tensor:
        """Per-point features from colors plus voxel-mean message passing
        across every pyramid scale (pool -> transform -> unpool skips)."""
        x = ad.gelu(self._linear("stem", Tensor(colors)))
        for s in range(self.config.num_scales):
            y = ad.layer_norm(x)
            pooled = ad.segment_mean(y, pyramid.assignments[s], pyramid.num_voxels[s])
            mixed = ad.gelu(self._linear(f"scale{s}.mix", pooled))
            x = x + ad.gather_rows(mixed, pyramid.assignments[s])
        y = ad.layer_norm(x)
        x = x + self._linear("point_ff2", ad.gelu(self._linear("point_ff1", y)))
        return x

    def ensemble(self, lifted: np.ndarray, backbone: Tensor) -> Tensor:
        """Combine lifted and backbone features per the configured mode;
        the default concatenates them along the feature axis."""
        mode = self.config.feature_mode
        if lifted.shape[0] != backbone.shape[0]:
            raise ValueError(f"row mismatch: lifted {lifted.shape[0]} vs backbone {backbone.shape[0]}")
        if mode == "lifted_only":
            return Tensor(lifted)
        if mode == "backbone_only":
            return backbone
        return ad.concat([Tensor(lifted), backbone], axis=1)

    def init_queries(self, points: np.ndarray, point_features: Tensor, seed: int, query_indices=None):
        if query_indices is None:
            query_indices = farthest_point_sample(points, self.config.num_queries, seed)
        query_indices = np.asarray(query_indices, dtype=np.int64)
        positions = points[query_indices]
        q = self._linear("query_init", ad.gather_rows(point_features, query_indices))
        pe = self._pos_encode(positions)
        if pe is not None:
            q = q + pe
        return q, positions, query_indices

    def _mha(self, prefix: str, q_in: Tensor, kv_in: Tensor, key_pe: Tensor | None = None, record=None) -> Tensor:
        h = self.config.num_heads
        hid = self.config.hidden_dim
        dh = hid // h
        n, t = q_in.shape[0], kv_in.shape[0]
        q = self._linear(prefix + ".q", q_in)
        k = self._linear(prefix + ".k", kv_in)
        if key_pe is not None:
            k = k + key_pe
        v = self._linear(prefix + ".v", kv_in)
        qh = ad.transpose(ad.reshape(q, (n, h, dh)), (1, 0, 2))
        kh = ad.transpose(ad.reshape(k, (t, h, dh)), (1, 2, 0))
        vh = ad.transpose(ad.reshape(v, (t, h, dh)), (1, 0, 2))
        attn = ad.softmax(ad.mul(ad.matmul(qh, kh), 1.0 / math.sqrt(dh)), axis=-1)
        if record is not None:
            record.append(attn.data.copy())
        out = ad.reshape(ad.transpose(ad.matmul(attn, vh), (1, 0, 2)), (n, hid))
        return self._linear(prefix + ".o", out)

    def cmd_block(self, block: int, queries: Tensor, scene_kv: Tensor, scene_pe: Tensor | None, text_kv: Tensor, record=None) -> Tensor:
        """One decoder block: scene cross-attention, text cross-attention,
        self-attention, feed-forward; pre-norm residuals throughout."""
        if text_kv.shape[0] < 1:
            raise ValueError("decoder needs at least one text feature row")
        pfx = f"block{block}"
        rec = record if record is None else record.setdefault("attention", [])
        queries = queries + self._mha(pfx + ".visual", ad.layer_norm(queries), scene_kv, key_pe=scene_pe, record=rec)
        queries = queries + self._mha(pfx + ".text", ad.layer_norm(queries), text_kv, record=rec)
        y = ad.layer_norm(queries)
        queries = queries + self._mha(pfx + ".self", y, y, record=rec)
        ff = self._linear(pfx + ".ff2", ad.gelu(self._linear(pfx + ".ff1", ad.layer_norm(queries))))
        return queries + ff

    def forward(
        self,
        bundle: SceneBundle,
        text_features: np.ndarray,
        seed: int = 0,
        query_indices=None,
        record=None,
    ) -> Prediction:
        """Full pass over one scene: backbone, ensemble, query refinement
        over pyramid scales (coarse to fine, cycling), heads."""
        cfg = self.config
        text_features = np.asarray(text_features, dtype=np.float64)
        if text_features.ndim != 2 or text_features.shape[0] < 1:
            raise ValueError("text_features must be a non-empty (T, C) matrix")
        if text_features.shape[1] != cfg.embed_dim:
            raise ValueError(f"text feature dim {text_features.shape[1]} != embed dim {cfg.embed_dim}")
        if cfg.feature_mode != "backbone_only" and bundle.lifted_features.shape[1] != cfg.embed_dim:
            raise ValueError(f"scene embed dim {bundle.lifted_features.shape[1]} != config embed dim {cfg.embed_dim}")

        points = np.asarray(bundle.points, dtype=np.float64)
        pyramid = build_pyramid(points, cfg.num_scales, cfg.base_voxel)
        if cfg.feature_mode == "lifted_only":
            point_feats = Tensor(bundle.lifted_features)
        else:
            f_b = self.backbone_forward(np.asarray(bundle.colors, dtype=np.float64), pyramid)
            point_feats = self.ensemble(bundle.lifted_features, f_b)

        scale_kv, scale_pe = [], []
        for s in range(cfg.num_scales):
            scale_kv.append(ad.segment_mean(point_feats, pyramid.assignments[s], pyramid.num_voxels[s]))
            scale_pe.append(self._pos_encode(pyramid.centroids[s]))

        queries, positions, query_indices = self.init_queries(points, point_feats, seed, query_indices)
        text_kv = Tensor(text_features)
        for L in range(cfg.num_blocks):
            s = cfg.num_scales - 1 - (L % cfg.num_scales)
            queries = self.cmd_block(L, queries, scale_kv[s], scale_pe[s], text_kv, record=record)

        q_final = ad.layer_norm(queries)
        f_m = ad.l2_normalize_rows(self._linear("head_mask_feature", q_final), eps=1e-12)
        hq = self._linear("head_heatmap_q", q_final)
        hp = self._linear("head_heatmap_p", point_feats)
        # 1/sqrt(hidden) keeps untrained logits near zero instead of square
        # in the saturated tails of the sigmoid
        heatmaps = ad.mul(ad.matmul(hq, ad.transpose(hp)), 1.0 / math.sqrt(cfg.hidden_dim))
        return Prediction(
            heatmaps=heatmaps,
            mask_features=f_m,
            masks=heatmaps.data > 0.0,
            query_positions=positions,
            query_indices=query_indices,
        )


# ---------------------------------------------------------------------------
# checkpoints: manifest + raw parameter arrays
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "ovseg3d-checkpoint"


def save_model(model: SegModel, out_dir: str | Path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (name, p) in enumerate(sorted(model.params.items())):
        fname = f"param_{i:04d}.bin"
        write_array(out / fname, p.data, "<f8")
        entries[name] = {"file": fname, "shape": list(p.data.shape), "dtype": "<f8"}
    manifest = {"format": _CKPT_FORMAT, "version": 1, "config": asdict(model.config), "params": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_model(path: str | Path) -> SegModel:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != _CKPT_FORMAT:
        raise ValueError(f"not a model checkpoint: {root}")
    model = SegModel(SegModelConfig(**manifest["config"]))
    for name, meta in manifest["params"].items():
        arr = read_array(root / meta["file"], meta["shape"], meta["dtype"], name).astype(np.float64)
        if name not in model.params or model.params[name].data.shape != arr.shape:
            raise ValueError(f"checkpoint parameter {name} does not fit the configured model")
        model.params[name].data = arr
    return model
