"""Scene data model, on-disk bundle format, synthetic fixtures, and the
pluggable text embedding provider.

A scene bundle is a directory: ``manifest.json`` describes shapes, dtypes,
category names, captions and entities; each array lives in its own raw
little-endian file referenced by the manifest. Geometry is stored as
float32, embedding-space arrays as float64 (unit-norm rows must survive a
round trip within 1e-9), masks as uint8.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

NORM_TOL = 1e-9
ORTHO_TOL = 1e-9


class BundleFormatError(ValueError):
    """A bundle directory violates the format or a data invariant."""


class FixtureError(RuntimeError):
    """Fixture generation could not satisfy its constraints."""


# ---------------------------------------------------------------------------
# embedding provider
# ---------------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    """Maps text to a deterministic unit vector in the shared embedding space."""

    embed_dim: int

    def embed(self, text: str) -> np.ndarray: ...


class ToyTextEmbedder:
    """Deterministic stand-in for a pretrained text encoder.

    Lowercase-tokenizes, maps each token to a fixed Gaussian vector seeded
    by the token's bytes, averages and L2-normalizes. Identical text always
    yields an identical vector, on any platform.
    """

    def __init__(self, embed_dim: int):
        if embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.embed_dim = int(embed_dim)
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            rng = np.random.Generator(np.random.PCG64(seed))
            vec = rng.standard_normal(self.embed_dim)
            self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if not tokens:
            raise ValueError(f"cannot embed text with no tokens: {text!r}")
        acc = np.zeros(self.embed_dim)
        for token in tokens:
            acc += self._token_vector(token)
        acc /= len(tokens)
        norm = np.linalg.norm(acc)
        if norm == 0.0:
            raise ValueError(f"degenerate zero embedding for text: {text!r}")
        return acc / norm


# ---------------------------------------------------------------------------
# scene types
# ---------------------------------------------------------------------------


@dataclass
class CameraFrame:
    """A posed feature frame: pinhole intrinsics, world-to-camera rigid
    transform, metric depth (0 = invalid) and a per-pixel feature image."""

    intrinsics: np.ndarray  # 3x3
    world_to_camera: np.ndarray  # 4x4
    depth: np.ndarray  # HxW meters
    feature_image: np.ndarray  # HxWxC unit-norm per pixel

    def validate(self):
        k = self.intrinsics
        if k.shape != (3, 3):
            raise BundleFormatError(f"intrinsics must be 3x3, got {k.shape}")
        if not (k[1, 0] == 0 and k[2, 0] == 0 and k[2, 1] == 0):
            raise BundleFormatError("intrinsics must be upper-triangular")
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise BundleFormatError("intrinsics focal entries must be positive")
        t = self.world_to_camera
        if t.shape != (4, 4):
            raise BundleFormatError(f"world_to_camera must be 4x4, got {t.shape}")
        rot = t[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            raise BundleFormatError("world_to_camera rotation block is not orthonormal")
        if self.depth.shape != self.feature_image.shape[:2]:
            raise BundleFormatError("depth and feature_image sizes disagree")


@dataclass
class MaskRecord:
    """Per ground-truth-mask supervision data: caption text and/or its
    embedding, plus at least one entity phrase with embeddings."""

    caption: str | None
    caption_embedding: np.ndarray | None  # (C,)
    entities: list[str]
    entity_embeddings: np.ndarray  # (N_e, C)


@dataclass
class SceneBundle:
    """A point cloud with ground-truth instance masks, lifted per-point
    features, per-mask captions/entities, and optional posed frames.

    Category labels exist only for evaluation; the training path never
    reads them. Bundles are immutable after load and safe to share across
    threads.
    """

    points: np.ndarray  # (M, 3) meters
    colors: np.ndarray  # (M, 3) in [0, 1]
    gt_masks: np.ndarray  # (N_m, M) bool
    lifted_features: np.ndarray  # (M, C), unit or zero rows
    mask_records: list[MaskRecord]
    category_names: list[str] = field(default_factory=list)
    mask_categories: np.ndarray | None = None  # (N_m,) int, evaluation only
    frames: list[CameraFrame] = field(default_factory=list)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def num_masks(self) -> int:
        return self.gt_masks.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.lifted_features.shape[1]

    def validate(self):
        m = self.num_points
        if self.colors.shape != (m, 3):
            raise BundleFormatError(f"colors shape {self.colors.shape} != ({m}, 3)")
        if self.gt_masks.ndim != 2 or self.gt_masks.shape[1] != m:
            raise BundleFormatError(f"gt_masks shape {self.gt_masks.shape} incompatible with {m} points")
        if self.lifted_features.shape[0] != m:
            raise BundleFormatError("lifted_features row count != num points")
        if self.gt_masks.shape[0] != len(self.mask_records):
            raise BundleFormatError("one mask_record required per ground-truth mask")
        if not np.all(self.gt_masks.any(axis=1)):
            empty = int(np.flatnonzero(~self.gt_masks.any(axis=1))[0])
            raise BundleFormatError(f"ground-truth mask {empty} is empty")
        if np.any(self.gt_masks.sum(axis=0) > 1):
            raise BundleFormatError("ground-truth masks overlap")
        _check_rows_unit_or_zero(self.lifted_features, "lifted_features")
        for i, rec in enumerate(self.mask_records):
            if rec.caption_embedding is not None:
                _check_rows_unit_or_zero(rec.caption_embedding.reshape(1, -1), f"caption_embedding[{i}]")
            if len(rec.entities) != rec.entity_embeddings.shape[0]:
                raise BundleFormatError(f"mask_record {i}: entity list and embeddings disagree")
            if rec.entity_embeddings.shape[0] >= 1:
                _check_rows_unit_or_zero(rec.entity_embeddings, f"entity_embeddings[{i}]")
        if self.mask_categories is not None and len(self.mask_categories) != self.num_masks:
            raise BundleFormatError("mask_categories length != number of masks")
        for frame in self.frames:
            frame.validate()


def _check_rows_unit_or_zero(rows: np.ndarray, name: str):
    norms = np.linalg.norm(rows, axis=-1)
    bad = ~((np.abs(norms - 1.0) <= NORM_TOL) | (norms == 0.0))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise BundleFormatError(f"{name}: row {i} has norm {norms[i]!r}, expected 1 or exactly 0")


# ---------------------------------------------------------------------------
# raw array files
# ---------------------------------------------------------------------------

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "|u1": np.dtype("|u1")}


def write_array(path: Path, arr: np.ndarray, dtype: str):
    np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tofile(path)


def read_array(path: Path, shape, dtype: str, name: str) -> np.ndarray:
    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise BundleFormatError(f"array '{name}': expected {expected} bytes for shape {list(shape)}, found {actual}")
    raw = np.fromfile(path, dtype=_DTYPES[dtype])
    return raw.reshape(shape)


def quantize_f32(arr: np.ndarray) -> np.ndarray:
    """Round-trip through float32 so in-memory values match what a saved
    bundle will reload."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# bundle save / load
# ---------------------------------------------------------------------------

_FORMAT_NAME = "ovseg3d-bundle"


def save_bundle(bundle: SceneBundle, out_dir: str | Path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, dict] = {}

    def put(name: str, arr: np.ndarray, dtype: str):
        arrays[name] = {"file": f"{name}.bin", "shape": list(arr.shape), "dtype": dtype}
        write_array(out / f"{name}.bin", arr, dtype)

    put("points", bundle.points, "<f4")
    put("colors", bundle.colors, "<f4")
    put("gt_masks", bundle.gt_masks.astype(np.uint8), "|u1")
    put("lifted_features", bundle.lifted_features, "<f8")

    records = []
    for i, rec in enumerate(bundle.mask_records):
        entry: dict = {"caption": rec.caption, "entities": list(rec.entities)}
        if rec.caption_embedding is not None:
            put(f"caption_embedding_{i:03d}", rec.caption_embedding, "<f8")
            entry["caption_embedding"] = f"caption_embedding_{i:03d}"
        put(f"entity_embeddings_{i:03d}", rec.entity_embeddings, "<f8")
        entry["entity_embeddings"] = f"entity_embeddings_{i:03d}"
        records.append(entry)

    frames = []
    for i, frame in enumerate(bundle.frames):
        put(f"frame_{i:03d}_depth", frame.depth, "<f4")
        put(f"frame_{i:03d}_features", frame.feature_image, "<f4")
        frames.append(
            {
                "intrinsics": frame.intrinsics.tolist(),
                "world_to_camera": frame.world_to_camera.tolist(),
                "depth": f"frame_{i:03d}_depth",
                "feature_image": f"frame_{i:03d}_features",
            }
        )

    manifest = {
        "format": _FORMAT_NAME,
        "version": 1,
        "num_points": bundle.num_points,
        "embed_dim": bundle.embed_dim,
        "category_names": list(bundle.category_names),
        "mask_categories": None if bundle.mask_categories is None else [int(c) for c in bundle.mask_categories],
        "arrays": arrays,
        "mask_records": records,
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_bundle(path: str | Path) -> SceneBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise BundleFormatError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != _FORMAT_NAME:
        raise BundleFormatError(f"unrecognized bundle format {manifest.get('format')!r}")
    arrays = manifest["arrays"]

    def get(name: str) -> np.ndarray:
        if name not in arrays:
            raise BundleFormatError(f"manifest references missing array '{name}'")
        meta = arrays[name]
        arr = read_array(root / meta["file"], meta["shape"], meta["dtype"], name)
        return arr.astype(np.float64) if meta["dtype"] != "|u1" else arr

    records = []
    for entry in manifest["mask_records"]:
        emb = get(entry["caption_embedding"]) if entry.get("caption_embedding") else None
        records.append(
            MaskRecord(
                caption=entry.get("caption"),
                caption_embedding=emb,
                entities=list(entry.get("entities", [])),
                entity_embeddings=get(entry["entity_embeddings"]),
            )
        )

    frames = []
    for entry in manifest.get("frames", []):
        frames.append(
            CameraFrame(
                intrinsics=np.asarray(entry["intrinsics"], dtype=np.float64),
                world_to_camera=np.asarray(entry["world_to_camera"], dtype=np.float64),
                depth=get(entry["depth"]),
                feature_image=get(entry["feature_image"]),
            )
        )

    cats = manifest.get("mask_categories")
    bundle = SceneBundle(
        points=get("points"),
        colors=get("colors"),
        gt_masks=get("gt_masks").astype(bool),
        lifted_features=get("lifted_features"),
        mask_records=records,
        category_names=list(manifest.get("category_names", [])),
        mask_categories=None if cats is None else np.asarray(cats, dtype=np.int64),
        frames=frames,
    )
    bundle.validate()
    return bundle


def bundles_equal(a: SceneBundle, b: SceneBundle) -> bool:
    if a.num_points != b.num_points or a.num_masks != b.num_masks:
        return False
    if not (
        np.array_equal(a.points, b.points)
        and np.array_equal(a.colors, b.colors)
        and np.array_equal(a.gt_masks, b.gt_masks)
        and np.array_equal(a.lifted_features, b.lifted_features)
    ):
        return False
    if a.category_names != b.category_names:
        return False
    for ra, rb in zip(a.mask_records, b.mask_records):
        if ra.caption != rb.caption or ra.entities != rb.entities:
            return False
        if (ra.caption_embedding is None) != (rb.caption_embedding is None):
            return False
        if ra.caption_embedding is not None and not np.array_equal(ra.caption_embedding, rb.caption_embedding):
            return False
        if not np.array_equal(ra.entity_embeddings, rb.entity_embeddings):
            return False
    return True


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------

CAPTION_TEMPLATE = "a {} in a scene."


@dataclass
class FixtureSpec:
    """Parameters for a deterministic synthetic scene; serializable as JSON."""

    categories: list[str]
    instances_per_category: int = 1
    points_per_instance: int = 100
    noise_sigma: float = 0.0
    embed_dim: int = 32
    bounds: float | list = 8.0  # cube edge, or [[min xyz], [max xyz]]
    distractor_entities: list[str] = field(default_factory=list)
    seed: int = 0

    def bounds_box(self) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(self.bounds, (int, float)):
            return np.zeros(3), np.full(3, float(self.bounds))
        lo, hi = self.bounds
        return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)

    @classmethod
    def from_json(cls, path: str | Path) -> "FixtureSpec":
        raw = json.loads(Path(path).read_text())
        return cls(**raw)

    def to_json(self, path: str | Path):
        data = {
            "categories": self.categories,
            "instances_per_category": self.instances_per_category,
            "points_per_instance": self.points_per_instance,
            "noise_sigma": self.noise_sigma,
            "embed_dim": self.embed_dim,
            "bounds": self.bounds,
            "distractor_entities": self.distractor_entities,
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(data, indent=2))


def _place_blobs(rng: np.random.Generator, n: int, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, float]:
    """Sample n pairwise-disjoint axis-aligned boxes (returned as centers +
    shared half-extent) by seeded rejection.

    Blob size adapts to the instance count but never drops below 5% of the
    smallest bound extent, so overcrowded specs fail instead of degenerating
    into dust.
    """
    extent = hi - lo
    smallest = float(min(extent))
    if smallest <= 0:
        raise FixtureError("bounds must have positive extent on every axis")
    half = max(smallest / (4.0 * max(1.0, np.ceil(n ** (1.0 / 3.0)))), smallest / 20.0)
    capacity = int(np.prod(np.floor(extent / (2.0 * half))))
    if n > capacity:
        raise FixtureError(f"cannot place {n} disjoint blobs within bounds (capacity ~{capacity})")
    centers = np.zeros((n, 3))
    placed = 0
    for _ in range(500 * n):
        c = lo + half + rng.random(3) * (extent - 2 * half)
        if placed and np.any(np.all(np.abs(centers[:placed] - c) < 2 * half, axis=1)):
            continue
        centers[placed] = c
        placed += 1
        if placed == n:
            return centers, half
    raise FixtureError(f"could not place {n} disjoint blobs within bounds {lo.tolist()}..{hi.tolist()}")


def generate_fixture(spec: FixtureSpec, seed: int | None = None) -> SceneBundle:
    """Build a deterministic scene of disjoint category blobs.

    Each point's lifted feature is the toy embedding of its category name
    plus Gaussian noise, re-normalized (used verbatim at zero noise).
    Captions follow the fixture prompt template; entities are the category
    name plus any distractors. Pure function of (spec, seed).
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed if seed is None else seed))
    provider = ToyTextEmbedder(spec.embed_dim)
    lo, hi = spec.bounds_box()
    n_instances = len(spec.categories) * spec.instances_per_category
    if n_instances < 1:
        raise FixtureError("fixture needs at least one category and one instance")
    centers, half = _place_blobs(rng, n_instances, lo, hi)

    cat_embeddings = {c: provider.embed(c) for c in spec.categories}
    cat_colors = {}
    for c in spec.categories:
        cseed = int.from_bytes(hashlib.sha256(f"color:{c}".encode()).digest()[:8], "little")
        cat_colors[c] = 0.15 + 0.7 * np.random.Generator(np.random.PCG64(cseed)).random(3)

    points, colors, feats = [], [], []
    masks, records, mask_cats = [], [], []
    m_total = n_instances * spec.points_per_instance
    offset = 0
    for k, category in enumerate(spec.categories):
        for j in range(spec.instances_per_category):
            center = centers[k * spec.instances_per_category + j]
            pts = center + (rng.random((spec.points_per_instance, 3)) * 2.0 - 1.0) * half
            points.append(pts)
            base = np.tile(cat_colors[category], (spec.points_per_instance, 1))
            if spec.noise_sigma > 0:
                base = np.clip(base + rng.normal(0.0, 0.05, base.shape), 0.0, 1.0)
            colors.append(base)
            emb = cat_embeddings[category]
            if spec.noise_sigma > 0:
                noisy = emb + rng.normal(0.0, spec.noise_sigma, (spec.points_per_instance, spec.embed_dim))
                noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
                feats.append(noisy)
            else:
                feats.append(np.tile(emb, (spec.points_per_instance, 1)))
            mask = np.zeros(m_total, dtype=bool)
            mask[offset : offset + spec.points_per_instance] = True
            masks.append(mask)
            offset += spec.points_per_instance
            caption = CAPTION_TEMPLATE.format(category)
            entities = [category] + list(spec.distractor_entities)
            records.append(
                MaskRecord(
                    caption=caption,
                    caption_embedding=provider.embed(caption),
                    entities=entities,
                    entity_embeddings=np.stack([provider.embed(e) for e in entities]),
                )
            )
            mask_cats.append(k)

    bundle = SceneBundle(
        points=quantize_f32(np.concatenate(points)),
        colors=quantize_f32(np.concatenate(colors)),
        gt_masks=np.stack(masks),
        lifted_features=np.concatenate(feats),
        mask_records=records,
        category_names=list(spec.categories),
        mask_categories=np.asarray(mask_cats, dtype=np.int64),
    )
    bundle.validate()
    return bundle
