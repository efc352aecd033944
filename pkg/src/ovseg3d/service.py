"""HTTP service for the viewer: scene listing, binary point payloads, and
free-form query answering over immutable state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .inference import ENSEMBLE_MODES, EnsembleMode, answer_query
from .model import SegModel
from .scene import EmbeddingProvider, SceneBundle

MODE_ALIASES = {"none": "none", "hard": "hard_geometric", "soft": "soft_geometric"}


@dataclass
class ServiceState:
    """Everything a request needs; never mutated after startup."""

    model: SegModel
    bundles: dict[str, SceneBundle]
    provider: EmbeddingProvider
    default_mode: EnsembleMode = field(default_factory=EnsembleMode)
    seed: int = 0


class QueryRequest(BaseModel):
    scene_id: str
    text: str
    top_k: int = 5
    tau: float | None = None
    mode: str | None = None


def resolve_mode(name: str | None, tau: float | None, default: EnsembleMode) -> EnsembleMode:
    mode_name = default.mode if name is None else MODE_ALIASES.get(name, name)
    if mode_name not in ENSEMBLE_MODES:
        raise ValueError(f"mode must be one of {sorted(MODE_ALIASES)} or {ENSEMBLE_MODES}")
    return EnsembleMode(mode=mode_name, tau=default.tau if tau is None else tau)


def points_payload(bundle: SceneBundle) -> bytes:
    """Positions as little-endian float32 triples, then colors as bytes."""
    pos = np.ascontiguousarray(bundle.points, dtype="<f4").tobytes()
    col = np.ascontiguousarray(np.clip(bundle.colors * 255.0, 0, 255), dtype=np.uint8).tobytes()
    return pos + col


def build_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="ovseg3d")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        detail = [
            {"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"detail": detail})

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/scenes")
    def scenes():
        return sorted(state.bundles)

    @app.get("/scenes/{scene_id}/points")
    def scene_points(scene_id: str):
        bundle = state.bundles.get(scene_id)
        if bundle is None:
            return JSONResponse(status_code=404, content={"detail": f"unknown scene {scene_id!r}"})
        payload = points_payload(bundle)
        return Response(
            content=payload,
            media_type="application/octet-stream",
            headers={"Content-Length": str(len(payload)), "X-Point-Count": str(bundle.num_points)},
        )

    @app.post("/query")
    def query(req: QueryRequest):
        bundle = state.bundles.get(req.scene_id)
        if bundle is None:
            return JSONResponse(status_code=404, content={"detail": f"unknown scene {req.scene_id!r}"})
        if not req.text.strip():
            return JSONResponse(
                status_code=400,
                content={"detail": [{"field": "body.text", "message": "text must be non-empty"}]},
            )
        try:
            mode = resolve_mode(req.mode, req.tau, state.default_mode)
        except ValueError as exc:
            return JSONResponse(
                status_code=400,
                content={"detail": [{"field": "body.mode", "message": str(exc)}]},
            )
        result = answer_query(
            state.model, bundle, req.text, state.provider, top_k=req.top_k, mode=mode, seed=state.seed
        )
        return {
            "results": [
                {
                    "mask_id": item.mask_id,
                    "score": item.score,
                    "point_indices": item.point_indices.tolist(),
                }
                for item in result.items
            ]
        }

    return app
