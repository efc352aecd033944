"""Command-line entry points for the full lifecycle.

Every subcommand is reproducible given identical inputs and seeds. Exit
codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import click
import numpy as np

from .evaluation import evaluate_model
from .inference import EnsembleMode, answer_query
from .losses import LossWeights
from .model import SegModel, SegModelConfig, load_model, save_model
from .scene import FixtureSpec, ToyTextEmbedder, generate_fixture, load_bundle, save_bundle
from .service import MODE_ALIASES, ServiceState, build_app, resolve_mode
from .train import TrainConfig, train, write_history_csv

RANK_PALETTE = [
    (255, 0, 0),
    (255, 128, 0),
    (255, 220, 0),
    (128, 255, 0),
    (0, 255, 160),
    (0, 160, 255),
]


def graceful(fn):
    """Convert runtime failures into clean exit-code-1 errors; usage errors
    keep click's exit code 2."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


@click.group()
def main():
    """Open-vocabulary 3D instance segmentation, desk scale."""


@main.group()
def fixtures():
    """Synthetic scene generation."""


@fixtures.command("gen")
@click.argument("spec_json", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--count", default=1, show_default=True, help="Scenes to generate (seed offsets by index).")
@graceful
def fixtures_gen(spec_json, out_dir, count):
    """Generate fixture scene(s) from a spec JSON; identical spec and
    seed give bit-identical scenes."""
    spec = FixtureSpec.from_json(spec_json)
    out = Path(out_dir)
    if count == 1:
        save_bundle(generate_fixture(spec), out)
        click.echo(f"wrote scene to {out}")
    else:
        for i in range(count):
            save_bundle(generate_fixture(spec, seed=spec.seed + i), out / f"scene_{i:03d}")
        click.echo(f"wrote {count} scenes under {out}")


def _load_bundles(paths):
    return [load_bundle(p) for p in paths]


@main.command("train")
@click.argument("config_json", type=click.Path(exists=True, dir_okay=False))
@click.argument("scenes", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Checkpoint directory.")
@click.option("--history", "history_csv", default=None, type=click.Path(dir_okay=False), help="Loss history CSV.")
@graceful
def train_cmd(config_json, scenes, out_dir, history_csv):
    """Train on scene bundles; the config JSON may carry a "model" section
    with architecture fields next to the run fields (epochs, seed, ...).
    Reproducible: identical inputs and seeds give identical checkpoints."""
    raw = json.loads(Path(config_json).read_text())
    bundles = _load_bundles(scenes)
    model_fields = raw.pop("model", {})
    model_fields.setdefault("embed_dim", bundles[0].embed_dim)
    model = SegModel(SegModelConfig(**model_fields))
    config = TrainConfig(weights=LossWeights(**raw.pop("weights", {})), **raw)
    result = train(model, bundles, config)
    save_model(model, out_dir)
    if history_csv and result.history:
        write_history_csv(result.history, history_csv)
    if result.history:
        click.echo(f"trained {len(result.history)} steps; loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    else:
        click.echo("trained 0 steps; checkpoint equals initialization")
    click.echo(f"checkpoint written to {out_dir}")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("scenes", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--report", "report_json", required=True, type=click.Path(dir_okay=False), help="Report JSON path.")
@click.option("--pr-csv", default=None, type=click.Path(dir_okay=False), help="Precision-recall curves CSV.")
@click.option("--tau", default=0.667, show_default=True)
@click.option("--mode", default="soft", type=click.Choice(sorted(MODE_ALIASES)), show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--no-grounding", is_flag=True, help="Skip the caption-grounding pass.")
@graceful
def eval_cmd(checkpoint, scenes, report_json, pr_csv, tau, mode, seed, no_grounding):
    """Category-classification AP and caption grounding on scene bundles.
    Reproducible given identical inputs and seeds."""
    model = load_model(checkpoint)
    bundles = _load_bundles(scenes)
    ensemble = EnsembleMode(mode=MODE_ALIASES[mode], tau=tau)
    report = evaluate_model(model, bundles, mode=ensemble, seed=seed, with_grounding=not no_grounding)
    report.to_json(report_json)
    if pr_csv:
        report.pr_to_csv(pr_csv)
    click.echo(f"AP {report.mean_ap:.4f}  AP50 {report.mean_ap50:.4f}  AP25 {report.mean_ap25:.4f}")
    if report.grounding:
        click.echo(f"grounding ACC@25 {report.grounding['acc25']:.4f}  ACC@50 {report.grounding['acc50']:.4f}")
    click.echo(f"report written to {report_json}")


@main.command("query")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("scene", type=click.Path(exists=True, file_okay=False))
@click.option("--text", required=True, help="Free-form language instruction.")
@click.option("--top-k", default=5, show_default=True)
@click.option("--tau", default=0.667, show_default=True)
@click.option("--mode", default="soft", type=click.Choice(sorted(MODE_ALIASES)), show_default=True)
@click.option("--seed", default=0, show_default=True)
@graceful
def query_cmd(checkpoint, scene, text, top_k, tau, mode, seed):
    """Rank scene instances against a language instruction; prints JSON.
    Reproducible given identical inputs and seeds."""
    model = load_model(checkpoint)
    bundle = load_bundle(scene)
    ensemble = EnsembleMode(mode=MODE_ALIASES[mode], tau=tau)
    provider = ToyTextEmbedder(model.config.embed_dim)
    result = answer_query(model, bundle, text, provider, top_k=top_k, mode=ensemble, seed=seed)
    click.echo(
        json.dumps(
            {
                "query": result.query_text,
                "results": [
                    {"mask_id": r.mask_id, "score": r.score, "point_indices": r.point_indices.tolist()}
                    for r in result.items
                ],
            },
            indent=2,
        )
    )


@main.command("export-ply")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("scene", type=click.Path(exists=True, file_okay=False))
@click.option("--text", required=True)
@click.option("--out", "out_ply", required=True, type=click.Path(dir_okay=False))
@click.option("--top-k", default=5, show_default=True)
@click.option("--tau", default=0.667, show_default=True)
@click.option("--mode", default="soft", type=click.Choice(sorted(MODE_ALIASES)), show_default=True)
@click.option("--seed", default=0, show_default=True)
@graceful
def export_ply_cmd(checkpoint, scene, text, out_ply, top_k, tau, mode, seed):
    """Write an ASCII polygon file with returned instances tinted by rank.
    Reproducible given identical inputs and seeds."""
    model = load_model(checkpoint)
    bundle = load_bundle(scene)
    ensemble = EnsembleMode(mode=MODE_ALIASES[mode], tau=tau)
    provider = ToyTextEmbedder(model.config.embed_dim)
    result = answer_query(model, bundle, text, provider, top_k=top_k, mode=ensemble, seed=seed)
    colors = np.clip(bundle.colors * 255.0, 0, 255).astype(np.uint8)
    for rank, item in enumerate(result.items):
        colors[item.point_indices] = RANK_PALETTE[rank % len(RANK_PALETTE)]
    m = bundle.num_points
    with open(out_ply, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {m}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(bundle.points, colors):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
    click.echo(f"wrote {m} vertices to {out_ply}")


@main.command("serve")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("scenes", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--tau", default=0.667, show_default=True)
@click.option("--static-dir", default=None, type=click.Path(file_okay=False, exists=True), help="Mount a built viewer at /app.")
@graceful
def serve_cmd(checkpoint, scenes, port, host, tau, static_dir):
    """Serve scenes and query answering over HTTP for the viewer; query
    responses are deterministic for identical requests."""
    import uvicorn

    model = load_model(checkpoint)
    bundles = {Path(p).name: load_bundle(p) for p in scenes}
    state = ServiceState(
        model=model,
        bundles=bundles,
        provider=ToyTextEmbedder(model.config.embed_dim),
        default_mode=EnsembleMode(tau=tau),
    )
    app = build_app(state)
    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/app", StaticFiles(directory=static_dir, html=True), name="viewer")
    click.echo(f"serving {len(bundles)} scene(s) on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
