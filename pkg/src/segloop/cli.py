"""Operator command line: dataset generation, pipeline stages, benchmark
protocols, evaluation, model audit, the review service, and exports.

Every subcommand honors --seed for reproducibility, logs to stderr, and
writes results to stdout or --out. On failure a machine-readable JSON
error line goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from .dataset_io import DatasetManifest, rle_encode, write_labels
from .errors import SegloopError
from .geometry import decode_mask
from .metrics import evaluate as metrics_evaluate
from .pipeline import (
    PipelineConfig,
    PipelineRun,
    benchmark_prompts,
    fine_fraction_experiment,
)
from .synthetic import generate_synthetic_dataset, write_images
from .types import MaskInstance, RlePayload


def _fail(message: str, code: int = 2):
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SegloopError as exc:
            _fail(str(exc))

    return wrapper


def _load_config(config_path: str | None, seed: int | None, workers: int | None) -> PipelineConfig:
    cfg = PipelineConfig.from_yaml(config_path) if config_path else PipelineConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if workers is not None:
        cfg = replace(cfg, workers=workers)
    return cfg


def _write_or_print(payload: dict, out: str | None):
    text = json.dumps(payload, sort_keys=True, indent=1)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
        click.echo(f"wrote {out}", err=True)
    else:
        click.echo(text)


@click.group()
def main():
    """Model-in-the-loop segmentation annotation toolkit."""


@main.command("generate-synthetic")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output dataset directory.")
@click.option("--images", "n_images", default=100, show_default=True, help="Number of images.")
@click.option("--width", default=160, show_default=True)
@click.option("--height", default=160, show_default=True)
@click.option("--classes", "n_classes", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--name", default="synthetic", show_default=True)
@click.option("--render/--no-render", default=True, show_default=True, help="Also write PNGs.")
@guarded
def generate_synthetic(out_dir, n_images, width, height, n_classes, seed, name, render):
    """Write a seeded blob dataset (manifest with hidden ground truth)."""
    manifest = generate_synthetic_dataset(
        n_images, width=width, height=height, n_classes=n_classes, seed=seed, name=name
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.json")
    if render:
        write_images(manifest, out)
    click.echo(f"wrote {out / 'manifest.json'} ({n_images} images)", err=True)


@main.command("seed-annotate")
@click.option("--dataset", required=True, type=click.Path(exists=True), help="Dataset manifest JSON.")
@click.option("--checkpoint", "checkpoint_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), help="Pipeline config YAML.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@guarded
def seed_annotate_cmd(dataset, checkpoint_dir, config_path, seed):
    """Annotate the seed subset and write iteration-0 state."""
    manifest = DatasetManifest.load(dataset)
    cfg = _load_config(config_path, seed, None)
    run = PipelineRun(manifest, cfg, checkpoint_dir=checkpoint_dir)
    run.prepare()
    click.echo(json.dumps(run.summary(), sort_keys=True))


@main.command("iterate")
@click.option("--checkpoint", "checkpoint_dir", required=True, type=click.Path())
@click.option("--dataset", type=click.Path(exists=True), help="Manifest (to start a fresh run).")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Worker threads (default: machine cores).")
@click.option("--until-converged", is_flag=True, help="Iterate until converged or stalled.")
@guarded
def iterate(checkpoint_dir, dataset, config_path, seed, workers, until_converged):
    """Run one refinement iteration (or all, with --until-converged)."""
    checkpoint = Path(checkpoint_dir)
    if (checkpoint / "run.json").exists():
        run = PipelineRun.load(checkpoint)
        if seed is not None and seed != run.config.seed:
            _fail(f"checkpoint was created with seed {run.config.seed}, got --seed {seed}")
    else:
        if not dataset:
            _fail("no checkpoint found; pass --dataset to start a run")
        manifest = DatasetManifest.load(dataset)
        cfg = _load_config(config_path, seed, workers)
        run = PipelineRun(manifest, cfg, checkpoint_dir=checkpoint)
        run.prepare()
    status = "continue"
    while status == "continue":
        status = run.step()
        click.echo(
            json.dumps({"iteration": run.state.iteration, "status": status}, sort_keys=True),
            err=True,
        )
        if not until_converged:
            break
    summary = run.summary()
    summary["status"] = status
    click.echo(json.dumps(summary, sort_keys=True))


@main.command("benchmark-prompts")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--strategies", default="MBB,MBB+5%,MBB+10%,MBB+20%,3P,3P+4N", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@guarded
def benchmark_prompts_cmd(dataset, strategies, config_path, seed, out):
    """Score prompt variants (box expansions, point counts) by mIoU."""
    manifest = DatasetManifest.load(dataset)
    cfg = _load_config(config_path, seed, None)
    from .adapters import create_segmenter

    segmenter = create_segmenter(cfg.segmenter.get("name", "oracle"), manifest, cfg.segmenter)
    table = benchmark_prompts(manifest, segmenter, strategies.split(","), seed=cfg.seed)
    _write_or_print({"miou_by_strategy": table}, out)


@main.command("fine-fractions")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--fractions", default="0.1,0.2,0.5,1.0", show_default=True)
@click.option("--seeds", default=None, help="Comma-separated seeds for averaging.")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@guarded
def fine_fractions(dataset, fractions, seeds, config_path, seed, out):
    """Run the loop at several fine-box budgets and score the held-out split."""
    manifest = DatasetManifest.load(dataset)
    cfg = _load_config(config_path, seed, None)
    fraction_values = [float(f) for f in fractions.split(",")]
    seed_values = [int(s) for s in seeds.split(",")] if seeds else None
    results = fine_fraction_experiment(manifest, fraction_values, cfg, seeds=seed_values)
    _write_or_print(
        {"by_fraction": {str(k): v for k, v in results.items()}}, out
    )


@main.command("evaluate")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True), help="Predictions manifest.")
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True), help="Ground-truth manifest.")
@click.option("--kind", type=click.Choice(["mask", "box"]), default="mask", show_default=True)
@click.option("--iou", "iou_threshold", default=0.5, show_default=True)
@click.option("--map-high", default=0.95, show_default=True, help="Upper mAP IoU bound (0.9 or 0.95).")
@click.option("--out", type=click.Path(), default=None)
@guarded
def evaluate_cmd(pred_path, gt_path, kind, iou_threshold, map_high, out):
    """Write the metrics report comparing two annotation manifests."""
    preds_manifest = DatasetManifest.load(pred_path)
    gt_manifest = DatasetManifest.load(gt_path)
    preds, gts = [], []
    for image_id, instances in sorted(preds_manifest.annotations.items()):
        for inst in instances:
            if inst.confidence is None:
                inst = replace(inst, confidence=1.0)
            preds.append(inst)
    for image_id, instances in sorted(gt_manifest.annotations.items()):
        gts.extend(instances)
    if kind == "box":
        from .geometry import minimum_bounding_box
        from .metrics import BoxLabel

        preds = [
            BoxLabel(p.image_id, p.class_id, minimum_bounding_box(decode_mask(p)).with_confidence(p.confidence))
            for p in preds
        ]
        gts = [
            BoxLabel(g.image_id, g.class_id, minimum_bounding_box(decode_mask(g)))
            for g in gts
        ]
    report = metrics_evaluate(
        preds,
        gts,
        kind=kind,
        n_classes=len(gt_manifest.class_names),
        iou_threshold=iou_threshold,
        map_high=map_high,
    )
    _write_or_print(report.to_dict(), out)


@main.command("audit-model")
@click.option("--config", "config_path", type=click.Path(exists=True), help="Architecture YAML (default: packaged).")
@click.option("--flops/--no-flops", default=True, show_default=True)
@click.option("--tolerance", default=0.02, show_default=True, help="Relative tolerance on the parameter total.")
@click.option("--flops-tolerance", default=0.10, show_default=True)
@guarded
def audit_model(config_path, flops, tolerance, flops_tolerance):
    """Build the network and print built-vs-expected parameter counts."""
    from .model import NetworkConfig, audit_flops, audit_parameters, build_network, default_network_config

    cfg = NetworkConfig.from_yaml(config_path) if config_path else default_network_config()
    model = build_network(cfg)
    audit = audit_parameters(model)
    click.echo(audit.to_table())
    failures = []
    for row in audit.rows:
        if row.kind in ("conv", "sppf", "upsample", "concat", "input") and row.expected is not None:
            if row.built != row.expected:
                failures.append(f"layer {row.index} ({row.kind}): {int(row.built)} != {int(row.expected)}")
    if audit.expected_total:
        rel = abs(audit.total - audit.expected_total) / audit.expected_total
        click.echo(f"total delta: {audit.total - audit.expected_total:+d} ({rel:.3%})")
        if rel > tolerance:
            failures.append(f"total {audit.total} outside {tolerance:.0%} of {audit.expected_total}")
    if flops:
        fa = audit_flops(model)
        click.echo(fa.to_table())
        if fa.expected_total_gflops:
            rel = abs(fa.total_gflops - fa.expected_total_gflops) / fa.expected_total_gflops
            click.echo(f"gflops delta: {rel:.3%}")
            if rel > flops_tolerance:
                failures.append(
                    f"gflops {fa.total_gflops:.2f} outside {flops_tolerance:.0%} of "
                    f"{fa.expected_total_gflops}"
                )
    if failures:
        _fail("; ".join(failures), code=1)


@main.command("serve")
@click.option("--checkpoint", "checkpoint_dir", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--image-root", type=click.Path(), default=None, help="Directory with image files (by uri).")
@click.option("--ui-dir", type=click.Path(), default=None, help="Built UI bundle to host at /.")
@guarded
def serve(checkpoint_dir, host, port, image_root, ui_dir):
    """Serve the review API (and UI bundle) for a checkpointed run."""
    import uvicorn

    from .service import create_app

    run = PipelineRun.load(checkpoint_dir)
    app = create_app(run, image_root=image_root or checkpoint_dir, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("export")
@click.option("--checkpoint", "checkpoint_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["labels", "manifest", "both"]), default="both", show_default=True)
@guarded
def export(checkpoint_dir, out_dir, fmt):
    """Export the current iteration's annotations (label files, manifest)."""
    run = PipelineRun.load(checkpoint_dir)
    if run.state is None:
        _fail("checkpoint has no state")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = run.manifest.images_by_id()
    if fmt in ("labels", "both"):
        labels_dir = out / "labels"
        labels_dir.mkdir(exist_ok=True)
        for image_id, entry in sorted(run.state.per_image.items()):
            img = by_id[image_id]
            write_labels(list(entry.masks), img, labels_dir / f"{image_id}.txt")
    if fmt in ("manifest", "both"):
        annotations = {}
        for image_id, entry in sorted(run.state.per_image.items()):
            img = by_id[image_id]
            instances = []
            for mask in entry.masks:
                bitmap = decode_mask(mask)
                instances.append(
                    MaskInstance(
                        image_id=image_id,
                        class_id=mask.class_id,
                        encoding="rle",
                        payload=RlePayload(
                            counts=rle_encode(bitmap),
                            width=bitmap.width,
                            height=bitmap.height,
                        ),
                        confidence=mask.confidence,
                    )
                )
            annotations[image_id] = tuple(instances)
        exported = DatasetManifest(
            name=f"{run.manifest.name}-annotated",
            images=run.manifest.images,
            class_names=run.manifest.class_names,
            annotations=annotations,
            provenance={"iteration": run.state.iteration, "source": "pipeline"},
        )
        exported.save(out / "manifest.json")
    click.echo(f"exported to {out}", err=True)


if __name__ == "__main__":
    main()
