"""Acceptance suite: one test per release criterion.

Each test prints a single PASS/FAIL line (run with ``pytest -s`` to see
them) and enforces the criterion's runtime budget. Tolerances are pinned
here, not configurable.
"""

import functools
import json
import math
import time

import numpy as np
import pytest
import torch

from segloop import rle
from segloop.dataset_io import read_labels, rle_decode, rle_encode, write_labels
from segloop.geometry import mask_to_polygons, rasterize_polygons
from segloop.metrics import average_precision, max_f1_confidence, miou
from segloop.model import (
    MSCA,
    MSCAConfig,
    audit_flops,
    audit_parameters,
    build_network,
    default_network_config,
)
from segloop.pipeline import PipelineConfig, PipelineRun, fine_fraction_experiment
from segloop.synthetic import generate_synthetic_dataset
from segloop.types import Bitmap, ImageRecord

from conftest import make_bitmap_instance, random_blob_array
from test_metrics import (
    oracle_average_precision,
    oracle_max_f1,
    oracle_miou,
    random_case,
)


def criterion(number, description, budget_seconds):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.time()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {number}] FAIL: {description}")
                raise
            elapsed = time.time() - start
            if elapsed > budget_seconds:
                print(
                    f"[criterion {number}] FAIL: {description} "
                    f"(runtime {elapsed:.1f}s > {budget_seconds}s)"
                )
                raise AssertionError(
                    f"criterion {number} exceeded its {budget_seconds}s budget "
                    f"({elapsed:.1f}s)"
                )
            print(
                f"[criterion {number}] PASS: {description} ({elapsed:.1f}s)"
            )

        return wrapper

    return decorate


@criterion(1, "architecture audit: exact conv/SPPF layer parameter counts", 10)
def test_criterion_1_architecture_audit():
    model = build_network(default_network_config())
    audit = audit_parameters(model)
    by_index = {row.index: int(row.built) for row in audit.rows}
    assert by_index[1] == 232
    assert by_index[2] == 1184
    assert by_index[3] == 2336
    assert by_index[4] == 3504
    assert by_index[18] == 20832
    assert by_index[21] == 69872
    assert by_index[10] == 77968


@criterion(2, "total parameters within 2% and GFLOPs within 10% of targets", 120)
def test_criterion_2_total_calibration():
    model = build_network(default_network_config())
    audit = audit_parameters(model)
    print()  # per-layer delta report:
    print(audit.to_table())
    assert audit.expected_total == 1828665
    rel = abs(audit.total - audit.expected_total) / audit.expected_total
    assert rel <= 0.02, f"total {audit.total} deviates {rel:.3%}"
    flops = audit_flops(model)
    rel_flops = abs(flops.total_gflops - 9.39) / 9.39
    assert rel_flops <= 0.10, f"{flops.total_gflops:.2f} GFLOPs deviates {rel_flops:.3%}"


@criterion(3, "attention block shapes, zero propagation, and gradient check", 30)
def test_criterion_3_msca_numerics():
    for channels in (16, 64, 136):
        for size in (8, 20):
            block = MSCA(MSCAConfig(channels=channels))
            x = torch.randn(1, channels, size, size)
            assert block(x).shape == x.shape
    block = MSCA(MSCAConfig(channels=16))
    zero = torch.zeros(1, 16, 8, 8)
    assert torch.equal(block(zero), zero)

    torch.manual_seed(1234)
    block = MSCA(MSCAConfig(channels=16)).double()
    for p in block.parameters():
        torch.nn.init.normal_(p, std=0.5)
    x = torch.randn(1, 16, 8, 8, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(1, 16, 8, 8, dtype=torch.float64)
    (block(x) * probe).sum().backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(analytic)
    step = 1e-3
    with torch.no_grad():
        flat = x.detach().view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            up = (block(x.detach()) * probe).sum().item()
            flat[k] = orig - step
            down = (block(x.detach()) * probe).sum().item()
            flat[k] = orig
            numeric.view(-1)[k] = (up - down) / (2 * step)
    rel = ((analytic - numeric).abs().max() / analytic.abs().max()).item()
    assert rel < 1e-4, f"max relative gradient error {rel:.2e}"


@criterion(4, "metrics match brute-force oracles to 1e-9 on 50 random cases", 60)
def test_criterion_4_metrics_oracle_equivalence():
    for case in range(50):
        preds, gts = random_case(seed=9000 + case, max_preds=10)
        ours_ap = average_precision(preds, gts, 0.5, "box")
        oracle_ap = oracle_average_precision(preds, gts, 0.5)
        assert abs(ours_ap - oracle_ap) < 1e-9

        ours_f1 = max_f1_confidence(preds, gts, 0.5, "box")
        oracle_f1 = oracle_max_f1(preds, gts, 0.5)
        assert abs(ours_f1[0] - oracle_f1[0]) < 1e-9
        assert abs(ours_f1[1] - oracle_f1[1]) < 1e-9

        rng = np.random.default_rng(17_000 + case)
        mask_preds, mask_gts = [], []
        for image_id in ("a", "b"):
            for class_id in range(2):
                if rng.random() < 0.85:
                    mask_gts.append(
                        make_bitmap_instance(
                            rng.random((12, 12)) < 0.35,
                            image_id=image_id,
                            class_id=class_id,
                        )
                    )
                if rng.random() < 0.85:
                    mask_preds.append(
                        make_bitmap_instance(
                            rng.random((12, 12)) < 0.35,
                            image_id=image_id,
                            class_id=class_id,
                            confidence=float(rng.uniform(0.2, 1.0)),
                        )
                    )
        if mask_gts:
            ours_miou = miou(mask_preds, mask_gts, 2)
            assert abs(ours_miou - oracle_miou(mask_preds, mask_gts, 2)) < 1e-9


@criterion(5, "pipeline fixed point: fully seeded noiseless run converges at t=1", 60)
def test_criterion_5_pipeline_fixed_point():
    manifest = generate_synthetic_dataset(20, width=128, height=128, seed=11)
    run = PipelineRun(manifest, PipelineConfig(seed_fraction=1.0, seed=7))
    run.prepare()
    status = run.step()
    assert status == "converged"
    assert run.state.iteration == 1
    for entry in run.state.per_image.values():
        assert entry.delta == 0.0


@criterion(6, "fine-box fraction trend: mean mIoU non-decreasing, 1.0 reaches 0.99", 600)
def test_criterion_6_fine_fraction_trend():
    manifest = generate_synthetic_dataset(100, width=128, height=128, seed=42)
    cfg = PipelineConfig(
        seed_fraction=0.1,
        seed=0,
        max_iterations=10,
        detector={"name": "oracle", "sigma0": 4.0, "fp_rate": 0.1},
    )
    fractions = [0.1, 0.2, 0.5, 1.0]
    results = fine_fraction_experiment(
        manifest, fractions, cfg, seeds=[101, 202, 303, 404, 505]
    )
    series = [results[f]["miou"] for f in fractions]
    print(f"\nmean mIoU by fraction: {dict(zip(fractions, [round(v, 4) for v in series]))}")
    for lo, hi in zip(series, series[1:]):
        assert hi >= lo - 1e-9, f"trend not non-decreasing: {series}"
    assert series[-1] >= 0.99, f"full fraction reached only {series[-1]:.4f}"


@criterion(7, "prompt degradation: mIoU ordered MBB >= +5% >= +10% >= +20%", 120)
def test_criterion_7_prompt_degradation_ordering():
    from segloop.adapters import OracleSegmenter
    from segloop.pipeline import benchmark_prompts

    manifest = generate_synthetic_dataset(25, width=128, height=128, seed=13)
    segmenter = OracleSegmenter(manifest.annotations, overlap_gain=10.0)
    table = benchmark_prompts(
        manifest, segmenter, ["MBB", "MBB+5%", "MBB+10%", "MBB+20%"], seed=0
    )
    print(f"\nmIoU by prompt: { {k: round(v, 4) for k, v in table.items()} }")
    assert table["MBB"] >= table["MBB+5%"] >= table["MBB+10%"] >= table["MBB+20%"]


@criterion(8, "determinism and kill/resume reproduce bitwise-identical checkpoints", 300)
def test_criterion_8_determinism_and_resume(tmp_path):
    from click.testing import CliRunner

    from segloop.cli import main

    runner = CliRunner()
    data = tmp_path / "data"
    result = runner.invoke(
        main,
        [
            "generate-synthetic",
            "--out",
            str(data),
            "--images",
            "20",
            "--width",
            "96",
            "--height",
            "96",
            "--seed",
            "4",
            "--no-render",
        ],
    )
    assert result.exit_code == 0, result.output

    checkpoints = []
    for name in ("a", "b"):
        chk = tmp_path / name
        result = runner.invoke(
            main,
            [
                "iterate",
                "--dataset",
                str(data / "manifest.json"),
                "--checkpoint",
                str(chk),
                "--until-converged",
                "--seed",
                "7",
            ],
        )
        assert result.exit_code == 0, result.output
        checkpoints.append({p.name: p.read_bytes() for p in sorted(chk.glob("*.json"))})
    assert checkpoints[0] == checkpoints[1], "repeated runs differ"

    # kill-and-resume: stop after the first iteration, reload, continue
    chk = tmp_path / "resumable"
    result = runner.invoke(
        main,
        [
            "iterate",
            "--dataset",
            str(data / "manifest.json"),
            "--checkpoint",
            str(chk),
            "--seed",
            "7",
        ],
    )
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main,
        ["iterate", "--checkpoint", str(chk), "--until-converged"],
    )
    assert result.exit_code == 0, result.output
    resumed = {p.name: p.read_bytes() for p in sorted(chk.glob("*.json"))}
    assert resumed == checkpoints[0], "kill-and-resume diverged"


@criterion(9, "200 random masks survive RLE and polygon-label round-trips", 300)
def test_criterion_9_codec_round_trips(tmp_path):
    failures = 0
    for case in range(200):
        rng = np.random.default_rng(31_000 + case)
        w = int(rng.integers(8, 48))
        h = int(rng.integers(8, 48))
        if case % 4 == 0:
            arr = rng.random((h, w)) < rng.uniform(0.2, 0.6)
            if not arr.any():
                arr[h // 2, w // 2] = True
        else:
            arr = random_blob_array(rng, w, h)
        bitmap = Bitmap(arr)

        if rle_decode(rle_encode(bitmap), w, h) != bitmap:
            failures += 1
            continue

        img = ImageRecord(id=f"m{case}", width=w, height=h)
        inst = make_bitmap_instance(arr, image_id=img.id)
        path = tmp_path / f"{img.id}.txt"
        write_labels([inst], img, path)
        parsed = read_labels(path, img)
        rings = mask_to_polygons(bitmap)
        ok = len(parsed) == len(rings)
        if ok:
            for got, ring in zip(parsed, rings):
                got_ring = got.payload.rings[0]
                if len(got_ring) != len(ring):
                    ok = False
                    break
                for (gx, gy), (x, y) in zip(got_ring, ring):
                    if abs(gx - x) > 1e-5 * w or abs(gy - y) > 1e-5 * h:
                        ok = False
                        break
        if ok:
            merged = [r for p in parsed for r in p.payload.rings]
            ok = rasterize_polygons(merged, img) == bitmap
        if not ok:
            failures += 1
    assert failures == 0, f"{failures} of 200 masks failed a round-trip"
