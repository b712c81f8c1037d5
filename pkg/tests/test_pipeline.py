import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segloop.adapters import OracleSegmenter
from segloop.dataset_io import DatasetManifest
from segloop.errors import DomainError, UnknownImageError
from segloop.geometry import decode_mask, mask_iou, minimum_bounding_box
from segloop.pipeline import (
    PipelineConfig,
    PipelineRun,
    ReviewTask,
    apply_corrections,
    benchmark_prompts,
    check_convergence,
    final_annotation_quality,
    fine_fraction_experiment,
    iteration_delta,
    mbb_prompt_source,
    parse_strategy,
    sample_point_prompts,
    seed_annotate,
)
from segloop.synthetic import generate_synthetic_dataset
from segloop.types import (
    BBox,
    Bitmap,
    ImageRecord,
    IterationState,
    PerImageState,
    PromptSet,
)

from conftest import make_bitmap_instance


IMG = ImageRecord(id="img", width=640, height=640)


class TestIterationDelta:
    def test_identical_sets(self):
        boxes = [BBox(0, 0, 10, 10), BBox(20, 20, 40, 44)]
        assert iteration_delta(boxes, list(boxes), IMG) == 0.0

    def test_one_pixel_shift(self):
        prev = [BBox(100, 100, 200, 200)]
        nxt = [BBox(101, 101, 201, 201)]
        expected = 1.0 / math.hypot(640, 640)
        assert iteration_delta(prev, nxt, IMG) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.001105, abs=2e-6)

    def test_unmatched_box_contributes_one(self):
        prev = [BBox(0, 0, 10, 10), BBox(20, 20, 40, 44)]
        nxt = list(prev) + [BBox(100, 100, 140, 140)]
        assert iteration_delta(prev, nxt, IMG) == pytest.approx((0 + 0 + 1) / 3)

    def test_empty_vs_empty(self):
        assert iteration_delta([], [], IMG) == 0.0

    @given(st.data())
    @settings(max_examples=50)
    def test_symmetry(self, data):
        def draw(n):
            out = []
            for _ in range(n):
                x0 = data.draw(st.floats(0, 500))
                y0 = data.draw(st.floats(0, 500))
                out.append(
                    BBox(
                        x0,
                        y0,
                        x0 + data.draw(st.floats(1, 100)),
                        y0 + data.draw(st.floats(1, 100)),
                    )
                )
            return out

        a = draw(data.draw(st.integers(0, 4)))
        b = draw(data.draw(st.integers(0, 4)))
        assert iteration_delta(a, b, IMG) == pytest.approx(
            iteration_delta(b, a, IMG), abs=1e-12
        )

    @given(st.data())
    @settings(max_examples=40)
    def test_zero_iff_corner_identical_pairing(self, data):
        boxes = []
        for _ in range(data.draw(st.integers(1, 4))):
            x0 = data.draw(st.floats(0, 500))
            y0 = data.draw(st.floats(0, 500))
            boxes.append(
                BBox(x0, y0, x0 + data.draw(st.floats(5, 60)), y0 + data.draw(st.floats(5, 60)))
            )
        assert iteration_delta(boxes, list(boxes), IMG) == 0.0
        shifted = [BBox(b.x_min + 2, b.y_min, b.x_max + 2, b.y_max) for b in boxes]
        assert iteration_delta(boxes, shifted, IMG) > 0.0


class TestCheckConvergence:
    def make_state(self, deltas, statuses=None, iteration=1):
        per_image = {}
        for k, delta in enumerate(deltas):
            status = statuses[k] if statuses else ("converged" if delta < 0.005 else "fine")
            per_image[f"i{k}"] = PerImageState(
                status=status,
                delta=delta,
                boxes=(BBox(0, 0, 1, 1),),
                masks=(make_bitmap_instance(np.ones((2, 2)), image_id=f"i{k}"),),
            )
        return IterationState(iteration=iteration, per_image=per_image, epsilon=0.005)

    def test_all_zero_deltas(self):
        state = self.make_state([0.0, 0.0, 0.0])
        assert check_convergence(state, PipelineConfig()) == "converged"

    def test_stalled_at_max_iterations(self):
        state = self.make_state([0.5, 0.5], iteration=10)
        assert check_convergence(state, PipelineConfig(max_iterations=10)) == "stalled"

    def test_ninety_nine_of_hundred(self):
        deltas = [0.0] * 99 + [0.5]
        state = self.make_state(deltas)
        assert check_convergence(state, PipelineConfig(converged_fraction=0.99)) == "converged"

    def test_requires_first_iteration(self):
        state = self.make_state([0.0], iteration=0)
        with pytest.raises(DomainError):
            check_convergence(state, PipelineConfig())


class TestSamplePointPrompts:
    def disk_mask(self, cx=16, cy=16, r=8, size=32):
        ys, xs = np.mgrid[0:size, 0:size]
        return make_bitmap_instance(
            (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r, image_id="d"
        )

    def test_single_positive_is_disk_center(self):
        prompts = sample_point_prompts(self.disk_mask(), 1, 0, seed=0)
        assert prompts.positive_points == ((16.5, 16.5),) or prompts.positive_points == (
            (15.5, 15.5),
        )
        # distance-transform argmax of a symmetric disk is its center cell
        x, y = prompts.positive_points[0]
        assert abs(x - 16) <= 1.0 and abs(y - 16) <= 1.0

    def test_points_respect_polarity_regions(self):
        inst = self.disk_mask()
        arr = decode_mask(inst).array
        prompts = sample_point_prompts(inst, 3, 4, seed=1)
        assert len(prompts.positive_points) == 3
        assert len(prompts.negative_points) == 4
        for x, y in prompts.positive_points:
            assert arr[int(y), int(x)]
        for x, y in prompts.negative_points:
            assert not arr[int(y), int(x)]

    def test_fixed_seed_is_deterministic(self):
        inst = self.disk_mask()
        a = sample_point_prompts(inst, 3, 2, seed=9)
        b = sample_point_prompts(inst, 3, 2, seed=9)
        assert a == b

    def test_mask_too_small_rejected(self):
        tiny = np.zeros((8, 8), dtype=bool)
        tiny[3, 3] = True
        inst = make_bitmap_instance(tiny, image_id="d")
        with pytest.raises(DomainError):
            sample_point_prompts(inst, 2, 0, seed=0)


def oracle_run(n_images=20, seed=7, seed_fraction=1.0, **cfg_kwargs):
    manifest = generate_synthetic_dataset(n_images, width=128, height=128, seed=seed)
    cfg = PipelineConfig(seed_fraction=seed_fraction, seed=seed, **cfg_kwargs)
    return PipelineRun(manifest, cfg)


class TestSeedAnnotate:
    def test_oracle_seeding_is_exact(self):
        run = oracle_run(n_images=10)
        state = run.prepare()
        seeded = [e for e in state.per_image.values() if e.status == "seed"]
        assert len(seeded) == 10
        for image_id, entry in state.per_image.items():
            truth = run.manifest.annotations[image_id]
            assert len(entry.masks) == len(truth)
            for mask, gt in zip(entry.masks, truth):
                assert mask_iou(decode_mask(mask), decode_mask(gt)) == 1.0

    def test_empty_seed_subset_rejected(self):
        run = oracle_run(n_images=10, seed_fraction=0.01)
        with pytest.raises(DomainError):
            run.prepare()

    def test_seed_fraction_selects_exact_count(self):
        run = oracle_run(n_images=100, seed_fraction=0.1)
        assert len(run.seed_images()) == 10

    def test_empty_segmenter_result_queues_review(self):
        img = ImageRecord(id="img", width=32, height=32)
        arr = np.zeros((32, 32), dtype=bool)
        arr[4:9, 4:9] = True
        gt = {"img": (make_bitmap_instance(arr, image_id="img"),)}
        segmenter = OracleSegmenter(gt)

        def bad_prompts(_img):
            return PromptSet(boxes=(BBox(20, 20, 30, 30),))

        state, tasks = seed_annotate([img], bad_prompts, segmenter)
        assert state.per_image["img"].status == "review"
        assert tasks and tasks[0].kind == "missed_detection"


class TestRunIteration:
    def test_fixed_point_with_noiseless_oracles(self):
        run = oracle_run(n_images=20)
        run.prepare()
        status = run.step()
        assert status == "converged"
        assert run.state.iteration == 1
        for entry in run.state.per_image.values():
            assert entry.delta == 0.0
            assert entry.status == "converged"

    def test_noisy_run_recovers_most_of_the_truth(self):
        # an image freezes once its boxes stop moving, so a noisy detector
        # can occasionally lock in a missed instance; quality stays high
        run = oracle_run(
            n_images=40,
            seed_fraction=0.2,
            detector={"name": "oracle", "sigma0": 4.0, "fp_rate": 0.1},
        )
        run.prepare()
        final = run.run_until_converged()
        assert final in ("converged", "stalled")
        assert final_annotation_quality(run) >= 0.95

    def test_run_with_early_full_recall_recovers_exactly(self):
        # once the detector reaches full recall before any image freezes,
        # every annotation settles on the exact hidden truth
        run = oracle_run(
            n_images=40,
            seed_fraction=0.2,
            detector={"name": "oracle", "sigma0": 4.0, "fp_rate": 0.1, "n_full": 10},
        )
        run.prepare()
        final = run.run_until_converged()
        assert final == "converged"
        assert final_annotation_quality(run) == 1.0

    def test_zero_prediction_image_enters_review(self):
        manifest = generate_synthetic_dataset(6, width=96, height=96, seed=3)

        class BlindDetector:
            def fit(self, examples, seed):
                if not examples:
                    raise DomainError("empty")
                return object()

            def predict(self, model, image):
                return []

        run = PipelineRun(
            manifest,
            PipelineConfig(seed_fraction=0.5, seed=1),
            detector=BlindDetector(),
        )
        run.prepare()
        run.step()
        reviews = [e for e in run.state.per_image.values() if e.status == "review"]
        assert reviews
        kinds = {t.kind for t in run.tasks if t.status == "pending"}
        assert kinds == {"missed_detection"}

    def test_iteration_requires_annotations(self):
        manifest = generate_synthetic_dataset(4, width=64, height=64, seed=5)
        run = PipelineRun(manifest, PipelineConfig(seed_fraction=0.25, seed=1))
        state = IterationState(iteration=0, per_image={})
        run.state = state
        with pytest.raises(DomainError):
            run.step()

    def test_no_image_is_both_converged_and_pending_review(self):
        run = oracle_run(
            n_images=30,
            seed_fraction=0.1,
            detector={"name": "oracle", "sigma0": 6.0, "fp_rate": 0.3},
        )
        run.prepare()
        for _ in range(4):
            status = run.step()
            pending = {t.image_id for t in run.tasks if t.status == "pending"}
            for image_id, entry in run.state.per_image.items():
                if entry.status == "converged":
                    assert image_id not in pending
            if status != "continue":
                break


class TestDeterminismAndResume:
    def test_two_runs_identical_states(self):
        a = oracle_run(n_images=25, seed_fraction=0.2, detector={"name": "oracle", "sigma0": 3.0})
        b = oracle_run(n_images=25, seed_fraction=0.2, detector={"name": "oracle", "sigma0": 3.0})
        a.prepare()
        b.prepare()
        status_a = a.run_until_converged()
        status_b = b.run_until_converged()
        assert status_a == status_b
        assert json.dumps(a.state.to_dict(), sort_keys=True) == json.dumps(
            b.state.to_dict(), sort_keys=True
        )

    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path):
        straight = oracle_run(
            n_images=20, seed_fraction=0.2, detector={"name": "oracle", "sigma0": 3.0}
        )
        straight.prepare()
        straight.run_until_converged()

        chk = tmp_path / "chk"
        first = PipelineRun(
            generate_synthetic_dataset(20, width=128, height=128, seed=7),
            PipelineConfig(
                seed_fraction=0.2, seed=7, detector={"name": "oracle", "sigma0": 3.0}
            ),
            checkpoint_dir=chk,
        )
        first.prepare()
        first.step()  # stop mid-run

        resumed = PipelineRun.load(chk)
        status = "continue"
        while status == "continue":
            status = resumed.step()
        assert json.dumps(resumed.state.to_dict(), sort_keys=True) == json.dumps(
            straight.state.to_dict(), sort_keys=True
        )

    def test_worker_pool_matches_serial(self):
        serial = oracle_run(n_images=15, seed_fraction=0.2, workers=1,
                            detector={"name": "oracle", "sigma0": 3.0})
        threaded = oracle_run(n_images=15, seed_fraction=0.2, workers=4,
                              detector={"name": "oracle", "sigma0": 3.0})
        serial.prepare()
        threaded.prepare()
        serial.run_until_converged()
        threaded.run_until_converged()
        assert serial.state.to_dict() == threaded.state.to_dict()


class TestApplyCorrections:
    def test_corrected_box_rejoins_training(self):
        run = oracle_run(n_images=8, seed_fraction=0.5)
        run.prepare()
        image_id = next(iter(run.state.per_image))
        truth_box = minimum_bounding_box(
            decode_mask(run.manifest.annotations[image_id][0])
        )
        task = ReviewTask(
            id=f"{image_id}:manual:0",
            image_id=image_id,
            kind="missed_detection",
            status="corrected",
            corrected_boxes=(truth_box,),
        )
        run.apply_corrections([task])
        entry = run.state.per_image[image_id]
        assert entry.status == "fine"
        assert len(entry.boxes) == 1
        stored = next(t for t in run.tasks if t.id == task.id)
        assert stored.status == "accepted"
        assert stored.resolution == "manual"

    def test_deleting_all_boxes_clears_annotation(self):
        run = oracle_run(n_images=6, seed_fraction=0.5)
        run.prepare()
        image_id = next(iter(run.state.per_image))
        task = ReviewTask(
            id=f"{image_id}:manual:0",
            image_id=image_id,
            kind="false_positive",
            status="corrected",
            corrected_boxes=(),
        )
        run.apply_corrections([task])
        assert run.state.per_image[image_id].boxes == ()

    def test_unknown_image_rejected(self):
        run = oracle_run(n_images=4, seed_fraction=0.5)
        run.prepare()
        task = ReviewTask(
            id="ghost:manual:0",
            image_id="ghost",
            kind="missed_detection",
            status="corrected",
            corrected_boxes=(),
        )
        with pytest.raises(UnknownImageError):
            run.apply_corrections([task])

    def test_point_prompt_correction_adds_instance(self):
        run = oracle_run(n_images=6, seed_fraction=0.5)
        run.prepare()
        image_id = next(iter(run.state.per_image))
        gt = run.manifest.annotations[image_id][0]
        arr = decode_mask(gt).array
        ys, xs = np.nonzero(arr)
        point = (float(xs[len(xs) // 2]) + 0.5, float(ys[len(ys) // 2]) + 0.5)
        task = ReviewTask(
            id=f"{image_id}:manual:0",
            image_id=image_id,
            kind="missed_detection",
            status="corrected",
            correction_prompts=PromptSet(positive_points=(point,)),
            corrected_boxes=(),
        )
        run.apply_corrections([task])
        entry = run.state.per_image[image_id]
        assert len(entry.masks) == 1
        assert mask_iou(decode_mask(entry.masks[0]), decode_mask(gt)) == 1.0


class TestBenchmarkPrompts:
    def test_strategy_parsing(self):
        assert parse_strategy("MBB") == {"kind": "box", "expand": 0.0}
        assert parse_strategy("MBB+10%") == {"kind": "box", "expand": 0.10}
        assert parse_strategy("3P") == {"kind": "points", "n_pos": 3, "n_neg": 0}
        assert parse_strategy("3P+4N") == {"kind": "points", "n_pos": 3, "n_neg": 4}
        with pytest.raises(DomainError):
            parse_strategy("???")

    def test_exact_mbb_scores_perfectly(self):
        manifest = generate_synthetic_dataset(6, width=96, height=96, seed=2)
        segmenter = OracleSegmenter(manifest.annotations)
        table = benchmark_prompts(manifest, segmenter, ["MBB"], seed=0)
        assert table["MBB"] == 1.0

    def test_expansion_ordering_with_overlap_noise(self):
        manifest = generate_synthetic_dataset(10, width=96, height=96, seed=2)
        segmenter = OracleSegmenter(manifest.annotations, overlap_gain=10.0)
        table = benchmark_prompts(
            manifest, segmenter, ["MBB", "MBB+5%", "MBB+10%", "MBB+20%"], seed=0
        )
        assert table["MBB"] >= table["MBB+5%"] >= table["MBB+10%"] >= table["MBB+20%"]
        assert table["MBB"] > table["MBB+20%"]

    def test_point_strategies_run(self):
        manifest = generate_synthetic_dataset(4, width=96, height=96, seed=8)
        segmenter = OracleSegmenter(manifest.annotations)
        table = benchmark_prompts(manifest, segmenter, ["1P", "3P+4N"], seed=0)
        assert set(table) == {"1P", "3P+4N"}
        assert all(0.0 <= v <= 1.0 for v in table.values())


class TestFineFractionExperiment:
    def test_full_fraction_with_noiseless_oracles(self):
        manifest = generate_synthetic_dataset(30, width=96, height=96, seed=5)
        cfg = PipelineConfig(
            seed_fraction=0.1,
            seed=3,
            max_iterations=8,
            detector={"name": "oracle", "sigma0": 0.0, "fp_rate": 0.0},
        )
        results = fine_fraction_experiment(manifest, [1.0], cfg)
        assert results[1.0]["miou"] >= 0.99

    def test_fraction_budget_limits_training_set(self):
        manifest = generate_synthetic_dataset(30, width=96, height=96, seed=5)
        cfg = PipelineConfig(
            seed_fraction=0.1,
            seed=3,
            max_iterations=4,
            detector={"name": "oracle", "sigma0": 4.0, "fp_rate": 0.1},
        )
        results = fine_fraction_experiment(manifest, [0.1, 1.0], cfg)
        assert results[0.1]["miou"] <= results[1.0]["miou"]
