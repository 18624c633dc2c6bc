"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed at the end of the run."""
import contextlib
import itertools

import numpy as np
import pytest

import conftest
from lightdetr import encoder as E
from lightdetr import kernels
from lightdetr import model as M
from lightdetr import postprocess as PP
from lightdetr.bench import bench_layouts, encoder_inputs, relative_error
from lightdetr.cli import EXIT_OK, main
from lightdetr.config import SCALE_NAMES, resolve_config
from lightdetr.gradcheck import check_gradients
from lightdetr.matching import hungarian_match, ia_bce_loss
from lightdetr.tensor import counting
from oracles import brute_force_assignment_cost, dense_deformable, nms_pairwise


@contextlib.contextmanager
def criterion(number, name):
    details = []
    try:
        yield details
    except BaseException:
        line = f"FAIL {number:>2}: {name}"
        raise
    else:
        line = f"PASS {number:>2}: {name}"
    finally:
        if details:
            line += "  [" + "; ".join(details) + "]"
        conftest.ACCEPTANCE_LINES.append(line)
        print(line)


def test_01_layout_equivalence():
    with criterion(1, "layout equivalence at 640x640, all scales, and 4x4 toy ordering") as notes:
        toy = E.FeatureMap(np.array([10 * (i // 4 + 1) + i % 4 + 1 for i in range(16)], np.float32)[:, None], 4, 4)
        wm = E.to_window_major(toy, 2, 2)
        assert wm.data[:, 0].astype(int).tolist() == [11, 12, 21, 22, 13, 14, 23, 24,
                                                      31, 32, 41, 42, 33, 34, 43, 44]
        worst = 0.0
        for scale in SCALE_NAMES:
            cfg = resolve_config(scale)
            f, params = encoder_inputs(cfg)
            a = E.encoder_forward(f, cfg.encoder, params, E.LayoutMode.ROW_MAJOR_BASELINE).data
            b = E.encoder_forward(f, cfg.encoder, params, E.LayoutMode.WINDOW_MAJOR_OPTIMIZED).data
            err = relative_error(a, b)
            worst = max(worst, err)
            assert err <= 1e-5, f"{scale}: relative error {err:.2e}"
        notes.append(f"max rel err {worst:.1e}")


def test_02_permutation_accounting():
    with criterion(2, "permutations: 2 optimized, 2x|window layers| baseline"):
        for scale in SCALE_NAMES:
            cfg = resolve_config(scale)
            f, params = encoder_inputs(cfg)
            got = {}
            for mode in E.LayoutMode:
                with counting() as c:
                    E.encoder_forward(f, cfg.encoder, params, mode)
                got[mode] = c.permutations
            assert got[E.LayoutMode.WINDOW_MAJOR_OPTIMIZED] == 2
            assert got[E.LayoutMode.ROW_MAJOR_BASELINE] == (6 if scale == "tiny" else 12)


def test_03_layout_speed_direction():
    with criterion(3, "median optimized encoder time <= median baseline (small, medium, 30 runs)") as notes:
        failures = []
        for scale in ("small", "medium"):
            base, opt = bench_layouts(resolve_config(scale), runs=30)
            notes.append(f"{scale} {opt.median_ms:.1f} vs {base.median_ms:.1f} ms")
            if not opt.median_ms <= base.median_ms:
                failures.append(scale)
        assert not failures, f"optimized median slower for {failures}"


def test_04_flops_ratio():
    with criterion(4, "all-global / interleaved FLOPs ratio within 15% of 23.0/16.6") as notes:
        interleaved = M.count_flops(resolve_config("small")).flops
        glob = M.count_flops(resolve_config("small", {"encoder.window_attention_indexes": []})).flops
        ratio, target = glob / interleaved, 23.0 / 16.6
        notes.append(f"ratio {ratio:.3f}, target {target:.3f}")
        assert target * 0.85 <= ratio <= target * 1.15


PARAM_TARGETS = {"tiny": 12.1, "small": 14.6, "medium": 28.2, "large": 46.8, "xlarge": 118.0}
FLOP_TARGETS = {"tiny": 11.2, "small": 16.6, "medium": 42.8}


def test_05_parameter_and_flop_counts():
    with criterion(5, "parameter counts within 10%, FLOPs within 15%") as notes:
        bad = []
        for scale, want in PARAM_TARGETS.items():
            cfg = resolve_config(scale)
            pc = M.count_parameters(cfg)
            got = pc.training / 1e6
            notes.append(f"{scale} {got:.2f}M")
            if abs(got - want) > 0.1 * want:
                bad.append(f"{scale} params {got:.2f} vs {want}")
            if scale == "small" and abs(pc.inference / 1e6 - 11.0) > 1.1:
                bad.append(f"small inference params {pc.inference / 1e6:.2f} vs 11.0")
            if scale in FLOP_TARGETS:
                g = M.count_flops(cfg).gflops
                notes.append(f"{g:.2f}G")
                if abs(g - FLOP_TARGETS[scale]) > 0.15 * FLOP_TARGETS[scale]:
                    bad.append(f"{scale} flops {g:.2f} vs {FLOP_TARGETS[scale]}")
        assert not bad, bad


def test_06_loss_correctness():
    with criterion(6, "IA-BCE hand value and total-loss gradients over 10 seeds") as notes:
        assert abs(ia_bce_loss([0.5], [0], [0.8], alpha=0.25) - np.log(2)) <= 1e-6
        reports = [check_gradients(seed=s) for s in range(10)]
        notes.append(f"max rel err {max(r.max_error for r in reports):.1e}")
        assert all(r.passed for r in reports), [r.errors for r in reports if not r.passed]


def test_07_matching_optimality():
    with criterion(7, "assignment equals brute force on 200 instances"):
        rng = np.random.default_rng(7)
        for _ in range(200):
            p, g = rng.integers(1, 8, 2)
            cost = rng.integers(-20, 20, (p, g)) / 4.0
            assert hungarian_match(cost).cost == brute_force_assignment_cost(cost)


def test_08_deformable_oracle():
    with criterion(8, "deformable attention vs dense oracle on 50 instances"):
        rng = np.random.default_rng(8)
        for nl, npt in itertools.islice(itertools.cycle(itertools.product((1, 2), (2, 4))), 50):
            sizes = [(int(rng.integers(1, 7)), int(rng.integers(1, 7))) for _ in range(nl)]
            shapes = np.array(sizes, dtype=np.int64)
            starts = np.concatenate([[0], np.cumsum(shapes.prod(1))[:-1]]).astype(np.int64)
            nq, nh, hd = 4, 3, 4
            value = rng.standard_normal((int(shapes.prod(1).sum()), nh, hd)).astype(np.float32)
            loc = rng.uniform(-0.2, 1.2, (nq, nh, nl, npt, 2)).astype(np.float32)
            attn = rng.dirichlet(np.ones(nl * npt), (nq, nh)).reshape(nq, nh, nl, npt).astype(np.float32)
            want = dense_deformable(value, shapes, starts, loc, attn)
            for impl in kernels.backends().values():
                np.testing.assert_allclose(impl.ms_deform_attn(value, shapes, starts, loc, attn), want, atol=1e-6)


def test_09_group_isolation():
    with criterion(9, "group 0 of a 13-group pass equals the 1-group pass") as notes:
        cfg = resolve_config("tiny")
        params = M.init_model(cfg, num_groups=13)
        image = M.synthetic_image(640, 0)
        multi = M.forward(image, cfg, params, 13).outputs
        single = M.forward(image, cfg, params, 1).outputs
        worst = 0.0
        for a, b in zip(multi, single):
            worst = max(worst, float(np.abs(a.logits[0] - b.logits[0]).max()),
                        float(np.abs(a.boxes[0] - b.boxes[0]).max()))
        notes.append(f"max abs diff {worst:.1e}")
        assert worst <= 1e-6


def test_10_nms_sweep():
    with criterion(10, "sweep monotone, NMS vs pairwise oracle on 500 instances, histogram sums"):
        rng = np.random.default_rng(10)
        for _ in range(500):
            n = int(rng.integers(0, 16))
            boxes = np.concatenate([rng.uniform(0.3, 0.7, (n, 2)), rng.uniform(0.02, 0.4, (n, 2))], 1)
            d = PP.DetectionSet(boxes, rng.uniform(size=n), rng.integers(0, 3, n))
            iou, score = float(rng.uniform(0.1, 0.9)), float(rng.uniform(0, 0.5))
            kept = PP.greedy_nms(d, iou, score)
            want = nms_pairwise(d.boxes, d.scores, d.labels, iou, score)
            assert np.array_equal(kept.boxes, d.boxes[want]) and np.array_equal(kept.scores, d.scores[want])
        sets = []
        for i, n in enumerate([0, 50, 150, 700, 2000, 6000, 40000, 120]):
            sets.append(PP.DetectionSet(np.tile([0.5, 0.5, 0.1, 0.1], (n, 1)), rng.beta(0.5, 3, n),
                                        rng.integers(0, 80, n), i))
        reports = PP.threshold_sweep(sets, np.linspace(0, 1, 11), run_nms=False)
        assert PP.HISTOGRAM_EDGES == (0, 100, 500, 1000, 5000, 30000)
        assert reports[0].histogram == [2, 2, 1, 1, 2]
        for a, b in zip(reports, reports[1:]):
            assert all(y <= x for x, y in zip(a.per_image_box_counts, b.per_image_box_counts))
        assert all(sum(r.histogram) == len(sets) for r in reports)


def test_11_end_to_end_smoke(tmp_path):
    with criterion(11, "infer at 640x640 for every scale: num_queries valid boxes, byte-deterministic"):
        for scale in SCALE_NAMES:
            paths = [tmp_path / f"{scale}-{i}.jsonl" for i in range(2)]
            for p in paths:
                assert main(["infer", scale, "--input", "synthetic", "--out", str(p), "--seed", "0"]) == EXIT_OK
            assert paths[0].read_bytes() == paths[1].read_bytes()
            dets = PP.read_detections(paths[0])[0]
            assert len(dets) == resolve_config(scale).decoder.num_queries
            assert np.all((dets.boxes >= 0) & (dets.boxes <= 1)) and np.all(dets.boxes[:, 2:] > 0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
