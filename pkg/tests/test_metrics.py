import csv
import dataclasses
import json

import numpy as np
import pytest

from posevox.metrics import (
    EvalReport,
    ap_k,
    evaluate,
    mpjpe,
    pcp3d,
    proposal_recall,
)
from posevox.synth import default_skeleton


@dataclasses.dataclass
class FakePose:
    joints: np.ndarray
    confidence: float


def pose_at(offset_mm, conf=1.0, k=15, seed=0):
    """A reproducible K-joint pose plus a uniform offset."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(-500.0, 500.0, (k, 3))
    return FakePose(joints=base + np.asarray(offset_mm), confidence=conf)


# --- mpjpe -------------------------------------------------------------------


def test_mpjpe_zero_on_equal():
    g = pose_at((0, 0, 0)).joints
    assert mpjpe(g, g) == 0.0


def test_mpjpe_uniform_translation():
    g = pose_at((0, 0, 0), seed=1).joints
    p = g + np.array([30.0, 0.0, 0.0])
    assert mpjpe(p, g) == pytest.approx(30.0, abs=1e-9)
    assert mpjpe(p, g, align_root=True) == pytest.approx(0.0, abs=1e-9)


def test_mpjpe_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.uniform(-1000, 1000, (15, 3))
        g = rng.uniform(-1000, 1000, (15, 3))
        want = sum(
            float(np.sqrt(np.sum((p[j] - g[j]) ** 2))) for j in range(15)
        ) / 15.0
        assert mpjpe(p, g) == pytest.approx(want, abs=1e-9)


def test_mpjpe_root_alignment_uses_root_index():
    g = pose_at((0, 0, 0), seed=3).joints
    p = g.copy()
    p += np.array([10.0, 0.0, 0.0])
    p[2] = g[2]  # joint 2 already aligned
    assert mpjpe(p, g, align_root=True, root_index=2) == pytest.approx(
        10.0 * 14 / 15, abs=1e-9
    )


def test_mpjpe_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        mpjpe(np.zeros((15, 3)), np.zeros((14, 3)))


# --- ap_k --------------------------------------------------------------------


def three_frame_fixture():
    """One GT + one prediction per frame: errors 0, 40, 0 mm with
    confidences 0.9, 0.8, 0.7 — the PR curve enumerates by hand."""
    frames = []
    for i, (err, conf) in enumerate(((0.0, 0.9), (40.0, 0.8), (0.0, 0.7))):
        g = pose_at((0, 0, 0), seed=10 + i).joints
        p = FakePose(joints=g + np.array([err, 0.0, 0.0]), confidence=conf)
        frames.append(([p], [g]))
    return frames


def test_ap_frozen_fixture():
    frames = three_frame_fixture()
    # ranked outcomes at 25 mm: hit, miss, hit ->
    # AP = 1/3 * 1 + 1/3 * (2/3) = 5/9
    assert ap_k(frames, 25.0) == pytest.approx(5.0 / 9.0, abs=1e-12)
    assert ap_k(frames, 50.0) == pytest.approx(1.0, abs=1e-12)


def test_ap_curve_lengths():
    frames = three_frame_fixture()
    ap, recalls, precisions = ap_k(frames, 25.0, return_curve=True)
    assert len(recalls) == len(precisions) == 3
    assert recalls[-1] == pytest.approx(2.0 / 3.0)


def test_ap_perfect_predictions():
    frames = []
    for i in range(4):
        g = pose_at((0, 0, 0), seed=20 + i).joints
        frames.append(([FakePose(g, 0.5 + 0.1 * i)], [g]))
    for k in (1.0, 25.0, 500.0):
        assert ap_k(frames, k) == pytest.approx(1.0)


def test_ap_no_predictions_warns():
    g = pose_at((0, 0, 0)).joints
    with pytest.warns(UserWarning, match="no predictions"):
        assert ap_k([([], [g])], 25.0) == 0.0
    assert ap_k([([FakePose(g, 1.0)], [])], 25.0) == 0.0


def test_ap_match_consumes_gt_even_on_miss():
    # the confident 40 mm miss eats the only GT; the exact pose ranks
    # behind it and goes unmatched -> AP_25 = 0
    g = pose_at((0, 0, 0), seed=30).joints
    miss = FakePose(g + np.array([40.0, 0.0, 0.0]), confidence=0.9)
    hit = FakePose(g.copy(), confidence=0.2)
    assert ap_k([([miss, hit], [g])], 25.0) == 0.0
    assert ap_k([([miss, hit], [g])], 50.0) == pytest.approx(1.0)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(31)
    for trial in range(20):
        frames = []
        for fi in range(3):
            gts = [
                pose_at((0, 0, 0), seed=100 * trial + 10 * fi + j).joints
                for j in range(2)
            ]
            preds = [
                FakePose(
                    g + rng.uniform(-80, 80, 3), float(rng.random())
                )
                for g in gts
            ]
            frames.append((preds, gts))
        values = [ap_k(frames, k) for k in (10, 25, 50, 100, 200)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_ap_invariant_to_prediction_order():
    rng = np.random.default_rng(32)
    frames = []
    for fi in range(3):
        gts = [pose_at((0, 0, 0), seed=40 + 3 * fi + j).joints for j in range(2)]
        preds = [
            FakePose(g + rng.uniform(-60, 60, 3), conf)
            for g, conf in zip(gts, (0.91 + 0.01 * fi, 0.41 + 0.01 * fi))
        ]
        frames.append((preds, gts))
    base = ap_k(frames, 50.0)
    shuffled = [(list(reversed(preds)), gts) for preds, gts in frames]
    assert ap_k(shuffled, 50.0) == pytest.approx(base, abs=1e-12)


# --- pcp3d -------------------------------------------------------------------


def standing_gt(seed, offset=(0.0, 0.0, 0.0)):
    from posevox.camera import make_circle_rig
    from posevox.synth import sample_scene

    rig = make_circle_rig(3, 3600.0, 2600.0, image_size=(64, 64), focal=32.0)
    scene = sample_scene(1, (4000.0, 4000.0, 2000.0), rig, seed)
    return scene.gt_joints[0] + np.asarray(offset)


def test_pcp_perfect():
    sk = default_skeleton()
    g0 = standing_gt(1, (-800.0, 0.0, 0.0))
    g1 = standing_gt(2, (800.0, 0.0, 0.0))
    frames = [([FakePose(g0, 0.9), FakePose(g1, 0.8)], [g0, g1])]
    per_actor, avg = pcp3d(frames, sk.limbs)
    assert per_actor == {0: 100.0, 1: 100.0}
    assert avg == 100.0


def test_pcp_frozen_fixture():
    """Actor 0's wrist is displaced by exactly its limb vector: mean
    endpoint error = 0.5 x length, the strict rule fails, 13/14 limbs
    stay correct.  Actor 1 is exact.  Integer joint coordinates keep
    the boundary comparison exact in floating point."""
    sk = default_skeleton()
    wrist = sk.joint_index("lwrist")
    (limb_idx,) = [
        i for i, (a, b) in enumerate(sk.limbs) if wrist in (a, b)
    ]
    a, b = sk.limbs[limb_idx]
    rng = np.random.default_rng(44)
    g0 = rng.integers(-600, 600, (15, 3)).astype(np.float64)
    g1 = g0 + np.array([2500.0, 0.0, 0.0])
    d = g0[a] - g0[b]
    assert np.linalg.norm(d) > 0
    p0 = g0.copy()
    p0[wrist] += d
    frames = [([FakePose(p0, 0.9), FakePose(g1, 0.8)], [g0, g1])]
    per_actor, avg = pcp3d(frames, sk.limbs)
    assert per_actor[0] == pytest.approx(100.0 * 13.0 / 14.0, abs=1e-9)
    assert per_actor[1] == pytest.approx(100.0, abs=1e-12)
    assert avg == pytest.approx(100.0 * 27.0 / 28.0, abs=1e-9)
    assert per_actor[0] == pytest.approx(92.857142857, abs=1e-6)
    assert avg == pytest.approx(96.428571428, abs=1e-6)


def test_pcp_no_predictions_counts_all_wrong():
    sk = default_skeleton()
    g = standing_gt(5)
    per_actor, avg = pcp3d([([], [g])], sk.limbs)
    assert per_actor == {0: 0.0}
    assert avg == 0.0


def test_pcp_ignores_far_false_positives():
    """Adding far-away false positives never changes PCP3D as long as
    they do not become any GT's closest prediction."""
    sk = default_skeleton()
    rng = np.random.default_rng(33)
    for trial in range(100):
        frames, frames_fp = [], []
        for fi in range(2):
            gts = [
                standing_gt(
                    1000 + 7 * trial + 3 * fi + j,
                    (1800.0 * j - 900.0, 0.0, 0.0),
                )
                for j in range(2)
            ]
            preds = [
                FakePose(
                    g + rng.uniform(-300.0, 300.0, (15, 3)) / np.sqrt(15),
                    float(rng.random()),
                )
                for g in gts
            ]
            fps = [
                FakePose(
                    gts[0] + np.array([9000.0 + 1000.0 * t, 9000.0, 0.0]),
                    float(rng.random()),
                )
                for t in range(2)
            ]
            frames.append((preds, gts))
            frames_fp.append((preds + fps, gts))
        _, base = pcp3d(frames, sk.limbs)
        _, with_fp = pcp3d(frames_fp, sk.limbs)
        assert with_fp == pytest.approx(base, abs=1e-12)
        assert with_fp >= base - 1e-12


# --- proposal recall ---------------------------------------------------------


def test_recall_frozen_fixture():
    frames = [([(120.0, 0.0, 0.0)], [(0.0, 0.0, 0.0)])]
    assert proposal_recall(frames, (100.0, 175.0, 500.0)) == [0.0, 1.0, 1.0]


def test_recall_exact_proposals():
    rng = np.random.default_rng(34)
    frames = []
    for _ in range(5):
        roots = rng.uniform(-2000, 2000, (3, 3))
        frames.append((roots.copy(), roots))
    assert proposal_recall(frames, (1.0, 10.0)) == [1.0, 1.0]


def test_recall_no_proposals():
    frames = [(np.zeros((0, 3)), [(0.0, 0.0, 0.0)])]
    assert proposal_recall(frames, (100.0, 500.0)) == [0.0, 0.0]


def test_recall_empty_set():
    assert proposal_recall([], (100.0, 500.0)) == [0.0, 0.0]


def test_recall_monotone():
    rng = np.random.default_rng(35)
    for _ in range(20):
        frames = []
        for _ in range(4):
            roots = rng.uniform(-2000, 2000, (2, 3))
            props = roots + rng.uniform(-400, 400, (2, 3))
            frames.append((props, roots))
        curve = proposal_recall(frames, (50, 100, 200, 400, 800))
        assert all(b >= a for a, b in zip(curve, curve[1:]))


def test_recall_rejects_unsorted_thresholds():
    with pytest.raises(ValueError, match="ascend"):
        proposal_recall([], (100.0, 100.0))
    with pytest.raises(ValueError, match="ascend"):
        proposal_recall([], (200.0, 100.0))


# --- evaluate / EvalReport ---------------------------------------------------


def test_evaluate_gt_vs_gt(tmp_path):
    sk = default_skeleton()
    frames = []
    for i in range(3):
        gts = [standing_gt(60 + 2 * i + j, (900.0 * j, 0.0, 0.0)) for j in range(2)]
        frames.append(([FakePose(g, 0.9 - 0.1 * j) for j, g in enumerate(gts)], gts))
    report = evaluate(frames, limbs=sk.limbs)
    assert report.n_gt == report.n_pred == report.n_matched == 6
    assert report.mpjpe_mm == pytest.approx(0.0, abs=1e-12)
    assert all(v == pytest.approx(1.0) for v in report.ap.values())
    assert report.pcp3d_average == pytest.approx(100.0)
    assert all(v == pytest.approx(1.0) for v in report.recall.values())

    jpath = tmp_path / "report.json"
    report.save_json(jpath)
    loaded = json.loads(jpath.read_text())
    assert loaded["counts"]["gt_poses"] == 6
    assert loaded["ap"]["25"] == pytest.approx(1.0)
    assert loaded["pcp3d"]["average"] == pytest.approx(100.0)

    cpath = tmp_path / "report.csv"
    report.save_csv(cpath)
    rows = list(csv.reader(cpath.read_text().splitlines()))
    assert rows[0] == ["metric", "threshold", "value"]
    metrics_seen = {r[0] for r in rows[1:]}
    assert {"mpjpe_mm", "ap", "pcp3d", "recall"} <= metrics_seen


def test_evaluate_uses_proposal_frames_when_given():
    g = standing_gt(70)
    frames = [([FakePose(g, 1.0)], [g])]
    far = [(np.array([[9000.0, 9000.0, 0.0]]), [g[0]])]
    report = evaluate(frames, proposal_frames=far,
                      recall_thresholds=(100.0, 500.0))
    assert report.recall == {100.0: 0.0, 500.0: 0.0}


def test_eval_report_validation():
    kw = dict(
        n_gt=1, n_pred=1, n_matched=1, mpjpe_mm=10.0,
        ap={25.0: 0.5}, pcp3d_per_actor={0: 100.0},
        pcp3d_average=100.0, recall={100.0: 1.0},
    )
    EvalReport(**kw)
    with pytest.raises(ValueError, match="MPJPE"):
        EvalReport(**{**kw, "mpjpe_mm": -1.0})
    with pytest.raises(ValueError, match="outside"):
        EvalReport(**{**kw, "ap": {25.0: 1.5}})
    with pytest.raises(ValueError, match="outside"):
        EvalReport(**{**kw, "recall": {100.0: -0.1}})
