"""Evaluation metrics: MPJPE, AP_K, PCP3D, and proposal recall.

Conventions shared by every metric here:

- An evaluation set is a list of frames.  For pose metrics a frame is
  ``(predictions, ground_truths)`` where predictions are Pose3D (their
  confidence ranks them) and ground truths are (K, 3) mm arrays or
  Pose3D.  For proposal recall a frame is ``(proposal_centers,
  gt_roots)``.
- AP_K ranks predictions by confidence across the whole set (ties
  broken by frame index, then prediction index, so results never
  depend on list order).  Each prediction greedily matches the
  nearest not-yet-matched GT in its frame — the match consumes the GT
  even when the error exceeds K, in which case the prediction counts
  as a false positive.  AP is the area under the precision-recall
  curve with all-point interpolation.
- PCP3D picks, per GT pose, the prediction with minimal MPJPE without
  consuming it; a limb is correct iff the mean of its two endpoint
  errors is strictly less than alpha x the GT limb length.  False
  positives are therefore invisible to it.  "Actor i" is GT index i
  within its frame, matching the per-actor tables this metric is
  traditionally reported in.
"""

import csv
import dataclasses
import json
import warnings

import numpy as np


def _joints_of(pose):
    if hasattr(pose, "joints"):
        return np.asarray(pose.joints, dtype=np.float64)
    return np.asarray(pose, dtype=np.float64)


def mpjpe(pred, gt, align_root=False, root_index=0):
    """Mean per-joint position error in mm.

    With ``align_root`` the prediction is translated so its root
    coincides with the GT root first (root-relative error).
    """
    p = _joints_of(pred)
    g = _joints_of(gt)
    if p.shape != g.shape:
        raise ValueError(f"pose shapes differ: {p.shape} vs {g.shape}")
    if align_root:
        p = p + (g[root_index] - p[root_index])
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


def _ranked_predictions(frames):
    """Global confidence ranking: (-confidence, frame, index)."""
    order = []
    for fi, (preds, _) in enumerate(frames):
        for pi, pose in enumerate(preds):
            order.append((-float(pose.confidence), fi, pi))
    order.sort()
    return [(fi, pi) for _, fi, pi in order]


def _greedy_match(frames, align_root=False, root_index=0):
    """Match ranked predictions to GTs; returns the ranked list of
    (error mm or None) where None marks a prediction with no GT left."""
    taken = [set() for _ in frames]
    outcomes = []
    for fi, pi in _ranked_predictions(frames):
        preds, gts = frames[fi]
        best_g, best_e = None, None
        for gi, gt in enumerate(gts):
            if gi in taken[fi]:
                continue
            e = mpjpe(preds[pi], gt, align_root, root_index)
            if best_e is None or e < best_e:
                best_g, best_e = gi, e
        if best_g is None:
            outcomes.append(None)
        else:
            taken[fi].add(best_g)
            outcomes.append(best_e)
    return outcomes


def ap_k(frames, k_mm, align_root=False, root_index=0, return_curve=False):
    """Average precision with a pose counted correct iff MPJPE < k_mm.

    Returns AP, or (AP, recalls, precisions) with ``return_curve``.
    Empty prediction or GT sets yield 0.0, with a warning when GT
    poses exist but predictions do not.
    """
    n_gt = sum(len(gts) for _, gts in frames)
    n_pred = sum(len(preds) for preds, _ in frames)
    if n_gt == 0 or n_pred == 0:
        if n_gt > 0:
            warnings.warn("ap_k: no predictions against nonempty GT")
        return (0.0, [], []) if return_curve else 0.0
    tp = 0
    recalls, precisions = [], []
    for rank, err in enumerate(_greedy_match(frames, align_root, root_index)):
        if err is not None and err < k_mm:
            tp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (rank + 1))
    ap = 0.0
    prev_r = 0.0
    for i, r in enumerate(recalls):
        if r > prev_r:
            ap += (r - prev_r) * max(precisions[i:])
            prev_r = r
    if return_curve:
        return ap, recalls, precisions
    return ap


def pcp3d(frames, limbs, alpha=0.5):
    """Percentage of correct parts against the closest prediction.

    Returns (per_actor, average): per_actor maps GT index within a
    frame to its percentage over all frames; average is the mean of
    the per-actor percentages.  GT poses in frames without any
    prediction count all limbs incorrect.
    """
    correct = {}
    total = {}
    for preds, gts in frames:
        for ai, gt in enumerate(gts):
            g = _joints_of(gt)
            total[ai] = total.get(ai, 0) + len(limbs)
            correct.setdefault(ai, 0)
            if not preds:
                continue
            closest = min(preds, key=lambda p: mpjpe(p, g))
            p = _joints_of(closest)
            for a, b in limbs:
                length = float(np.linalg.norm(g[a] - g[b]))
                err = 0.5 * (
                    np.linalg.norm(p[a] - g[a]) + np.linalg.norm(p[b] - g[b])
                )
                if err < alpha * length:
                    correct[ai] += 1
    per_actor = {
        ai: 100.0 * correct[ai] / total[ai] for ai in sorted(total)
    }
    average = (
        float(np.mean(list(per_actor.values()))) if per_actor else 0.0
    )
    return per_actor, average


def proposal_recall(frames, thresholds):
    """Fraction of GT roots with a proposal within each threshold.

    ``frames`` is a list of (proposal_centers, gt_roots); thresholds
    must ascend.  The curve is non-decreasing by construction.
    """
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must strictly ascend: {thresholds}")
    dists = []
    for centers, roots in frames:
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        for root in np.asarray(roots, dtype=np.float64).reshape(-1, 3):
            if centers.shape[0]:
                dists.append(
                    float(np.min(np.linalg.norm(centers - root, axis=1)))
                )
            else:
                dists.append(np.inf)
    if not dists:
        return [0.0 for _ in thresholds]
    dists = np.array(dists)
    return [float(np.mean(dists <= t)) for t in thresholds]


@dataclasses.dataclass
class EvalReport:
    """Aggregated evaluation results, serializable to JSON and CSV."""

    n_gt: int
    n_pred: int
    n_matched: int
    mpjpe_mm: float
    ap: dict
    pcp3d_per_actor: dict
    pcp3d_average: float
    recall: dict

    def __post_init__(self):
        if self.mpjpe_mm < 0 and np.isfinite(self.mpjpe_mm):
            raise ValueError(f"MPJPE {self.mpjpe_mm} < 0")
        for name, rates in (("ap", self.ap), ("recall", self.recall)):
            for k, v in rates.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name}[{k}] = {v} outside [0,1]")

    def to_dict(self):
        return {
            "counts": {
                "gt_poses": self.n_gt,
                "predictions": self.n_pred,
                "matched": self.n_matched,
            },
            "mpjpe_mm": self.mpjpe_mm,
            "ap": {f"{k:g}": v for k, v in sorted(self.ap.items())},
            "pcp3d": {
                "per_actor": {
                    f"actor_{a}": v
                    for a, v in sorted(self.pcp3d_per_actor.items())
                },
                "average": self.pcp3d_average,
            },
            "recall": {f"{k:g}": v for k, v in sorted(self.recall.items())},
        }

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def save_csv(self, path):
        """Flat form: metric,threshold,value — one row per figure."""
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "threshold", "value"])
            w.writerow(["gt_poses", "", self.n_gt])
            w.writerow(["predictions", "", self.n_pred])
            w.writerow(["matched", "", self.n_matched])
            w.writerow(["mpjpe_mm", "", repr(float(self.mpjpe_mm))])
            for k in sorted(self.ap):
                w.writerow(["ap", f"{k:g}", repr(float(self.ap[k]))])
            for a in sorted(self.pcp3d_per_actor):
                w.writerow(
                    ["pcp3d", f"actor_{a}", repr(float(self.pcp3d_per_actor[a]))]
                )
            w.writerow(["pcp3d", "average", repr(float(self.pcp3d_average))])
            for t in sorted(self.recall):
                w.writerow(["recall", f"{t:g}", repr(float(self.recall[t]))])


def evaluate(
    frames,
    limbs=None,
    ap_thresholds=(25.0, 50.0, 100.0, 150.0),
    recall_thresholds=(100.0, 200.0, 300.0, 500.0),
    proposal_frames=None,
    align_root=False,
    root_index=0,
    pcp_alpha=0.5,
):
    """Run every metric over an evaluation set and build an EvalReport.

    MPJPE is the mean over matched prediction/GT pairs (the AP
    matching with no error cutoff).  The recall curve uses
    ``proposal_frames`` when given, else the predicted poses' root
    joints stand in as proposal centers.
    """
    n_gt = sum(len(gts) for _, gts in frames)
    n_pred = sum(len(preds) for preds, _ in frames)
    matched = [
        e
        for e in _greedy_match(frames, align_root, root_index)
        if e is not None
    ]
    report_mpjpe = float(np.mean(matched)) if matched else float("nan")
    ap = {
        float(k): ap_k(frames, k, align_root, root_index)
        for k in ap_thresholds
    }
    if limbs:
        per_actor, avg = pcp3d(frames, limbs, pcp_alpha)
    else:
        per_actor, avg = {}, 0.0
    if proposal_frames is None:
        proposal_frames = [
            (
                [_joints_of(p)[root_index] for p in preds],
                [_joints_of(g)[root_index] for g in gts],
            )
            for preds, gts in frames
        ]
    rec = proposal_recall(proposal_frames, recall_thresholds)
    return EvalReport(
        n_gt=n_gt,
        n_pred=n_pred,
        n_matched=len(matched),
        mpjpe_mm=report_mpjpe,
        ap=ap,
        pcp3d_per_actor=per_actor,
        pcp3d_average=avg,
        recall={float(t): v for t, v in zip(recall_thresholds, rec)},
    )
