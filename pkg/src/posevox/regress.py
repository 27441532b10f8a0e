"""Per-proposal pose regression.

For each proposal, a fine 2000 mm cuboid around its center is
re-voxelized (64^3 by default) and fused from the same per-view
heatmaps.  Per-joint 3D heatmaps over that fine grid are normalized to
sum to one, and the joint location is their soft-argmax: the
expectation of anchor world coordinates, which recovers sub-voxel
positions that a hard argmax quantizes away.

Two heatmap producers share the contract: an analytic one that
sharpens each fused channel by an exponent beta and normalizes, and a
learned 3D CNN whose raw output goes through a per-joint softmax.

A fine cuboid often contains a second person: the generator only
guarantees 500 mm between roots, while the cuboid reaches 1000 mm
out.  Both people's blobs are equally bright under ideal heatmaps, so
no pointwise reweighting can pick the right one.  Given a skeleton,
analytic heatmaps are therefore decoded down the skeleton tree — root
from a small window at the cuboid center (where the proposal put it),
each child from a window of limb reach around its parent — so the
expectation never mixes in a neighbor.  Chaining suits analytic mass
because it concentrates where joints are; a network trained through
the whole-cube soft-argmax only constrains that global expectation,
and its diffuse softmax defeats any windowed reader, so net mode
keeps the plain soft-argmax it was trained with.

Estimated poses serialize to a JSON results file (schema
``posevox-results-v1``; see schemas/results.schema.json).
"""

import dataclasses
import json

import numpy as np

from .volume import VoxelGrid, build_feature_volume

FINE_EDGE_DEFAULT_MM = 2000.0
FINE_RESOLUTION_DEFAULT = (64, 64, 64)
BETA_DEFAULT = 8.0
ROOT_WINDOW_DEFAULT_MM = 300.0
LIMB_SLACK_DEFAULT_MM = 200.0
_NORM_TOL = 1e-6

RESULTS_SCHEMA = "posevox-results-v1"


@dataclasses.dataclass(frozen=True, eq=False)
class Pose3D:
    """One person's estimated (or ground-truth) pose.

    ``joints`` is (K, 3) world mm; ``confidence`` is inherited from
    the proposal that produced the pose; ``low_confidence`` flags
    joints whose heatmap carried no evidence (uniform fallback).
    """

    joints: np.ndarray
    confidence: float = 1.0
    skeleton_id: str = ""
    low_confidence: np.ndarray = None

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.ndim != 2 or j.shape[1] != 3:
            raise ValueError(f"pose joints must be (K, 3), got {j.shape}")
        object.__setattr__(self, "joints", j.copy())
        if self.low_confidence is None:
            flags = np.zeros(j.shape[0], dtype=bool)
        else:
            flags = np.asarray(self.low_confidence, dtype=bool).reshape(-1)
            if flags.shape[0] != j.shape[0]:
                raise ValueError(
                    "low_confidence flags must have one entry per joint"
                )
        object.__setattr__(self, "low_confidence", flags.copy())
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(
                f"pose confidence must lie in [0, 1], got {self.confidence}"
            )


@dataclasses.dataclass(frozen=True, eq=False)
class JointHeatmap3D:
    """Per-joint distributions over a fine grid.

    ``weights`` is (K, X, Y, Z) float64; every channel is nonnegative
    and sums to 1 within 1e-6.  ``low_confidence[k]`` marks channels
    that fell back to the uniform distribution for lack of evidence.
    """

    grid: VoxelGrid
    weights: np.ndarray
    joint_names: tuple
    low_confidence: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        expected = (len(self.joint_names),) + tuple(self.grid.resolution)
        if w.shape != expected:
            raise ValueError(
                f"heatmap weights shape {w.shape}, expected {expected}"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if self.low_confidence is None:
            flags = np.zeros(w.shape[0], dtype=bool)
        else:
            flags = np.asarray(self.low_confidence, dtype=bool).reshape(-1)
        object.__setattr__(self, "low_confidence", flags)
        if float(w.min()) < 0.0:
            raise ValueError("3D heatmap weights must be nonnegative")
        sums = w.reshape(w.shape[0], -1).sum(axis=1)
        bad = np.abs(sums - 1.0) > _NORM_TOL
        if np.any(bad):
            k = int(np.argmax(bad))
            raise ValueError(
                f"3D heatmap channel {k} sums to {sums[k]!r}, expected 1"
            )


def fine_grid_at(
    center, resolution=FINE_RESOLUTION_DEFAULT, edge_mm=FINE_EDGE_DEFAULT_MM
):
    """Cube-shaped fine grid of the given edge length centered on a point."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if edge_mm <= 0.0:
        raise ValueError(f"fine grid edge must be positive, got {edge_mm}")
    extent = np.full(3, float(edge_mm))
    return VoxelGrid(
        origin=center - extent / 2.0, extent=extent, resolution=resolution
    )


def soft_argmax(heatmaps):
    """Expected anchor world coordinates under each joint distribution.

    Returns (K, 3) float64.  For a one-hot channel this is that
    anchor exactly; for a symmetric distribution it recovers the true
    center regardless of voxel size.
    """
    grid = heatmaps.grid
    w = heatmaps.weights
    K = w.shape[0]
    out = np.empty((K, 3), dtype=np.float64)
    coords = [grid.axis_coords(0), grid.axis_coords(1), grid.axis_coords(2)]
    marg = [
        w.sum(axis=(2, 3)),  # (K, X)
        w.sum(axis=(1, 3)),  # (K, Y)
        w.sum(axis=(1, 2)),  # (K, Z)
    ]
    for axis in range(3):
        out[:, axis] = marg[axis] @ coords[axis]
    return out


def pose_loss(pred_joints, gt_joints):
    """Sum over joints of the L1 norm of the coordinate error (mm)."""
    p = np.asarray(pred_joints, dtype=np.float64)
    g = np.asarray(gt_joints, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(
            f"pose_loss: shape mismatch {p.shape} vs {g.shape}"
        )
    return float(np.sum(np.abs(p - g)))


def heatmaps_analytic(fv, beta=BETA_DEFAULT):
    """Training-free 3D heatmaps: sharpen each fused channel and normalize.

    Channel k becomes ``f_k^beta / sum(f_k^beta)``.  A channel with no
    evidence anywhere (all zeros) falls back to the uniform
    distribution and is flagged low-confidence.
    """
    if beta <= 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    f = fv.features.astype(np.float64)
    K = f.shape[0]
    n = f[0].size
    w = np.empty_like(f)
    flags = np.zeros(K, dtype=bool)
    for k in range(K):
        powd = f[k] ** beta
        s = float(powd.sum())
        if s == 0.0:
            w[k] = 1.0 / n
            flags[k] = True
        else:
            w[k] = powd / s
    return JointHeatmap3D(
        grid=fv.grid,
        weights=w,
        joint_names=fv.joint_names,
        low_confidence=flags,
    )


def decode_chained(fv, skeleton, beta=BETA_DEFAULT,
                   root_window_mm=ROOT_WINDOW_DEFAULT_MM,
                   limb_slack_mm=LIMB_SLACK_DEFAULT_MM):
    """Skeleton-chained windowed decoding of a fine feature volume.

    Joints are decoded parent-before-child inside spherical windows:
    ``root_window_mm`` around the grid center for the root (which the
    proposal put there), the connecting limb's maximum length +
    ``limb_slack_mm`` around the parent's estimate for everyone else.
    The windows select the proposal's own person when a neighbor
    shares the cuboid: limb lengths are shorter than the minimum
    person spacing, so a chain of limb-sized windows stays on one body
    where a whole-cube expectation would mix two.

    Within a window the joint is placed in two steps.  First a mode is
    picked: the anchor maximizing sharpened mass weighted by proximity
    (a Gaussian in distance-to-parent at the limb's nominal length
    scale), so when both people's blobs survive the window the
    anatomically nearer one wins instead of the expectation splitting
    between them.  Then the position is the soft-argmax of the
    unweighted mass in a small ball around that mode — sub-voxel
    precision without the proximity weight biasing it.

    An empty window falls back to the whole channel; a channel that is
    zero everywhere yields the grid centroid (chained) and a
    low-confidence flag.  Returns ``(joints, low_confidence)``.
    """
    if beta <= 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    mass = fv.features.astype(np.float64) ** beta
    return decode_mass(mass, fv.grid, skeleton,
                       root_window_mm=root_window_mm,
                       limb_slack_mm=limb_slack_mm)


def decode_mass(mass, grid, skeleton,
                root_window_mm=ROOT_WINDOW_DEFAULT_MM,
                limb_slack_mm=LIMB_SLACK_DEFAULT_MM):
    """Chained windowed decoding of nonnegative per-joint mass.

    The core of ``decode_chained``, taking any (K, X, Y, Z)
    nonnegative array over ``grid``.  Meaningful only for mass that
    concentrates where joints are (sharpened analytic features do); a
    softmax trained through the whole-cube expectation need not, and
    windowed local statistics misread it.
    """
    K = mass.shape[0]
    if K != skeleton.n_joints:
        raise ValueError(
            f"mass has {K} channels, skeleton "
            f"{skeleton.n_joints} joints"
        )
    f = np.asarray(mass, dtype=np.float64).reshape(K, -1)
    anchors = grid.anchor_positions()
    reach, scale = {}, {}
    for (a, b), ln, (_, hi) in zip(
        skeleton.limbs, skeleton.nominal_lengths_mm,
        skeleton.length_ranges_mm,
    ):
        reach[a, b] = reach[b, a] = hi + limb_slack_mm
        scale[a, b] = scale[b, a] = ln
    local_r = max(150.0, 1.5 * float(np.max(grid.voxel_size)))

    def depth(i):
        d = 0
        while skeleton.parents[i] >= 0:
            d, i = d + 1, skeleton.parents[i]
        return d

    joints = np.zeros((K, 3))
    flags = np.zeros(K, dtype=bool)
    for k in sorted(range(K), key=depth):
        if k == skeleton.root:
            center = np.asarray(grid.center)
            radius, sigma = root_window_mm, root_window_mm
        else:
            p = skeleton.parents[k]
            if (p, k) not in reach:
                raise ValueError(f"no limb connects joint {k} to parent {p}")
            center, radius, sigma = joints[p], reach[p, k], scale[p, k]
        d2 = np.sum((anchors - center) ** 2, axis=1)
        w = np.where(d2 <= radius * radius, f[k], 0.0)
        if w.sum() == 0.0:
            w = f[k]
        if w.sum() == 0.0:
            w = np.ones(w.shape)
            flags[k] = True
        else:
            mode = int(np.argmax(w * np.exp(-d2 / (2.0 * sigma * sigma))))
            d2m = np.sum((anchors - anchors[mode]) ** 2, axis=1)
            w = np.where(d2m <= local_r * local_r, w, 0.0)
        s = w.sum()
        joints[k] = (anchors * (w / s)[:, None]).sum(axis=0)
    return joints, flags


def softmax_heatmaps(raw, grid, joint_names):
    """Per-joint softmax over voxels of a raw (K, X, Y, Z) activation."""
    r = raw.astype(np.float64).reshape(raw.shape[0], -1)
    r = r - r.max(axis=1, keepdims=True)
    e = np.exp(r)
    w = e / e.sum(axis=1, keepdims=True)
    return JointHeatmap3D(
        grid=grid,
        weights=w.reshape(raw.shape),
        joint_names=joint_names,
    )


def heatmaps_net(fv, weights):
    """Learned 3D heatmaps: CNN output through a per-joint softmax."""
    from . import net3d

    k = fv.features.shape[0]
    c_in, c_out = net3d.channel_signature(weights.descriptor)
    if c_in != k or c_out != k:
        raise ValueError(
            f"pose network maps {c_in}->{c_out} channels, "
            f"need {k}->{k} for this feature volume"
        )
    raw = net3d.forward(weights, fv.features)
    return softmax_heatmaps(raw, fv.grid, fv.joint_names)


def estimate_pose(
    prop,
    views,
    mode="analytic",
    fine_resolution=FINE_RESOLUTION_DEFAULT,
    beta=BETA_DEFAULT,
    skeleton=None,
    root_window_mm=ROOT_WINDOW_DEFAULT_MM,
    limb_slack_mm=LIMB_SLACK_DEFAULT_MM,
    weights=None,
    skeleton_id="",
):
    """Regress one pose from a proposal.

    Builds the fine feature volume around ``prop.center`` from the
    given (camera, heatmap stack) views, produces per-joint 3D
    heatmaps in the requested mode ("analytic" or "net"), and returns
    the soft-argmax pose.  Passing a ``skeleton`` switches analytic
    mode to chained windowed decoding, which keeps a neighboring
    person inside the cuboid from contaminating the expectation.  Net
    mode ignores it (like ``beta``): a trained softmax is optimized so
    its whole-cube expectation lands on the joint, and windowed local
    statistics misread such diffuse mass badly.  Pose confidence is
    the proposal confidence.  With no evidence at all, joints sit at
    the fine-grid centroid and carry low-confidence flags.
    """
    grid = fine_grid_at(
        prop.center, resolution=fine_resolution, edge_mm=prop.cuboid_edge_mm
    )
    fv = build_feature_volume(grid, views)
    if mode == "analytic":
        if skeleton is not None:
            joints, flags = decode_chained(
                fv,
                skeleton,
                beta=beta,
                root_window_mm=root_window_mm,
                limb_slack_mm=limb_slack_mm,
            )
            return Pose3D(
                joints=joints,
                confidence=prop.confidence,
                skeleton_id=skeleton_id,
                low_confidence=flags,
            )
        hm = heatmaps_analytic(fv, beta=beta)
    elif mode == "net":
        if weights is None:
            raise ValueError("net mode needs trained pose network weights")
        hm = heatmaps_net(fv, weights)
    else:
        raise ValueError(f"unknown pose mode {mode!r}")
    joints = soft_argmax(hm)
    return Pose3D(
        joints=joints,
        confidence=prop.confidence,
        skeleton_id=skeleton_id,
        low_confidence=hm.low_confidence,
    )


def write_results(path, frames, joint_names):
    """Write per-frame pose lists to a results JSON file.

    ``frames`` is an iterable of (frame_id, [Pose3D, ...]).  Bytes are
    deterministic for identical inputs.
    """
    joint_names = list(joint_names)
    doc = {"schema": RESULTS_SCHEMA, "joint_names": joint_names, "frames": []}
    for frame_id, poses in frames:
        entry = {"frame_id": int(frame_id), "poses": []}
        for p in poses:
            if p.joints.shape[0] != len(joint_names):
                raise ValueError(
                    f"pose has {p.joints.shape[0]} joints, "
                    f"file declares {len(joint_names)}"
                )
            entry["poses"].append(
                {
                    "confidence": float(p.confidence),
                    "joints": {
                        name: [float(c) for c in p.joints[i]]
                        for i, name in enumerate(joint_names)
                    },
                    "low_confidence_joints": [
                        joint_names[i]
                        for i in range(len(joint_names))
                        if p.low_confidence[i]
                    ],
                    "skeleton_id": p.skeleton_id,
                }
            )
        doc["frames"].append(entry)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_results(path):
    """Read a results JSON file -> (joint_names, {frame_id: [Pose3D]})."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("schema") != RESULTS_SCHEMA:
        raise ValueError(
            f"results file {path}: schema {doc.get('schema')!r}, "
            f"expected {RESULTS_SCHEMA!r}"
        )
    joint_names = list(doc["joint_names"])
    frames = {}
    for entry in doc["frames"]:
        poses = []
        for p in entry["poses"]:
            joints = np.array(
                [p["joints"][name] for name in joint_names], dtype=np.float64
            )
            low = np.array(
                [name in p.get("low_confidence_joints", []) for name in joint_names]
            )
            poses.append(
                Pose3D(
                    joints=joints,
                    confidence=float(p["confidence"]),
                    skeleton_id=p.get("skeleton_id", ""),
                    low_confidence=low,
                )
            )
        frames[int(entry["frame_id"])] = poses
    return joint_names, frames
