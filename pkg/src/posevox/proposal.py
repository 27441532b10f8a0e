"""Person localization: score volumes, 3D NMS, proposals.

A score volume assigns each coarse-grid anchor a value in [0, 1]
meaning "a person's root joint is here".  Ground-truth targets place
an isotropic Gaussian (sigma 200 mm by default) at each root and take
the pixelwise max over people.  Proposals are local maxima of a score
volume: a voxel must beat all 26 neighbors (ties resolved toward the
lexicographically smaller index), clear the score threshold, and rank
within the strongest ``max_keep``.  Each proposal pins the center of a
fixed-size cuboid (2000 mm edge) that the pose regressor refines.

Two scorers share this contract: an analytic one (smoothed root-joint
feature channel) that needs no training, and a learned 3D CNN head.

Proposals serialize to a line-oriented CSV with header
``frame_id,center_x,center_y,center_z,confidence``.
"""

import csv
import dataclasses

import numpy as np
from scipy import ndimage

from . import kernels
from .volume import VoxelGrid

SIGMA3D_DEFAULT_MM = 200.0
NMS_THRESHOLD_DEFAULT = 0.3
NMS_MAX_KEEP_DEFAULT = 10
CUBOID_EDGE_DEFAULT_MM = 2000.0


@dataclasses.dataclass(frozen=True, eq=False)
class ScoreVolume:
    """Root-likelihood scores on a grid: (X, Y, Z) float32 in [0, 1]."""

    grid: VoxelGrid
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float32)
        if s.shape != tuple(self.grid.resolution):
            raise ValueError(
                f"score shape {s.shape} does not match grid "
                f"{self.grid.resolution}"
            )
        object.__setattr__(self, "scores", s)
        lo = float(s.min())
        hi = float(s.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(
                f"scores must lie in [0, 1], got range [{lo}, {hi}]"
            )


@dataclasses.dataclass(frozen=True, eq=False)
class Proposal:
    """One detected person root.

    ``center`` is the world position of the winning anchor,
    ``confidence`` its score, and ``cuboid_edge_mm`` the edge length
    of the fine volume the pose regressor will carve around it.
    ``voxel`` records the (i, j, k) grid index of the anchor.
    """

    center: np.ndarray
    confidence: float
    cuboid_edge_mm: float = CUBOID_EDGE_DEFAULT_MM
    voxel: tuple = (0, 0, 0)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        object.__setattr__(self, "center", c)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(
                f"proposal confidence must lie in [0, 1], "
                f"got {self.confidence}"
            )
        if self.cuboid_edge_mm <= 0.0:
            raise ValueError("cuboid edge must be positive")


def gt_score_volume(grid, roots, sigma_mm=SIGMA3D_DEFAULT_MM):
    """Ground-truth score volume for a set of root positions.

    Each anchor holds ``max_p exp(-||anchor - root_p||^2 / (2 sigma^2))``;
    with no people the volume is all zeros.
    """
    if sigma_mm <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma_mm}")
    roots = np.asarray(roots, dtype=np.float64).reshape(-1, 3)
    shape = tuple(grid.resolution)
    if roots.shape[0] == 0:
        return ScoreVolume(grid=grid, scores=np.zeros(shape, np.float32))
    anchors = grid.anchor_positions()
    inv = 1.0 / (2.0 * sigma_mm * sigma_mm)
    best = np.zeros(anchors.shape[0], dtype=np.float64)
    for root in roots:
        d2 = np.sum((anchors - root) ** 2, axis=1)
        np.maximum(best, np.exp(-d2 * inv), out=best)
    return ScoreVolume(grid=grid, scores=best.reshape(shape).astype(np.float32))


def proposal_loss(pred, target):
    """Sum over all voxels of squared score error (float64).

    Both volumes must live on the same grid.
    """
    if not pred.grid.same_geometry(target.grid):
        raise ValueError("proposal_loss: score volumes live on different grids")
    diff = pred.scores.astype(np.float64) - target.scores.astype(np.float64)
    return float(np.sum(diff * diff))


def nms_3d(
    sv,
    threshold=NMS_THRESHOLD_DEFAULT,
    max_keep=NMS_MAX_KEEP_DEFAULT,
    cuboid_edge_mm=CUBOID_EDGE_DEFAULT_MM,
):
    """Extract proposals from a score volume.

    Returns at most ``max_keep`` proposals, sorted by descending
    confidence (ties by ascending voxel index), keeping only local
    maxima whose score reaches ``threshold``.  Guaranteed pairwise
    non-adjacent: no two proposals are within one voxel of each other
    in Chebyshev distance.
    """
    if max_keep < 1:
        raise ValueError(f"max_keep must be >= 1, got {max_keep}")
    scores = sv.scores.astype(np.float64)
    mask = kernels.nms_peak_mask(scores)
    idx = np.argwhere(mask & (scores >= threshold))
    if idx.shape[0] == 0:
        return []
    vals = scores[idx[:, 0], idx[:, 1], idx[:, 2]]
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -vals))
    out = []
    for n in order[:max_keep]:
        i, j, k = (int(v) for v in idx[n])
        out.append(
            Proposal(
                center=sv.grid.anchor_center(i, j, k),
                confidence=float(scores[i, j, k]),
                cuboid_edge_mm=cuboid_edge_mm,
                voxel=(i, j, k),
            )
        )
    return out


def analytic_score_volume(fv, root_channel):
    """Training-free scorer: smoothed root-joint feature channel.

    Applies a 3x3x3 box filter (edges replicated) to the root joint's
    fused feature channel and clamps to [0, 1].
    """
    if not 0 <= root_channel < fv.features.shape[0]:
        raise ValueError(
            f"root channel {root_channel} out of range for "
            f"{fv.features.shape[0]} joints"
        )
    ch = fv.features[root_channel].astype(np.float64)
    smoothed = ndimage.uniform_filter(ch, size=3, mode="nearest")
    np.clip(smoothed, 0.0, 1.0, out=smoothed)
    return ScoreVolume(grid=fv.grid, scores=smoothed.astype(np.float32))


def net_score_volume(fv, weights):
    """Learned scorer: 3D CNN over all feature channels, logistic output."""
    from . import net3d

    k = fv.features.shape[0]
    c_in, c_out = net3d.channel_signature(weights.descriptor)
    if c_in != k or c_out != 1:
        raise ValueError(
            f"score network maps {c_in}->{c_out} channels, "
            f"need {k}->1 for this feature volume"
        )
    raw = net3d.forward(weights, fv.features)[0].astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-raw))
    return ScoreVolume(grid=fv.grid, scores=scores.astype(np.float32))


def write_proposals(path, frames):
    """Write per-frame proposal lists as CSV lines.

    ``frames`` is an iterable of (frame_id, [Proposal, ...]).
    """
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["frame_id", "center_x", "center_y", "center_z", "confidence"]
        )
        for frame_id, props in frames:
            for p in props:
                w.writerow(
                    [
                        frame_id,
                        repr(float(p.center[0])),
                        repr(float(p.center[1])),
                        repr(float(p.center[2])),
                        repr(float(p.confidence)),
                    ]
                )


def read_proposals(path):
    """Read a proposals CSV; returns {frame_id: [Proposal, ...]}."""
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        expected = ["frame_id", "center_x", "center_y", "center_z", "confidence"]
        if header != expected:
            raise ValueError(
                f"proposals file {path}: bad header {header}, "
                f"expected {expected}"
            )
        for row in r:
            if not row:
                continue
            frame_id = int(row[0])
            p = Proposal(
                center=np.array([float(row[1]), float(row[2]), float(row[3])]),
                confidence=float(row[4]),
            )
            out.setdefault(frame_id, []).append(p)
    return out
