"""Voxel grids and multi-view feature volumes.

A voxel grid discretizes an axis-aligned box of space; anchors sit at
voxel centers.  The feature volume for a set of views holds, per joint
channel and per anchor, the average over all V views of the bilinear
heatmap sample at the anchor's projection.  Views in which an anchor
is behind the camera or projects outside the heatmap contribute zero,
and the denominator is always V, so features stay in [0, 1] and adding
an uninformative view dilutes rather than distorts.

Anchor projections depend only on (grid, camera), so they are cached
across frames keyed by content fingerprints; the cache is a small FIFO
because fine grids are re-centered per proposal and would otherwise
accumulate without bound.
"""

import collections
import dataclasses
import hashlib

import numpy as np

from . import _blob, kernels
from .camera import project_points


@dataclasses.dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Axis-aligned voxel grid: ``origin`` corner, ``extent`` side
    lengths (mm), ``resolution`` voxel counts, all per axis.

    The anchor of voxel (i, j, k) is the voxel center::

        origin + ((i + 0.5) ex/X, (j + 0.5) ey/Y, (k + 0.5) ez/Z)
    """

    origin: np.ndarray
    extent: np.ndarray
    resolution: tuple

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        extent = np.asarray(self.extent, dtype=np.float64).reshape(3).copy()
        res = tuple(int(r) for r in self.resolution)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "resolution", res)
        if len(res) != 3 or any(r < 1 for r in res):
            raise ValueError(
                f"grid resolution must be three counts >= 1, got {res}"
            )
        if np.any(extent <= 0.0):
            raise ValueError(f"grid extent must be positive, got {extent}")

    @property
    def n_voxels(self):
        x, y, z = self.resolution
        return x * y * z

    @property
    def voxel_size(self):
        """Per-axis voxel edge lengths in mm."""
        return self.extent / np.array(self.resolution, dtype=np.float64)

    @property
    def center(self):
        return self.origin + 0.5 * self.extent

    def axis_coords(self, axis):
        """Anchor coordinates along one axis (length resolution[axis])."""
        n = self.resolution[axis]
        step = self.extent[axis] / n
        return self.origin[axis] + (np.arange(n) + 0.5) * step

    def anchor_center(self, i, j, k):
        """World position of the anchor of voxel (i, j, k)."""
        idx = np.array([i, j, k], dtype=np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size

    def anchor_positions(self):
        """All anchors as an (X*Y*Z, 3) array, C-order over (i, j, k)."""
        xs = self.axis_coords(0)
        ys = self.axis_coords(1)
        zs = self.axis_coords(2)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def same_geometry(self, other):
        return (
            self.resolution == other.resolution
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.extent, other.extent)
        )

    def fingerprint(self):
        h = hashlib.sha1()
        h.update(self.origin.tobytes())
        h.update(self.extent.tobytes())
        h.update(np.array(self.resolution, dtype=np.int64).tobytes())
        return h.hexdigest()


def make_coarse_grid(extent, resolution, origin=None):
    """Grid covering the motion space.

    By default the space is centered at x = y = 0 with its floor at
    z = 0, i.e. origin (-ex/2, -ey/2, 0); pass ``origin`` to override.
    """
    extent = np.asarray(extent, dtype=np.float64)
    if origin is None:
        origin = np.array([-extent[0] / 2.0, -extent[1] / 2.0, 0.0])
    return VoxelGrid(origin=origin, extent=extent, resolution=resolution)


@dataclasses.dataclass(frozen=True, eq=False)
class FeatureVolume:
    """Fused per-joint features on a grid: (K, X, Y, Z) float32 in [0, 1]."""

    grid: VoxelGrid
    features: np.ndarray
    joint_names: tuple

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        expected = (len(self.joint_names),) + tuple(self.grid.resolution)
        if f.shape != expected:
            raise ValueError(
                f"feature volume shape {f.shape} does not match "
                f"{len(self.joint_names)} joints on grid {self.grid.resolution}"
            )
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        lo = float(f.min()) if f.size else 0.0
        hi = float(f.max()) if f.size else 0.0
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(
                f"feature values must lie in [0, 1], got range [{lo}, {hi}]"
            )


_projection_cache = collections.OrderedDict()
_PROJECTION_CACHE_MAX = 16


def _projected_anchors(grid, cam):
    key = (grid.fingerprint(), cam.fingerprint())
    hit = _projection_cache.get(key)
    if hit is not None:
        _projection_cache.move_to_end(key)
        return hit
    us, vs, valid = project_points(grid.anchor_positions(), cam)
    _projection_cache[key] = (us, vs, valid)
    if len(_projection_cache) > _PROJECTION_CACHE_MAX:
        _projection_cache.popitem(last=False)
    return us, vs, valid


def clear_projection_cache():
    _projection_cache.clear()


def build_feature_volume(grid, views):
    """Fuse per-view heatmap stacks into a feature volume.

    ``views`` is a non-empty sequence of (CameraParams, HeatmapStack)
    pairs whose stacks all share the same channel count and joint
    names.  Every anchor/channel value is the average over all views
    of the bilinear sample at the anchor's projection, with
    behind-camera and out-of-image samples counted as zero.
    """
    views = list(views)
    if not views:
        raise ValueError("build_feature_volume needs at least one view")
    names = views[0][1].joint_names
    for cam, stack in views:
        if stack.joint_names != names:
            raise ValueError(
                f"view {cam.cam_id or '?'} has joint channels "
                f"{stack.joint_names}, expected {names}"
            )
    accum = np.zeros((len(names), grid.n_voxels), dtype=np.float64)
    for cam, stack in views:
        us, vs, valid = _projected_anchors(grid, cam)
        if stack.scale != 1.0:
            us = us * stack.scale
            vs = vs * stack.scale
        kernels.bilinear_accumulate(stack.values, us, vs, valid, accum)
    feats = (accum / float(len(views))).astype(np.float32)
    feats = feats.reshape((len(names),) + tuple(grid.resolution))
    # average of [0, 1] samples; clip float dust so the invariant is exact
    np.clip(feats, 0.0, 1.0, out=feats)
    return FeatureVolume(grid=grid, features=feats, joint_names=names)


def write_volume(path, fv):
    """Serialize a feature volume's payload to the PXV1 blob format.

    Only the (K, X, Y, Z) features are stored; grid geometry travels
    in whatever manifest references the blob.
    """
    _blob.write_blob(path, _blob.VOLUME_MAGIC, fv.features)


def read_volume(path):
    """Read a PXV1 blob; returns the raw (K, X, Y, Z) float32 array."""
    return _blob.read_blob(path, _blob.VOLUME_MAGIC)
