"""Pinhole camera model and rig files.

Conventions, used everywhere in this package:

- World and camera coordinates are millimeters.
- A world point ``p`` maps to camera coordinates ``p_cam = R @ p + t``;
  the camera looks along its +z axis.
- Image coordinates are ``u = fx * x / z + cx`` and
  ``v = fy * y / z + cy`` with u growing rightward and v downward.
- There is no lens distortion.
- Points with camera-frame depth ``z <= 1e-6`` mm are behind the
  camera and do not project.

A rig file is a JSON list of camera objects, one per view::

    [{"id": "cam0", "fx": 96.0, "fy": 96.0, "cx": 96.0, "cy": 96.0,
      "R": [<9 floats, row-major>], "t": [<3 floats>],
      "width": 192, "height": 192}, ...]
"""

import dataclasses
import hashlib
import json

import numpy as np

BEHIND_EPS_MM = 1e-6
_ROT_TOL = 1e-9


@dataclasses.dataclass(frozen=True, eq=False)
class CameraParams:
    """Calibrated pinhole camera.

    Parameters
    ----------
    fx, fy : float
        Focal lengths in pixels.
    cx, cy : float
        Principal point in pixels.
    R : ndarray, shape (3, 3)
        World-to-camera rotation.  Must be orthonormal with det +1
        (checked to 1e-9).
    t : ndarray, shape (3,)
        World-to-camera translation, millimeters.
    width, height : int
        Image size in pixels, both positive.
    cam_id : str
        Identifier used in rig files and error messages.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    cam_id: str = ""

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3).copy()
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        name = self.cam_id or "<unnamed>"
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(
                f"camera {name}: focal lengths must be positive, "
                f"got fx={self.fx}, fy={self.fy}"
            )
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"camera {name}: image size must be positive, "
                f"got {self.width}x{self.height}"
            )
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > _ROT_TOL:
            raise ValueError(
                f"camera {name}: rotation is not orthonormal "
                f"(max |R^T R - I| = {err:.3e})"
            )
        det = np.linalg.det(R)
        if abs(det - 1.0) > _ROT_TOL:
            raise ValueError(
                f"camera {name}: rotation determinant is {det:.12f}, "
                "expected +1 (reflections are not valid rotations)"
            )

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def fingerprint(self):
        """Stable content hash, used to key projection caches."""
        h = hashlib.sha1()
        h.update(
            np.array(
                [self.fx, self.fy, self.cx, self.cy], dtype=np.float64
            ).tobytes()
        )
        h.update(self.R.tobytes())
        h.update(self.t.tobytes())
        h.update(np.array([self.width, self.height], dtype=np.int64).tobytes())
        return h.hexdigest()

    def to_dict(self):
        return {
            "id": self.cam_id,
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "R": [float(x) for x in self.R.reshape(-1)],
            "t": [float(x) for x in self.t],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d, index=None):
        try:
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
                t=np.array(d["t"], dtype=np.float64),
                width=int(d["width"]),
                height=int(d["height"]),
                cam_id=str(d.get("id", "" if index is None else f"cam{index}")),
            )
        except KeyError as e:
            where = d.get("id", f"entry {index}" if index is not None else "?")
            raise ValueError(
                f"camera {where}: missing required field {e.args[0]!r}"
            ) from None


def project(point, cam):
    """Project one world point; returns (u, v) or None if behind.

    "Behind" means camera-frame depth z <= 1e-6 mm, which also guards
    the division at z == 0.
    """
    p = np.asarray(point, dtype=np.float64)
    pc = cam.R @ p + cam.t
    z = pc[2]
    if z <= BEHIND_EPS_MM:
        return None
    return (cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy)


def project_points(points, cam):
    """Vectorized projection of an (N, 3) array of world points.

    Returns ``(us, vs, valid)`` where ``valid[n]`` is False for points
    behind the camera; their (u, v) entries are set to 0 and must be
    ignored.
    """
    p = np.asarray(points, dtype=np.float64)
    pc = p @ cam.R.T + cam.t
    z = pc[:, 2]
    valid = z > BEHIND_EPS_MM
    zsafe = np.where(valid, z, 1.0)
    us = np.where(valid, cam.fx * pc[:, 0] / zsafe + cam.cx, 0.0)
    vs = np.where(valid, cam.fy * pc[:, 1] / zsafe + cam.cy, 0.0)
    return us, vs, valid


def back_project(cam, pixel, depth):
    """World point on the ray through ``pixel`` at camera depth ``depth``.

    Inverse of :func:`project` in the sense that projecting the result
    returns ``pixel`` (for positive depth).  Mostly a test helper.
    """
    u, v = pixel
    pc = np.array(
        [
            (u - cam.cx) / cam.fx * depth,
            (v - cam.cy) / cam.fy * depth,
            depth,
        ],
        dtype=np.float64,
    )
    return cam.R.T @ (pc - cam.t)


def load_rig(path):
    """Read a rig file; returns a list of CameraParams.

    Raises ValueError with a diagnostic naming the file (and the
    offending camera, where one is identifiable) for parse errors,
    missing fields, invalid rotations, or an empty rig.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ValueError(f"cannot read rig file {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ValueError(
            f"rig file {path} is not valid JSON: {e.msg} "
            f"(line {e.lineno}, column {e.colno})"
        ) from None
    if not isinstance(raw, list):
        raise ValueError(
            f"rig file {path}: expected a JSON list of cameras, "
            f"got {type(raw).__name__}"
        )
    if len(raw) == 0:
        raise ValueError(f"rig file {path}: a rig needs at least one camera")
    cams = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ValueError(
                f"rig file {path}: camera entry {i} is not an object"
            )
        try:
            cams.append(CameraParams.from_dict(entry, index=i))
        except ValueError as e:
            raise ValueError(f"rig file {path}: {e}") from None
    return cams


def save_rig(path, cams):
    """Write cameras to a rig file (deterministic bytes)."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump([c.to_dict() for c in cams], f, indent=2, sort_keys=True)
        f.write("\n")


def look_at_rotation(position, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation for a camera at ``position`` looking
    at ``target``, with image v pointing away from world ``up``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - position
    nz = np.linalg.norm(z)
    if nz == 0.0:
        raise ValueError("look_at_rotation: position equals target")
    z = z / nz
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError(
            "look_at_rotation: view direction is parallel to the up vector"
        )
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z])


def make_circle_rig(
    n_cameras,
    radius,
    heights,
    target=(0.0, 0.0, 900.0),
    focal=96.0,
    image_size=(192, 192),
    azimuth0_deg=18.0,
):
    """Evenly spaced cameras on a circle, all aimed at ``target``.

    ``heights`` is a scalar or per-camera sequence of camera-center
    z coordinates; staggering them breaks the symmetry of the rig.
    """
    heights = np.broadcast_to(
        np.asarray(heights, dtype=np.float64), (n_cameras,)
    )
    w, h = image_size
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n_cameras):
        az = np.deg2rad(azimuth0_deg + 360.0 * i / n_cameras)
        pos = np.array(
            [radius * np.cos(az), radius * np.sin(az), heights[i]]
        )
        R = look_at_rotation(pos, target)
        t = -R @ pos
        cams.append(
            CameraParams(
                fx=focal,
                fy=focal,
                cx=w / 2.0,
                cy=h / 2.0,
                R=R,
                t=t,
                width=w,
                height=h,
                cam_id=f"cam{i}",
            )
        )
    return cams
