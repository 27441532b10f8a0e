"""Synthetic multi-person scenes and their rendered 2D heatmaps.

Scenes are parametric: random plausible bodies are built from a
template standing pose by perturbing limb directions within per-joint
angle limits and limb lengths within the skeleton's allowed ranges,
then placed at random floor positions with a minimum inter-person
distance.  This replaces sampling poses from motion-capture data, so
the generator has no external dataset dependency; the protocol is
otherwise the same — place poses in the space, project every joint to
every view, render Gaussian heatmaps.

Noise is optional and off by default: per-joint dropout, Gaussian
pixel jitter on surviving projections, and spurious Gaussian peaks
(Poisson count per image, uniform location and channel, amplitude
drawn from a configurable range).

``make_dataset`` materializes scenes on disk as a JSON manifest plus
one heatmap blob per view; everything is a pure function of the seed,
and reruns are byte-identical.
"""

import dataclasses
import importlib.resources
import json
import os

import numpy as np

from .camera import CameraParams, project
from .heatmap import HeatmapStack, read_heatmaps, render_gaussians, write_heatmaps
from .regress import Pose3D

DATASET_SCHEMA = "posevox-dataset-v1"
MIN_SEPARATION_DEFAULT_MM = 500.0
PLACEMENT_MAX_ATTEMPTS = 1000
# Keep every joint of a placed body inside the bounds: the widest
# horizontal reach of the template skeleton (shoulder + arm) is
# ~740 mm, so an 800 mm wall margin makes the bounds clamp a no-op.
WALL_MARGIN_MM = 800.0
FLOOR_CLEARANCE_MM = (30.0, 80.0)


@dataclasses.dataclass(frozen=True)
class Skeleton:
    """Joint tree plus limb lengths; loaded from a shipped data file."""

    name: str
    joint_names: tuple
    parents: tuple
    root: int
    limbs: tuple
    nominal_lengths_mm: tuple
    length_ranges_mm: tuple

    def __post_init__(self):
        k = len(self.joint_names)
        if len(self.parents) != k:
            raise ValueError("parents and joint_names length mismatch")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if roots != [self.root]:
            raise ValueError(f"expected single root {self.root}, got {roots}")
        for i, p in enumerate(self.parents):
            if i != self.root and not 0 <= p < k:
                raise ValueError(f"joint {i}: parent index {p} out of range")
            seen = {i}
            while p >= 0:  # climb to the root; a cycle revisits a node
                if p in seen:
                    raise ValueError(f"parent cycle through joint {i}")
                seen.add(p)
                p = self.parents[p]
        if len(self.limbs) != len(self.nominal_lengths_mm) or len(
            self.limbs
        ) != len(self.length_ranges_mm):
            raise ValueError("limb lists have inconsistent lengths")
        for (a, b), ln, (lo, hi) in zip(
            self.limbs, self.nominal_lengths_mm, self.length_ranges_mm
        ):
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError(f"limb ({a},{b}) out of joint range")
            if not 0 < lo <= ln <= hi:
                raise ValueError(
                    f"limb ({a},{b}): nominal {ln} outside range [{lo},{hi}]"
                )

    @property
    def n_joints(self):
        return len(self.joint_names)

    def joint_index(self, name):
        return self.joint_names.index(name)

    def limb_lengths(self, joints):
        """Per-limb Euclidean lengths of a (K, 3) pose."""
        j = np.asarray(joints, dtype=np.float64)
        pairs = np.array(self.limbs)
        return np.linalg.norm(j[pairs[:, 0]] - j[pairs[:, 1]], axis=1)


def default_skeleton():
    """The shipped 15-joint body: pelvis root, 14 limbs."""
    ref = importlib.resources.files("posevox").joinpath(
        "data/skeleton15.json"
    )
    spec = json.loads(ref.read_text(encoding="utf-8"))
    return Skeleton(
        name=spec["name"],
        joint_names=tuple(spec["joint_names"]),
        parents=tuple(spec["parents"]),
        root=spec["root"],
        limbs=tuple((a, b) for a, b in (l["joints"] for l in spec["limbs"])),
        nominal_lengths_mm=tuple(l["length_mm"] for l in spec["limbs"]),
        length_ranges_mm=tuple(
            (l["range_mm"][0], l["range_mm"][1]) for l in spec["limbs"]
        ),
    )


# Standing-pose template: unit direction parent -> child (world z up,
# body facing +x before yaw) and the maximum random tilt in degrees.
_TEMPLATE = {
    "neck": ((0.0, 0.0, 1.0), 12.0),
    "nose": ((0.25, 0.0, 0.97), 25.0),
    "lshoulder": ((0.0, 1.0, 0.0), 8.0),
    "rshoulder": ((0.0, -1.0, 0.0), 8.0),
    "lelbow": ((0.0, 0.15, -0.99), 45.0),
    "relbow": ((0.0, -0.15, -0.99), 45.0),
    "lwrist": ((0.2, 0.1, -0.97), 45.0),
    "rwrist": ((0.2, -0.1, -0.97), 45.0),
    "lhip": ((0.0, 1.0, 0.0), 5.0),
    "rhip": ((0.0, -1.0, 0.0), 5.0),
    "lknee": ((0.0, 0.0, -1.0), 25.0),
    "rknee": ((0.0, 0.0, -1.0), 25.0),
    "lankle": ((0.05, 0.0, -1.0), 25.0),
    "rankle": ((0.05, 0.0, -1.0), 25.0),
}


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    """Heatmap corruption knobs; the default is no corruption."""

    joint_dropout_prob: float = 0.0
    jitter_sigma_px: float = 0.0
    spurious_peak_rate: float = 0.0
    peak_amplitude: tuple = (0.3, 0.9)

    def __post_init__(self):
        if not 0.0 <= self.joint_dropout_prob <= 1.0:
            raise ValueError(
                f"joint_dropout_prob {self.joint_dropout_prob} not in [0,1]"
            )
        if self.jitter_sigma_px < 0 or self.spurious_peak_rate < 0:
            raise ValueError("noise sigmas and rates must be >= 0")
        lo, hi = self.peak_amplitude
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(
                f"peak_amplitude range {self.peak_amplitude} invalid"
            )

    def to_dict(self):
        return {
            "joint_dropout_prob": self.joint_dropout_prob,
            "jitter_sigma_px": self.jitter_sigma_px,
            "spurious_peak_rate": self.spurious_peak_rate,
            "peak_amplitude": list(self.peak_amplitude),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            joint_dropout_prob=d["joint_dropout_prob"],
            jitter_sigma_px=d["jitter_sigma_px"],
            spurious_peak_rate=d["spurious_peak_rate"],
            peak_amplitude=tuple(d["peak_amplitude"]),
        )


ZERO_NOISE = NoiseModel()


@dataclasses.dataclass(frozen=True)
class Scene:
    """GT poses plus the rig they will be rendered with."""

    poses: tuple
    rig: tuple
    bounds: tuple
    seed: int

    @property
    def gt_joints(self):
        """(P, K, 3) array of all GT joints, float64 mm."""
        if not self.poses:
            return np.zeros((0, 0, 3))
        return np.stack([p.joints for p in self.poses])


def _rotation_about(axis, angle):
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    x, y, z = a
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def _sample_body(skeleton, rng):
    """One body rooted at the origin: template directions perturbed
    within per-joint angle limits, lengths within allowed ranges, a
    uniform whole-body yaw.  Root z is lifted for floor clearance."""
    yaw = _rotation_about((0.0, 0.0, 1.0), rng.uniform(0.0, 2.0 * np.pi))
    joints = np.zeros((skeleton.n_joints, 3))
    for li, (a, b) in enumerate(skeleton.limbs):
        lo, hi = skeleton.length_ranges_mm[li]
        length = rng.uniform(lo, hi)
        tmpl, max_deg = _TEMPLATE[skeleton.joint_names[b]]
        d = np.asarray(tmpl, dtype=np.float64)
        d = d / np.linalg.norm(d)
        axis = rng.standard_normal(3)
        while np.linalg.norm(axis) < 1e-9:
            axis = rng.standard_normal(3)
        tilt = _rotation_about(axis, rng.uniform(0.0, np.radians(max_deg)))
        joints[b] = joints[a] + length * (yaw @ tilt @ d)
    clearance = rng.uniform(*FLOOR_CLEARANCE_MM)
    joints[:, 2] += clearance - joints[:, 2].min()
    return joints


def sample_scene(
    n_people,
    bounds,
    rig,
    rng_seed,
    skeleton=None,
    min_separation_mm=MIN_SEPARATION_DEFAULT_MM,
    origin=None,
):
    """Generate a scene: n_people random bodies at random floor spots.

    ``bounds`` is the motion-space extent (x, y, z) in mm; the space
    spans ``origin`` (default (-x/2, -y/2, 0)) plus the extent.  Roots
    are drawn uniformly with every pair at least ``min_separation_mm``
    apart (rejection sampling); raises ValueError when placement fails
    after 1000 attempts.  Joints are clamped to the bounds, though the
    wall margin normally keeps clamping inert.  Deterministic per seed.
    """
    if n_people < 0:
        raise ValueError(f"n_people must be >= 0, got {n_people}")
    skeleton = skeleton or default_skeleton()
    ex, ey, ez = (float(v) for v in bounds)
    if min(ex, ey, ez) <= 0:
        raise ValueError(f"bounds must be positive, got {bounds}")
    if origin is None:
        origin = (-ex / 2.0, -ey / 2.0, 0.0)
    ox, oy, oz = (float(v) for v in origin)
    lo = np.array([ox + WALL_MARGIN_MM, oy + WALL_MARGIN_MM])
    hi = np.array([ox + ex - WALL_MARGIN_MM, oy + ey - WALL_MARGIN_MM])
    if n_people > 0 and np.any(hi <= lo):
        raise ValueError(
            f"bounds {bounds} leave no room inside the {WALL_MARGIN_MM} mm "
            "wall margin; use larger bounds"
        )
    rng = np.random.default_rng(rng_seed)
    roots = []
    attempts = 0
    while len(roots) < n_people:
        xy = rng.uniform(lo, hi)
        attempts += 1
        if all(
            np.linalg.norm(xy - r) >= min_separation_mm for r in roots
        ):
            roots.append(xy)
        elif attempts >= PLACEMENT_MAX_ATTEMPTS:
            raise ValueError(
                f"could not place {n_people} people at least "
                f"{min_separation_mm} mm apart in bounds {bounds} after "
                f"{PLACEMENT_MAX_ATTEMPTS} attempts; use larger bounds"
            )
    box_lo = np.array([ox, oy, oz])
    box_hi = box_lo + np.array([ex, ey, ez])
    poses = []
    for xy in roots:
        joints = _sample_body(skeleton, rng)
        joints[:, 0] += xy[0]
        joints[:, 1] += xy[1]
        joints = np.clip(joints, box_lo, box_hi)
        poses.append(
            Pose3D(joints=joints, confidence=1.0, skeleton_id=skeleton.name)
        )
    return Scene(
        poses=tuple(poses), rig=tuple(rig), bounds=(ex, ey, ez), seed=rng_seed
    )


def noisy_instances(instances, noise, rng, n_channels, width, height):
    """Apply the noise model to a list of (k, u, v, visible) tuples.

    Returns a new instance list: dropped joints removed, survivors
    jittered, spurious peaks appended with explicit amplitudes.  The
    rng is consumed in a fixed order (per instance: dropout draw, then
    jitter draws), so results are deterministic per seed.
    """
    out = []
    for k, u, v, vis in instances:
        if not vis:
            continue
        if noise.joint_dropout_prob > 0 and (
            rng.random() < noise.joint_dropout_prob
        ):
            continue
        if noise.jitter_sigma_px > 0:
            u = u + rng.normal(0.0, noise.jitter_sigma_px)
            v = v + rng.normal(0.0, noise.jitter_sigma_px)
        out.append((k, u, v, True))
    if noise.spurious_peak_rate > 0:
        lo, hi = noise.peak_amplitude
        for _ in range(rng.poisson(noise.spurious_peak_rate)):
            out.append(
                (
                    int(rng.integers(0, n_channels)),
                    rng.uniform(0.0, width),
                    rng.uniform(0.0, height),
                    True,
                    rng.uniform(lo, hi),
                )
            )
    return out


def render_scene_heatmaps(
    scene, noise, rng_seed, sigma_px=3.0, skeleton=None
):
    """Project every joint of every person into every view and render
    Gaussian heatmaps, one stack per camera, applying ``noise``.

    Joints behind a camera are skipped; the renderer itself skips
    peaks whose (possibly jittered) center lands outside the image.
    """
    skeleton = skeleton or default_skeleton()
    names = skeleton.joint_names
    rng = np.random.default_rng(rng_seed)
    stacks = []
    for cam in scene.rig:
        instances = []
        for pose in scene.poses:
            for k in range(skeleton.n_joints):
                uv = project(pose.joints[k], cam)
                if uv is not None:
                    instances.append((k, uv[0], uv[1], True))
        instances = noisy_instances(
            instances, noise, rng, skeleton.n_joints, cam.width, cam.height
        )
        stacks.append(
            render_gaussians(
                instances,
                sigma_px,
                cam.height,
                cam.width,
                skeleton.n_joints,
                joint_names=names,
            )
        )
    return stacks


@dataclasses.dataclass(frozen=True)
class SceneRecord:
    frame_id: str
    seed: int
    noise_seed: int
    gt_joints: np.ndarray
    blob_paths: tuple


@dataclasses.dataclass(frozen=True)
class Dataset:
    """A loaded dataset manifest; heatmaps are read on demand."""

    root: str
    seed: int
    rig: tuple
    bounds: tuple
    noise: NoiseModel
    sigma_px: float
    people_range: tuple
    skeleton_id: str
    joint_names: tuple
    scenes: tuple

    def views(self, index):
        """[(camera, heatmap stack)] for one scene."""
        rec = self.scenes[index]
        return [
            (cam, read_heatmaps(os.path.join(self.root, rel)))
            for cam, rel in zip(self.rig, rec.blob_paths)
        ]


def make_dataset(
    out_dir,
    n_scenes,
    rig,
    bounds=(8000.0, 8000.0, 2000.0),
    people=(1, 3),
    noise=ZERO_NOISE,
    sigma_px=3.0,
    seed=0,
    skeleton=None,
):
    """Write a reproducible dataset: manifest.json plus per-view
    heatmap blobs under blobs/.  Returns the manifest path.

    Scene seeds derive from one root seed sequence, so any rerun with
    the same arguments produces byte-identical files.
    """
    if n_scenes < 0:
        raise ValueError(f"n_scenes must be >= 0, got {n_scenes}")
    pmin, pmax = int(people[0]), int(people[1])
    if not 0 <= pmin <= pmax:
        raise ValueError(f"invalid people range {people}")
    skeleton = skeleton or default_skeleton()
    os.makedirs(os.path.join(out_dir, "blobs"), exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_scenes + 1)
    n_people = np.random.default_rng(children[0]).integers(
        pmin, pmax + 1, size=n_scenes
    )
    records = []
    for i in range(n_scenes):
        pose_seed, noise_seed = (
            int(v) for v in children[i + 1].generate_state(2)
        )
        scene = sample_scene(
            int(n_people[i]), bounds, rig, pose_seed, skeleton=skeleton
        )
        stacks = render_scene_heatmaps(
            scene, noise, noise_seed, sigma_px=sigma_px, skeleton=skeleton
        )
        frame_id = f"scene_{i:05d}"
        paths = []
        for ci, stack in enumerate(stacks):
            rel = f"blobs/{frame_id}_cam{ci}.pxh"
            write_heatmaps(os.path.join(out_dir, rel), stack)
            paths.append(rel)
        records.append(
            {
                "frame_id": frame_id,
                "seed": pose_seed,
                "noise_seed": noise_seed,
                "gt_joints": [
                    [[float(c) for c in j] for j in pose.joints]
                    for pose in scene.poses
                ],
                "heatmaps": paths,
            }
        )
    manifest = {
        "schema": DATASET_SCHEMA,
        "seed": int(seed),
        "n_scenes": int(n_scenes),
        "bounds": [float(v) for v in bounds],
        "people_range": [pmin, pmax],
        "sigma_px": float(sigma_px),
        "noise": noise.to_dict(),
        "skeleton_id": skeleton.name,
        "joint_names": list(skeleton.joint_names),
        "rig": [cam.to_dict() for cam in rig],
        "scenes": records,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_dataset(path):
    """Read a manifest written by make_dataset.

    ``path`` may be the manifest file or its directory.  Raises
    ValueError on schema mismatches or malformed records.
    """
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as f:
            m = json.load(f)
    except OSError as e:
        raise ValueError(f"cannot read dataset manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"dataset manifest {path} is not valid JSON: {e}") from e
    if m.get("schema") != DATASET_SCHEMA:
        raise ValueError(
            f"dataset manifest {path}: schema {m.get('schema')!r}, "
            f"expected {DATASET_SCHEMA!r}"
        )
    rig = tuple(CameraParams.from_dict(d) for d in m["rig"])
    scenes = []
    for rec in m["scenes"]:
        gt = np.asarray(rec["gt_joints"], dtype=np.float64)
        if gt.size and (gt.ndim != 3 or gt.shape[2] != 3):
            raise ValueError(
                f"dataset manifest {path}: scene {rec['frame_id']} has "
                f"malformed gt_joints shape {gt.shape}"
            )
        if len(rec["heatmaps"]) != len(rig):
            raise ValueError(
                f"dataset manifest {path}: scene {rec['frame_id']} lists "
                f"{len(rec['heatmaps'])} blobs for {len(rig)} cameras"
            )
        scenes.append(
            SceneRecord(
                frame_id=rec["frame_id"],
                seed=int(rec["seed"]),
                noise_seed=int(rec["noise_seed"]),
                gt_joints=gt,
                blob_paths=tuple(rec["heatmaps"]),
            )
        )
    return Dataset(
        root=os.path.dirname(os.path.abspath(path)),
        seed=int(m["seed"]),
        rig=rig,
        bounds=tuple(m["bounds"]),
        noise=NoiseModel.from_dict(m["noise"]),
        sigma_px=float(m["sigma_px"]),
        people_range=tuple(m["people_range"]),
        skeleton_id=m["skeleton_id"],
        joint_names=tuple(m["joint_names"]),
        scenes=tuple(scenes),
    )
