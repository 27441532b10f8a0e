"""Dense 3D convolutional networks in plain numpy, with exact backprop.

The engine is intentionally small: convolution (cross-correlation
with zero padding and bias), ReLU, residual blocks, and nearest-
neighbor upsampling are enough for the two heads used by the pipeline.
Both heads share one fully-convolutional encoder/decoder topology and
differ only in channel counts, so the same weights run on any grid
resolution.

A network is described by a list of layer dicts:

- ``{"kind": "conv", "c_in", "c_out", "k", "stride", "pad", "relu"}``
- ``{"kind": "resblock", "c", "k"}`` -- relu(conv2(relu(conv1(x))) + x)
- ``{"kind": "upsample"}`` -- nearest-neighbor x2, then crop back to
  the spatial shape recorded before the matching strided conv (LIFO),
  so odd sizes round-trip through the encoder.
- ``{"kind": "save"}`` / ``{"kind": "add"}`` -- push the current
  activation on a stack / pop and add it elementwise.  Paired across
  the encoder/decoder, these give each scale a direct path to the
  output; without them everything funnels through the coarsest stage
  and sub-voxel localization is lost.

Parameters and activations are float32 in normal use; the engine is
dtype-agnostic and gradient checks run it in float64.  Weight files
(magic ``PXW1``) carry a canonical JSON descriptor followed by raw
little-endian float32 tensors; loading validates the descriptor.

``train_joint`` fits the proposal and pose heads together with the
summed objective ``cpn_weight * L_score + prn_weight * L_pose`` under
plain SGD (default) or Adam, on synthetic scenes.
"""

import dataclasses
import json
import struct

import numpy as np

from . import kernels
from .proposal import gt_score_volume, nms_3d, proposal_loss, ScoreVolume
from .regress import fine_grid_at, pose_loss, soft_argmax, softmax_heatmaps
from .volume import build_feature_volume

WEIGHTS_MAGIC = b"PXW1"
WEIGHTS_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


def conv_layer(c_in, c_out, k=3, stride=1, pad=None, relu=True):
    if pad is None:
        pad = k // 2
    return {
        "kind": "conv",
        "c_in": int(c_in),
        "c_out": int(c_out),
        "k": int(k),
        "stride": int(stride),
        "pad": int(pad),
        "relu": bool(relu),
    }


def resblock_layer(c, k=3):
    return {"kind": "resblock", "c": int(c), "k": int(k)}


def upsample_layer():
    return {"kind": "upsample"}


def save_layer():
    return {"kind": "save"}


def add_layer():
    return {"kind": "add"}


def default_descriptor(c_in, c_out, width=32):
    """Encoder/decoder head: stem, two strided stages with residual
    blocks, symmetric nearest-neighbor upsampling with per-scale skip
    additions, a widened pre-output conv (double fan-in speeds up how
    fast the output logits can move under step-size-bounded
    optimizers), and a 1x1x1 output conv."""
    w = int(width)
    return [
        conv_layer(c_in, w, 3, 1),
        save_layer(),
        conv_layer(w, w, 3, 2),
        resblock_layer(w),
        save_layer(),
        conv_layer(w, w, 3, 2),
        resblock_layer(w),
        upsample_layer(),
        add_layer(),
        conv_layer(w, w, 3, 1),
        upsample_layer(),
        add_layer(),
        conv_layer(w, 2 * w, 3, 1),
        conv_layer(2 * w, c_out, 1, 1, relu=False),
    ]


def descriptor_to_json(descriptor):
    """Canonical JSON form; round-trips bit-exactly."""
    return json.dumps(descriptor, sort_keys=True, separators=(",", ":"))


def descriptor_from_json(text):
    return json.loads(text)


def validate_descriptor(descriptor):
    """Check layer chaining; returns (c_in, c_out) of the whole net."""
    if not descriptor:
        raise ValueError("empty network descriptor")
    channels = None
    c_in = None
    depth = 0
    saved = []
    for i, layer in enumerate(descriptor):
        kind = layer.get("kind")
        if kind == "conv":
            if channels is not None and layer["c_in"] != channels:
                raise ValueError(
                    f"layer {i}: conv expects {layer['c_in']} channels, "
                    f"gets {channels}"
                )
            if c_in is None:
                c_in = layer["c_in"]
            channels = layer["c_out"]
            if layer["k"] < 1 or layer["stride"] < 1 or layer["pad"] < 0:
                raise ValueError(f"layer {i}: bad conv geometry {layer}")
            if layer["stride"] > 1:
                depth += 1
        elif kind == "resblock":
            if channels is None or layer["c"] != channels:
                raise ValueError(
                    f"layer {i}: resblock on {layer['c']} channels, "
                    f"gets {channels}"
                )
        elif kind == "upsample":
            depth -= 1
            if depth < 0:
                raise ValueError(
                    f"layer {i}: upsample without a matching strided conv"
                )
        elif kind == "save":
            saved.append(channels)
        elif kind == "add":
            if not saved:
                raise ValueError(f"layer {i}: add without a matching save")
            c = saved.pop()
            if c != channels:
                raise ValueError(
                    f"layer {i}: add joins {c} saved channels with "
                    f"{channels} current channels"
                )
        else:
            raise ValueError(f"layer {i}: unknown layer kind {kind!r}")
    if channels is None:
        raise ValueError("descriptor has no conv layers")
    if saved:
        raise ValueError(f"{len(saved)} save layers never consumed by add")
    return c_in, channels


def channel_signature(descriptor):
    """(input channels, output channels) of a descriptor."""
    return validate_descriptor(descriptor)


@dataclasses.dataclass(eq=False)
class NetWeights:
    """A descriptor plus its parameter tensors, in declaration order.

    Conv layers contribute (weight, bias); residual blocks contribute
    (w1, b1, w2, b2); upsampling has no parameters.
    """

    descriptor: list
    params: list

    def __post_init__(self):
        validate_descriptor(self.descriptor)
        expected = [shp for shp, _ in _param_slots(self.descriptor)]
        got = [tuple(p.shape) for p in self.params]
        if expected != got:
            raise ValueError(
                f"parameter shapes {got} do not match descriptor "
                f"slots {expected}"
            )

    @property
    def dtype(self):
        return self.params[0].dtype

    def copy(self):
        return NetWeights(
            descriptor=json.loads(descriptor_to_json(self.descriptor)),
            params=[p.copy() for p in self.params],
        )


def _param_slots(descriptor):
    """Yield (shape, fan_in) for every parameter tensor, in order."""
    slots = []
    for layer in descriptor:
        if layer["kind"] == "conv":
            k = layer["k"]
            shape = (layer["c_out"], layer["c_in"], k, k, k)
            fan = layer["c_in"] * k * k * k
            slots.append((shape, fan))
            slots.append(((layer["c_out"],), fan))
        elif layer["kind"] == "resblock":
            c, k = layer["c"], layer["k"]
            shape = (c, c, k, k, k)
            fan = c * k * k * k
            slots.extend([(shape, fan), ((c,), fan)] * 2)
    return slots


def init_weights(descriptor, seed=0, dtype=np.float32):
    """He-initialized weights, zero biases; deterministic per seed."""
    validate_descriptor(descriptor)
    rng = np.random.default_rng(seed)
    params = []
    for shape, fan in _param_slots(descriptor):
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=dtype))
        else:
            std = np.sqrt(2.0 / fan)
            params.append(
                (rng.standard_normal(shape) * std).astype(dtype)
            )
    return NetWeights(descriptor=descriptor, params=params)


def zero_weights(descriptor, dtype=np.float32):
    """All-zero parameters (useful as a fixture: logistic output 0.5)."""
    validate_descriptor(descriptor)
    return NetWeights(
        descriptor=descriptor,
        params=[np.zeros(s, dtype=dtype) for s, _ in _param_slots(descriptor)],
    )


def _relu(x):
    return np.maximum(x, 0.0)


def _upsample_nearest(x, target):
    y = x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    return np.ascontiguousarray(y[:, : target[0], : target[1], : target[2]])


def _upsample_backward(dy, in_shape):
    c = dy.shape[0]
    X, Y, Z = in_shape
    full = np.zeros((c, 2 * X, 2 * Y, 2 * Z), dtype=dy.dtype)
    full[:, : dy.shape[1], : dy.shape[2], : dy.shape[3]] = dy
    return full.reshape(c, X, 2, Y, 2, Z, 2).sum(axis=(2, 4, 6))


def forward(net, x, tape=None):
    """Run the network; ``x`` is (C_in, X, Y, Z).

    Pass a list as ``tape`` to record what backward() needs.  The
    forward pass is deterministic: plain loops over layers, fixed
    reduction order inside the kernels.
    """
    c_in, _ = validate_descriptor(net.descriptor)
    x = np.ascontiguousarray(x, dtype=net.dtype)
    if x.ndim != 4 or x.shape[0] != c_in:
        raise ValueError(
            f"network input must be ({c_in}, X, Y, Z), got {x.shape}"
        )
    p = 0
    shape_stack = []
    skip_stack = []
    for layer in net.descriptor:
        kind = layer["kind"]
        if kind == "conv":
            w, b = net.params[p], net.params[p + 1]
            p += 2
            if layer["stride"] > 1:
                shape_stack.append(x.shape[1:])
            y = kernels.conv3d_forward(
                x, w, b, layer["stride"], layer["pad"]
            )
            if layer["relu"]:
                y = _relu(y)
            if tape is not None:
                tape.append((x, y))
            x = y
        elif kind == "resblock":
            w1, b1, w2, b2 = net.params[p : p + 4]
            p += 4
            pad = layer["k"] // 2
            h1 = _relu(kernels.conv3d_forward(x, w1, b1, 1, pad))
            h2 = kernels.conv3d_forward(h1, w2, b2, 1, pad) + x
            y = _relu(h2)
            if tape is not None:
                tape.append((x, h1, y))
            x = y
        elif kind == "upsample":
            target = shape_stack.pop()
            y = _upsample_nearest(x, target)
            if tape is not None:
                tape.append((x.shape[1:],))
            x = y
        elif kind == "save":
            skip_stack.append(x)
            if tape is not None:
                tape.append(None)
        else:  # add
            s = skip_stack.pop()
            if s.shape != x.shape:
                raise ValueError(
                    f"skip addition joins shape {s.shape} with {x.shape}"
                )
            x = x + s
            if tape is not None:
                tape.append(None)
    return x


def backward(net, tape, dy):
    """Backpropagate ``dy`` through a taped forward pass.

    Returns (input gradient, parameter gradients aligned with
    ``net.params``).
    """
    dy = np.ascontiguousarray(dy, dtype=net.dtype)
    grads = [None] * len(net.params)
    p = len(net.params)
    skip_grads = []
    for li in range(len(net.descriptor) - 1, -1, -1):
        layer = net.descriptor[li]
        kind = layer["kind"]
        if kind == "conv":
            p -= 2
            w = net.params[p]
            x, y = tape[li]
            if layer["relu"]:
                dy = dy * (y > 0)
            dw, db = kernels.conv3d_backward_params(
                x, dy, layer["k"], layer["stride"], layer["pad"]
            )
            grads[p] = dw
            grads[p + 1] = db
            dy = kernels.conv3d_backward_input(
                dy, w, layer["stride"], layer["pad"], x.shape[1:]
            )
        elif kind == "resblock":
            p -= 4
            w1, b1, w2, b2 = net.params[p : p + 4]
            x, h1, y = tape[li]
            pad = layer["k"] // 2
            dh2 = dy * (y > 0)
            dw2, db2 = kernels.conv3d_backward_params(h1, dh2, layer["k"], 1, pad)
            dh1 = kernels.conv3d_backward_input(dh2, w2, 1, pad, h1.shape[1:])
            dh1 = dh1 * (h1 > 0)
            dw1, db1 = kernels.conv3d_backward_params(x, dh1, layer["k"], 1, pad)
            dx = kernels.conv3d_backward_input(dh1, w1, 1, pad, x.shape[1:])
            dy = dx + dh2
            grads[p], grads[p + 1] = dw1, db1
            grads[p + 2], grads[p + 3] = dw2, db2
        elif kind == "upsample":
            (in_shape,) = tape[li]
            dy = _upsample_backward(dy, in_shape)
        elif kind == "add":
            skip_grads.append(dy)
        else:  # save
            dy = dy + skip_grads.pop()
    return dy, grads


def save_weights(path, net):
    """Write a PXW1 weight file: magic, version, canonical descriptor
    JSON, then each tensor as rank/dims/float32-LE payload."""
    desc = descriptor_to_json(net.descriptor).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<i", WEIGHTS_VERSION))
        f.write(struct.pack("<i", len(desc)))
        f.write(desc)
        f.write(struct.pack("<i", len(net.params)))
        for t in net.params:
            a = np.ascontiguousarray(t, dtype="<f4")
            f.write(struct.pack("<i", a.ndim))
            f.write(np.array(a.shape, dtype="<i4").tobytes())
            f.write(a.tobytes())


def load_weights(path, expect_descriptor=None):
    """Read a PXW1 weight file back into NetWeights.

    If ``expect_descriptor`` is given, the stored descriptor must
    match it exactly (canonical JSON comparison) or loading fails.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(
            f"weight file {path}: bad magic {data[:4]!r}, "
            f"expected {WEIGHTS_MAGIC!r}"
        )
    off = 4
    (version,) = struct.unpack_from("<i", data, off)
    off += 4
    if version != WEIGHTS_VERSION:
        raise ValueError(
            f"weight file {path}: version {version}, "
            f"expected {WEIGHTS_VERSION}"
        )
    (dlen,) = struct.unpack_from("<i", data, off)
    off += 4
    desc_json = data[off : off + dlen].decode("utf-8")
    off += dlen
    descriptor = descriptor_from_json(desc_json)
    if expect_descriptor is not None:
        if descriptor_to_json(expect_descriptor) != desc_json:
            raise ValueError(
                f"weight file {path}: architecture descriptor does not "
                "match the expected network"
            )
    (ntens,) = struct.unpack_from("<i", data, off)
    off += 4
    params = []
    for _ in range(ntens):
        (ndim,) = struct.unpack_from("<i", data, off)
        off += 4
        shape = tuple(
            int(v)
            for v in np.frombuffer(data, dtype="<i4", count=ndim, offset=off)
        )
        off += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        t = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        off += 4 * count
        params.append(t.reshape(shape).copy())
    if off != len(data):
        raise ValueError(f"weight file {path}: {len(data) - off} trailing bytes")
    return NetWeights(descriptor=descriptor, params=params)


@dataclasses.dataclass(eq=False)
class TrainScene:
    """One training frame: fused inputs plus ground truth.

    ``views`` is the (camera, heatmap stack) list the volumes are
    built from; ``gt_joints`` is (P, K, 3) world mm.
    """

    views: list
    gt_joints: np.ndarray


@dataclasses.dataclass(eq=False)
class TrainConfig:
    """Settings for joint training of the two heads.

    ``lr_schedule`` is a list of (epoch, rate) pairs; each rate takes
    effect at its 1-indexed epoch.  ``teacher_forcing_epochs`` fine
    volumes are centered on ground-truth roots before switching to
    live NMS proposals.  ``optimizer`` is "sgd" (plain) or "adam".
    """

    coarse_grid: object
    epochs: int = 10
    batch_size: int = 1
    lr_schedule: tuple = ((1, 1e-4),)
    seed: int = 0
    cpn_weight: float = 1.0
    prn_weight: float = 1.0
    optimizer: str = "sgd"
    cpn_width: int = 32
    prn_width: int = 32
    fine_resolution: tuple = (16, 16, 16)
    fine_edge_mm: float = 2000.0
    sigma_mm: float = 200.0
    root_joint: int = 0
    # Post-teacher-forcing proposals come from logistic-squashed raw
    # scores, whose background sits at 0.5; the threshold must exceed
    # that to reject non-peak clutter.
    teacher_forcing_epochs: int = 5
    nms_threshold: float = 0.55
    nms_max_keep: int = 10
    proposal_match_mm: float = 800.0

    def learning_rate(self, epoch):
        rate = None
        for start, r in sorted(self.lr_schedule):
            if epoch >= start:
                rate = r
        if rate is None:
            raise ValueError(
                f"lr schedule {self.lr_schedule} gives no rate for "
                f"epoch {epoch}"
            )
        return rate


class _Optimizer:
    ADAM_B1 = 0.9
    ADAM_B2 = 0.999

    def __init__(self, kind, params):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.t = 0
        if kind == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr):
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= (lr * g).astype(p.dtype)
            return
        b1, b2, eps = self.ADAM_B1, self.ADAM_B2, 1e-8
        for i, (p, g) in enumerate(zip(params, grads)):
            g64 = g.astype(np.float64)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g64
            self.v[i] = b2 * self.v[i] + (1 - b2) * g64 * g64
            mh = self.m[i] / (1 - b1**self.t)
            vh = self.v[i] / (1 - b2**self.t)
            p -= (lr * mh / (np.sqrt(vh) + eps)).astype(p.dtype)


def _scene_losses_and_grads(scene, cfg, cpn, prn, epoch):
    """Forward/backward both heads on one scene.

    Returns (cpn loss, prn loss, cpn grads, prn grads); grads are None
    when the corresponding head saw no supervision this scene.
    """
    gt = np.asarray(scene.gt_joints, dtype=np.float64)
    roots = gt[:, cfg.root_joint, :] if gt.size else np.zeros((0, 3))
    fv = build_feature_volume(cfg.coarse_grid, scene.views)

    # The score head regresses raw outputs straight onto the Gaussian
    # targets; the logistic squash is an inference-time monotone map
    # and keeping it out of the objective avoids the saturation sink
    # that an almost-all-zero target volume otherwise creates.
    tape = []
    raw = forward(cpn, fv.features, tape)
    raw64 = raw[0].astype(np.float64)
    target = gt_score_volume(cfg.coarse_grid, roots, cfg.sigma_mm)
    diff = raw64 - target.scores.astype(np.float64)
    cpn_loss_val = float(np.sum(diff * diff))
    dr = (2.0 * diff)[None]
    _, cpn_grads = backward(cpn, tape, dr.astype(cpn.dtype))

    if epoch <= cfg.teacher_forcing_epochs:
        centers = [r for r in roots]
        targets = list(range(roots.shape[0]))
    else:
        sv = ScoreVolume(
            grid=cfg.coarse_grid,
            scores=np.clip(
                1.0 / (1.0 + np.exp(-raw64)), 0.0, 1.0
            ).astype(np.float32),
        )
        props = nms_3d(sv, cfg.nms_threshold, cfg.nms_max_keep)
        centers, targets = [], []
        for pi, root in enumerate(roots):
            best, best_d = None, cfg.proposal_match_mm
            for pr in props:
                d = float(np.linalg.norm(pr.center - root))
                if d < best_d:
                    best, best_d = pr.center, d
            centers.append(best if best is not None else root)
            targets.append(pi)

    prn_loss_val = 0.0
    prn_grads = None
    for center, pi in zip(centers, targets):
        fgrid = fine_grid_at(
            center, resolution=cfg.fine_resolution, edge_mm=cfg.fine_edge_mm
        )
        ffv = build_feature_volume(fgrid, scene.views)
        tape2 = []
        rawk = forward(prn, ffv.features, tape2)
        hm = softmax_heatmaps(rawk, fgrid, ffv.joint_names)
        joints = soft_argmax(hm)
        prn_loss_val += pose_loss(joints, gt[pi])

        anchors = fgrid.anchor_positions()
        K = rawk.shape[0]
        n = anchors.shape[0]
        w = hm.weights.reshape(K, n)
        sgn = np.sign(joints - gt[pi])
        proj = anchors @ sgn.T  # (n, K)
        inner = np.einsum("kn,nk->k", w, proj)
        dr2 = (w * (proj.T - inner[:, None])).reshape(rawk.shape)
        _, g = backward(prn, tape2, dr2.astype(prn.dtype))
        if prn_grads is None:
            prn_grads = g
        else:
            for i in range(len(g)):
                prn_grads[i] += g[i]
    return cpn_loss_val, prn_loss_val, cpn_grads, prn_grads


def train_joint(scenes, cfg, joint_names=None):
    """Train both heads jointly on synthetic scenes.

    Minimizes ``cpn_weight * L_score + prn_weight * L_pose`` summed
    over people, visiting scenes in a seeded random order each epoch.
    The score head's raw outputs are regressed onto the GT Gaussian
    volume (sum of squared per-voxel errors); the pose head minimizes
    the L1 distance between soft-argmax joints and GT joints in mm.
    Returns (score-head weights, pose-head weights, loss curve); the
    loss curve has one dict per epoch with per-head means over scenes.
    Raises TrainingDivergedError the moment the loss stops being
    finite.  Two runs with the same config and scenes produce
    identical weights and curves.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("train_joint needs at least one scene")
    K = scenes[0].views[0][1].values.shape[0]
    cpn = init_weights(default_descriptor(K, 1, cfg.cpn_width), seed=cfg.seed)
    prn = init_weights(
        default_descriptor(K, K, cfg.prn_width), seed=cfg.seed + 1
    )
    opt_cpn = _Optimizer(cfg.optimizer, cpn.params)
    opt_prn = _Optimizer(cfg.optimizer, prn.params)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(len(scenes))
        ep_cpn = ep_prn = 0.0
        acc_cpn = [np.zeros_like(p) for p in cpn.params]
        acc_prn = [np.zeros_like(p) for p in prn.params]
        in_batch = 0
        for si in order:
            lc, lp, gc, gp = _scene_losses_and_grads(
                scenes[si], cfg, cpn, prn, epoch
            )
            total = cfg.cpn_weight * lc + cfg.prn_weight * lp
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, scene {si}: "
                    f"score-head {lc!r}, pose-head {lp!r}; lower the "
                    "learning rate or switch optimizers"
                )
            ep_cpn += lc
            ep_prn += lp
            for i in range(len(acc_cpn)):
                acc_cpn[i] += cfg.cpn_weight * gc[i]
            if gp is not None:
                for i in range(len(acc_prn)):
                    acc_prn[i] += cfg.prn_weight * gp[i]
            in_batch += 1
            if in_batch == cfg.batch_size:
                scale = 1.0 / in_batch
                opt_cpn.step(cpn.params, [g * scale for g in acc_cpn], lr)
                opt_prn.step(prn.params, [g * scale for g in acc_prn], lr)
                acc_cpn = [np.zeros_like(p) for p in cpn.params]
                acc_prn = [np.zeros_like(p) for p in prn.params]
                in_batch = 0
        if in_batch:
            scale = 1.0 / in_batch
            opt_cpn.step(cpn.params, [g * scale for g in acc_cpn], lr)
            opt_prn.step(prn.params, [g * scale for g in acc_prn], lr)
        n = float(len(scenes))
        entry = {
            "epoch": epoch,
            "lr": lr,
            "cpn_loss": ep_cpn / n,
            "prn_loss": ep_prn / n,
            "total_loss": (cfg.cpn_weight * ep_cpn + cfg.prn_weight * ep_prn)
            / n,
        }
        curve.append(entry)
    return cpn, prn, curve
