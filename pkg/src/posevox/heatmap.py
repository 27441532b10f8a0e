"""Per-view 2D joint heatmaps.

A heatmap stack holds one channel per joint for a single view.  Values
live in [0, 1]; channel k is built by max-composing an isotropic
Gaussian per rendered instance of joint k, so overlapping people never
push a pixel above the strongest single peak.  Pixel (x, y) holds
``amp * exp(-((x-u)^2 + (y-v)^2) / (2 sigma^2))`` for an instance at
continuous pixel position (u, v); support is truncated to a square
window of half-width ``3 sigma``.

Stacks serialize to the binary blob format in :mod:`posevox._blob`
(magic ``PXH1``, int32 K/H/W header, float32 payload).
"""

import dataclasses
import math

import numpy as np

from . import _blob, kernels


@dataclasses.dataclass(frozen=True, eq=False)
class HeatmapStack:
    """Joint heatmaps for one view: ``values`` is (K, H, W) float32.

    ``scale`` maps camera pixel coordinates to heatmap coordinates
    when heatmaps are rendered at a different resolution than the
    camera image (heatmap_u = scale * camera_u); the default 1.0 means
    they coincide.
    """

    values: np.ndarray
    joint_names: tuple
    scale: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(
                f"heatmap stack must be (K, H, W), got shape {v.shape}"
            )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if len(self.joint_names) != v.shape[0]:
            raise ValueError(
                f"{len(self.joint_names)} joint names for {v.shape[0]} channels"
            )
        if self.scale <= 0.0:
            raise ValueError(f"heatmap scale must be positive, got {self.scale}")
        lo = float(v.min()) if v.size else 0.0
        hi = float(v.max()) if v.size else 0.0
        if lo < 0.0 or hi > 1.0:
            raise ValueError(
                f"heatmap values must lie in [0, 1], got range [{lo}, {hi}]"
            )


def default_joint_names(k):
    return tuple(f"joint{i}" for i in range(k))


def render_gaussians(
    instances, sigma, height, width, n_channels, joint_names=None
):
    """Render joint instances into a fresh heatmap stack.

    ``instances`` is an iterable of ``(joint_index, u, v, visible)``
    or ``(joint_index, u, v, visible, amplitude)`` tuples; amplitude
    defaults to 1.0.  Instances that are not visible, or whose center
    falls outside the image rectangle [0, W) x [0, H), contribute
    nothing.  Channels are combined by pixelwise maximum.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if n_channels < 1:
        raise ValueError("a heatmap stack needs at least one channel")
    if joint_names is None:
        joint_names = default_joint_names(n_channels)
    ks, us, vs, amps = [], [], [], []
    for inst in instances:
        if len(inst) == 4:
            k, u, v, visible = inst
            amp = 1.0
        else:
            k, u, v, visible, amp = inst
        if not 0 <= k < n_channels:
            raise ValueError(
                f"joint index {k} out of range for {n_channels} channels"
            )
        if not visible:
            continue
        if not (0.0 <= u < width and 0.0 <= v < height):
            continue
        if not 0.0 <= amp <= 1.0:
            raise ValueError(f"peak amplitude must lie in [0, 1], got {amp}")
        ks.append(k)
        us.append(u)
        vs.append(v)
        amps.append(amp)
    channels = np.zeros((n_channels, height, width), dtype=np.float32)
    if ks:
        kernels.render_gaussian_peaks(
            channels,
            np.asarray(ks, dtype=np.int64),
            np.asarray(us, dtype=np.float64),
            np.asarray(vs, dtype=np.float64),
            np.asarray(amps, dtype=np.float64),
            float(sigma),
        )
    return HeatmapStack(values=channels, joint_names=joint_names)


def sample_bilinear(stack, k, uv):
    """Bilinear sample of channel k at continuous heatmap coords (u, v).

    Positions outside the closed interpolation domain
    [0, W-1] x [0, H-1] return 0.0.  This scalar routine is the
    reference the vectorized fusion kernel is tested against.
    """
    u, v = float(uv[0]), float(uv[1])
    _, H, W = stack.values.shape
    if not (0.0 <= u <= W - 1.0 and 0.0 <= v <= H - 1.0):
        return 0.0
    x0 = math.floor(u)
    y0 = math.floor(v)
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    fx = u - x0
    fy = v - y0
    ch = stack.values[k]
    top = (1.0 - fx) * float(ch[y0, x0]) + fx * float(ch[y0, x1])
    bot = (1.0 - fx) * float(ch[y1, x0]) + fx * float(ch[y1, x1])
    return (1.0 - fy) * top + fy * bot


def write_heatmaps(path, stack):
    """Serialize a stack to the PXH1 blob format (float32 payload)."""
    _blob.write_blob(path, _blob.HEATMAP_MAGIC, stack.values)


def read_heatmaps(path, joint_names=None, scale=1.0):
    """Read a PXH1 blob back into a HeatmapStack."""
    values = _blob.read_blob(path, _blob.HEATMAP_MAGIC)
    if joint_names is None:
        joint_names = default_joint_names(values.shape[0])
    return HeatmapStack(values=values, joint_names=joint_names, scale=scale)
