"""Hot numeric kernels with selectable backends.

Two interchangeable implementations of the inner loops live side by
side: a numba ``@njit`` backend (default when numba imports cleanly)
and a vectorized pure-numpy fallback.  The active backend is chosen
at import time from the ``POSEVOX_BACKEND`` environment variable
(``"numba"`` or ``"numpy"``) and can be switched at runtime with
:func:`use_backend`.  Both backends implement the same math; results
agree to float32 rounding and the test suite checks them against each
other.  ``benchmarks/bench_kernels.py`` compares their throughput.

Kernels kept here on purpose: multi-view bilinear sampling into voxel
grids, 2D Gaussian rendering, dense 3D convolution forward/backward,
and 3D non-maximum suppression.  Everything else in the package is
ordinary numpy.
"""

import os

from . import _numpy_impl

_BACKENDS = {"numpy": _numpy_impl}

try:
    from . import _numba_impl

    _BACKENDS["numba"] = _numba_impl
except ImportError:  # pragma: no cover - numba genuinely absent
    _numba_impl = None


def available_backends():
    """Names of importable kernel backends."""
    return sorted(_BACKENDS)


def _initial_backend():
    env = os.environ.get("POSEVOX_BACKEND", "").strip().lower()
    if env:
        if env not in _BACKENDS:
            raise RuntimeError(
                f"POSEVOX_BACKEND={env!r} is not available; "
                f"choose one of {available_backends()}"
            )
        return env
    return "numba" if "numba" in _BACKENDS else "numpy"


_active_name = _initial_backend()
_active = _BACKENDS[_active_name]


def use_backend(name):
    """Switch the active kernel backend ("numba" or "numpy")."""
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown backend {name!r}; available: {available_backends()}"
        )
    _active_name = name
    _active = _BACKENDS[name]


def active_backend():
    """Name of the backend currently answering kernel calls."""
    return _active_name


def bilinear_accumulate(values, us, vs, valid, accum):
    """Add bilinear samples of each channel to an accumulator.

    ``values`` is a (K, H, W) channel stack sampled at continuous pixel
    positions ``(us[n], vs[n])``; sample n of channel k is added to
    ``accum[k, n]``.  Positions with ``valid[n]`` false, or outside the
    closed domain [0, W-1] x [0, H-1], contribute zero.
    """
    return _active.bilinear_accumulate(values, us, vs, valid, accum)


def render_gaussian_peaks(channels, ks, us, vs, amps, sigma):
    """Max-compose isotropic Gaussian peaks into channels, in place.

    Peak j writes ``amps[j] * exp(-((x-us[j])^2 + (y-vs[j])^2) /
    (2 sigma^2))`` into channel ``ks[j]``, combined with the existing
    values by pixelwise maximum.  Support is truncated to the square
    window of half-width ``3 * sigma`` around the peak.
    """
    return _active.render_gaussian_peaks(channels, ks, us, vs, amps, sigma)


def conv3d_forward(x, w, b, stride, pad):
    """Dense 3D cross-correlation with zero padding and bias.

    ``x`` is (C_in, X, Y, Z), ``w`` is (C_out, C_in, k, k, k), ``b`` is
    (C_out,).  Output spatial size per axis is
    ``(size + 2*pad - k) // stride + 1``.
    """
    return _active.conv3d_forward(x, w, b, stride, pad)


def conv3d_backward_input(dy, w, stride, pad, in_shape):
    """Gradient of conv3d_forward w.r.t. its input, given upstream dy."""
    return _active.conv3d_backward_input(dy, w, stride, pad, in_shape)


def conv3d_backward_params(x, dy, k, stride, pad):
    """Gradients of conv3d_forward w.r.t. weight and bias -> (dw, db)."""
    return _active.conv3d_backward_params(x, dy, k, stride, pad)


def nms_peak_mask(scores):
    """Boolean mask of local maxima over the 26-neighborhood.

    A voxel is a peak iff its score beats every in-bounds neighbor:
    strictly greater, or equal while having the lexicographically
    smaller (i, j, k) index.  The tie rule keeps exactly one voxel of
    any plateau that fits inside one neighborhood, and never lets two
    adjacent voxels both be peaks.
    """
    return _active.nms_peak_mask(scores)
