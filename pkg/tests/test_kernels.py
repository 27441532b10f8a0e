import os
import subprocess
import sys

import numpy as np
import pytest

from posevox import kernels

from conftest import oracle_bilinear

BOTH = kernels.available_backends()


@pytest.fixture(autouse=True)
def restore_backend():
    before = kernels.active_backend()
    yield
    kernels.use_backend(before)


def on_backend(name, fn, *args):
    kernels.use_backend(name)
    return getattr(kernels, fn)(*args)


def test_available_and_active():
    assert "numpy" in BOTH
    assert kernels.active_backend() in BOTH


def test_use_backend_switches_and_rejects():
    for name in BOTH:
        kernels.use_backend(name)
        assert kernels.active_backend() == name
    with pytest.raises(ValueError, match="unknown backend"):
        kernels.use_backend("fortran")


def test_env_var_selects_backend():
    env = dict(os.environ, POSEVOX_BACKEND="numpy")
    out = subprocess.run(
        [sys.executable, "-c",
         "from posevox import kernels; print(kernels.active_backend())"],
        env=env, capture_output=True, text=True,
    )
    assert out.returncode == 0
    assert out.stdout.strip() == "numpy"


def test_env_var_rejects_unknown_backend():
    env = dict(os.environ, POSEVOX_BACKEND="cuda")
    out = subprocess.run(
        [sys.executable, "-c", "import posevox.kernels"],
        env=env, capture_output=True, text=True,
    )
    assert out.returncode != 0
    assert "not available" in out.stderr


# --- bilinear sampling -------------------------------------------------------


def test_bilinear_accumulates_in_place():
    values = np.ones((1, 4, 4), np.float32)
    us = np.array([1.5])
    vs = np.array([2.5])
    valid = np.array([True])
    accum = np.full((1, 1), 10.0)
    kernels.bilinear_accumulate(values, us, vs, valid, accum)
    assert accum[0, 0] == pytest.approx(11.0)


def test_bilinear_invalid_and_outside_contribute_zero():
    values = np.ones((2, 4, 4), np.float32)
    us = np.array([1.0, -0.01, 3.01, 1.0])
    vs = np.array([1.0, 1.0, 1.0, 3.2])
    valid = np.array([False, True, True, True])
    accum = np.zeros((2, 4))
    kernels.bilinear_accumulate(values, us, vs, valid, accum)
    assert np.all(accum == 0.0)


@pytest.mark.parametrize("backend", BOTH)
def test_bilinear_matches_oracle(backend):
    rng = np.random.default_rng(80)
    for _ in range(50):
        K, H, W = 3, 7, 9
        values = rng.random((K, H, W)).astype(np.float32)
        n = 40
        us = rng.uniform(-2, W + 1, n)
        vs = rng.uniform(-2, H + 1, n)
        valid = rng.random(n) < 0.8
        accum = np.zeros((K, n))
        on_backend(backend, "bilinear_accumulate", values, us, vs, valid, accum)
        for k in range(K):
            for i in range(n):
                want = oracle_bilinear(values[k], us[i], vs[i]) if valid[i] else 0.0
                assert accum[k, i] == pytest.approx(want, abs=1e-9)


# --- gaussian rendering ------------------------------------------------------


def test_gaussian_peak_center_and_truncation():
    ch = np.zeros((1, 31, 31), np.float32)
    kernels.render_gaussian_peaks(
        ch, np.array([0]), np.array([15.0]), np.array([15.0]),
        np.array([1.0]), 2.0,
    )
    assert ch[0, 15, 15] == pytest.approx(1.0)
    assert ch[0, 15, 16] == pytest.approx(np.exp(-1.0 / 8.0), rel=1e-6)
    # support is cut at 3 sigma
    assert ch[0, 15, 15 + 7] == 0.0
    assert ch[0, 15, 15 + 6] > 0.0


def test_gaussian_max_composition():
    ch = np.zeros((1, 15, 15), np.float32)
    ks = np.array([0, 0])
    us = np.array([7.0, 7.0])
    vs = np.array([7.0, 7.0])
    kernels.render_gaussian_peaks(ch, ks, us, vs, np.array([0.4, 0.9]), 2.0)
    assert ch[0, 7, 7] == pytest.approx(0.9)


# --- cross-backend parity ----------------------------------------------------


needs_both = pytest.mark.skipif(
    len(BOTH) < 2, reason="only one kernel backend importable"
)


@needs_both
def test_parity_bilinear():
    rng = np.random.default_rng(81)
    for _ in range(30):
        values = rng.random((4, 12, 10)).astype(np.float32)
        n = 64
        us = rng.uniform(-1, 11, n)
        vs = rng.uniform(-1, 13, n)
        valid = rng.random(n) < 0.9
        base = rng.random((4, n))
        a1 = base.copy()
        a2 = base.copy()
        on_backend("numpy", "bilinear_accumulate", values, us, vs, valid, a1)
        on_backend("numba", "bilinear_accumulate", values, us, vs, valid, a2)
        assert np.allclose(a1, a2, atol=1e-12)


@needs_both
def test_parity_gaussian():
    rng = np.random.default_rng(82)
    for _ in range(30):
        shape = (3, 24, 20)
        m = 12
        ks = rng.integers(0, 3, m)
        us = rng.uniform(-4, 24, m)
        vs = rng.uniform(-4, 28, m)
        amps = rng.uniform(0.1, 1.0, m)
        c1 = np.zeros(shape, np.float32)
        c2 = np.zeros(shape, np.float32)
        on_backend("numpy", "render_gaussian_peaks", c1, ks, us, vs, amps, 2.5)
        on_backend("numba", "render_gaussian_peaks", c2, ks, us, vs, amps, 2.5)
        assert np.allclose(c1, c2, atol=1e-6)


@needs_both
def test_parity_conv3d_forward():
    rng = np.random.default_rng(83)
    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)):
        x = rng.normal(0, 1, (3, 6, 5, 4)).astype(np.float32)
        w = rng.normal(0, 0.5, (2, 3, k, k, k)).astype(np.float32)
        b = rng.normal(0, 0.5, 2).astype(np.float32)
        y1 = on_backend("numpy", "conv3d_forward", x, w, b, stride, pad)
        y2 = on_backend("numba", "conv3d_forward", x, w, b, stride, pad)
        assert y1.shape == y2.shape
        assert np.allclose(y1, y2, rtol=2e-5, atol=2e-6)


@needs_both
def test_parity_conv3d_forward_float64():
    rng = np.random.default_rng(84)
    x = rng.normal(0, 1, (2, 5, 5, 5))
    w = rng.normal(0, 0.5, (3, 2, 3, 3, 3))
    b = rng.normal(0, 0.5, 3)
    y1 = on_backend("numpy", "conv3d_forward", x, w, b, 1, 1)
    y2 = on_backend("numba", "conv3d_forward", x, w, b, 1, 1)
    assert np.allclose(y1, y2, rtol=1e-12, atol=1e-12)


@needs_both
def test_parity_conv3d_backward():
    rng = np.random.default_rng(85)
    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 2)):
        x = rng.normal(0, 1, (2, 6, 5, 4)).astype(np.float32)
        w = rng.normal(0, 0.5, (3, 2, k, k, k)).astype(np.float32)
        b = np.zeros(3, np.float32)
        dy = rng.normal(
            0, 1, kernels.conv3d_forward(x, w, b, stride, pad).shape
        ).astype(np.float32)
        dx1 = on_backend(
            "numpy", "conv3d_backward_input", dy, w, stride, pad, x.shape[1:]
        )
        dx2 = on_backend(
            "numba", "conv3d_backward_input", dy, w, stride, pad, x.shape[1:]
        )
        assert np.allclose(dx1, dx2, rtol=2e-5, atol=2e-6)
        dw1, db1 = on_backend(
            "numpy", "conv3d_backward_params", x, dy, k, stride, pad
        )
        dw2, db2 = on_backend(
            "numba", "conv3d_backward_params", x, dy, k, stride, pad
        )
        assert np.allclose(dw1, dw2, rtol=2e-5, atol=1e-4)
        assert np.allclose(db1, db2, rtol=2e-5, atol=1e-4)


@needs_both
def test_parity_nms_mask():
    rng = np.random.default_rng(86)
    for _ in range(40):
        scores = rng.random((7, 6, 5)).astype(np.float32)
        # heavy quantization forces plateaus and ties
        scores = np.round(scores * 4.0) / 4.0
        m1 = on_backend("numpy", "nms_peak_mask", scores)
        m2 = on_backend("numba", "nms_peak_mask", scores)
        assert np.array_equal(m1, m2)


@needs_both
def test_parity_full_pipeline_volume():
    from posevox.volume import build_feature_volume, make_coarse_grid
    from posevox.synth import ZERO_NOISE, render_scene_heatmaps, sample_scene
    from posevox.camera import make_circle_rig

    rig = make_circle_rig(3, 3600.0, (2500.0, 2800.0, 3100.0))
    scene = sample_scene(2, (5000.0, 5000.0, 2000.0), rig, 90)
    stacks = render_scene_heatmaps(scene, ZERO_NOISE, 90)
    grid = make_coarse_grid((5000.0, 5000.0, 2000.0), (16, 16, 8))
    views = list(zip(rig, stacks))
    kernels.use_backend("numpy")
    f1 = build_feature_volume(grid, views).features
    kernels.use_backend("numba")
    f2 = build_feature_volume(grid, views).features
    assert np.allclose(f1, f2, atol=1e-6)
