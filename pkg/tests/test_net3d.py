import numpy as np
import pytest

from posevox.net3d import (
    NetWeights,
    TrainConfig,
    TrainScene,
    TrainingDivergedError,
    add_layer,
    backward,
    channel_signature,
    conv_layer,
    default_descriptor,
    descriptor_from_json,
    descriptor_to_json,
    forward,
    init_weights,
    load_weights,
    resblock_layer,
    save_layer,
    save_weights,
    train_joint,
    upsample_layer,
)
from posevox.synth import ZERO_NOISE, render_scene_heatmaps, sample_scene
from posevox.volume import make_coarse_grid


def to_f64(net):
    return NetWeights(
        descriptor=net.descriptor,
        params=[p.astype(np.float64) for p in net.params],
    )


def conv_oracle(x, w, b, stride, pad):
    """Direct 7-loop cross-correlation."""
    c_out, c_in, k, _, _ = w.shape
    X, Y, Z = x.shape[1:]
    xp = np.zeros((c_in, X + 2 * pad, Y + 2 * pad, Z + 2 * pad), x.dtype)
    xp[:, pad : pad + X, pad : pad + Y, pad : pad + Z] = x
    ox = (X + 2 * pad - k) // stride + 1
    oy = (Y + 2 * pad - k) // stride + 1
    oz = (Z + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ox, oy, oz), np.float64)
    for co in range(c_out):
        for i in range(ox):
            for j in range(oy):
                for l in range(oz):
                    acc = 0.0
                    for ci in range(c_in):
                        for a in range(k):
                            for bb in range(k):
                                for c in range(k):
                                    acc += (
                                        xp[ci, i * stride + a,
                                           j * stride + bb, l * stride + c]
                                        * w[co, ci, a, bb, c]
                                    )
                    out[co, i, j, l] = acc + b[co]
    return out


def eval_and_pattern(net, x, dy):
    """Objective value sum(forward(x) * dy) plus the on/off pattern of
    every relu in the net (a finite difference that flips any relu is
    probing across a kink and carries no gradient information)."""
    tape = []
    y = forward(net, x, tape)
    bits = []
    for li, layer in enumerate(net.descriptor):
        kind = layer["kind"]
        if kind == "conv" and layer["relu"]:
            bits.append(tape[li][1] > 0)
        elif kind == "resblock":
            _, h1, yy = tape[li]
            bits.append(h1 > 0)
            bits.append(yy > 0)
    return float(np.sum(y * dy)), bits


def max_rel_err(analytic, numeric):
    scale = max(1.0, abs(analytic), abs(numeric))
    return abs(analytic - numeric) / scale


def check_gradients(desc, in_shape, seed, per_tensor=25, h=1e-3, per_input=None):
    """Worst relative error between backward() and central differences
    over every input coordinate (or a ``per_input``-sized sample) and a
    parameter sample, skipping the few coordinates whose +/-h probes
    straddle a relu kink."""
    net = to_f64(init_weights(desc, seed=seed))
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(0.0, 1.0, in_shape)
    tape = []
    y = forward(net, x, tape)
    dy = rng.normal(0.0, 1.0, y.shape)
    dx, grads = backward(net, tape, dy)

    worst = 0.0
    checked = skipped = 0

    def probe(flat, i, analytic):
        nonlocal worst, checked, skipped
        old = flat[i]
        flat[i] = old + h
        fp, pat_p = eval_and_pattern(net, x, dy)
        flat[i] = old - h
        fm, pat_m = eval_and_pattern(net, x, dy)
        flat[i] = old
        if any(not np.array_equal(p, q) for p, q in zip(pat_p, pat_m)):
            skipped += 1
            return
        checked += 1
        worst = max(worst, max_rel_err(analytic, (fp - fm) / (2.0 * h)))

    xf = x.reshape(-1)
    dxf = dx.reshape(-1)
    if per_input is None or per_input >= xf.size:
        in_idxs = range(xf.size)
    else:
        in_idxs = rng.choice(xf.size, size=per_input, replace=False)
    for i in in_idxs:
        probe(xf, int(i), dxf[int(i)])
    for ti, p in enumerate(net.params):
        flat = p.reshape(-1)
        gf = grads[ti].reshape(-1)
        idxs = rng.choice(
            flat.size, size=min(per_tensor, flat.size), replace=False
        )
        for i in idxs:
            probe(flat, int(i), gf[int(i)])
    assert checked >= 3 * (checked + skipped) // 4
    return worst


# --- forward fixtures -------------------------------------------------------


def test_conv_1x1_identity():
    desc = [conv_layer(1, 1, k=1, relu=False)]
    w = NetWeights(
        descriptor=desc,
        params=[np.ones((1, 1, 1, 1, 1), np.float32), np.zeros(1, np.float32)],
    )
    rng = np.random.default_rng(50)
    x = rng.normal(0, 1, (1, 3, 4, 5)).astype(np.float32)
    assert np.allclose(forward(w, x), x, atol=1e-7)


def test_conv_all_ones_center_27():
    desc = [conv_layer(1, 1, k=3, stride=1, pad=1, relu=False)]
    w = NetWeights(
        descriptor=desc,
        params=[np.ones((1, 1, 3, 3, 3), np.float32), np.zeros(1, np.float32)],
    )
    x = np.ones((1, 3, 3, 3), np.float32)
    y = forward(w, x)
    assert y.shape == (1, 3, 3, 3)
    assert y[0, 1, 1, 1] == pytest.approx(27.0)
    assert y[0, 0, 0, 0] == pytest.approx(8.0)  # corner: 2x2x2 support


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(51)
    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)):
        desc = [conv_layer(2, 3, k=k, stride=stride, pad=pad, relu=False)]
        net = to_f64(init_weights(desc, seed=int(rng.integers(1 << 30))))
        x = rng.normal(0, 1, (2, 4, 4, 4))
        got = forward(net, x)
        want = conv_oracle(x, net.params[0], net.params[1], stride, pad)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-6)


def test_conv_relu_clamps():
    desc = [conv_layer(1, 1, k=1, relu=True)]
    w = NetWeights(
        descriptor=desc,
        params=[np.ones((1, 1, 1, 1, 1), np.float32), np.zeros(1, np.float32)],
    )
    x = np.array([[-2.0, 3.0]], np.float32).reshape(1, 1, 1, 2)
    assert np.allclose(forward(w, x).reshape(-1), [0.0, 3.0])


def identity_conv_params(c, dtype=np.float32):
    w = np.zeros((c, c, 1, 1, 1), dtype)
    for i in range(c):
        w[i, i, 0, 0, 0] = 1.0
    return w, np.zeros(c, dtype)


def resblock_net(c, seed, dtype=np.float32):
    """Identity 1x1x1 conv feeding one residual block."""
    desc = [conv_layer(c, c, k=1, relu=False), resblock_layer(c)]
    net = init_weights(desc, seed=seed)
    net.params[0], net.params[1] = identity_conv_params(c, dtype)
    return NetWeights(
        descriptor=desc, params=[p.astype(dtype) for p in net.params]
    )


def test_resblock_zero_weights_is_relu_passthrough():
    net = resblock_net(2, seed=0)
    for p in net.params[2:]:
        p[...] = 0.0
    rng = np.random.default_rng(52)
    x = np.abs(rng.normal(0, 1, (2, 3, 3, 3))).astype(np.float32)
    assert np.allclose(forward(net, x), x, atol=1e-7)
    xneg = -x
    assert np.allclose(forward(net, xneg), 0.0)


def test_resblock_matches_composed_convs():
    rng = np.random.default_rng(53)
    net = resblock_net(2, seed=9, dtype=np.float64)
    w1, b1, w2, b2 = net.params[2:]
    x = rng.normal(0, 1, (2, 4, 4, 4))
    h1 = np.maximum(conv_oracle(x, w1, b1, 1, 1), 0.0)
    h2 = conv_oracle(h1, w2, b2, 1, 1) + x
    want = np.maximum(h2, 0.0)
    assert np.allclose(forward(net, x), want, atol=1e-6)


def test_upsample_round_trips_odd_sizes():
    desc = [
        conv_layer(1, 1, 3, stride=2),
        upsample_layer(),
        conv_layer(1, 1, 1, relu=False),
    ]
    net = init_weights(desc, seed=1)
    x = np.random.default_rng(54).random((1, 5, 7, 3)).astype(np.float32)
    assert forward(net, x).shape == (1, 5, 7, 3)


def test_forward_shape_validation():
    net = init_weights(default_descriptor(2, 1, width=4), seed=0)
    with pytest.raises(ValueError):
        forward(net, np.zeros((3, 4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4, 4), np.float32))


# --- descriptor validation ---------------------------------------------------


def test_descriptor_round_trip():
    desc = default_descriptor(15, 15, width=32)
    text = descriptor_to_json(desc)
    back = descriptor_from_json(text)
    assert back == desc
    assert descriptor_to_json(back) == text
    assert channel_signature(desc) == (15, 15)


def test_descriptor_rejects_bad_chains():
    with pytest.raises(ValueError):
        channel_signature([conv_layer(2, 4), conv_layer(3, 4)])
    with pytest.raises(ValueError):
        channel_signature([conv_layer(2, 4), resblock_layer(3)])
    with pytest.raises(ValueError):
        channel_signature([conv_layer(2, 4), upsample_layer()])
    with pytest.raises(ValueError):
        channel_signature([conv_layer(2, 4), add_layer()])
    with pytest.raises(ValueError):
        channel_signature([conv_layer(2, 4), save_layer()])
    with pytest.raises(ValueError):
        channel_signature([])
    with pytest.raises(ValueError):
        channel_signature([{"kind": "warp"}])


# --- gradients ---------------------------------------------------------------


def test_gradient_identity_layer():
    desc = [conv_layer(1, 1, k=1, relu=False)]
    net = to_f64(
        NetWeights(
            descriptor=desc,
            params=[np.ones((1, 1, 1, 1, 1)), np.zeros(1)],
        )
    )
    x = np.random.default_rng(55).normal(0, 1, (1, 2, 2, 2))
    tape = []
    forward(net, x, tape)
    dy = np.random.default_rng(56).normal(0, 1, (1, 2, 2, 2))
    dx, _ = backward(net, tape, dy)
    assert np.allclose(dx, dy, atol=1e-12)


def test_gradcheck_single_conv():
    assert check_gradients([conv_layer(2, 3, k=3)], (2, 4, 4, 4), 60) < 1e-4


def test_gradcheck_strided_conv():
    assert (
        check_gradients([conv_layer(2, 2, k=3, stride=2)], (2, 5, 5, 5), 61)
        < 1e-4
    )


def test_gradcheck_linear_conv():
    assert (
        check_gradients([conv_layer(2, 2, k=1, relu=False)], (2, 3, 3, 3), 62)
        < 1e-4
    )


def test_gradcheck_resblock():
    desc = [conv_layer(2, 2, k=1, relu=False), resblock_layer(2)]
    assert check_gradients(desc, (2, 4, 4, 4), 63) < 1e-4


def test_gradcheck_upsample_path():
    desc = [
        conv_layer(1, 2, 3, stride=2),
        upsample_layer(),
        conv_layer(2, 1, 1, relu=False),
    ]
    assert check_gradients(desc, (1, 5, 5, 5), 64) < 1e-4


def test_gradcheck_skip_addition():
    desc = [
        conv_layer(1, 2, 3),
        save_layer(),
        conv_layer(2, 2, 3, stride=2),
        upsample_layer(),
        add_layer(),
        conv_layer(2, 1, 1, relu=False),
    ]
    assert check_gradients(desc, (1, 4, 4, 4), 65) < 1e-4


def test_gradcheck_full_default_net():
    desc = default_descriptor(2, 2, width=4)
    assert check_gradients(desc, (2, 8, 8, 4), 66, per_tensor=10) < 1e-3


# --- weights & serialization -------------------------------------------------


def test_init_deterministic_and_finite():
    a = init_weights(default_descriptor(3, 1, width=8), seed=7)
    b = init_weights(default_descriptor(3, 1, width=8), seed=7)
    c = init_weights(default_descriptor(3, 1, width=8), seed=8)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa, pb)
        assert np.isfinite(pa).all()
    assert any(
        not np.array_equal(pa, pc) for pa, pc in zip(a.params, c.params)
    )


def test_weight_file_round_trip(tmp_path):
    net = init_weights(default_descriptor(5, 5, width=8), seed=3)
    path = tmp_path / "net.pxw"
    save_weights(path, net)
    back = load_weights(path, expect_descriptor=net.descriptor)
    assert back.descriptor == net.descriptor
    for p, q in zip(net.params, back.params):
        assert np.array_equal(p, q)
    save_weights(tmp_path / "net2.pxw", back)
    assert (tmp_path / "net.pxw").read_bytes() == (
        tmp_path / "net2.pxw"
    ).read_bytes()


def test_weight_file_rejects_mismatch(tmp_path):
    net = init_weights(default_descriptor(5, 5, width=8), seed=3)
    path = tmp_path / "net.pxw"
    save_weights(path, net)
    with pytest.raises(ValueError, match="descriptor"):
        load_weights(path, expect_descriptor=default_descriptor(5, 5, width=16))
    data = path.read_bytes()
    (tmp_path / "trunc.pxw").write_bytes(data[:-8])
    with pytest.raises(Exception):
        load_weights(tmp_path / "trunc.pxw")
    (tmp_path / "trail.pxw").write_bytes(data + b"\x00\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_weights(tmp_path / "trail.pxw")
    (tmp_path / "magic.pxw").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError, match="magic"):
        load_weights(tmp_path / "magic.pxw")


def test_positive_homogeneity_of_final_stage():
    rng = np.random.default_rng(70)
    net = init_weights(default_descriptor(2, 3, width=4), seed=11)
    x = rng.random((2, 6, 6, 4)).astype(np.float32)
    base = forward(net, x)
    for s in (0.5, 2.0, 7.0):
        scaled = net.copy()
        scaled.params[-2] *= s
        scaled.params[-1] *= s
        assert np.allclose(forward(scaled, x), s * base, atol=1e-4)


def test_net_weights_shape_validation():
    desc = [conv_layer(1, 1, k=1)]
    with pytest.raises(ValueError):
        NetWeights(descriptor=desc, params=[np.zeros((2, 1, 1, 1, 1))])


# --- training ----------------------------------------------------------------


def tiny_scenes(n, seed=200):
    from posevox.camera import make_circle_rig

    rig = make_circle_rig(3, 3600.0, (2500.0, 2700.0, 2900.0),
                          image_size=(96, 96), focal=48.0)
    scenes = []
    for i in range(n):
        sc = sample_scene(1, (4000.0, 4000.0, 2000.0), rig, seed + i)
        stacks = render_scene_heatmaps(sc, ZERO_NOISE, seed + i)
        scenes.append(
            TrainScene(views=list(zip(rig, stacks)), gt_joints=sc.gt_joints)
        )
    return scenes


def tiny_config(**over):
    grid = make_coarse_grid((4000.0, 4000.0, 2000.0), (10, 10, 5))
    kw = dict(
        coarse_grid=grid,
        epochs=2,
        lr_schedule=((1, 1e-4),),
        seed=0,
        optimizer="sgd",
        cpn_width=4,
        prn_width=4,
        fine_resolution=(8, 8, 8),
        teacher_forcing_epochs=100,
    )
    kw.update(over)
    return TrainConfig(**kw)


def test_lr_schedule_lookup():
    cfg = tiny_config(lr_schedule=((1, 1e-4), (3, 1e-5)))
    assert cfg.learning_rate(1) == 1e-4
    assert cfg.learning_rate(2) == 1e-4
    assert cfg.learning_rate(3) == 1e-5
    assert cfg.learning_rate(9) == 1e-5
    with pytest.raises(ValueError):
        tiny_config(lr_schedule=((2, 1e-4),)).learning_rate(1)


def test_training_deterministic_per_seed():
    scenes = tiny_scenes(2)
    cpn1, prn1, curve1 = train_joint(scenes, tiny_config())
    cpn2, prn2, curve2 = train_joint(scenes, tiny_config())
    assert curve1 == curve2
    for p, q in zip(cpn1.params + prn1.params, cpn2.params + prn2.params):
        assert np.array_equal(p, q)


def test_training_curve_shape_and_lr_echo():
    scenes = tiny_scenes(1)
    _, _, curve = train_joint(
        scenes, tiny_config(epochs=3, lr_schedule=((1, 1e-4), (3, 2e-5)))
    )
    assert [c["epoch"] for c in curve] == [1, 2, 3]
    assert [c["lr"] for c in curve] == [1e-4, 1e-4, 2e-5]
    for c in curve:
        assert c["total_loss"] == pytest.approx(
            c["cpn_loss"] + c["prn_loss"]
        )


def test_single_scene_overfit():
    # 200 optimizer steps on one scene should collapse the loss
    scenes = tiny_scenes(1, seed=207)
    cfg = tiny_config(
        epochs=200,
        optimizer="adam",
        lr_schedule=((1, 1e-3),),
        cpn_width=8,
        prn_width=8,
        teacher_forcing_epochs=200,
    )
    _, _, curve = train_joint(scenes, cfg)
    assert curve[-1]["total_loss"] < 0.05 * curve[0]["total_loss"]


def test_training_proposal_phase_runs():
    scenes = tiny_scenes(1)
    cfg = tiny_config(epochs=2, teacher_forcing_epochs=1)
    _, _, curve = train_joint(scenes, cfg)
    assert len(curve) == 2
    assert np.isfinite(curve[-1]["total_loss"])


def test_batched_updates_run():
    scenes = tiny_scenes(3)
    cfg = tiny_config(batch_size=2)
    _, _, curve = train_joint(scenes, cfg)
    assert len(curve) == 2


def test_divergence_guard():
    scenes = tiny_scenes(1)
    cfg = tiny_config(epochs=4, lr_schedule=((1, 1e22),))
    with pytest.raises(TrainingDivergedError):
        train_joint(scenes, cfg)


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train_joint([], tiny_config())
