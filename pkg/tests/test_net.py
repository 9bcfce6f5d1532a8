import numpy as np
import pytest

from gradseg import losses
from gradseg.net import (
    BlockSpec,
    Conv3d,
    ConvBlock,
    GroupHead,
    InstanceNorm,
    Net,
    NetError,
    NetSpec,
    ReLU,
    Sample,
    Sigmoid,
    SpatialAttention,
    SpatialDropout,
    SupervisionScheme,
    Upsample,
    attention_map,
    attention_probe,
    averaging_kernels,
    conv_block_forward,
    erosion_dilation_probe,
    forward_backward,
    group_predict,
    net_gradient_check,
    read_checkpoint,
    seed_gradient,
    unet,
    write_checkpoint,
)
from gradseg.net.layers import MaxPool, concat, split


def toy4(groups=(0, 0, 1, 1)):
    blocks = (
        BlockSpec(1, 2, 1, 0, "encoder"),
        BlockSpec(2, 4, 2, 1, "bottleneck"),
        BlockSpec(6, 2, 2, 0, "decoder", skip=0),
        BlockSpec(2, 2, 1, 0, "decoder"),
    )
    return NetSpec(blocks, groups)


def toy_sample(n=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((1, n, n, n))
    gt = np.zeros((n, n, n), np.uint8)
    gt[n // 2 - 2:n // 2 + 2, n // 2 - 2:n // 2 + 2, :] = 1
    from scipy import ndimage as ndi

    d = ndi.distance_transform_edt(gt)
    dist = np.where(gt > 0, 1.0 - d / d.max(), 0.0)
    return Sample(x, gt, dist)


# primitives ----------------------------------------------------------------

def _fd_layer(make, shape, dtype, n_probe=25, h=1e-6, seed=0, train_kw=None):
    """Max relative error of a layer's input and parameter gradients.

    The analytic side runs in ``dtype``; the numeric side on a float64 twin.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    layer, twin = make(dtype), make(np.float64)
    for k in layer.params:
        twin.params[k][...] = layer.params[k]
    kw = train_kw or {}
    y = layer.forward(x.astype(dtype), **kw)
    r = rng.standard_normal(y.shape)
    layer.zero_grad()
    gx = layer.backward(r.astype(dtype))

    def loss(inp):
        return float((twin.forward(inp, **kw) * r).sum())

    worst = 0.0
    targets = [("x", x, gx)] + [(k, twin.params[k], layer.grads[k]) for k in layer.params]
    for name, arr, ana in targets:
        flat = arr.reshape(-1)
        scale = 1e-4 * np.abs(ana).max()
        for j in rng.choice(flat.size, min(n_probe, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            up = loss(x)
            flat[j] = old - h
            down = loss(x)
            flat[j] = old
            num = (up - down) / (2 * h)
            a = float(ana.reshape(-1)[j])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), scale, 1e-12))
    return worst


def _fixed_dropout(dtype):
    d = SpatialDropout(0.4)
    d.keep = np.array([True, False, True])
    d.frozen = True
    return d


PRIMITIVES = {
    "conv3": (lambda dt: Conv3d(2, 3, 3, np.random.default_rng(1), dt), (2, 5, 4, 6)),
    "conv1": (lambda dt: Conv3d(3, 2, 1, np.random.default_rng(1), dt), (3, 4, 4, 4)),
    "instancenorm": (lambda dt: InstanceNorm(), (2, 4, 4, 4)),
    "relu": (lambda dt: ReLU(), (2, 4, 4, 4)),
    "sigmoid": (lambda dt: Sigmoid(), (2, 4, 4, 4)),
    "attention": (lambda dt: SpatialAttention(3, np.random.default_rng(2), dt), (3, 4, 4, 4)),
    "upsample_nearest": (lambda dt: Upsample(2, "nearest"), (2, 3, 3, 3)),
    "upsample_trilinear": (lambda dt: Upsample(2, "trilinear"), (2, 3, 3, 3)),
    "maxpool": (lambda dt: MaxPool(), (2, 4, 4, 4)),
    "dropout_frozen": (_fixed_dropout, (3, 4, 4, 4)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    make, shape = PRIMITIVES[name]
    kw = {"training": True} if name.startswith("dropout") else None
    assert _fd_layer(make, shape, np.float64, train_kw=kw) < 1e-6
    assert _fd_layer(make, shape, np.float32, train_kw=kw) < 1e-4


def test_concat_split_roundtrip():
    a, b = np.ones((2, 3, 3, 3)), np.zeros((1, 3, 3, 3))
    c = concat([a, b])
    x, y = split(c, [2, 1])
    assert c.shape == (3, 3, 3, 3) and np.array_equal(x, a) and np.array_equal(y, b)


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    conv = Conv3d(2, 3, 3, rng, np.float64)
    conv.params["b"][:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 5, 6, 7))
    y = conv.forward(x)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    W = conv.params["W"]
    ref = np.zeros_like(y)
    for o in range(3):
        for i in range(5):
            for j in range(6):
                for k in range(7):
                    ref[o, i, j, k] = (W[o] * xp[:, i:i + 3, j:j + 3, k:k + 3]).sum() + conv.params["b"][o]
    assert np.allclose(y, ref, atol=1e-12)


def test_conv_chunking_invariant():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 9, 8, 8))
    conv = Conv3d(2, 2, 3, np.random.default_rng(0), np.float64)
    y = conv.forward(x)
    g = conv.backward(y)
    small = Conv3d(2, 2, 3, np.random.default_rng(0), np.float64)
    small.CHUNK = 64
    assert np.allclose(small.forward(x), y, atol=1e-12)
    assert np.allclose(small.backward(y), g, atol=1e-12)


def test_instancenorm_constant_channel_is_zero():
    x = np.full((2, 4, 4, 4), 3.0)
    assert np.all(InstanceNorm().forward(x) == 0)


def test_upsample_trilinear_preserves_constant():
    up = Upsample(4, "trilinear")
    assert np.allclose(up.forward(np.full((1, 3, 3, 3), 2.5)), 2.5)


# blocks and heads ----------------------------------------------------------

def test_conv_block_identity_limit():
    rng = np.random.default_rng(0)
    blk = ConvBlock(1, 1, stages=2, rng=rng, dtype=np.float64)
    blk.conv.params["W"][...] = 0
    blk.conv.params["W"][0, 0, 1, 1, 1] = 1.0
    for a in blk.att:
        a.params["W"][...] = 0
        a.params["b"][...] = 40.0
    x = rng.standard_normal((1, 6, 6, 6))
    fb, fg = conv_block_forward(blk, x)
    expect = np.maximum(InstanceNorm().forward(x), 0)
    assert fg is None
    assert np.max(np.abs(fb - expect)) < 1e-6


def test_conv_block_zero_input():
    blk = ConvBlock(2, 3, stages=1, head_factor=2, rng=np.random.default_rng(0))
    fb, fg = conv_block_forward(blk, np.zeros((2, 4, 4, 4), np.float32))
    assert np.all(fb == 0) and fg.shape == (2, 8, 8, 8)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-4), (np.float64, 1e-6)])
def test_conv_block_gradients(dtype, tol):
    def make(dt):
        return ConvBlock(2, 3, stages=2, rng=np.random.default_rng(5), dtype=dt)

    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 8, 8))
    blk, twin = make(dtype), make(np.float64)
    for la, lb in zip(blk.layers(), twin.layers()):
        for k in la.params:
            lb.params[k][...] = la.params[k]
    y, _ = blk.forward(x.astype(dtype))
    r = rng.standard_normal(y.shape)
    for layer in blk.layers():
        layer.zero_grad()
    gx = blk.backward(r.astype(dtype))

    def loss():
        return float((twin.forward(x)[0] * r).sum())

    # The conv bias feeds InstanceNorm, so its true gradient is exactly 0 and a
    # relative error is undefined there; it is checked against zero instead.
    top = max(np.abs(gx).max(), *(np.abs(la.grads["W"]).max() for la in blk.layers()))
    assert np.abs(blk.conv.grads["b"]).max() < 1e-3 * top
    targets = [(x, gx)] + [
        (lb.params[k], la.grads[k])
        for la, lb in zip(blk.layers(), twin.layers())
        for k in la.params
        if not (la is blk.conv and k == "b")
    ]
    h = 1e-5
    worst = 0.0
    for arr, ana in targets:
        flat = arr.reshape(-1)
        for j in rng.choice(flat.size, min(15, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            up = loss()
            flat[j] = old - h
            down = loss()
            flat[j] = old
            num = (up - down) / (2 * h)
            a = float(ana.reshape(-1)[j])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-4 * top))
    assert worst < tol


def test_group_head_zero_weights():
    head = GroupHead(2, rng=np.random.default_rng(0))
    head.conv.params["W"][...] = 0
    p = group_predict(head, [np.random.default_rng(1).standard_normal((2, 4, 4, 4)).astype(np.float32)])
    assert p.shape == (4, 4, 4) and np.all(p == 0.5)


def test_group_head_no_dropout_train_equals_eval():
    head = GroupHead(4, dropout=0.0, rng=np.random.default_rng(0))
    pyr = [np.random.default_rng(i).standard_normal((2, 4, 4, 4)).astype(np.float32) for i in range(2)]
    a = group_predict(head, pyr, training=True, rng=np.random.default_rng(0))
    b = group_predict(head, pyr, training=False)
    assert np.array_equal(a, b)


def test_group_head_resolution_mismatch():
    head = GroupHead(4, rng=np.random.default_rng(0))
    with pytest.raises(NetError):
        head.forward([np.zeros((2, 4, 4, 4)), np.zeros((2, 8, 8, 8))])


def test_dropout_keep_rate_monte_carlo():
    d = SpatialDropout(0.3)
    rng = np.random.default_rng(0)
    x = np.ones((1, 2, 2, 2))
    kept = 0
    for _ in range(10000):
        kept += int(d.forward(x, training=True, rng=rng)[0, 0, 0, 0] > 0)
    assert abs(kept / 10000 - 0.7) < 0.01
    y = d.forward(np.ones((50, 2, 2, 2)), training=True, rng=rng)
    vals = np.unique(y)
    assert np.all((vals == 0) | np.isclose(vals, 1 / 0.7))
    assert np.array_equal(d.forward(x, training=False), x)


# specs and schemes ---------------------------------------------------------

def test_netspec_validation():
    with pytest.raises(NetError):
        NetSpec((BlockSpec(1, 2), BlockSpec(3, 2)), (0, 0))
    with pytest.raises(NetError):
        NetSpec((BlockSpec(1, 2), BlockSpec(2, 2)), (0,))
    with pytest.raises(NetError):
        NetSpec((BlockSpec(1, 2), BlockSpec(2, 2)), (0, 2))
    with pytest.raises(NetError):
        BlockSpec(1, 2, stages=3)
    spec = unet()
    assert len(spec.blocks) == 10 and spec.blocks[6].cin == 16 + 8
    assert NetSpec.from_dict(spec.to_dict()) == spec


def test_scheme_partitions():
    spec = unet()
    assert SupervisionScheme("final").partition(spec) == [-1] * 9 + [0]
    assert SupervisionScheme("groups", 2).partition(spec) == [0] * 5 + [1] * 5
    assert SupervisionScheme("groups", 3, "cross").partition(spec) == [i % 3 for i in range(10)]
    assert SupervisionScheme("per_block").partition(spec) == list(range(10))
    assert SupervisionScheme("encoder_decoder").partition(spec) == [0] * 6 + [1] * 4
    deep = SupervisionScheme("deep").partition(spec)
    assert [i for i, g in enumerate(deep) if g >= 0] == [5, 7, 9]
    with pytest.raises(NetError):
        SupervisionScheme("groups", 11).partition(spec)
    with pytest.raises(NetError):
        SupervisionScheme("weird")


def test_group_alpha_sides():
    spec = unet(scheme=SupervisionScheme("encoder_decoder"))
    sch = SupervisionScheme("encoder_decoder", alpha_e=0.1, alpha_d=0.3)
    assert sch.alpha_for(spec, 0, 0.5) == 0.1 and sch.alpha_for(spec, 1, 0.5) == 0.3
    assert SupervisionScheme().alpha_for(spec, 0, 0.5) == 0.5


# whole net -----------------------------------------------------------------

def test_final_scheme_one_loss():
    net = Net(unet(channels=(2, 4), blocks_per_level=1, single_stage=1), seed=0)
    s = toy_sample(8)
    out = forward_backward(net, SupervisionScheme("final"), [s], "dice")
    assert len(out) == 1


def test_encoder_group_weight_zero_equals_decoder_only():
    scheme = SupervisionScheme("groups", 2)
    spec = unet(channels=(2, 4), blocks_per_level=2, single_stage=1, scheme=scheme)
    assert len(spec.blocks) == 6 and spec.groups == (0, 0, 0, 1, 1, 1)
    s = toy_sample(8)
    a = Net(spec, seed=3, dtype=np.float64)
    forward_backward(a, SupervisionScheme("groups", 2, loss_weights=(0.0, 1.0)), [s], "tversky", training=False)
    b = Net(spec, seed=3, dtype=np.float64)
    probs = b.forward(s.x)
    res = losses.evaluate("tversky", probs[1], s.gt)
    b.backward([None, res.gradient])
    for (name, la, k), (_, lb, _) in zip(a.named_params(), b.named_params()):
        assert np.allclose(la.grads[k], lb.grads[k], atol=1e-6), name
    assert not all(np.all(g == 0) for g in a.grads())


def test_group_paths_wired():
    scheme = SupervisionScheme("groups", 2)
    net = Net(unet(channels=(2, 4), blocks_per_level=2, single_stage=1, scheme=scheme), seed=0)
    forward_backward(net, scheme, [toy_sample(8)], "tversky")
    for blk in net.blocks:
        if blk.head is not None:
            assert np.any(blk.head.grads["W"] != 0)


def test_whole_net_gradient_check():
    scheme = SupervisionScheme("groups", 2)
    net = Net(toy4(), seed=0)
    res = net_gradient_check(net, scheme, toy_sample(16), "tversky", n_params=100, seed=0)
    assert len(res.names) == 100
    assert res.max_rel_error < 1e-3


@pytest.mark.parametrize("kind", ["general_union", "dice_wbce"])
def test_whole_net_gradient_check_other_losses(kind):
    net = Net(toy4(), seed=1, dtype=np.float64)
    cfg = losses.LossConfig(epsilon=1e-12)
    res = net_gradient_check(net, SupervisionScheme("groups", 2), toy_sample(16, 1), kind, cfg, n_params=30, seed=1)
    assert res.max_rel_error < 1e-5


def test_nan_input_names_block():
    net = Net(toy4(), seed=0)
    x = np.zeros((1, 16, 16, 16))
    x[0, 3, 3, 3] = np.nan
    with pytest.raises(FloatingPointError, match="block 0"):
        net.forward(x)


def test_input_shape_checks():
    net = Net(toy4(), seed=0)
    with pytest.raises(NetError):
        net.forward(np.zeros((1, 15, 16, 16)))
    with pytest.raises(NetError):
        net.forward(np.zeros((2, 16, 16, 16)))


def test_inference_ignores_other_heads():
    net = Net(toy4(), seed=0)
    x = toy_sample(16).x
    full = net.forward(x)[-1]
    for head in net.heads[:-1]:
        head.conv.params["W"][...] = 1e3
    for i, blk in enumerate(net.blocks):
        if blk.head is not None and net.spec.groups[i] == net.order[0]:
            blk.head.params["W"][...] = -7.0
    assert np.array_equal(net.predict(x), full)


def test_determinism():
    def run():
        scheme = SupervisionScheme("groups", 2)
        net = Net(toy4(), seed=4)
        out = forward_backward(net, scheme, [toy_sample(16)], "general_union")
        return out, [g.copy() for g in net.grads()]

    (la, ga), (lb, gb) = run(), run()
    assert la == lb and all(np.array_equal(a, b) for a, b in zip(ga, gb))


def test_checkpoint_roundtrip(tmp_path):
    net = Net(toy4(), seed=2)
    write_checkpoint(net, tmp_path / "m.ckpt", {"epoch": 3})
    back, extra = read_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"epoch": 3} and back.spec == net.spec
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))
    x = toy_sample(16).x
    assert np.array_equal(back.predict(x), net.predict(x))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-3])
    with pytest.raises(NetError):
        read_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nope" + raw)
    with pytest.raises(NetError):
        read_checkpoint(tmp_path / "junk.ckpt")


# probes --------------------------------------------------------------------

def test_attention_map_contract():
    t = np.where(np.random.default_rng(0).random((1, 4, 4, 4)) > 0.5, 2.0, -2.0)
    assert np.all(attention_map(t) == 1.0)
    assert np.all(attention_map(np.zeros((3, 4, 4, 4))) == 0)


def test_attention_probe_normalised():
    scheme = SupervisionScheme("groups", 2)
    net = Net(toy4(), seed=0)
    forward_backward(net, scheme, [toy_sample(16)], "tversky")
    outs, grads = attention_probe(net)
    assert len(outs) == len(grads) == 4
    for m in outs + grads:
        assert m.min() >= 0 and (m.max() == 1.0 or m.max() == 0.0)
    with pytest.raises(RuntimeError):
        attention_probe(Net(toy4(), seed=0))


def test_probe_identity():
    fg = np.zeros((9, 9, 9), bool)
    fg[4, 4, 4] = True
    t = erosion_dilation_probe([], seed_gradient(fg, 7.0), fg)
    assert t.ratio == [7.0] and t.abs_ratio == [7.0]


def test_probe_erosion_and_dilation():
    fg = np.zeros((15, 15, 15), bool)
    fg[7, 7, 7] = True
    k = averaging_kernels(5)
    ero = erosion_dilation_probe(k, seed_gradient(fg, 1.0), fg)
    assert all(a > b for a, b in zip(ero.ratio, ero.ratio[1:]))
    dil = erosion_dilation_probe(k, seed_gradient(fg, 50.0), fg)
    assert dil.shell_ratio[0] == -1.0 and dil.shell_ratio[1] > 1.0


def test_gradient_attention_tversky_vs_dice():
    n = 16
    gt = np.zeros((n, n, n), np.uint8)
    gt[7:9, 7:9, :] = 1
    x = np.where(gt > 0, 0.2, 0.8)[None] + np.random.default_rng(0).normal(0, 0.05, (1, n, n, n))
    s = Sample(x, gt)
    fg = gt > 0

    def ratio(kind, cfg):
        net = Net(toy4((-1, -1, -1, 0)), seed=0)
        forward_backward(net, SupervisionScheme("final"), [s], kind, cfg)
        _, grads = attention_probe(net)
        return grads[0][fg].mean() / grads[0][~fg].mean()

    assert ratio("tversky", losses.LossConfig(alpha=0.2)) > ratio("dice", losses.LossConfig())
