from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage as ndi
from scipy import stats

from gradseg import losses
from gradseg.net import Net, SupervisionScheme, read_checkpoint, unet
from gradseg.net.layers import Conv3d, sigmoid
from gradseg.phantom import PhantomSpec, generate, make_dataset
from gradseg.pipeline import (
    PipelineError,
    SamplerConfig,
    StageConfig,
    TrainConfig,
    TrainingDiverged,
    augment_rotate,
    crop,
    desk_schedule,
    paper_schedule,
    predict,
    prepare_dataset,
    prepare_item,
    refresh_hard_set,
    sample_patch,
    segment,
    train,
)
from gradseg.volume import Volume

TINY_NET = dict(channels=(2, 4), blocks_per_level=1, single_stage=1)


@pytest.fixture(scope="module")
def three_branch():
    ph = generate(PhantomSpec(depth=2, dims=(40, 40, 40), segment_length=12, seed=0))
    return prepare_item(ph.image, ph.mask, ph.graph, "three")


@pytest.fixture(scope="module")
def tiny_items():
    spec = PhantomSpec(depth=2, dims=(32, 32, 32), root_radius=2.5, segment_length=10, seed=0)
    return prepare_dataset(make_dataset(spec, 3))


class StubNet:
    """Anything with ``spec.depth`` and ``predict`` can be used for inference."""

    class spec:
        depth = 0

    def __init__(self, fn):
        self.fn = fn

    def predict(self, x):
        return self.fn(np.asarray(x)[0])


class LocalNet:
    """Two 3x3x3 conv + sigmoid layers: receptive-field radius 2, no global ops."""

    class spec:
        depth = 0

    def __init__(self):
        rng = np.random.default_rng(0)
        self.c1 = Conv3d(1, 3, 3, rng, np.float64)
        self.c2 = Conv3d(3, 1, 3, rng, np.float64)

    def predict(self, x):
        return sigmoid(self.c2.forward(sigmoid(self.c1.forward(np.asarray(x, np.float64)))))[0]


# sampling ------------------------------------------------------------------

def test_uniform_centres_chi_square(three_branch):
    it = three_branch
    assert len(it.graph.branches) == 3
    cfg = SamplerConfig((16, 16, 16), p_s=0.0)
    rng = np.random.default_rng(0)
    index = {tuple(v): i for i, v in enumerate(it.skeleton)}
    counts = np.zeros(len(it.skeleton))
    for _ in range(10000):
        _, _, prov, _ = sample_patch(it.image, it.mask, it.skeleton, None, cfg, rng)
        assert prov.mode == "uniform"
        counts[index[prov.center]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_hard_sampling_contract(three_branch):
    it = three_branch
    hard = it.skeleton[::7]
    cfg = SamplerConfig((8, 8, 8), p_s=1.0)
    rng = np.random.default_rng(1)
    hard_set = {tuple(v) for v in hard}
    for _ in range(200):
        _, _, prov, (sk_patch,) = sample_patch(it.image, it.mask, it.skeleton, hard, cfg, rng,
                                               extra=(_points_mask(hard, it.mask.shape),))
        assert prov.mode == "hard" and prov.center in hard_set and sk_patch.any()


def _points_mask(points, shape):
    m = np.zeros(shape, np.uint8)
    m[tuple(np.asarray(points).T)] = 1
    return m


def test_empty_hard_set_falls_back(three_branch):
    it = three_branch
    a = SamplerConfig((8, 8, 8), p_s=0.5)
    b = SamplerConfig((8, 8, 8), p_s=0.0)
    ra, rb = np.random.default_rng(5), np.random.default_rng(5)
    for _ in range(50):
        pa = sample_patch(it.image, it.mask, it.skeleton, np.zeros((0, 3), int), a, ra)[2]
        pb = sample_patch(it.image, it.mask, it.skeleton, None, b, rb)[2]
        assert pa == pb and pa.mode == "uniform"


def test_sampler_errors(three_branch):
    it = three_branch
    with pytest.raises(PipelineError):
        sample_patch(it.image, it.mask, it.skeleton, None, SamplerConfig((64, 8, 8)), np.random.default_rng())
    with pytest.raises(PipelineError):
        SamplerConfig(p_s=1.5)


def test_crop_pads_with_zeros():
    a = np.arange(27).reshape(3, 3, 3) + 1
    c = crop(a, (0, 0, 0), (3, 3, 3))
    assert c[1, 1, 1] == a[0, 0, 0] and c[0].sum() == 0 and c[:, 0].sum() == 0
    assert np.array_equal(crop(a, (1, 1, 1), (3, 3, 3)), a)


# hard set ------------------------------------------------------------------

def test_hard_set_perfect_and_blind(three_branch):
    it = three_branch
    perfect = StubNet(lambda x: (np.asarray(it.mask) > 0).astype(np.float32))
    blind = StubNet(lambda x: np.zeros(x.shape, np.float32))
    assert len(refresh_hard_set(perfect, [it])[0]) == 0
    assert np.array_equal(refresh_hard_set(blind, [it])[0], it.skeleton)


# augmentation --------------------------------------------------------------

def test_rotation_zero_is_identity():
    rng = np.random.default_rng(0)
    p = rng.random((12, 12, 12)).astype(np.float32)
    m = (rng.random((12, 12, 12)) > 0.7).astype(np.uint8)
    for t in (0.3, 0.7, 0.9):
        p2, m2, _ = augment_rotate(p, m, threshold=t, angle=0.0, plane=(0, 1))
        assert np.array_equal(p2, p) and np.array_equal(m2, m)


def test_rotation_threshold_monotone():
    m = np.zeros((24, 24, 24), np.uint8)
    m[8:16, 6:18, 10:14] = 1
    p = m.astype(np.float32)
    lo = augment_rotate(p, m, threshold=0.7, angle=10.0, plane=(0, 1))[1]
    hi = augment_rotate(p, m, threshold=0.9, angle=10.0, plane=(0, 1))[1]
    assert np.all(hi <= lo) and hi.sum() < lo.sum()


def test_rotation_preserves_cylinder_volume():
    n = 32
    x, y = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    disk = (x - 15.5) ** 2 + (y - 15.5) ** 2 <= 9
    m = np.zeros((n, n, n), np.uint8)
    m[:, :, :] = disk[:, :, None]
    rot = augment_rotate(m.astype(np.float32), m, threshold=0.5, angle=10.0, plane=(0, 1))[1]
    assert abs(int(rot.sum()) - int(m.sum())) / m.sum() < 0.10


def test_rotation_argument_checks():
    m = np.zeros((4, 4, 4))
    with pytest.raises(PipelineError):
        augment_rotate(m, m, threshold=1.0)
    with pytest.raises(PipelineError):
        augment_rotate(m, m, max_angle=20)


# schedule ------------------------------------------------------------------

def test_paper_lr_schedule():
    s1 = paper_schedule().stages[0]
    assert s1.lr_at(59) == pytest.approx(0.01)
    assert s1.lr_at(60) == pytest.approx(0.001)
    assert s1.lr_at(90) == pytest.approx(0.0001)
    s1, s2 = paper_schedule().stages
    assert (s1.epochs, s2.epochs) == (100, 30)
    assert s1.loss == s2.loss == "general_union"
    assert (s1.loss_cfg.alpha, s1.threshold) == (0.1, 0.7)
    assert (s2.loss_cfg.alpha, s2.threshold) == (0.2, 0.9)
    cfg = paper_schedule()
    assert (cfg.momentum, cfg.weight_decay) == (0.9, 1e-4)
    d1, d2 = desk_schedule().stages
    assert (d1.epochs, d1.drops, d2.epochs, d2.drops) == (30, (18, 27), 10, (5, 8))


def test_stage_validation():
    with pytest.raises(PipelineError):
        StageConfig(10, drops=(10,))
    with pytest.raises(PipelineError):
        StageConfig(10, drops=(5, 3))
    with pytest.raises(PipelineError):
        StageConfig(10, loss="mse")


# inference -----------------------------------------------------------------

def test_single_window_equals_forward():
    net = Net(unet(**TINY_NET), seed=0)
    x = np.random.default_rng(0).random((16, 16, 16)).astype(np.float32)
    a = np.asarray(predict(net, x, patch=(16, 16, 16), stride=(16, 16, 16)))
    b = net.predict(x[None])
    assert np.array_equal(a, np.clip(b, 0, 1).astype(np.float32))


def test_constant_model_constant_field():
    net = Net(unet(**TINY_NET), seed=0)
    head = net.heads[-1].conv
    head.params["W"][...] = 0
    head.params["b"][...] = 0.3
    x = np.random.default_rng(1).random((24, 20, 28)).astype(np.float32)
    for stride in [(16, 16, 16), (8, 8, 8), (5, 7, 3)]:
        p = np.asarray(predict(net, x, patch=(16, 16, 16), stride=stride))
        assert p.shape == x.shape and np.allclose(p, sigmoid(np.float32(0.3)), atol=1e-7)


def test_half_overlap_matches_full_pass(tiny_items):
    net = LocalNet()
    x = tiny_items[0].image
    full = np.asarray(predict(net, x))
    win = np.asarray(predict(net, x, patch=(16, 16, 16), stride=(8, 8, 8), margin=2))
    assert np.max(np.abs(full - win)) < 1e-5
    # without the margin the zero-padded window edges disagree
    plain = np.asarray(predict(net, x, patch=(16, 16, 16), stride=(8, 8, 8)))
    assert np.max(np.abs(full - plain)) > 1e-3


def test_predict_argument_checks():
    net = StubNet(lambda x: np.zeros(x.shape))
    x = np.zeros((8, 8, 8))
    with pytest.raises(PipelineError):
        predict(net, x, patch=(4, 4, 4), stride=(5, 4, 4))
    with pytest.raises(PipelineError):
        predict(net, x, patch=(4, 4, 4), aggregate="median")
    with pytest.raises(PipelineError):
        predict(net, x, patch=(8, 8, 8), stride=(6, 6, 6), margin=2)


def test_max_aggregation():
    net = StubNet(lambda x: x)
    x = np.random.default_rng(0).random((8, 8, 8))
    assert np.allclose(np.asarray(predict(net, x, (4, 4, 4), (2, 2, 2), "max")), x)


def test_segment_keeps_largest():
    p = np.zeros((10, 10, 10))
    p[1:4, 1:4, 1:4] = 0.9
    p[7, 7, 7] = 0.8
    s = segment(p)
    assert s.sum() == 27 and segment(p, keep_largest=False).sum() == 28


# training ------------------------------------------------------------------

def _tiny_cfg(epochs=1, seed=0, **kw):
    stage = StageConfig(epochs, 0.05, (), "general_union", losses.LossConfig(alpha=0.1), 0.7)
    return TrainConfig((stage,), seed=seed, sampler=SamplerConfig((16, 16, 16), 0.5, 2), **kw)


def test_zero_epoch_checkpoint_is_init(tiny_items, tmp_path):
    scheme = SupervisionScheme("groups", 2)
    res = train(unet(**TINY_NET), scheme, tiny_items, _tiny_cfg(0, seed=3), out_dir=tmp_path)
    fresh = Net(unet(**TINY_NET).with_scheme(scheme), seed=3)
    back, _ = read_checkpoint(res.checkpoint)
    assert all(np.array_equal(a, b) for a, b in zip(back.params(), fresh.params()))
    assert res.trace == []


def test_training_is_deterministic(tiny_items, tmp_path):
    scheme = SupervisionScheme("groups", 2)
    a = train(unet(**TINY_NET), scheme, tiny_items[:2], _tiny_cfg(2), tiny_items[2:], tmp_path / "a")
    b = train(unet(**TINY_NET), scheme, tiny_items[:2], _tiny_cfg(2), tiny_items[2:], tmp_path / "b")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    strip = [{k: v for k, v in r.items() if k != "elapsed_s"} for r in a.trace]
    assert strip == [{k: v for k, v in r.items() if k != "elapsed_s"} for r in b.trace]
    assert set(a.trace[-1]) >= {"loss_g0", "loss_g1", "lr", "thin_length_detected", "dsc"}
    assert a.manifest["train"]["momentum"] == 0.9


def test_training_changes_weights_and_reduces_loss(tiny_items):
    scheme = SupervisionScheme("final")
    cfg = replace(_tiny_cfg(6), sampler=SamplerConfig((16, 16, 16), 0.0, 4))
    res = train(unet(**TINY_NET), scheme, tiny_items, cfg)
    losses_ = [r["loss_g0"] for r in res.trace]
    assert losses_[-1] < losses_[0]


def test_divergence_dumps_state(tiny_items, tmp_path):
    bad = replace(tiny_items[0], image=np.full_like(tiny_items[0].image, np.nan))
    with pytest.raises(TrainingDiverged):
        train(unet(**TINY_NET), SupervisionScheme("final"), [bad], _tiny_cfg(1, hard_refresh_every=0), out_dir=tmp_path)
    assert (tmp_path / "diverged.ckpt").exists()


def test_empty_training_set():
    with pytest.raises(PipelineError):
        train(unet(**TINY_NET), SupervisionScheme("final"), [], _tiny_cfg())


def test_prepare_item_fields(three_branch):
    it = three_branch
    assert it.image.min() >= 0 and it.image.max() <= 1
    assert it.dist[it.mask == 0].max() == 0 and it.dist.max() == pytest.approx(1.0)
    assert np.all(it.dist[tuple(it.skeleton.T)] == 0)


@pytest.fixture(scope="module")
def default_items():
    return prepare_dataset(make_dataset(PhantomSpec(), 20))


def test_hard_set_concentrates_in_thin_generations(default_items):
    """Regression bound after one epoch of the desk net on the default set."""
    train_items = default_items[:16]
    cfg = TrainConfig((StageConfig(1, 0.1, (), "general_union", losses.LossConfig(alpha=0.1), 0.7),),
                      sampler=SamplerConfig((32, 32, 32), 0.5, 8), seed=0)
    res = train(unet(), SupervisionScheme("groups", 2), train_items, cfg)
    hard = refresh_hard_set(res.net, train_items)
    deep = total = 0
    for it, h in zip(train_items, hard):
        vox, owner, _ = it.graph.centerline_voxels()
        lab = np.full(it.mask.shape, -1)
        lab[tuple(vox.T)] = [it.graph.branches[o].generation for o in owner]
        _, (ix, iy, iz) = ndi.distance_transform_edt(lab < 0, return_indices=True)
        gen = lab[ix, iy, iz]
        g = gen[tuple(h.T)] if len(h) else np.zeros(0)
        deep += int(np.sum(g >= 3))
        total += len(g)
    assert total > 0
    assert deep / total >= 0.6
