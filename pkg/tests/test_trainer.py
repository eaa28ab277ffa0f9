"""Optimizer math, soft targets, augmentation, metrics, BN recomputation,
inference ensembling and the training loop's determinism guarantees."""

import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladderseg import autograd as ag
from ladderseg import dataio as D
from ladderseg import nets as N
from ladderseg.dataio import IGNORE
from ladderseg.gradcheck import rel_err
from ladderseg.trainer import (
    MS_SCALES, OptimState, Predictor, TrainConfig, amsgrad_step, augment,
    confusion, cosine_lr, evaluate, grid_soft_targets, head_feeds,
    load_checkpoint, load_config, miou, recompute_bn_stats, save_checkpoint,
    soft_targets, split_dataset, train, _nearest_labels,
)

TOY = dict(backbone="toy", num_classes=5, toy_units=(2, 3, 4, 3), toy_growth=8,
           downsample_factor=64, output_stride=4, upsample_width=32)


def toy_model(seed=0):
    return N.build_ladder_model(N.ArchSpec(**TOY), seed=seed)


def tiny_dataset(count=10, size=64, seed=3):
    spec = D.SynthSpec(image_size=size, seed=seed)
    samples = [D.make_sample(spec, i) for i in range(count)]
    mean = np.mean([s.image.mean(axis=(1, 2)) for s in samples],
                   axis=0).astype(np.float32)
    return D.Dataset(samples, 5, D.PALETTE[:5], mean)


# ---------------------------------------------------------------------------
# configuration

def test_config_json_round_trip():
    cfg = TrainConfig(epochs=3, batch=2, crop=64, flip=False,
                      pretrained_groups=("stem", "db1"), policy="unit_whole")
    back = TrainConfig.from_json(cfg.to_json())
    assert back == cfg
    assert isinstance(back.scale_range, tuple)
    assert isinstance(back.pretrained_groups, tuple)


def test_config_rejects_unknown_fields():
    with pytest.raises(ValueError, match="momentum"):
        TrainConfig.from_json({"momentum": 0.9})


@pytest.mark.parametrize("bad", [
    dict(epochs=0),
    dict(batch=0),
    dict(crop=4),
    dict(base_lr=0.0),
    dict(scale_range=(2.0, 0.5)),
    dict(scale_range=(0.0, 2.0)),
    dict(scale_range=(1.0,)),
    dict(final_weight=0.7),            # 0.7 + 0.4 != 1
    dict(final_weight=0.0, aux_weight=1.0),
    dict(pretrained_lr_divisor=0.5),
    dict(policy="everything"),
    dict(val_fraction=0.0),
    dict(val_fraction=1.0),
])
def test_config_validation_errors(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_load_config_round_trip(tmp_path):
    import json
    doc = {"arch": dict(TOY), "train": {"epochs": 2, "batch": 2, "crop": 64}}
    doc["arch"]["toy_units"] = list(doc["arch"]["toy_units"])
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    spec, cfg = load_config(str(path))
    assert spec == N.ArchSpec(**TOY)
    assert (cfg.epochs, cfg.batch, cfg.crop) == (2, 2, 64)
    assert cfg.base_lr == 4e-4  # defaults fill the rest


def test_load_config_rejects_bad_sections(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"arch": {}, "extra": 1}')
    with pytest.raises(ValueError, match="extra"):
        load_config(str(path))
    path.write_text('{"train": {}}')
    with pytest.raises(ValueError, match="arch"):
        load_config(str(path))


# ---------------------------------------------------------------------------
# optimizer
#
# The two-step oracle is evaluated by hand: with a constant gradient g the
# bias-corrected moments are exactly m-hat = g and vhat = g^2, so each step
# moves by lr * g / (|g| + eps) regardless of t.

class _P:
    def __init__(self, data, group="backbone"):
        self.name = "p"
        self.data = data
        self.grad = None
        self.group = group


def test_amsgrad_matches_scalar_two_step_oracle():
    p = _P(np.array([1.0], np.float64))
    state = OptimState([p])
    g = np.array([0.5], np.float64)
    for _ in range(2):
        assert amsgrad_step([p], [g], state, 0.1)
    expected = 1.0
    m = v = vhat = 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1 * 0.5
        v = 0.999 * v + 0.001 * 0.25
        vhat = max(vhat, v / (1 - 0.999 ** t))
        expected -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(vhat) + 1e-8)
    assert state.step == 2
    assert abs(p.data[0] - expected) < 1e-12


def test_amsgrad_rejects_non_finite_gradients():
    p = _P(np.ones(3, np.float32))
    state = OptimState([p])
    bad = np.array([1.0, np.nan, 0.0], np.float32)
    assert not amsgrad_step([p], [bad], state, 0.1)
    assert state.rejected == 1 and state.step == 0
    assert np.array_equal(p.data, np.ones(3, np.float32))
    assert not np.any(state.m[0]) and not np.any(state.vhat[0])


def test_amsgrad_zero_and_none_grads_move_nothing():
    p0, p1 = _P(np.ones(3, np.float32)), _P(np.full(3, 2.0, np.float32))
    state = OptimState([p0, p1])
    for _ in range(5):
        assert amsgrad_step([p0, p1], [np.zeros(3, np.float32), None], state, 0.5)
    assert state.step == 5
    assert np.array_equal(p0.data, np.ones(3, np.float32))
    assert np.array_equal(p1.data, np.full(3, 2.0, np.float32))


def test_amsgrad_vhat_never_decreases():
    rng = np.random.default_rng(0)
    p = _P(np.zeros(8, np.float64))
    state = OptimState([p])
    prev = state.vhat[0].copy()
    for _ in range(30):
        amsgrad_step([p], [rng.normal(size=8)], state, 1e-3)
        assert np.all(state.vhat[0] >= prev - 1e-18)
        prev = state.vhat[0].copy()


def test_amsgrad_group_scale_divides_the_step():
    pa = _P(np.ones(4, np.float64), group="backbone")
    pb = _P(np.ones(4, np.float64), group="stem")
    state = OptimState([pa, pb], group_lr={"stem": 0.25})
    g = np.full(4, 0.3)
    amsgrad_step([pa, pb], [g, g.copy()], state, 0.1)
    da, db = 1.0 - pa.data, 1.0 - pb.data
    assert np.allclose(db, 0.25 * da, rtol=1e-12)


def test_amsgrad_length_mismatch_errors():
    p = _P(np.ones(2))
    with pytest.raises(ValueError, match="parameters"):
        amsgrad_step([p], [], OptimState([p]), 0.1)


def test_cosine_lr_shape_and_errors():
    assert cosine_lr(0, 10, 4e-4) == pytest.approx(4e-4)
    assert cosine_lr(5, 10, 4e-4) == pytest.approx(2e-4)
    assert cosine_lr(10, 10, 4e-4) == pytest.approx(0.0, abs=1e-20)
    vals = [cosine_lr(e, 10, 1.0) for e in range(11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError, match="outside"):
        cosine_lr(11, 10, 1.0)
    with pytest.raises(ValueError, match="positive"):
        cosine_lr(0, 0, 1.0)


# ---------------------------------------------------------------------------
# soft targets

def test_soft_targets_window_histogram_oracle():
    labels = np.array([[0, 0], [0, 1]], np.uint8)
    t, v = soft_targets(labels, 2, num_classes=3)
    assert t.shape == (3, 1, 1) and v.shape == (1, 1)
    assert np.allclose(t[:, 0, 0], [0.75, 0.25, 0.0])
    assert v[0, 0] == 1.0


def test_soft_targets_ignore_handling():
    labels = np.array([[2, IGNORE], [IGNORE, IGNORE]], np.uint8)
    t, v = soft_targets(labels, 2, num_classes=3)
    assert np.allclose(t[:, 0, 0], [0.0, 0.0, 1.0])  # renormalized over valid
    assert v[0, 0] == 1.0

    t, v = soft_targets(np.full((4, 4), IGNORE, np.uint8), 2, num_classes=3)
    assert not t.any() and not v.any()


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_soft_targets_rows_sum_to_validity(seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice(np.array([0, 1, 2, 3, 4, IGNORE], np.uint8),
                        size=(16, 16), p=(0.3, 0.2, 0.2, 0.1, 0.1, 0.1))
    t, v = soft_targets(labels, 4, num_classes=5)
    assert np.all(np.abs(t.sum(axis=0) - v) < 1e-6)
    assert set(np.unique(v)) <= {0.0, 1.0}


def test_soft_targets_errors():
    with pytest.raises(ValueError, match="divisible"):
        soft_targets(np.zeros((6, 6), np.uint8), 4, 5)
    with pytest.raises(ValueError, match="outside"):
        soft_targets(np.full((4, 4), 7, np.uint8), 4, 5)


def test_grid_soft_targets_matches_uniform_windows():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 5, (128, 128)).astype(np.uint8)
    gt, gv = grid_soft_targets(labels, 2, 2, 5, stride=64)
    wt, wv = soft_targets(labels, 64, 5)
    assert np.array_equal(gt, wt) and np.array_equal(gv, wv)


def test_grid_soft_targets_follows_rounded_bounds():
    # feature extent 3 split into 2 cells -> bounds [0, 2, 3]: the first cell
    # covers two thirds of the image
    labels = np.zeros((96, 96), np.uint8)
    labels[64:] = 1
    t, v = grid_soft_targets(labels, 2, 2, num_classes=2, stride=32)
    assert np.allclose(t[0, 0], 1.0) and np.allclose(t[1, 1], 1.0)
    assert np.all(v == 1.0)


def test_head_feeds_matches_program_inputs():
    model = toy_model()
    prog, heads = N.build_train_program(model, 2, 128, 128)
    labels = np.stack([np.zeros((128, 128), np.uint8)] * 2)
    feeds = head_feeds(heads, labels, 5, needed=set(prog.input_ids))
    assert set(feeds) | {"image"} == set(prog.input_ids)
    for name, arr in feeds.items():
        assert arr.shape == prog.node(name).shape
        assert arr.dtype == np.float32

    pruned, _ = N.build_train_program(model, 2, 128, 128, use_aux=False)
    feeds = head_feeds(heads, labels, 5, needed=set(pruned.input_ids))
    assert sorted(feeds) == ["target.logits", "valid.logits"]


# ---------------------------------------------------------------------------
# augmentation

def _plain_cfg(**over):
    base = dict(epochs=1, batch=1, crop=64, flip=False, random_crop=False,
                scale_jitter=False)
    base.update(over)
    return TrainConfig(**base)


def test_augment_identity_when_disabled():
    ds = tiny_dataset(1)
    s = ds.samples[0]
    img, lab = augment(s.image, s.labels, _plain_cfg(), np.random.default_rng(0),
                       ds.mean_pixel)
    assert np.array_equal(img, s.image) and np.array_equal(lab, s.labels)


def test_augment_flip_is_a_mirror():
    ds = tiny_dataset(1)
    s = ds.samples[0]
    cfg = _plain_cfg(flip=True)
    seen = set()
    for seed in range(8):
        img, lab = augment(s.image, s.labels, cfg, np.random.default_rng(seed),
                           ds.mean_pixel)
        if np.array_equal(lab, s.labels):
            seen.add("same")
            assert np.array_equal(img, s.image)
        else:
            seen.add("flip")
            assert np.array_equal(img, s.image[:, :, ::-1])
            assert np.array_equal(lab, s.labels[:, ::-1])
    assert seen == {"same", "flip"}


def test_augment_center_crop_and_padding():
    ds = tiny_dataset(1)
    s = ds.samples[0]
    img, lab = augment(s.image, s.labels, _plain_cfg(crop=32),
                       np.random.default_rng(0), ds.mean_pixel)
    assert np.array_equal(img, s.image[:, 16:48, 16:48])
    assert np.array_equal(lab, s.labels[16:48, 16:48])

    img, lab = augment(s.image, s.labels, _plain_cfg(crop=96),
                       np.random.default_rng(0), ds.mean_pixel)
    assert np.array_equal(img[:, 16:80, 16:80], s.image)
    assert np.array_equal(lab[16:80, 16:80], s.labels)
    assert np.allclose(img[:, :16, :], ds.mean_pixel[:, None, None])
    assert np.all(lab[:, :16] == IGNORE) and np.all(lab[80:, :] == IGNORE)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_augment_reproducible_and_label_preserving(seed):
    ds = tiny_dataset(2)
    s = ds.samples[1]
    cfg = _plain_cfg(flip=True, random_crop=True, scale_jitter=True, crop=48)
    a = augment(s.image, s.labels, cfg, np.random.default_rng(seed), ds.mean_pixel)
    b = augment(s.image, s.labels, cfg, np.random.default_rng(seed), ds.mean_pixel)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].shape == (3, 48, 48) and a[1].shape == (48, 48)
    assert set(np.unique(a[1])) <= set(np.unique(s.labels)) | {IGNORE}


def test_augment_ablation_switches_are_independent():
    ds = tiny_dataset(1)
    s = ds.samples[0]
    rng = lambda: np.random.default_rng(123)
    crop_only = augment(s.image, s.labels, _plain_cfg(random_crop=True, crop=32),
                        rng(), ds.mean_pixel)
    scaled = augment(s.image, s.labels,
                     _plain_cfg(random_crop=True, scale_jitter=True, crop=32),
                     rng(), ds.mean_pixel)
    # crop-only output is an exact window of the source; the scaled one is not
    assert crop_only[0].shape == scaled[0].shape == (3, 32, 32)
    assert not np.array_equal(crop_only[0], scaled[0])


def test_nearest_labels_halving_picks_window_centers():
    labels = np.arange(16, dtype=np.uint8).reshape(4, 4)
    out = _nearest_labels(labels, 2, 2)
    assert np.array_equal(out, labels[1::2, 1::2])
    assert np.array_equal(_nearest_labels(labels, 4, 4), labels)


# ---------------------------------------------------------------------------
# metrics

def test_confusion_counts_and_ignores():
    pred = np.array([[0, 1], [1, 1]], np.uint8)
    labels = np.array([[0, 0], [1, IGNORE]], np.uint8)
    conf = confusion(pred, labels, 2)
    assert conf.tolist() == [[1, 1], [0, 1]]


def test_confusion_errors():
    with pytest.raises(ValueError, match="prediction"):
        confusion(np.zeros((2, 3), np.uint8), np.zeros((2, 2), np.uint8), 2)
    with pytest.raises(ValueError, match="outside"):
        confusion(np.full((2, 2), 5, np.uint8), np.zeros((2, 2), np.uint8), 2)


def test_miou_oracles():
    mean, per_class = miou(np.array([[3, 1], [1, 3]]))
    assert mean == pytest.approx(0.6) and np.allclose(per_class, [0.6, 0.6])
    mean, _ = miou(np.diag([4, 2, 9]))
    assert mean == 1.0
    mean, _ = miou(np.array([[0, 2], [2, 0]]))
    assert mean == 0.0
    mean, per_class = miou(np.array([[5, 0], [0, 0]]))  # absent class excluded
    assert mean == 1.0 and np.isnan(per_class[1])
    with pytest.raises(ValueError, match="empty"):
        miou(np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# batch statistics

def _logits_at_output_stride(model, x, mode):
    g = ag.GraphBuilder()
    heads = model.record(g, g.input("image", x.shape), mode=mode)
    prog = g.build([heads.final.node])
    outs, _ = ag.trace_forward(prog, {"image": x}, grad_enabled=False)
    return outs[0]


def test_recompute_bn_stats_reproduces_single_batch_normalization():
    # with the whole image set in one batch, the accumulated moments are that
    # batch's moments, so eval mode must reproduce train-mode outputs
    model = toy_model()
    ds = tiny_dataset(4)
    x = np.stack([s.image for s in ds.samples])
    want = _logits_at_output_stride(model, x, "train")
    recompute_bn_stats(model, [s.image for s in ds.samples], batch=4)
    got = _logits_at_output_stride(model, x, "eval")
    assert rel_err(got, want) < 1e-5


def test_recompute_bn_stats_is_idempotent():
    # deeper layers see chunk-normalized activations, so the result is a
    # function of (images, batch); repeating with both fixed is bitwise stable
    model = toy_model()
    images = [s.image for s in tiny_dataset(6).samples]
    recompute_bn_stats(model, images, batch=3)
    first = [(st.running_mean.copy(), st.running_var.copy())
             for _, st in model.bn_states]
    assert all(st.initialized for _, st in model.bn_states)
    recompute_bn_stats(model, images, batch=3)
    for (m1, v1), (_, st) in zip(first, model.bn_states):
        assert np.array_equal(m1, st.running_mean)
        assert np.array_equal(v1, st.running_var)


def test_recompute_bn_stats_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        recompute_bn_stats(toy_model(), [])


# ---------------------------------------------------------------------------
# inference

def _ready_model():
    model = toy_model()
    ds = tiny_dataset(4)
    recompute_bn_stats(model, [s.image for s in ds.samples], batch=4)
    return model, ds


def test_predictor_single_scale_equals_batched_path():
    model, ds = _ready_model()
    pred = Predictor(model, ds.mean_pixel)
    one = pred.probs(ds.samples[0].image)
    batched = pred.batch_probs([ds.samples[0].image])[0]
    assert np.array_equal(one, batched)


def test_predictor_scale_order_is_immaterial():
    model, ds = _ready_model()
    pred = Predictor(model, ds.mean_pixel)
    a = pred.probs(ds.samples[1].image, scales=(0.5, 1.0, 2.0), flips=True)
    b = pred.probs(ds.samples[1].image, scales=(2.0, 0.5, 1.0), flips=True)
    assert np.array_equal(a, b)
    assert a.shape == (5, 64, 64)
    assert np.allclose(a.sum(axis=0), 1.0, atol=1e-5)


def test_predictor_pads_non_divisible_sizes():
    model, ds = _ready_model()
    pred = Predictor(model, ds.mean_pixel)
    image = ds.samples[2].image[:, :50, :37]
    p = pred.probs(image, scales=(1.0,))
    assert p.shape == (5, 50, 37)
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-5)
    assert pred.predict(image).shape == (50, 37)


def test_evaluate_batching_is_immaterial():
    model, ds = _ready_model()
    m1, _, c1 = evaluate(model, ds.samples, 5, mean_pixel=ds.mean_pixel, batch=1)
    m4, _, c4 = evaluate(model, ds.samples, 5, mean_pixel=ds.mean_pixel, batch=4)
    assert np.array_equal(c1, c4) and m1 == m4
    with pytest.raises(ValueError, match="sample"):
        evaluate(model, [], 5)


def test_evaluate_multi_scale_runs():
    model, ds = _ready_model()
    m, per_class, conf = evaluate(model, ds.samples[:1], 5, ms=True,
                                  mean_pixel=ds.mean_pixel)
    assert 0.0 <= m <= 1.0
    assert conf.sum() == 64 * 64


# ---------------------------------------------------------------------------
# training loop

def _feeds_for(prog, heads, ds, batch, crop):
    ims = np.stack([s.image[:, :crop, :crop] for s in ds.samples[:batch]])
    labs = np.stack([s.labels[:crop, :crop] for s in ds.samples[:batch]])
    feeds = {"image": ims}
    feeds.update(head_feeds(heads, labs, 5, needed=set(prog.input_ids)))
    return feeds


def test_train_step_is_bitwise_identical_across_policies():
    model = toy_model()
    ds = tiny_dataset(2)
    prog, heads = N.build_train_program(model, 2, 64, 64)
    feeds = _feeds_for(prog, heads, ds, 2, 64)
    state0 = {k: v.copy() for k, v in model.state_dict().items()}

    results = {}
    for policy in ("none", "cat_proj_and_3x3", "unit_whole_plus_stem_td_up"):
        model.load_state_dict(state0)
        outs, ex = ag.trace_forward(prog, feeds, policy=policy)
        ex.backward()
        opt = OptimState(model.params)
        assert amsgrad_step(model.params, [p.grad for p in model.params], opt,
                            4e-4)
        for p in model.params:
            p.grad = None
        results[policy] = (float(outs[0]),
                           {k: v.copy() for k, v in model.state_dict().items()})

    base_loss, base_state = results["none"]
    for policy, (loss, state) in results.items():
        assert loss == base_loss, policy
        for k in base_state:
            assert np.array_equal(state[k], base_state[k]), (policy, k)


def test_train_writes_log_and_checkpoint(tmp_path):
    model = toy_model()
    ds = tiny_dataset(10)
    cfg = TrainConfig(epochs=3, batch=2, crop=64, val_fraction=0.2, seed=0)
    res = train(model, cfg, ds, str(tmp_path))

    lines = (tmp_path / "train_log.csv").read_text().strip().split("\n")
    assert lines[0] == "epoch,lr,train_loss,val_miou"
    assert len(lines) == 4
    losses = [float(l.split(",")[2]) for l in lines[1:]]
    assert losses[-1] < losses[0]
    assert res["rejected_steps"] == 0
    assert 0.0 <= res["final_val_miou"] <= 1.0

    loaded, manifest = load_checkpoint(res["checkpoint"])
    assert manifest["train"]["epochs"] == 3
    assert manifest["dataset"]["num_classes"] == 5
    assert manifest["final_val_miou"] == round(res["final_val_miou"], 6)
    got, want = loaded.state_dict(), model.state_dict()
    assert all(np.array_equal(got[k], want[k]) for k in want)


def test_train_rerun_is_bitwise_identical(tmp_path):
    ds = tiny_dataset(8)
    cfg = TrainConfig(epochs=2, batch=2, crop=64, val_fraction=0.25, seed=11)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        train(N.build_ladder_model(N.ArchSpec(**TOY), seed=cfg.seed), cfg, ds,
              str(out))
        outs.append(out)

    a, b = outs
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert ((a / "checkpoint" / "manifest.json").read_bytes()
            == (b / "checkpoint" / "manifest.json").read_bytes())
    ta = sorted((a / "checkpoint" / "tensors").iterdir())
    tb = sorted((b / "checkpoint" / "tensors").iterdir())
    assert [p.name for p in ta] == [p.name for p in tb]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(ta, tb))


def test_train_validates_groups_and_split(tmp_path):
    ds = tiny_dataset(4)
    model = toy_model()
    cfg = TrainConfig(epochs=1, batch=2, crop=64,
                      pretrained_groups=("resnet",), val_fraction=0.25)
    with pytest.raises(ValueError, match="resnet"):
        train(model, cfg, ds, str(tmp_path))
    with pytest.raises(ValueError, match="training samples"):
        split_dataset(tiny_dataset(2), 0.9)
    tr, va = split_dataset(ds, 0.25)
    assert len(tr) == 3 and len(va) == 1 and va[0] is ds.samples[-1]


# ---------------------------------------------------------------------------
# checkpoint bundles

def test_save_checkpoint_rejects_reserved_keys(tmp_path):
    with pytest.raises(ValueError, match="collide"):
        save_checkpoint(str(tmp_path), toy_model(), extra={"arch": {}})


def test_load_checkpoint_rejects_foreign_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "zip"}')
    with pytest.raises(ValueError, match="ldnt-bundle"):
        load_checkpoint(str(tmp_path))
