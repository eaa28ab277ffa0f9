"""Kernel semantics against independent reference implementations."""

import math
from fractions import Fraction

import numpy as np
import pytest

from ladderseg import kernels as K


# ---------------------------------------------------------------------------
# reference implementations (kept deliberately dumb)

def conv_ref(x, w, stride, padding, dilation, groups):
    n, c, h, wd = x.shape
    co, cg, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    cpg_out = co // groups
    out = np.zeros((n, co, oh, ow), np.float64)
    for b in range(n):
        for o in range(co):
            g = o // cpg_out
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        cc = g * cg + ci
                        for i in range(kh):
                            for j in range(kw):
                                hy = y * stride + i * dilation - padding
                                wz = z * stride + j * dilation - padding
                                if 0 <= hy < h and 0 <= wz < wd:
                                    acc += x[b, cc, hy, wz] * w[o, ci, i, j]
                    out[b, o, y, z] = acc
    return out


def resize_ref(x, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow), np.float64)
    for y in range(oh):
        sy = min(max((y + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(sy))
        fy = sy - y0
        y1 = min(y0 + 1, h - 1)
        for z in range(ow):
            sx = min(max((z + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            x0 = int(math.floor(sx))
            fx = sx - x0
            x1 = min(x0 + 1, w - 1)
            out[:, :, y, z] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0]
                               + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0]
                               + fy * fx * x[:, :, y1, x1])
    return out


def rational_bounds(extent, cells):
    # round-half-up in exact arithmetic
    return [math.floor(Fraction(i * extent, cells) + Fraction(1, 2))
            for i in range(cells + 1)]


# ---------------------------------------------------------------------------
# convolution

def test_conv_matches_reference_exhaustive_small():
    rng = np.random.default_rng(7)
    checked = 0
    for h in range(1, 6):
        for w in range(1, 6):
            for k in (1, 2, 3):
                for s in (1, 2):
                    for p in (0, 1):
                        for d in (1, 2):
                            span = d * (k - 1) + 1
                            if h + 2 * p < span or w + 2 * p < span:
                                continue
                            cin, cout, n = 3, 2, 2
                            cp = K.ConvParams(cin, cout, k, s, p, d)
                            x = rng.standard_normal((n, cin, h, w))
                            wt = rng.standard_normal(cp.weight_shape)
                            got = K.conv2d(x, wt, cp)
                            ref = conv_ref(x, wt, s, p, d, 1)
                            assert got.shape == ref.shape
                            np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)
                            checked += 1
    assert checked > 300


def test_conv_float32_path_matches_reference():
    rng = np.random.default_rng(3)
    cp = K.ConvParams(5, 7, 3, stride=2, padding=1)
    x = rng.standard_normal((2, 5, 9, 11)).astype(np.float32)
    wt = rng.standard_normal(cp.weight_shape).astype(np.float32)
    ref = conv_ref(x.astype(np.float64), wt.astype(np.float64), 2, 1, 1, 1)
    np.testing.assert_allclose(K.conv2d(x, wt, cp), ref, rtol=2e-4, atol=2e-5)


def test_grouped_conv_matches_reference():
    rng = np.random.default_rng(11)
    for groups, cin, cout in [(2, 4, 6), (4, 4, 4), (3, 6, 3)]:
        cp = K.ConvParams(cin, cout, 3, stride=1, padding=1, groups=groups)
        x = rng.standard_normal((2, cin, 5, 4))
        wt = rng.standard_normal(cp.weight_shape)
        ref = conv_ref(x, wt, 1, 1, 1, groups)
        np.testing.assert_allclose(K.conv2d(x, wt, cp), ref, rtol=1e-10, atol=1e-12)


def test_depthwise_separable_equals_composed_dense_kernel():
    # depthwise then pointwise == a dense conv whose taps are the product
    rng = np.random.default_rng(5)
    c, co = 6, 4
    dw = K.ConvParams(c, c, 3, stride=1, padding=1, groups=c)
    pw = K.ConvParams(c, co, 1)
    x = rng.standard_normal((2, c, 6, 6))
    w_dw = rng.standard_normal(dw.weight_shape)
    w_pw = rng.standard_normal(pw.weight_shape)
    got = K.conv2d(K.conv2d(x, w_dw, dw), w_pw, pw)
    dense = np.einsum("oc,cij->ocij", w_pw[:, :, 0, 0], w_dw[:, 0])
    ref = K.conv2d(x, dense, K.ConvParams(c, co, 3, stride=1, padding=1))
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_conv_out_size_formula_and_errors():
    assert K.conv_out_size(7, 3, stride=2, padding=1) == 4
    assert K.conv_out_size(224, 7, stride=2, padding=3) == 112
    assert K.conv_out_size(5, 3, stride=1, padding=2, dilation=2) == 5
    with pytest.raises(ValueError, match="collapses"):
        K.conv_out_size(2, 3, stride=1, padding=0, dilation=2)
    with pytest.raises(ValueError, match="groups"):
        K.ConvParams(5, 4, 3, groups=2)


def test_conv_shape_mismatch_names_both_shapes():
    x = np.zeros((1, 3, 4, 4), np.float32)
    w = np.zeros((2, 4, 3, 3), np.float32)
    with pytest.raises(ValueError) as ei:
        K.conv2d(x, w, K.ConvParams(4, 2, 3, padding=1))
    assert "(1, 3, 4, 4)" in str(ei.value) and "(2, 4, 3, 3)" in str(ei.value)


def test_conv_is_deterministic_across_runs():
    rng = np.random.default_rng(0)
    cp = K.ConvParams(8, 16, 3, stride=1, padding=1)
    x = rng.standard_normal((2, 8, 16, 16)).astype(np.float32)
    w = rng.standard_normal(cp.weight_shape).astype(np.float32)
    a = K.conv2d(x, w, cp)
    for _ in range(3):
        assert np.array_equal(a, K.conv2d(x, w, cp))


# ---------------------------------------------------------------------------
# batch norm

def test_bn_train_normalizes_batch():
    rng = np.random.default_rng(1)
    x = (rng.standard_normal((4, 3, 8, 8)) * 3 + 5).astype(np.float32)
    st = K.BNState(3)
    y, (m, v) = K.batch_norm(x, np.ones(3, np.float32), np.zeros(3, np.float32), st, "train")
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(m, x.mean(axis=(0, 2, 3)), rtol=1e-6)


def test_bn_running_stats_ema_oracle():
    # hand-rolled r <- 0.9 r + 0.1 m starting from (0, 1)
    rng = np.random.default_rng(2)
    st = K.BNState(2)
    g, b = np.ones(2, np.float32), np.zeros(2, np.float32)
    rm, rv = np.zeros(2), np.ones(2)
    for _ in range(3):
        x = rng.standard_normal((2, 2, 4, 4)).astype(np.float32)
        K.batch_norm(x, g, b, st, "train")
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3))
        rm = 0.9 * rm + 0.1 * m
        rv = 0.9 * rv + 0.1 * v
    np.testing.assert_allclose(st.running_mean, rm, rtol=1e-5)
    np.testing.assert_allclose(st.running_var, rv, rtol=1e-5)


def test_bn_eval_before_stats_rejected():
    st = K.BNState(2)
    x = np.zeros((1, 2, 2, 2), np.float32)
    with pytest.raises(ValueError, match="eval"):
        K.batch_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32), st, "eval")


def test_bn_replay_with_saved_stats_is_bitwise_and_leaves_state_alone():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    g = rng.standard_normal(3).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    st = K.BNState(3)
    y1, saved = K.batch_norm(x, g, b, st, "train")
    rm = st.running_mean.copy()
    y2, _ = K.batch_norm(x, g, b, st, "train", saved=saved)
    assert np.array_equal(y1, y2)
    assert np.array_equal(st.running_mean, rm)


def test_bn_accumulate_tallies_exact_sums():
    rng = np.random.default_rng(4)
    st = K.BNState(2)
    g, b = np.ones(2, np.float32), np.zeros(2, np.float32)
    chunks = [rng.standard_normal((2, 2, 3, 3)).astype(np.float32) for _ in range(3)]
    for ch in chunks:
        K.batch_norm(ch, g, b, st, "accumulate")
    allx = np.concatenate(chunks, axis=0).astype(np.float64)
    st.load_accumulated()
    np.testing.assert_allclose(st.running_mean, allx.mean(axis=(0, 2, 3)), rtol=1e-6)
    np.testing.assert_allclose(st.running_var, allx.var(axis=(0, 2, 3)), rtol=1e-5)
    assert st.initialized


# ---------------------------------------------------------------------------
# pooling

def pool_ref(x, k, s, p, op):
    n, c, h, w = x.shape
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    out = np.zeros((n, c, oh, ow), x.dtype)
    for y in range(oh):
        for z in range(ow):
            vals = []
            for i in range(k):
                for j in range(k):
                    hy, wz = y * s + i - p, z * s + j - p
                    if 0 <= hy < h and 0 <= wz < w:
                        vals.append(x[:, :, hy, wz])
            out[:, :, y, z] = op(np.stack(vals, axis=-1))
    return out


def test_max_pool_matches_reference_and_ignores_padding():
    rng = np.random.default_rng(6)
    x = -np.abs(rng.standard_normal((2, 3, 7, 7))).astype(np.float32) - 0.5
    got = K.max_pool(x, 3, 2, 1)
    ref = pool_ref(x, 3, 2, 1, lambda v: v.max(axis=-1))
    np.testing.assert_array_equal(got, ref)
    assert (got < 0).all()  # -inf padding never surfaces for all-negative input


def test_avg_pool_divisor_counts_valid_cells_only():
    x = np.ones((1, 1, 4, 4), np.float32)
    got = K.avg_pool(x, 3, 2, 1)
    # averages of all-ones stay exactly one only if padding is excluded
    np.testing.assert_array_equal(got, np.ones_like(got))
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 5, 6))
    ref = pool_ref(x, 3, 2, 1, lambda v: v.mean(axis=-1))
    np.testing.assert_allclose(K.avg_pool(x, 3, 2, 1), ref, rtol=1e-12)


def test_avg_pool_2x2_stride2_halves():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    got = K.avg_pool(x, 2, 2)
    assert got.shape == (1, 2, 3, 3)
    np.testing.assert_allclose(got[0, 0, 0, 0], x[0, 0, :2, :2].mean(), rtol=1e-6)


# ---------------------------------------------------------------------------
# grid pooling

def test_grid_bounds_match_exact_rational_rounding():
    for extent in range(1, 33):
        for cells in range(1, extent + 1):
            assert K.grid_bounds(extent, cells) == rational_bounds(extent, cells)


def test_grid_avg_pool_partitions_exactly():
    rng = np.random.default_rng(10)
    for h, w, rows in [(8, 8, 8), (7, 5, 3), (6, 9, 4), (5, 5, 2), (3, 3, 1)]:
        x = rng.standard_normal((1, 2, h, w))
        cols = K.grid_cols(rows, h, w)
        rb, cb = K.grid_bounds(h, rows), K.grid_bounds(w, cols)
        assert rb[0] == 0 and rb[-1] == h and all(b > a for a, b in zip(rb, rb[1:]))
        assert cb[0] == 0 and cb[-1] == w and all(b > a for a, b in zip(cb, cb[1:]))
        areas = sum((rb[i + 1] - rb[i]) * (cb[j + 1] - cb[j])
                    for i in range(rows) for j in range(cols))
        assert areas == h * w
        got = K.grid_avg_pool(x, rows)
        for i in range(rows):
            for j in range(cols):
                cell = x[:, :, rb[i]:rb[i + 1], cb[j]:cb[j + 1]].mean(axis=(2, 3))
                np.testing.assert_allclose(got[:, :, i, j], cell, rtol=1e-12)


def test_grid_avg_pool_identity_when_rows_equal_height():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(K.grid_avg_pool(x, 8), x)


def test_grid_avg_pool_rejects_rows_beyond_height():
    with pytest.raises(ValueError, match="rows"):
        K.grid_avg_pool(np.zeros((1, 1, 4, 4), np.float32), 5)


# ---------------------------------------------------------------------------
# bilinear resize

def test_bilinear_matches_scalar_reference():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 5, 7))
    for oh, ow in [(10, 14), (3, 3), (5, 7), (8, 4), (1, 1)]:
        np.testing.assert_allclose(K.bilinear_resize(x, oh, ow),
                                   resize_ref(x, oh, ow), rtol=1e-12, atol=1e-14)


def test_bilinear_same_size_is_bitwise_identity():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    assert np.array_equal(K.bilinear_resize(x, 6, 6), x)


def test_bilinear_2x_exact_on_linear_ramp():
    # half-pixel sampling reproduces an affine ramp away from the border
    ramp = np.arange(8, dtype=np.float64).reshape(1, 1, 1, 8).repeat(8, axis=2)
    up = K.bilinear_resize(ramp, 8, 16)
    inner = up[0, 0, 0, 1:-1]
    expect = (np.arange(16, dtype=np.float64)[1:-1] + 0.5) * 0.5 - 0.5
    np.testing.assert_allclose(inner, expect, rtol=1e-12)


# ---------------------------------------------------------------------------
# concat / add / loss

def test_concat_then_backward_splits_channels():
    rng = np.random.default_rng(15)
    xs = [rng.standard_normal((2, c, 3, 3)).astype(np.float32) for c in (2, 1, 4)]
    y = K.concat_channels(xs)
    assert y.shape == (2, 7, 3, 3)
    parts = K.concat_channels_backward(y, [2, 1, 4])
    for x, g in zip(xs, parts):
        assert np.array_equal(x, g)


def test_concat_rejects_spatial_mismatch():
    a = np.zeros((1, 2, 4, 4), np.float32)
    b = np.zeros((1, 2, 5, 4), np.float32)
    with pytest.raises(ValueError) as ei:
        K.concat_channels([a, b])
    assert "(1, 2, 5, 4)" in str(ei.value)


def test_cross_entropy_uniform_logits_gives_log_c():
    for c in (2, 5, 19):
        logits = np.zeros((1, c, 4, 4), np.float32)
        t = np.full((1, c, 4, 4), 1.0 / c, np.float32)
        loss, nv, warn = K.softmax_cross_entropy(logits, t, np.ones((1, 4, 4), bool))
        assert not warn and nv == 16
        np.testing.assert_allclose(float(loss), math.log(c), rtol=1e-6)


def test_cross_entropy_matches_hand_sum_with_mask():
    rng = np.random.default_rng(16)
    logits = rng.standard_normal((2, 3, 2, 2))
    t = rng.uniform(0.1, 1, (2, 3, 2, 2))
    t /= t.sum(axis=1, keepdims=True)
    valid = np.array([[[1, 0], [1, 1]], [[0, 0], [1, 0]]], bool)
    loss, nv, _ = K.softmax_cross_entropy(logits, t, valid)
    acc, cnt = 0.0, 0
    for n in range(2):
        for y in range(2):
            for z in range(2):
                if not valid[n, y, z]:
                    continue
                zrow = logits[n, :, y, z]
                p = np.exp(zrow - zrow.max())
                p /= p.sum()
                acc += -(t[n, :, y, z] * np.log(p)).sum()
                cnt += 1
    assert nv == cnt
    np.testing.assert_allclose(float(loss), acc / cnt, rtol=1e-10)


def test_cross_entropy_extreme_logits_stay_finite():
    logits = np.array([[[[1e4]], [[-1e4]], [[0.0]]]], np.float32)
    t = np.array([[[[0.0]], [[1.0]], [[0.0]]]], np.float32)
    loss, _, _ = K.softmax_cross_entropy(logits, t, np.ones((1, 1, 1), bool))
    assert np.isfinite(loss)


def test_cross_entropy_fully_masked_returns_zero_and_flags():
    logits = np.zeros((1, 2, 2, 2), np.float32)
    t = np.full_like(logits, 0.5)
    loss, nv, warn = K.softmax_cross_entropy(logits, t, np.zeros((1, 2, 2), bool))
    assert float(loss) == 0.0 and nv == 0 and warn
    g = K.softmax_cross_entropy_backward(np.asarray(1.0), logits, t,
                                         np.zeros((1, 2, 2), bool), 0)
    assert np.array_equal(g, np.zeros_like(logits))
