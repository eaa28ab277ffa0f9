"""Dense NCHW kernels with explicit backward passes.

Every function is pure and deterministic: reduction order is fixed by the
implementation (BLAS GEMM plus fixed-order python loops over kernel taps),
so re-running a kernel on identical inputs reproduces identical bits. That
property is what lets recomputed checkpoint segments match the original
forward exactly.

Convolution is cross-correlation (no kernel flip) and never has a bias term;
normalization supplies the offsets.
"""

from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# convolution

@dataclass(frozen=True)
class ConvParams:
    """Geometry of one convolution; shared by the kernels and the analyzer."""
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel,
               self.stride, self.dilation, self.groups) < 1 or self.padding < 0:
            raise ValueError(f"conv params out of range: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in={self.in_channels} "
                f"and out={self.out_channels}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel, self.kernel)

    def weight_count(self):
        o, c, kh, kw = self.weight_shape
        return o * c * kh * kw

    def out_size(self, h):
        span = self.dilation * (self.kernel - 1) + 1
        out = (h + 2 * self.padding - span) // self.stride + 1
        if out < 1:
            raise ValueError(
                f"conv output collapses: input {h}, kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}, dilation {self.dilation}")
        return out

    def macs(self, h, w):
        """Multiply-accumulates at input spatial size h x w (convs only count)."""
        oh, ow = self.out_size(h), self.out_size(w)
        return oh * ow * self.kernel * self.kernel \
            * (self.in_channels // self.groups) * self.out_channels


def conv_out_size(size, kernel, stride=1, padding=0, dilation=1):
    return ConvParams(1, 1, kernel, stride, padding, dilation).out_size(size)


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x, k, s, p, d, oh, ow):
    """(N,C,H,W) -> (N, C, k, k, oh, ow) patch tensor, channel-major taps."""
    n, c, _, _ = x.shape
    xp = _pad_hw(x, p)
    cols = np.empty((n, c, k, k, oh, ow), x.dtype)
    for i in range(k):
        hi = i * d
        for j in range(k):
            wj = j * d
            cols[:, :, i, j] = xp[:, :, hi:hi + (oh - 1) * s + 1:s,
                                  wj:wj + (ow - 1) * s + 1:s]
    return cols


def _check_conv_input(x, w, cp: ConvParams):
    if x.ndim != 4 or w.shape != cp.weight_shape:
        raise ValueError(
            f"conv2d: input {x.shape} / weight {w.shape} do not match params "
            f"{cp} (expected weight {cp.weight_shape})")
    if x.shape[1] != cp.in_channels:
        raise ValueError(
            f"conv2d: input {x.shape} has {x.shape[1]} channels, "
            f"weight {w.shape} expects {cp.in_channels}")


def conv2d(x, w, cp: ConvParams):
    _check_conv_input(x, w, cp)
    n, c, h, wd = x.shape
    oh, ow = cp.out_size(h), cp.out_size(wd)
    k, s, p, d, g = cp.kernel, cp.stride, cp.padding, cp.dilation, cp.groups
    co = cp.out_channels

    if g == c and co == c and cp.weight_shape[1] == 1:
        # depthwise: k*k fused multiply-adds over full maps beats tiny GEMMs
        xp = _pad_hw(x, p)
        out = np.zeros((n, c, oh, ow), x.dtype)
        for i in range(k):
            for j in range(k):
                out += w[:, 0, i, j].reshape(1, c, 1, 1) \
                    * xp[:, :, i * d:i * d + (oh - 1) * s + 1:s,
                         j * d:j * d + (ow - 1) * s + 1:s]
        return out

    if k == 1 and s == 1 and p == 0:
        cols = x.reshape(n, g, c // g, h * wd)  # no copy for pointwise conv
    else:
        cols = _im2col(x, k, s, p, d, oh, ow).reshape(n, g, (c // g) * k * k, oh * ow)
    wg = w.reshape(g, co // g, (c // g) * k * k)
    out = np.matmul(wg[None], cols)
    return out.reshape(n, co, oh, ow)


def conv2d_backward(gy, x, w, cp: ConvParams, need_dx=True):
    """Returns (gx, gw). Rebuilds the patch tensor rather than caching it.

    need_dx=False skips the input gradient (gx is None); useful for the first
    layer whose input carries no gradient.
    """
    n, c, h, wd = x.shape
    oh, ow = cp.out_size(h), cp.out_size(wd)
    k, s, p, d, g = cp.kernel, cp.stride, cp.padding, cp.dilation, cp.groups
    co = cp.out_channels

    if g == c and co == c and cp.weight_shape[1] == 1:
        xp = _pad_hw(x, p)
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp) if need_dx else None
        for i in range(k):
            hsl = slice(i * d, i * d + (oh - 1) * s + 1, s)
            for j in range(k):
                wsl = slice(j * d, j * d + (ow - 1) * s + 1, s)
                gw[:, 0, i, j] = (gy * xp[:, :, hsl, wsl]).sum(axis=(0, 2, 3))
                if need_dx:
                    gxp[:, :, hsl, wsl] += w[:, 0, i, j].reshape(1, c, 1, 1) * gy
        if not need_dx:
            return None, gw
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return np.ascontiguousarray(gx), gw

    pointwise = k == 1 and s == 1 and p == 0
    if pointwise:
        cols = x.reshape(n, g, c // g, h * wd)
    else:
        cols = _im2col(x, k, s, p, d, oh, ow).reshape(n, g, (c // g) * k * k, oh * ow)
    wg = w.reshape(g, co // g, (c // g) * k * k)
    gyg = gy.reshape(n, g, co // g, oh * ow)

    gw = np.matmul(gyg, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    if not need_dx:
        return None, gw
    gcols = np.matmul(wg.transpose(0, 2, 1)[None], gyg)
    if pointwise:
        return gcols.reshape(x.shape).copy(), gw
    gcols = gcols.reshape(n, c, k, k, oh, ow)
    gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), x.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i * d:i * d + (oh - 1) * s + 1:s,
                j * d:j * d + (ow - 1) * s + 1:s] += gcols[:, :, i, j]
    gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
    return np.ascontiguousarray(gx), gw


# ---------------------------------------------------------------------------
# batch normalization

class BNState:
    """Per-layer running statistics plus exact accumulators for recomputation."""

    def __init__(self, channels, dtype=np.float32):
        self.channels = channels
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.initialized = False
        self.reset_accumulators()

    def reset_accumulators(self):
        self.acc_sum = np.zeros(self.channels, np.float64)
        self.acc_sumsq = np.zeros(self.channels, np.float64)
        self.acc_count = 0

    def load_accumulated(self):
        if self.acc_count == 0:
            raise ValueError("batch_norm: no accumulated statistics to load")
        mean = self.acc_sum / self.acc_count
        var = self.acc_sumsq / self.acc_count - mean * mean
        self.running_mean = mean.astype(self.running_mean.dtype)
        self.running_var = np.maximum(var, 0.0).astype(self.running_var.dtype)
        self.initialized = True


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x, gamma, beta, state: BNState, mode, saved=None,
               eps=BN_EPS, momentum=BN_MOMENTUM):
    """Returns (y, (mean, var)) where the stats are the ones used to normalize.

    mode 'train': batch stats, running stats EMA-updated (skipped when `saved`
    is given — that is the checkpoint-replay path, which must not touch state).
    mode 'eval': running stats; rejected before they are populated.
    mode 'accumulate': batch stats for the output, exact float64 sums tallied,
    running stats untouched.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}")
    if mode == "eval":
        if not state.initialized:
            raise ValueError("batch_norm: eval before running statistics exist")
        mean, var = state.running_mean, state.running_var
    elif saved is not None:
        mean, var = saved
    elif mode in ("train", "accumulate"):
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if mode == "train":
            state.running_mean = ((1 - momentum) * state.running_mean
                                  + momentum * mean).astype(state.running_mean.dtype)
            state.running_var = ((1 - momentum) * state.running_var
                                 + momentum * var).astype(state.running_var.dtype)
            state.initialized = True
        else:
            x64 = x.astype(np.float64, copy=False)
            state.acc_sum += x64.sum(axis=(0, 2, 3))
            state.acc_sumsq += (x64 * x64).sum(axis=(0, 2, 3))
            state.acc_count += x.shape[0] * x.shape[2] * x.shape[3]
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    ivar = 1.0 / np.sqrt(var.astype(x.dtype) + np.asarray(eps, x.dtype))
    y = (x - mean.reshape(1, -1, 1, 1)) * (gamma * ivar).reshape(1, -1, 1, 1) \
        + beta.reshape(1, -1, 1, 1)
    return y, (mean, var)


def batch_norm_backward(gy, x, gamma, saved, stats_are_batch, eps=BN_EPS):
    """Returns (gx, ggamma, gbeta).

    `stats_are_batch` distinguishes training stats (which depend on x and
    contribute to gx) from frozen eval stats (treated as constants).
    """
    mean, var = saved
    mean = mean.astype(x.dtype, copy=False)
    ivar = 1.0 / np.sqrt(var.astype(x.dtype) + np.asarray(eps, x.dtype))
    xhat = (x - mean.reshape(1, -1, 1, 1)) * ivar.reshape(1, -1, 1, 1)
    gbeta = gy.sum(axis=(0, 2, 3))
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    if not stats_are_batch:
        gx = gy * (gamma * ivar).reshape(1, -1, 1, 1)
        return gx, ggamma, gbeta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    gxhat = gy * gamma.reshape(1, -1, 1, 1)
    t1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    t2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    gx = (ivar.reshape(1, -1, 1, 1) / m) * (m * gxhat - t1 - xhat * t2)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# elementwise / shape ops

def relu(x):
    return np.maximum(x, 0)


def relu_backward(gy, y):
    # derivative from the output: dead where the forward clamped
    return gy * (y > 0)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def concat_channels(xs):
    base = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ValueError(
                f"concat_channels: incompatible {x.shape} vs {base} "
                "(batch/spatial must match)")
    return np.concatenate(xs, axis=1)


def concat_channels_backward(gy, channel_sizes):
    outs, c0 = [], 0
    for c in channel_sizes:
        outs.append(gy[:, c0:c0 + c])
        c0 += c
    return outs


# ---------------------------------------------------------------------------
# pooling

def _pool_slices(k, s, oh, ow, d=1):
    for i in range(k):
        for j in range(k):
            yield (i, j,
                   slice(i * d, i * d + (oh - 1) * s + 1, s),
                   slice(j * d, j * d + (ow - 1) * s + 1, s))


def max_pool(x, k, s, p=0):
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, s, p)
    ow = conv_out_size(w, k, s, p)
    if p:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)),
                    constant_values=-np.inf)
    else:
        xp = x
    out = np.full((n, c, oh, ow), -np.inf, x.dtype)
    for _, _, hs, ws in _pool_slices(k, s, oh, ow):
        np.maximum(out, xp[:, :, hs, ws], out=out)
    return out


def max_pool_backward(gy, x, y, k, s, p=0):
    """Gradient goes to the first window position matching the max."""
    n, c, h, w = x.shape
    oh, ow = y.shape[2], y.shape[3]
    xp = _pad_hw(x, p) if p else x
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), x.dtype)
    taken = np.zeros(y.shape, bool)
    for _, _, hs, ws in _pool_slices(k, s, oh, ow):
        hit = (xp[:, :, hs, ws] == y) & ~taken
        gxp[:, :, hs, ws] += gy * hit
        taken |= hit
    return gxp[:, :, p:p + h, p:p + w] if p else gxp


def _avg_counts(h, w, k, s, p, oh, ow, dtype):
    ones = np.ones((1, 1, h, w), dtype)
    op = _pad_hw(ones, p)
    cnt = np.zeros((1, 1, oh, ow), dtype)
    for _, _, hs, ws in _pool_slices(k, s, oh, ow):
        cnt += op[:, :, hs, ws]
    return cnt


def avg_pool(x, k, s, p=0):
    """Average over valid cells only; padding never enters the divisor."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, s, p)
    ow = conv_out_size(w, k, s, p)
    xp = _pad_hw(x, p)
    out = np.zeros((n, c, oh, ow), x.dtype)
    for _, _, hs, ws in _pool_slices(k, s, oh, ow):
        out += xp[:, :, hs, ws]
    return out / _avg_counts(h, w, k, s, p, oh, ow, x.dtype)


def avg_pool_backward(gy, xshape, k, s, p=0):
    n, c, h, w = xshape
    oh = conv_out_size(h, k, s, p)
    ow = conv_out_size(w, k, s, p)
    g = gy / _avg_counts(h, w, k, s, p, oh, ow, gy.dtype)
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), gy.dtype)
    for _, _, hs, ws in _pool_slices(k, s, oh, ow):
        gxp[:, :, hs, ws] += g
    return gxp[:, :, p:p + h, p:p + w] if p else gxp


def _iround(x):
    # round half up; python round() would tie-to-even
    return int(np.floor(x + 0.5))


def grid_cols(rows, h, w):
    return max(1, _iround(rows * w / h))


def grid_bounds(extent, cells):
    return [_iround(i * extent / cells) for i in range(cells + 1)]


def grid_avg_pool(x, rows):
    """Adaptive average pool onto a rows x cols grid of near-square cells.

    cols = max(1, round(rows*W/H)); cell boundaries sit at round(i*H/rows) so
    the cells exactly partition the input.
    """
    n, c, h, w = x.shape
    if rows < 1 or rows > h:
        raise ValueError(f"grid_avg_pool: rows={rows} outside [1, H={h}]")
    cols = grid_cols(rows, h, w)
    rb, cb = grid_bounds(h, rows), grid_bounds(w, cols)
    out = np.empty((n, c, rows, cols), x.dtype)
    for i in range(rows):
        for j in range(cols):
            out[:, :, i, j] = x[:, :, rb[i]:rb[i + 1], cb[j]:cb[j + 1]].mean(axis=(2, 3))
    return out


def grid_avg_pool_backward(gy, xshape, rows):
    n, c, h, w = xshape
    cols = grid_cols(rows, h, w)
    rb, cb = grid_bounds(h, rows), grid_bounds(w, cols)
    gx = np.empty((n, c, h, w), gy.dtype)
    for i in range(rows):
        for j in range(cols):
            area = (rb[i + 1] - rb[i]) * (cb[j + 1] - cb[j])
            gx[:, :, rb[i]:rb[i + 1], cb[j]:cb[j + 1]] = \
                (gy[:, :, i, j] / area)[:, :, None, None]
    return gx


# ---------------------------------------------------------------------------
# bilinear resize

def _lin_weights(n_in, n_out, dtype):
    """Row-interpolation matrix under half-pixel center alignment."""
    wm = np.zeros((n_out, n_in), dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    f = (src - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(wm, (rows, i0), 1 - f)
    np.add.at(wm, (rows, i1), f)
    return wm


def bilinear_resize(x, out_h, out_w):
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: bad target {(out_h, out_w)}")
    if (h, w) == (out_h, out_w):
        return x.copy()
    wr = _lin_weights(h, out_h, x.dtype)
    wc = _lin_weights(w, out_w, x.dtype)
    t = np.matmul(wr[None, None], x)
    return np.matmul(t, wc.T[None, None])


def bilinear_resize_backward(gy, in_h, in_w):
    n, c, oh, ow = gy.shape
    if (oh, ow) == (in_h, in_w):
        return gy.copy()
    wr = _lin_weights(in_h, oh, gy.dtype)
    wc = _lin_weights(in_w, ow, gy.dtype)
    t = np.matmul(wr.T[None, None], gy)
    return np.matmul(t, wc[None, None])


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits, target, valid):
    """Mean CE against per-pixel target distributions.

    target matches logits (N,C,h,w); valid (N,h,w) masks pixels out of both
    the loss and its normalizer. A fully-masked batch yields loss 0 and
    all_masked=True so callers can warn instead of dividing by zero.
    Returns (loss, n_valid, all_masked).
    """
    if logits.shape != target.shape:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    if valid.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"cross_entropy: valid mask {valid.shape} vs logits {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = ((lse - z) * target).sum(axis=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return np.asarray(0.0, logits.dtype), 0, True
    loss = (nll * valid).sum() / n_valid
    return np.asarray(loss, logits.dtype), n_valid, False


def softmax_cross_entropy_backward(gy, logits, target, valid, n_valid):
    if n_valid == 0:
        return np.zeros_like(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    scale = (np.asarray(gy, logits.dtype) / n_valid) * valid
    return (probs - target) * scale[:, None]


def softmax_probs(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
