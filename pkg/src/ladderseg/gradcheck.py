"""Central-difference verification of every kernel's backward pass.

All checks run in float64. A check builds a random case, reduces the kernel
output to a scalar through a fixed random weighting, and compares the
analytic input gradients against (f(x+h)-f(x-h))/2h taken elementwise.
"""

import zlib

import numpy as np

from . import kernels as K


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        step = h * max(1.0, abs(x[idx]))
        old = x[idx]
        x[idx] = old + step
        fp = f()
        x[idx] = old - step
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_err(ga, gn):
    scale = max(np.abs(gn).max(), np.abs(ga).max(), 1e-8)
    return float(np.abs(ga - gn).max() / scale)


def _separated(rng, shape, gap=1e-3):
    """Sample values whose pairwise gaps exceed finite-difference steps."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) * (3.7 * gap) + rng.uniform(-gap / 4, gap / 4, n))
    return vals.reshape(shape).astype(np.float64)


def _weighted(rng, shape):
    return rng.standard_normal(shape)


# --- individual kernel cases; each returns max relative error over inputs ---

def _check_conv(rng, cp, n, h, w):
    x = rng.standard_normal((n, cp.in_channels, h, w))
    wt = rng.standard_normal(cp.weight_shape)
    r = _weighted(rng, K.conv2d(x, wt, cp).shape)
    gx, gw = K.conv2d_backward(r, x, wt, cp)
    ngx = numeric_grad(lambda: float((K.conv2d(x, wt, cp) * r).sum()), x)
    ngw = numeric_grad(lambda: float((K.conv2d(x, wt, cp) * r).sum()), wt)
    return max(rel_err(gx, ngx), rel_err(gw, ngw))


def check_conv2d(rng):
    cases = [
        K.ConvParams(3, 4, 3, stride=1, padding=1),
        K.ConvParams(2, 3, 3, stride=2, padding=1),
        K.ConvParams(4, 2, 1),
        K.ConvParams(3, 3, 3, stride=1, padding=2, dilation=2),
        K.ConvParams(4, 6, 3, stride=1, padding=1, groups=2),
    ]
    cp = cases[rng.integers(len(cases))]
    return _check_conv(rng, cp, 2, 6, 5)


def check_depthwise_conv(rng):
    c = 4
    return _check_conv(rng, K.ConvParams(c, c, 3, stride=1, padding=1, groups=c), 2, 5, 5)


def check_batch_norm(rng):
    x = rng.standard_normal((3, 4, 4, 5))
    gamma = rng.standard_normal(4) + 1.5
    beta = rng.standard_normal(4)
    mode = "train" if rng.integers(2) else "eval"
    state = K.BNState(4, np.float64)
    state.running_mean = rng.standard_normal(4)
    state.running_var = rng.uniform(0.5, 2.0, 4)
    state.initialized = True

    def fwd():
        st = K.BNState(4, np.float64)
        st.running_mean, st.running_var = state.running_mean, state.running_var
        st.initialized = True
        y, _ = K.batch_norm(x, gamma, beta, st, mode)
        return y

    r = _weighted(rng, x.shape)
    if mode == "train":
        _, saved = K.batch_norm(x, gamma, beta, K.BNState(4, np.float64), "train")
    else:
        saved = (state.running_mean, state.running_var)
    gx, gg, gb = K.batch_norm_backward(r, x, gamma, saved, stats_are_batch=(mode == "train"))
    loss = lambda: float((fwd() * r).sum())
    err = rel_err(gx, numeric_grad(loss, x))
    err = max(err, rel_err(gg, numeric_grad(loss, gamma)))
    err = max(err, rel_err(gb, numeric_grad(loss, beta)))
    return err


def check_relu(rng):
    x = _separated(rng, (2, 3, 4, 4))
    r = _weighted(rng, x.shape)
    y = K.relu(x)
    gx = K.relu_backward(r, y)
    return rel_err(gx, numeric_grad(lambda: float((K.relu(x) * r).sum()), x))


def check_add(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 3, 4, 4))
    r = _weighted(rng, a.shape)
    loss = lambda: float((K.add(a, b) * r).sum())
    return max(rel_err(r, numeric_grad(loss, a)), rel_err(r, numeric_grad(loss, b)))


def check_concat(rng):
    xs = [rng.standard_normal((2, c, 3, 4)) for c in (1, 3, 2)]
    r = _weighted(rng, (2, 6, 3, 4))
    gs = K.concat_channels_backward(r, [1, 3, 2])
    err = 0.0
    for x, g in zip(xs, gs):
        loss = lambda: float((K.concat_channels(xs) * r).sum())
        err = max(err, rel_err(np.ascontiguousarray(g), numeric_grad(loss, x)))
    return err


def check_max_pool(rng):
    k, s, p = [(2, 2, 0), (3, 2, 1), (3, 1, 0)][rng.integers(3)]
    x = _separated(rng, (2, 2, 6, 6))
    y = K.max_pool(x, k, s, p)
    r = _weighted(rng, y.shape)
    gx = K.max_pool_backward(r, x, y, k, s, p)
    return rel_err(gx, numeric_grad(lambda: float((K.max_pool(x, k, s, p) * r).sum()), x))


def check_avg_pool(rng):
    k, s, p = [(2, 2, 0), (3, 2, 1)][rng.integers(2)]
    x = rng.standard_normal((2, 3, 6, 6))
    y = K.avg_pool(x, k, s, p)
    r = _weighted(rng, y.shape)
    gx = K.avg_pool_backward(r, x.shape, k, s, p)
    return rel_err(gx, numeric_grad(lambda: float((K.avg_pool(x, k, s, p) * r).sum()), x))


def check_grid_avg_pool(rng):
    rows = int(rng.integers(1, 6))
    x = rng.standard_normal((2, 3, 6, 8))
    y = K.grid_avg_pool(x, rows)
    r = _weighted(rng, y.shape)
    gx = K.grid_avg_pool_backward(r, x.shape, rows)
    return rel_err(gx, numeric_grad(lambda: float((K.grid_avg_pool(x, rows) * r).sum()), x))


def check_bilinear_resize(rng):
    oh, ow = [(8, 10), (3, 2), (5, 5), (7, 3)][rng.integers(4)]
    x = rng.standard_normal((2, 2, 5, 5))
    y = K.bilinear_resize(x, oh, ow)
    r = _weighted(rng, y.shape)
    gx = K.bilinear_resize_backward(r, 5, 5)
    return rel_err(gx, numeric_grad(lambda: float((K.bilinear_resize(x, oh, ow) * r).sum()), x))


def check_softmax_cross_entropy(rng):
    n, c, h, w = 2, 4, 3, 3
    logits = rng.standard_normal((n, c, h, w))
    t = rng.uniform(0.1, 1.0, (n, c, h, w))
    t /= t.sum(axis=1, keepdims=True)
    valid = rng.uniform(size=(n, h, w)) > 0.3
    if not valid.any():
        valid[0, 0, 0] = True
    _, nv, _ = K.softmax_cross_entropy(logits, t, valid)
    ga = K.softmax_cross_entropy_backward(np.asarray(1.0), logits, t, valid, nv)
    gn = numeric_grad(lambda: float(K.softmax_cross_entropy(logits, t, valid)[0]), logits)
    return rel_err(ga, gn)


KERNEL_CHECKS = {
    "conv2d": check_conv2d,
    "depthwise_conv": check_depthwise_conv,
    "batch_norm": check_batch_norm,
    "relu": check_relu,
    "add": check_add,
    "concat_channels": check_concat,
    "max_pool": check_max_pool,
    "avg_pool": check_avg_pool,
    "grid_avg_pool": check_grid_avg_pool,
    "bilinear_resize": check_bilinear_resize,
    "softmax_cross_entropy": check_softmax_cross_entropy,
}

TOLERANCE = 1e-6


def run(kernels=None, trials=25, seed=0):
    """Returns {kernel: max rel err over trials}; raises on unknown names."""
    names = list(KERNEL_CHECKS) if kernels is None else list(kernels)
    for nm in names:
        if nm not in KERNEL_CHECKS:
            raise ValueError(f"unknown kernel {nm!r}; have {sorted(KERNEL_CHECKS)}")
    out = {}
    for nm in names:
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng([seed, t, zlib.crc32(nm.encode())])
            worst = max(worst, KERNEL_CHECKS[nm](rng))
        out[nm] = worst
    return out
