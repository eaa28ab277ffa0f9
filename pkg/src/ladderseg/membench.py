"""Peak-memory and recompute-cost benchmarking for training programs.

All numbers come straight from the executor's memory tracker; this module
only builds train programs, feeds them deterministic synthetic batches,
and repeats runs so wall times settle.  It also hosts the policy
equivalence check: recomputation replays the same kernels on the same
inputs, so every policy must reproduce the baseline gradients bit for
bit, and the check reports the worst absolute deviation per policy.
"""

import math

import numpy as np

from . import autograd as ag
from . import nets
from .trainer import head_feeds

MB = float(2 ** 20)


def synthetic_batch(num_classes, batch, h, w, seed=0):
    """Deterministic image and label maps for benchmarking at (batch, h, w)."""
    rng = np.random.default_rng([seed, batch, h, w])
    image = rng.standard_normal((batch, 3, h, w)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=(batch, h, w)).astype(np.uint8)
    return image, labels


def bench_inputs(model, batch, h, w, seed=0):
    """Train program plus a full synthetic feed dict for it."""
    program, heads = nets.build_train_program(model, batch, h, w)
    image, labels = synthetic_batch(model.spec.num_classes, batch, h, w, seed)
    feeds = {"image": image}
    feeds.update(head_feeds(heads, labels, model.spec.num_classes,
                            set(program.input_ids)))
    return program, feeds


def _clear_grads(model):
    for p in model.params:
        p.grad = None


def _run_step(model, program, feeds, policy):
    outs, ex = ag.trace_forward(program, feeds, policy=policy)
    ex.backward()
    loss = float(outs[0])
    _clear_grads(model)
    return loss, ex.report()


def measure_peak(model, batch, h, w, policy, steps=1, seed=0):
    """MemoryReport for one train step under a policy.

    Peaks and recompute counts are run-invariant; wall times are not, so
    with steps > 1 the report with the best total time is kept.
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    program, feeds = bench_inputs(model, batch, h, w, seed)
    best = None
    for _ in range(steps):
        _, rep = _run_step(model, program, feeds, policy)
        if best is None or rep.wall_time_total < best.wall_time_total:
            best = rep
    return best


def benchmark(model, batch, h, w, policies=ag.VARIANTS, steps=1, seed=0):
    """Reports for several policies over one shared program and feed dict."""
    for pol in policies:
        if pol not in ag.VARIANTS:
            raise ValueError(f"unknown policy {pol!r}; have {list(ag.VARIANTS)}")
    program, feeds = bench_inputs(model, batch, h, w, seed)
    reports = []
    for pol in policies:
        best = None
        for _ in range(steps):
            _, rep = _run_step(model, program, feeds, pol)
            if best is None or rep.wall_time_total < best.wall_time_total:
                best = rep
        reports.append(best)
    return reports


def fps(report, batch):
    return batch / report.wall_time_total


TABLE_COLUMNS = ("policy", "peak_mb", "recompute_kernels", "fps")


def table_rows(reports, batch):
    """CSV-ready rows, one per report, in the order given (policy order is
    the canonical mild-to-aggressive ordering, so it is kept)."""
    rows = [list(TABLE_COLUMNS)]
    for rep in reports:
        rows.append([rep.policy,
                     f"{rep.peak_total_bytes / MB:.1f}",
                     str(rep.recompute_kernel_invocations),
                     f"{fps(rep, batch):.2f}"])
    return rows


def _bn_snapshot(model):
    return [(st.running_mean.copy(), st.running_var.copy(), st.initialized)
            for _, st in model.bn_states]


def _bn_restore(model, snap):
    for (_, st), (rm, rv, init) in zip(model.bn_states, snap):
        st.running_mean[...] = rm
        st.running_var[...] = rv
        st.initialized = init


def policy_gradient_diffs(model, batch, h, w, seed=0):
    """Worst |grad - baseline grad| per policy, in policy order.

    Restores batch-norm running statistics between runs so the check
    leaves the model exactly as it found it.
    """
    program, feeds = bench_inputs(model, batch, h, w, seed)
    snap = _bn_snapshot(model)

    def grads_under(policy):
        _, ex = ag.trace_forward(program, feeds, policy=policy)
        ex.backward()
        out = [None if p.grad is None else p.grad.copy() for p in model.params]
        _clear_grads(model)
        _bn_restore(model, snap)
        return out

    base = grads_under("none")
    diffs = []
    for pol in ag.VARIANTS[1:]:
        worst = 0.0
        for g0, g1 in zip(base, grads_under(pol)):
            if (g0 is None) != (g1 is None):
                worst = math.inf
            elif g0 is not None:
                worst = max(worst, float(np.abs(g0 - g1).max()))
        diffs.append((pol, worst))
    return diffs


def max_batch_for_budget(model, h, w, policy, budget_bytes, seed=0):
    """Largest batch whose projected peak fits the byte budget.

    Peaks grow affinely in batch size (parameters are the fixed part), so
    two probe runs at batch 1 and 2 give slope and intercept; the answer
    is a projection, not a measurement.
    """
    if budget_bytes <= 0:
        raise ValueError(f"budget must be positive, got {budget_bytes}")
    p1 = measure_peak(model, 1, h, w, policy, seed=seed).peak_total_bytes
    p2 = measure_peak(model, 2, h, w, policy, seed=seed).peak_total_bytes
    per_sample = p2 - p1
    fixed = p1 - per_sample
    if per_sample <= 0:
        raise RuntimeError(f"peak did not grow with batch size ({p1} -> {p2})")
    n = int((budget_bytes - fixed) // per_sample)
    return {"policy": policy,
            "budget_bytes": int(budget_bytes),
            "fixed_bytes": int(fixed),
            "per_sample_bytes": int(per_sample),
            "max_batch": max(n, 0)}
