"""Static cost model: parameters, multiply-adds and backprop cache footprints.

Everything here is computed from a built model or a recorded program without
executing any kernel, so reports on full-size configurations take well under
a second.

Conventions (also stamped on every report):
  * Parameter cells count convolution weights only; a transition's convolution
    is counted with the block preceding it, the final block has none, and
    residual projection shortcuts count with their block.
  * Multiply-add counts cover convolutions in the inference graph; BN, ReLU,
    pooling and resampling are excluded.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nets as N
from .autograd import ConvOp

PARAM_CONVENTION = ("conv weights only; trailing transition counted with its "
                    "preceding block; final block has none")
MACS_CONVENTION = ("fused multiply-adds of convolutions in the inference "
                   "graph; BN/ReLU/pool/resize excluded")

BLOCK_NAMES = ("db1", "db2", "db3", "db4")
CSV_COLUMNS = ("block", "params_M", "macs_G", "cache_per_pixel")


# ---------------------------------------------------------------------------
# per-pixel cache formulas

def cache_resnet(n, f_out):
    """Per-pixel activations a residual block of n units must keep: (n+1)*F."""
    if n < 1 or f_out < 1:
        raise ValueError(f"cache_resnet needs positive arguments, got n={n}, f_out={f_out}")
    return (n + 1) * f_out


def cache_densenet(f_in, n, k):
    """Per-pixel activations of a dense block caching only new feature maps."""
    if f_in < 1 or n < 1 or k < 1:
        raise ValueError(f"cache_densenet needs positive arguments, "
                         f"got f_in={f_in}, n={n}, k={k}")
    return f_in + (n - 1) * k


def dense_block_cache(f_in, n, k):
    """Per-pixel cache components of one dense block.

    shared: the optimized footprint (every map stored once); duplicated: what
    an implementation storing each unit's concatenated input additionally
    keeps, which grows as O(k n^2); bottleneck: the 4k-wide intermediates.
    """
    return {
        "shared": cache_densenet(f_in, n, k),
        "duplicated": n * f_in + k * n * (n - 1) // 2,
        "bottleneck": 4 * k * n,
    }


# ---------------------------------------------------------------------------
# parameter and MAC counts

def _part_of(group):
    """Collapse parameter groups into report rows; td rows fold backward."""
    if group.startswith("td"):
        return "db" + group[2:]
    if group.startswith("db"):
        return group[:3]
    if group in ("stem",):
        return "stem"
    return "decoder"  # spp, tu*, cls, aux


def _accumulate(parts, key, value):
    parts[key] = parts.get(key, 0) + value


def count_params(spec):
    """Exact conv-weight counts per report row for a spec's built model."""
    model = N.build_ladder_model(spec)
    parts = {}
    for p in model.params:
        if p.data.ndim == 4:
            _accumulate(parts, _part_of(p.group), p.data.size)
    return parts


def count_macs(spec, h, w, batch=1):
    """Multiply-adds of the inference graph at h x w, split per report row."""
    model = N.build_ladder_model(spec)
    prog = N.build_eval_program(model, batch, h, w)
    groups = {nid: p.group for nid, p in prog.param_nodes}
    parts = {}
    for nd in prog.nodes:
        if nd.kind != "op" or not isinstance(nd.op, ConvOp):
            continue
        _, _, ih, iw = prog.nodes[nd.inputs[0]].shape
        _accumulate(parts, _part_of(groups[nd.inputs[1]]), nd.op.cp.macs(ih, iw))
    return parts


def per_pixel_cache(spec):
    """Eq-style per-pixel activation counts for each backbone block."""
    model = N.build_ladder_model(spec)
    out = []
    for b in model.blocks:
        if isinstance(b, N.DenseBlock):
            out.append(cache_densenet(b.c_in, b.n, b.k))
        else:
            out.append(cache_resnet(len(b.units), b.c_out))
    return tuple(out)


def receptive_field(spec):
    """One-sided receptive field, in input pixels, of the last block's output.

    Walks the deepest path analytically: stem, transition pools and one 3x3
    per dense unit (the strided 3x3 for residual units). Removing a pool in
    favor of doubled dilation keeps every convolution's contribution equal;
    the totals differ only by the removed 2x2 pool windows themselves.
    """
    rf, jump = 1, 1

    def tap(k, stride=1, dilation=1):
        nonlocal rf, jump
        rf += (k - 1) * dilation * jump
        jump *= stride

    tap(7, 2)
    tap(3, 2)
    units = spec.block_units()
    splits = spec.splits()
    kind = spec.kind()
    for i in range(4):
        if kind == "dense":
            if i > 0 and spec.pool_before(i + 1):
                tap(2, 2)
            for j in range(units[i]):
                if splits.get(i + 1) == j:
                    tap(2, 2)
                tap(3, 1, spec.dilations[i])
        else:
            for j in range(units[i]):
                tap(3, 2 if i > 0 and j == 0 else 1)
                if kind == "res-basic":
                    tap(3)
    return rf


# ---------------------------------------------------------------------------
# policy cache simulation

def simulate_policy_cache(spec, policy, h, w, batch, dtype=np.float32):
    """Analytic peak bytes of a checkpointed training step's value caches.

    Counts the tensors the policy retains through the forward pass plus the
    largest single segment's recomputation cache. An upper-bound model (every
    segment interior is charged for the whole replay); gradient buffers are
    not modeled, which the x2 cross-check against the tracker absorbs.
    """
    model = N.build_ladder_model(spec)
    prog, _ = N.build_train_program(model, batch, h, w)
    plan = ag.plan_policy(prog, policy)

    retained = sum(nd.nbytes for nd in prog.nodes
                   if nd.kind == "input" or (nd.kind == "op" and plan.cached[nd.id]))
    largest = 0
    for sid, (a, b) in enumerate(plan.spans):
        cache = sum(prog.nodes[i].nbytes for i in range(a, b)
                    if plan.span_id[i] == sid and not plan.cached[i]
                    and prog.nodes[i].kind == "op")
        largest = max(largest, cache)
    scale = np.dtype(dtype).itemsize / 4
    return int((retained + largest) * scale)


# ---------------------------------------------------------------------------
# assembled report

@dataclass(frozen=True)
class CostReport:
    """Per-row costs; rows are the four blocks plus stem and decoder."""

    backbone: str
    res: tuple | None
    block_params: tuple
    other_params: tuple  # ((row, count), ...) in stable order
    block_macs: tuple | None
    other_macs: tuple | None
    block_cache: tuple

    @property
    def total_params(self):
        return sum(self.block_params) + sum(c for _, c in self.other_params)

    @property
    def total_macs(self):
        if self.block_macs is None:
            return None
        return sum(self.block_macs) + sum(c for _, c in self.other_macs)

    def params_millions(self):
        return tuple(round(c / 1e6, 1) for c in self.block_params)

    def csv_rows(self):
        """Rows under the fixed header: block, params_M, macs_G, cache_per_pixel."""
        def giga(x):
            return "" if x is None else f"{x / 1e9:.2f}"

        rows = [list(CSV_COLUMNS)]
        macs = self.block_macs or (None,) * 4
        for name, p, m, c in zip(BLOCK_NAMES, self.block_params, macs, self.block_cache):
            rows.append([name, f"{p / 1e6:.1f}", giga(m), str(c)])
        other_macs = dict(self.other_macs or ())
        for name, p in self.other_params:
            rows.append([name, f"{p / 1e6:.1f}", giga(other_macs.get(name)), ""])
        rows.append(["total", f"{self.total_params / 1e6:.1f}",
                     giga(self.total_macs), ""])
        return rows

    def lines(self):
        out = [f"backbone {self.backbone}"
               + (f" at {self.res[0]}x{self.res[1]}" if self.res else ""),
               f"params: {PARAM_CONVENTION}",
               f"macs: {MACS_CONVENTION}"]
        out += ["  ".join(cell.ljust(12) for cell in row) for row in self.csv_rows()]
        return out


def analyze(spec, res=None):
    """Assemble the cost report for a spec, with MACs when res=(H, W) given."""
    params = count_params(spec)
    macs = count_macs(spec, *res) if res is not None else None
    other_rows = [r for r in ("stem", "decoder") if r in params]
    return CostReport(
        backbone=spec.backbone,
        res=tuple(res) if res is not None else None,
        block_params=tuple(params[b] for b in BLOCK_NAMES),
        other_params=tuple((r, params[r]) for r in other_rows),
        block_macs=tuple(macs.get(b, 0) for b in BLOCK_NAMES) if macs else None,
        other_macs=tuple((r, macs.get(r, 0)) for r in other_rows) if macs else None,
        block_cache=per_pixel_cache(spec),
    )
