"""Recorded computation graphs with checkpointed reverse-mode differentiation.

A model builder records its forward pass once per input geometry as a Program
of kernel nodes. Scope tags placed during recording (stem, td, tu, unit, cat,
proj1x1, conv3x3) let a CheckpointPolicy turn contiguous tag runs into
recomputation segments: interior outputs are dropped as the forward pass
streams through them and are rebuilt from the segment entries exactly once
during backprop, in reverse segment order, with each segment's local cache
released before the previous segment starts. Replayed batch norm reuses the
statistics captured the first time around, so recomputation is bitwise equal
to the original pass and gradients match the uncheckpointed run bit for bit.

A MemoryTracker counts live activation, gradient and recomputation buffers at
allocation granularity; parameter bytes are constant and reported separately.
Gradient buffers are counted per logical slot even when an op hands the
incoming gradient through by reference (add, concat), which slightly
overstates backward peaks but does so identically under every policy.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .tensor import F32, F64, nbytes

TAGS = ("stem", "td", "tu", "unit", "cat", "proj1x1", "conv3x3")

VARIANTS = (
    "none",
    "conv3x3_only",
    "cat_proj",
    "cat_proj_and_3x3",
    "block_stem_td_up",
    "unit_whole",
    "unit_whole_plus_stem_td_up",
)

_REQUIRED_LEVELS = {
    "none": frozenset(),
    "conv3x3_only": frozenset({"conv3x3"}),
    "cat_proj": frozenset({"cat", "proj1x1"}),
    "cat_proj_and_3x3": frozenset({"cat", "proj1x1", "conv3x3"}),
    "block_stem_td_up": frozenset({"unit", "stem", "td", "tu"}),
    "unit_whole": frozenset({"unit"}),
    "unit_whole_plus_stem_td_up": frozenset({"unit", "stem", "td", "tu"}),
}


class Parameter:
    """A named, trainable array. Gradients accumulate into .grad."""

    __slots__ = ("name", "data", "grad", "group")

    def __init__(self, name, data, group="backbone"):
        self.name = name
        self.data = data
        self.grad = None
        self.group = group

    @property
    def nbytes(self):
        return self.data.nbytes

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, {self.data.shape}, group={self.group})"


# ---------------------------------------------------------------------------
# ops

class _Op:
    needs_input = ()
    needs_output = False

    def forward(self, ex, nid, vals):
        raise NotImplementedError

    def backward(self, ex, nid, gy, vals, out):
        raise NotImplementedError


class ConvOp(_Op):
    def __init__(self, cp, need_dx):
        self.cp = cp
        self.need_dx = need_dx
        self.needs_input = (True, True)

    name = "conv2d"

    def forward(self, ex, nid, vals):
        return K.conv2d(vals[0], vals[1], self.cp)

    def backward(self, ex, nid, gy, vals, out):
        gx, gw = K.conv2d_backward(gy, vals[0], vals[1], self.cp, self.need_dx)
        return [gx, gw]


class BatchNormOp(_Op):
    name = "batch_norm"
    needs_input = (True, True, False)

    def __init__(self, state, mode):
        self.state = state
        self.mode = mode

    def forward(self, ex, nid, vals):
        x, gamma, beta = vals
        if ex.replaying:
            y, _ = K.batch_norm(x, gamma, beta, self.state, self.mode,
                                saved=ex.aux[nid])
            return y
        y, saved = K.batch_norm(x, gamma, beta, self.state, self.mode)
        ex.put_aux(nid, saved, saved[0].nbytes + saved[1].nbytes)
        return y

    def backward(self, ex, nid, gy, vals, out):
        gx, dgamma, dbeta = K.batch_norm_backward(
            gy, vals[0], vals[1], ex.aux[nid],
            stats_are_batch=self.mode != "eval")
        return [gx, dgamma, dbeta]


class ReluOp(_Op):
    name = "relu"
    needs_input = (False,)
    needs_output = True

    def forward(self, ex, nid, vals):
        return K.relu(vals[0])

    def backward(self, ex, nid, gy, vals, out):
        return [K.relu_backward(gy, out)]


class AddOp(_Op):
    name = "add"
    needs_input = (False, False)

    def forward(self, ex, nid, vals):
        return K.add(vals[0], vals[1])

    def backward(self, ex, nid, gy, vals, out):
        return [gy, gy]


class ConcatOp(_Op):
    name = "concat"

    def __init__(self, sizes):
        self.sizes = tuple(sizes)
        self.needs_input = (False,) * len(sizes)

    def forward(self, ex, nid, vals):
        return K.concat_channels(vals)

    def backward(self, ex, nid, gy, vals, out):
        return K.concat_channels_backward(gy, self.sizes)


class MaxPoolOp(_Op):
    name = "max_pool"
    needs_input = (True,)
    needs_output = True

    def __init__(self, k, s, p):
        self.k, self.s, self.p = k, s, p

    def forward(self, ex, nid, vals):
        return K.max_pool(vals[0], self.k, self.s, self.p)

    def backward(self, ex, nid, gy, vals, out):
        return [K.max_pool_backward(gy, vals[0], out, self.k, self.s, self.p)]


class AvgPoolOp(_Op):
    name = "avg_pool"
    needs_input = (False,)

    def __init__(self, k, s, p, in_shape):
        self.k, self.s, self.p = k, s, p
        self.in_shape = in_shape

    def forward(self, ex, nid, vals):
        return K.avg_pool(vals[0], self.k, self.s, self.p)

    def backward(self, ex, nid, gy, vals, out):
        return [K.avg_pool_backward(gy, self.in_shape, self.k, self.s, self.p)]


class GridAvgPoolOp(_Op):
    name = "grid_avg_pool"
    needs_input = (False,)

    def __init__(self, rows, in_shape):
        self.rows = rows
        self.in_shape = in_shape

    def forward(self, ex, nid, vals):
        return K.grid_avg_pool(vals[0], self.rows)

    def backward(self, ex, nid, gy, vals, out):
        return [K.grid_avg_pool_backward(gy, self.in_shape, self.rows)]


class ResizeOp(_Op):
    name = "bilinear_resize"
    needs_input = (False,)

    def __init__(self, oh, ow, in_hw):
        self.oh, self.ow = oh, ow
        self.in_hw = in_hw

    def forward(self, ex, nid, vals):
        return K.bilinear_resize(vals[0], self.oh, self.ow)

    def backward(self, ex, nid, gy, vals, out):
        return [K.bilinear_resize_backward(gy, *self.in_hw)]


class CrossEntropyOp(_Op):
    """Loss node; stores (n_valid, all_masked) as aux for callers to inspect."""

    name = "cross_entropy"
    needs_input = (True, True, True)

    def forward(self, ex, nid, vals):
        logits, target, valid = vals
        loss, n_valid, masked = K.softmax_cross_entropy(logits, target, valid)
        if not ex.replaying:
            ex.put_aux(nid, (n_valid, masked), 0)
        return np.asarray(loss)

    def backward(self, ex, nid, gy, vals, out):
        logits, target, valid = vals
        n_valid, _ = ex.aux[nid]
        g = K.softmax_cross_entropy_backward(gy, logits, target, valid, n_valid)
        return [g, None, None]


class WeightedSumOp(_Op):
    """Scalar combination sum(w_i * x_i); used to blend loss terms."""

    name = "weighted_sum"

    def __init__(self, weights, in_dtypes):
        self.weights = tuple(float(w) for w in weights)
        self.in_dtypes = tuple(in_dtypes)
        self.needs_input = (False,) * len(weights)

    def forward(self, ex, nid, vals):
        return np.asarray(sum(w * float(v) for w, v in zip(self.weights, vals)), F64)

    def backward(self, ex, nid, gy, vals, out):
        g = float(gy)
        return [np.asarray(w * g, dt) for w, dt in zip(self.weights, self.in_dtypes)]


# ---------------------------------------------------------------------------
# graph recording

class Node:
    __slots__ = ("id", "kind", "op", "inputs", "shape", "dtype", "nbytes",
                 "name", "param")

    def __init__(self, nid, kind, op, inputs, shape, dtype, name, param=None):
        self.id = nid
        self.kind = kind  # input | param | op
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(shape)
        self.dtype = np.dtype(dtype)
        self.nbytes = nbytes(shape, dtype)
        self.name = name
        self.param = param

    def __repr__(self):
        tag = self.op.name if self.op else self.kind
        return f"Node({self.id}, {tag}, {self.shape})"


@dataclass(frozen=True)
class ScopeSpan:
    level: str
    start: int
    end: int  # inclusive


@dataclass(frozen=True)
class Program:
    nodes: tuple
    scopes: tuple
    outputs: tuple
    input_ids: dict
    param_nodes: tuple  # (node_id, Parameter)
    names: dict

    @property
    def levels(self):
        return frozenset(s.level for s in self.scopes)

    def consumers(self):
        """Per node: list of (consumer id, input slot). Cached on first use."""
        got = getattr(self, "_consumers", None)
        if got is None:
            got = [[] for _ in self.nodes]
            for v in self.nodes:
                for slot, u in enumerate(v.inputs):
                    got[u].append((v.id, slot))
            object.__setattr__(self, "_consumers", got)
        return got

    def activation_bytes(self):
        """Sum of op and input node output bytes (excludes parameters)."""
        return sum(n.nbytes for n in self.nodes if n.kind != "param")

    def param_bytes(self):
        return sum(p.nbytes for _, p in self.param_nodes)

    def node(self, name):
        return self.nodes[self.names[name]]


class GraphBuilder:
    def __init__(self):
        self._nodes = []
        self._scopes = []
        self._stack = []
        self._param_ids = {}

    # -- recording machinery

    def _add(self, kind, op, inputs, shape, dtype, name=None, param=None):
        nid = len(self._nodes)
        self._nodes.append(Node(nid, kind, op, inputs, shape, dtype, name, param))
        return nid

    @contextmanager
    def scope(self, level):
        start = len(self._nodes)
        self._stack.append(level)
        try:
            yield
        finally:
            self._stack.pop()
            end = len(self._nodes) - 1
            if end >= start:
                self._scopes.append(ScopeSpan(level, start, end))

    def _shape(self, nid):
        return self._nodes[nid].shape

    def _expect_nchw(self, nid, what):
        if len(self._shape(nid)) != 4:
            raise ValueError(f"{what}: expected a NCHW node, got {self._nodes[nid]!r}")

    # -- leaves

    def input(self, name, shape, dtype=F32):
        if any(n.kind == "input" and n.name == name for n in self._nodes):
            raise ValueError(f"duplicate input name {name!r}")
        return self._add("input", None, (), shape, dtype, name)

    def param(self, p):
        nid = self._param_ids.get(id(p))
        if nid is None:
            nid = self._add("param", None, (), p.data.shape, p.data.dtype,
                            p.name, param=p)
            self._param_ids[id(p)] = nid
        return nid

    # -- ops

    def conv(self, x, weight, cp, name=None):
        self._expect_nchw(x, "conv")
        n, c, h, w = self._shape(x)
        if c != cp.in_channels:
            raise ValueError(f"conv: node has {c} channels, ConvParams expects {cp.in_channels}")
        if weight.data.shape != cp.weight_shape:
            raise ValueError(f"conv: weight {weight.data.shape} vs expected {cp.weight_shape}")
        oh, ow = cp.out_size(h), cp.out_size(w)
        wid = self.param(weight)
        need_dx = self._nodes[x].kind != "input"
        return self._add("op", ConvOp(cp, need_dx), (x, wid),
                         (n, cp.out_channels, oh, ow), self._nodes[x].dtype, name)

    def batch_norm(self, x, gamma, beta, state, mode="train", name=None):
        self._expect_nchw(x, "batch_norm")
        c = self._shape(x)[1]
        for p in (gamma, beta):
            if p.data.shape != (c,):
                raise ValueError(f"batch_norm: {p.name} shape {p.data.shape} for {c} channels")
        if state.channels != c:
            raise ValueError(f"batch_norm: state has {state.channels} channels, node has {c}")
        gid, bid = self.param(gamma), self.param(beta)
        return self._add("op", BatchNormOp(state, mode), (x, gid, bid),
                         self._shape(x), self._nodes[x].dtype, name)

    def relu(self, x, name=None):
        return self._add("op", ReluOp(), (x,), self._shape(x),
                         self._nodes[x].dtype, name)

    def add(self, a, b, name=None):
        if self._shape(a) != self._shape(b):
            raise ValueError(f"add: {self._shape(a)} vs {self._shape(b)}")
        return self._add("op", AddOp(), (a, b), self._shape(a),
                         self._nodes[a].dtype, name)

    def concat(self, xs, name=None):
        if len(xs) < 2:
            return xs[0] if xs else self._fail_empty_concat()
        base = self._shape(xs[0])
        for x in xs[1:]:
            s = self._shape(x)
            if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
                raise ValueError(f"concat: {s} vs {base}")
        sizes = [self._shape(x)[1] for x in xs]
        shape = (base[0], sum(sizes), base[2], base[3])
        return self._add("op", ConcatOp(sizes), tuple(xs), shape,
                         self._nodes[xs[0]].dtype, name)

    @staticmethod
    def _fail_empty_concat():
        raise ValueError("concat: no inputs")

    def max_pool(self, x, k, s, p=0, name=None):
        n, c, h, w = self._shape(x)
        oh = K.conv_out_size(h, k, s, p)
        ow = K.conv_out_size(w, k, s, p)
        return self._add("op", MaxPoolOp(k, s, p), (x,), (n, c, oh, ow),
                         self._nodes[x].dtype, name)

    def avg_pool(self, x, k, s, p=0, name=None):
        n, c, h, w = self._shape(x)
        oh = K.conv_out_size(h, k, s, p)
        ow = K.conv_out_size(w, k, s, p)
        return self._add("op", AvgPoolOp(k, s, p, self._shape(x)), (x,),
                         (n, c, oh, ow), self._nodes[x].dtype, name)

    def grid_avg_pool(self, x, rows, name=None):
        n, c, h, w = self._shape(x)
        if rows > h:
            raise ValueError(f"grid_avg_pool: rows {rows} exceeds height {h}")
        cols = K.grid_cols(rows, h, w)
        return self._add("op", GridAvgPoolOp(rows, self._shape(x)), (x,),
                         (n, c, rows, cols), self._nodes[x].dtype, name)

    def resize(self, x, oh, ow, name=None):
        n, c, h, w = self._shape(x)
        return self._add("op", ResizeOp(oh, ow, (h, w)), (x,), (n, c, oh, ow),
                         self._nodes[x].dtype, name)

    def cross_entropy(self, logits, target, valid, name=None):
        ls, ts, vs = self._shape(logits), self._shape(target), self._shape(valid)
        if ls != ts:
            raise ValueError(f"cross_entropy: logits {ls} vs target {ts}")
        if vs != (ls[0], ls[2], ls[3]):
            raise ValueError(f"cross_entropy: valid {vs} vs logits {ls}")
        return self._add("op", CrossEntropyOp(), (logits, target, valid), (),
                         self._nodes[logits].dtype, name)

    def weighted_sum(self, xs, weights, name=None):
        if len(xs) != len(weights) or not xs:
            raise ValueError("weighted_sum: need matching non-empty terms and weights")
        for x in xs:
            if self._shape(x) != ():
                raise ValueError(f"weighted_sum: non-scalar term {self._nodes[x]!r}")
        dts = [self._nodes[x].dtype for x in xs]
        return self._add("op", WeightedSumOp(weights, dts), tuple(xs), (), F64, name)

    # -- finalize

    def build(self, outputs, prune=True):
        if not outputs:
            raise ValueError("build: no outputs")
        keep = [False] * len(self._nodes)
        stack = list(outputs)
        while stack:
            nid = stack.pop()
            if not keep[nid]:
                keep[nid] = True
                stack.extend(self._nodes[nid].inputs)
        if not prune:
            keep = [True] * len(self._nodes)

        remap = {}
        nodes = []
        for old in self._nodes:
            if not keep[old.id]:
                continue
            nid = len(nodes)
            remap[old.id] = nid
            nodes.append(Node(nid, old.kind, old.op,
                              tuple(remap[u] for u in old.inputs),
                              old.shape, old.dtype, old.name, old.param))

        scopes = []
        for s in sorted(self._scopes, key=lambda s: (s.start, -s.end)):
            ids = [remap[i] for i in range(s.start, s.end + 1) if keep[i]]
            if not ids:
                continue
            if ids[-1] - ids[0] + 1 != len(ids):
                raise AssertionError(f"scope {s.level} no longer contiguous after pruning")
            scopes.append(ScopeSpan(s.level, ids[0], ids[-1]))

        names = {}
        for n in nodes:
            if n.name is not None and n.kind != "param":
                if n.name in names:
                    raise ValueError(f"duplicate node name {n.name!r}")
                names[n.name] = n.id
        return Program(
            nodes=tuple(nodes),
            scopes=tuple(scopes),
            outputs=tuple(remap[o] for o in outputs),
            input_ids={n.name: n.id for n in nodes if n.kind == "input"},
            param_nodes=tuple((n.id, n.param) for n in nodes if n.kind == "param"),
            names=names,
        )


# ---------------------------------------------------------------------------
# checkpoint policies

@dataclass(frozen=True)
class CheckpointPolicy:
    """One of the named segmentation recipes, or custom(tags).

    Named variants, coarsest savings last:
      none, conv3x3_only, cat_proj, cat_proj_and_3x3, block_stem_td_up,
      unit_whole, unit_whole_plus_stem_td_up.
    custom fuses maximal runs of nodes covered by the given tags into
    segments, so e.g. ("cat", "proj1x1") reproduces cat_proj and ("unit",)
    fuses adjacent units into whole-block segments.
    """

    variant: str
    tags: tuple = ()

    def __post_init__(self):
        if self.variant == "custom":
            if not self.tags:
                raise ValueError("custom checkpoint policy needs at least one tag")
            bad = sorted(set(self.tags) - set(TAGS))
            if bad:
                raise ValueError(f"unknown checkpoint tags {bad}; known: {list(TAGS)}")
        elif self.variant not in VARIANTS:
            raise ValueError(f"unknown checkpoint policy {self.variant!r}; "
                             f"known: {list(VARIANTS)} or custom")

    @classmethod
    def parse(cls, text):
        """Accepts a variant name or 'custom:tag1,tag2'."""
        if isinstance(text, cls):
            return text
        if text.startswith("custom:"):
            tags = tuple(t.strip() for t in text[len("custom:"):].split(",") if t.strip())
            return cls("custom", tags)
        return cls(text)

    @property
    def name(self):
        if self.variant == "custom":
            return "custom:" + ",".join(self.tags)
        return self.variant

    def required_levels(self):
        if self.variant == "custom":
            return frozenset(self.tags)
        return _REQUIRED_LEVELS[self.variant]


def _covered_runs(program, levels):
    n = len(program.nodes)
    cov = np.zeros(n, bool)
    for s in program.scopes:
        if s.level in levels:
            cov[s.start:s.end + 1] = True
    runs, i = [], 0
    while i < n:
        if cov[i]:
            j = i
            while j + 1 < n and cov[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def policy_spans(program, policy):
    """Segment spans (start, end inclusive) for a policy, sorted, disjoint."""
    v = policy.variant
    if v == "none":
        spans = []
    elif v == "conv3x3_only":
        spans = _covered_runs(program, {"conv3x3"})
    elif v == "cat_proj":
        spans = _covered_runs(program, {"cat", "proj1x1"})
    elif v == "cat_proj_and_3x3":
        spans = (_covered_runs(program, {"cat", "proj1x1"})
                 + _covered_runs(program, {"conv3x3"}))
    elif v == "block_stem_td_up":
        spans = []
        for lv in ("unit", "stem", "td", "tu"):
            spans += _covered_runs(program, {lv})
    elif v == "unit_whole":
        spans = [(s.start, s.end) for s in program.scopes if s.level == "unit"]
    elif v == "unit_whole_plus_stem_td_up":
        spans = [(s.start, s.end) for s in program.scopes if s.level == "unit"]
        for lv in ("stem", "td", "tu"):
            spans += _covered_runs(program, {lv})
    else:
        spans = _covered_runs(program, set(policy.tags))
    spans = sorted((a, b) for a, b in spans if b > a)
    for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
        if a2 <= b1:
            raise AssertionError(f"overlapping checkpoint spans {(a1, b1)} / {(a2, b2)}")
    return spans


@dataclass
class Plan:
    """A policy applied to a program: cached flags, spans and liveness counts."""

    policy: CheckpointPolicy
    spans: tuple
    cached: list
    span_id: list
    fwd_refs: list
    bwd_uses: list
    rec_uses: list
    need_grad: list
    rebuilds: list


def plan_policy(program, policy):
    policy = CheckpointPolicy.parse(policy)
    missing = sorted(policy.required_levels() - program.levels)
    if missing:
        raise ValueError(
            f"checkpoint policy {policy.name!r} references tags absent "
            f"from the model: {missing}; model has {sorted(program.levels)}")

    spans = tuple(policy_spans(program, policy))
    n = len(program.nodes)
    cached = [True] * n
    span_id = [-1] * n
    for sid, (a, b) in enumerate(spans):
        if program.nodes[b].kind != "op":
            raise ValueError(f"checkpoint segment ending at node {b} has no op output")
        for i in range(a, b + 1):
            if program.nodes[i].kind != "op":
                continue
            span_id[i] = sid
            if i != b:
                cached[i] = False

    consumers = program.consumers()
    for v in program.nodes:
        if v.kind != "op":
            continue
        for slot, u in enumerate(v.inputs):
            if cached[u]:
                continue
            s = span_id[u]
            if not cached[v.id]:
                if span_id[v.id] != s:
                    raise ValueError(
                        f"checkpoint policy {policy.name!r} drops {program.nodes[u]!r} "
                        f"but {v!r} in another segment still needs it")
            elif v.id != spans[s][1] and v.op.needs_input[slot]:
                raise ValueError(
                    f"checkpoint policy {policy.name!r} drops {program.nodes[u]!r} "
                    f"whose value is needed by {v!r} outside the segment")

    fwd_refs = [0] * n
    bwd_uses = [0] * n
    need_grad = [nd.kind != "input" for nd in program.nodes]
    for u in range(n):
        nd = program.nodes[u]
        if nd.kind == "op" and nd.op.needs_output:
            bwd_uses[u] += 1
        for w, slot in consumers[u]:
            fwd_refs[u] += 1
            if program.nodes[w].op.needs_input[slot]:
                bwd_uses[u] += 1

    rec_uses = [0] * n
    rebuilds = [0] * n
    for sid, (a, b) in enumerate(spans):
        for u in range(a, b):
            if span_id[u] != sid or cached[u]:
                continue
            uses = bwd_uses[u]
            for w, _slot in consumers[u]:
                if a <= w < b:  # re-executed interior consumers
                    uses += 1
            rec_uses[u] = uses
            if isinstance(program.nodes[u].op, ConcatOp) and bwd_uses[u]:
                # a concatenation is pure layout: rather than keeping the
                # duplicate copy live until its consumers' backward, rebuild
                # it from its parts on demand and drop it right after
                rebuilds[u] = bwd_uses[u]
                rec_uses[u] -= bwd_uses[u]

    # every rebuild of a concatenation reads its parts once more; walk in
    # reverse id order so nested rebuild counts settle before propagating
    for u in range(n - 1, -1, -1):
        if not rebuilds[u]:
            continue
        for p in program.nodes[u].inputs:
            if program.nodes[p].kind != "op" or cached[p]:
                continue
            if rebuilds[p]:
                rebuilds[p] += rebuilds[u]
            else:
                rec_uses[p] += rebuilds[u]

    return Plan(policy, spans, cached, span_id, fwd_refs, bwd_uses,
                rec_uses, need_grad, rebuilds)


# ---------------------------------------------------------------------------
# memory accounting

class MemoryTracker:
    __slots__ = ("cur", "cur_total", "peak_forward", "peak_backward",
                 "peak_total", "phase", "live_spans", "max_live_spans",
                 "recompute_invocations", "span_runs")

    def __init__(self, n_spans):
        self.cur = {"act": 0, "grad": 0, "recompute": 0}
        self.cur_total = 0
        self.peak_forward = 0
        self.peak_backward = 0
        self.peak_total = 0
        self.phase = "forward"
        self.live_spans = 0
        self.max_live_spans = 0
        self.recompute_invocations = 0
        self.span_runs = [0] * n_spans

    def alloc(self, nb, cls):
        self.cur[cls] += nb
        self.cur_total += nb
        if self.cur_total > self.peak_total:
            self.peak_total = self.cur_total
        if self.phase == "forward":
            if self.cur_total > self.peak_forward:
                self.peak_forward = self.cur_total
        elif self.cur_total > self.peak_backward:
            self.peak_backward = self.cur_total

    def free(self, nb, cls):
        self.cur[cls] -= nb
        self.cur_total -= nb
        if self.cur[cls] < 0:
            raise AssertionError(f"memory tracker underflow in {cls}")


@dataclass(frozen=True)
class MemoryReport:
    policy: str
    peak_forward_bytes: int
    peak_backward_bytes: int
    peak_total_bytes: int
    param_bytes: int
    recompute_kernel_invocations: int
    wall_time_forward: float
    wall_time_total: float

    CSV_FIELDS = ("policy", "peak_forward_bytes", "peak_backward_bytes",
                  "peak_total_bytes", "param_bytes",
                  "recompute_kernel_invocations",
                  "wall_time_forward", "wall_time_total")

    def row(self):
        return [self.policy, str(self.peak_forward_bytes),
                str(self.peak_backward_bytes), str(self.peak_total_bytes),
                str(self.param_bytes), str(self.recompute_kernel_invocations),
                f"{self.wall_time_forward:.6f}", f"{self.wall_time_total:.6f}"]

    def to_kv(self):
        return "\n".join(f"{k}={v}" for k, v in zip(self.CSV_FIELDS, self.row()))


# ---------------------------------------------------------------------------
# execution

class Execution:
    """One training step's forward/backward over a Program under a policy."""

    def __init__(self, program, policy="none", grad_enabled=True):
        self.program = program
        self.plan = plan_policy(program, policy)
        self.grad_enabled = grad_enabled
        self.tracker = MemoryTracker(len(self.plan.spans))
        self.aux = {}
        self.replaying = False
        self._aux_bytes = {}
        self._vals = {}
        self._rec = {}
        self._rec_uses = {}
        self._transients = []
        self._slots = {}
        self._owned = set()
        self._open_span = None
        self._ran_forward = False
        self._consumed = False
        self._t_fwd = 0.0
        self._t_bwd = 0.0

    # -- helpers

    def put_aux(self, nid, value, nb):
        self.aux[nid] = value
        if nb:
            self._aux_bytes[nid] = nb
            self.tracker.alloc(nb, "act")

    def _value_for_forward(self, u):
        nd = self.program.nodes[u]
        if nd.kind == "param":
            return nd.param.data
        if self.replaying:
            v = self._vals.get(u)
            return v if v is not None else self._rec[u]
        return self._vals[u]

    # -- forward

    def forward(self, feeds):
        if self._ran_forward:
            raise RuntimeError("forward already ran; create a new Execution")
        self._ran_forward = True
        plan, tracker = self.plan, self.tracker
        out_set = set(self.program.outputs)
        fwd_left = list(plan.fwd_refs)
        t0 = time.perf_counter()

        for nd in self.program.nodes:
            if nd.kind == "input":
                try:
                    v = feeds[nd.name]
                except KeyError:
                    raise ValueError(f"missing input {nd.name!r}; "
                                     f"program expects {sorted(self.program.input_ids)}")
                if tuple(v.shape) != nd.shape:
                    raise ValueError(f"input {nd.name!r}: shape {v.shape}, "
                                     f"expected {nd.shape}")
                if v.dtype != nd.dtype:
                    raise ValueError(f"input {nd.name!r}: dtype {v.dtype}, "
                                     f"expected {nd.dtype}")
                v = np.ascontiguousarray(v)
                tracker.alloc(nd.nbytes, "act")
            elif nd.kind == "param":
                continue
            else:
                vals = [self._value_for_forward(u) for u in nd.inputs]
                v = nd.op.forward(self, nd.id, vals)
                tracker.alloc(nd.nbytes, "act")
            self._vals[nd.id] = v

            for u in nd.inputs:
                un = self.program.nodes[u]
                if un.kind != "op":
                    continue
                fwd_left[u] -= 1
                if fwd_left[u] == 0 and u not in out_set:
                    if not (self.grad_enabled and plan.cached[u]):
                        tracker.free(un.nbytes, "act")
                        del self._vals[u]

        self._t_fwd = time.perf_counter() - t0
        return [self._vals[o] for o in self.program.outputs]

    # -- backward

    def backward(self, grads=None):
        if not self._ran_forward:
            raise RuntimeError("backward before forward")
        if not self.grad_enabled:
            raise RuntimeError("backward on a grad-disabled execution")
        if self._consumed:
            raise RuntimeError("backward already consumed this trace")
        self._consumed = True
        plan, tracker = self.plan, self.tracker
        tracker.phase = "backward"
        t0 = time.perf_counter()

        outs = self.program.outputs
        if grads is None:
            grads = []
            for o in outs:
                nd = self.program.nodes[o]
                if nd.shape != ():
                    raise ValueError(f"output {nd!r} is not scalar; "
                                     "pass explicit output gradients")
                grads.append(np.asarray(1.0, nd.dtype))
        elif len(grads) != len(outs):
            raise ValueError(f"got {len(grads)} output gradients for {len(outs)} outputs")
        for o, g in zip(outs, grads):
            self._accumulate(o, np.asarray(g, self.program.nodes[o].dtype))

        for nid in range(len(self.program.nodes) - 1, -1, -1):
            # close a finished segment before this node can trigger the next
            self._maybe_close_span(nid)
            nd = self.program.nodes[nid]
            gy = self._slots.pop(nid, None)
            self._owned.discard(nid)
            if gy is None:
                self._drop_value(nid)
                continue
            if nd.kind == "param":
                p = nd.param
                p.grad = gy if p.grad is None else p.grad + gy
                continue  # bytes stay live with the parameter's gradient
            if nd.kind == "input":
                tracker.free(nd.nbytes, "grad")
                self._drop_value(nid)
                continue

            vals = [None] * len(nd.inputs)
            used = []
            for slot, u in enumerate(nd.inputs):
                if nd.op.needs_input[slot]:
                    vals[slot] = self._resolve(u, used)
            out = self._resolve(nid, used) if nd.op.needs_output else None

            gs = nd.op.backward(self, nid, gy, vals, out)
            for u, g in zip(nd.inputs, gs):
                if g is not None and plan.need_grad[u]:
                    self._accumulate(u, g)

            tracker.free(nd.nbytes, "grad")
            for u in used:
                self._consume_recomputed(u)
            while self._transients:
                tracker.free(self._transients.pop(), "recompute")
            self._drop_value(nid)

        self._maybe_close_span(-1)
        self._t_bwd = time.perf_counter() - t0

    def _accumulate(self, u, g):
        nd = self.program.nodes[u]
        if g.shape != nd.shape or g.dtype != nd.dtype:
            raise AssertionError(f"gradient for {nd!r}: got {g.shape} {g.dtype}")
        s = self._slots.get(u)
        if s is None:
            self._slots[u] = g
            self.tracker.alloc(nd.nbytes, "grad")
        elif u in self._owned:
            s += g
        else:
            self._slots[u] = s + g
            self._owned.add(u)

    def _resolve(self, u, used):
        nd = self.program.nodes[u]
        if nd.kind == "param":
            return nd.param.data
        v = self._vals.get(u)
        if v is not None:
            return v
        v = self._rec.get(u)
        if v is None:
            if self.plan.rebuilds[u]:
                return self._rebuild_concat(u)
            sid = self.plan.span_id[u]
            if sid < 0 or self.plan.cached[u]:
                raise AssertionError(f"value of {nd!r} unavailable at backward")
            self._run_recompute(sid)
            v = self._rec[u]
        used.append(u)
        return v

    def _rebuild_concat(self, u):
        # a concatenation dropped inside a segment is remade from its parts
        # on demand; the copy lives only until the consuming backward finishes
        nd = self.program.nodes[u]
        parts = []
        for p in nd.inputs:
            pn = self.program.nodes[p]
            if pn.kind == "param":
                parts.append(pn.param.data)
                continue
            v = self._vals.get(p)
            if v is None:
                v = self._rec.get(p)
            if v is None:
                if self.plan.rebuilds[p]:
                    v = self._rebuild_concat(p)
                else:
                    self._run_recompute(self.plan.span_id[p])
                    v = self._rec[p]
            parts.append(v)
        v = nd.op.forward(self, u, parts)
        self.tracker.alloc(nd.nbytes, "recompute")
        self.tracker.recompute_invocations += 1
        self._transients.append(nd.nbytes)
        for p in nd.inputs:
            if p in self._rec_uses:
                self._consume_recomputed(p)
        return v

    def _consume_recomputed(self, u):
        left = self._rec_uses.get(u)
        if left is None:
            return
        left -= 1
        self._rec_uses[u] = left
        if left == 0:
            self.tracker.free(self.program.nodes[u].nbytes, "recompute")
            del self._rec[u]
            del self._rec_uses[u]

    def _run_recompute(self, sid):
        tracker = self.tracker
        tracker.live_spans += 1
        if tracker.live_spans > 1:
            raise AssertionError("two recomputation segments live at once")
        tracker.max_live_spans = max(tracker.max_live_spans, tracker.live_spans)
        tracker.span_runs[sid] += 1
        a, b = self.plan.spans[sid]
        self.replaying = True
        try:
            for nid in range(a, b):
                nd = self.program.nodes[nid]
                if nd.kind != "op" or self.plan.cached[nid]:
                    continue
                vals = [self._value_for_forward(u) for u in nd.inputs]
                v = nd.op.forward(self, nid, vals)
                tracker.recompute_invocations += 1
                tracker.alloc(nd.nbytes, "recompute")
                self._rec[nid] = v
                self._rec_uses[nid] = self.plan.rec_uses[nid]
                if self._rec_uses[nid] == 0:
                    self._consume_recomputed2(nid)
                for u in nd.inputs:
                    if u in self._rec_uses:
                        self._consume_recomputed(u)
        finally:
            self.replaying = False
        self._open_span = sid

    def _consume_recomputed2(self, u):
        # a freshly recomputed value nothing will ever read again
        self.tracker.free(self.program.nodes[u].nbytes, "recompute")
        del self._rec[u]
        del self._rec_uses[u]

    def _maybe_close_span(self, nid):
        if self._open_span is None:
            return
        a, _b = self.plan.spans[self._open_span]
        if nid < a:
            if self._rec:
                raise AssertionError(
                    f"segment {self._open_span} left {len(self._rec)} live recomputed values")
            self.tracker.live_spans -= 1
            self._open_span = None

    def _drop_value(self, nid):
        nd = self.program.nodes[nid]
        v = self._vals.pop(nid, None)
        if v is not None and nd.kind != "param":
            self.tracker.free(nd.nbytes, "act")
        nb = self._aux_bytes.pop(nid, None)
        if nb:
            self.tracker.free(nb, "act")
        self.aux.pop(nid, None)

    # -- reporting

    def loss_info(self, name):
        """(n_valid, all_masked) recorded by a named cross-entropy node."""
        return self.aux[self.program.names[name]]

    def report(self):
        t = self.tracker
        return MemoryReport(
            policy=self.plan.policy.name,
            peak_forward_bytes=t.peak_forward,
            peak_backward_bytes=t.peak_backward,
            peak_total_bytes=t.peak_total,
            param_bytes=self.program.param_bytes(),
            recompute_kernel_invocations=t.recompute_invocations,
            wall_time_forward=self._t_fwd,
            wall_time_total=self._t_fwd + self._t_bwd,
        )


def trace_forward(program, feeds, policy="none", grad_enabled=True):
    """Run a recorded program; returns (outputs, trace) for backward()."""
    ex = Execution(program, policy, grad_enabled=grad_enabled)
    outs = ex.forward(feeds)
    return outs, ex


def backward(trace, loss_grad=None):
    trace.backward(loss_grad)
