"""Dense and residual segmentation models with a ladder upsampling path.

An ArchSpec declares the backbone (DenseNet-style with bottleneck units and
0.5 compression, or ResNet-style basic/bottleneck blocks), the pooling layout
(extra block splits for 64x/128x downsampling, dilation with pool removal for
8x/16x), the upsampling path (pyramid pooling, transition-up chain, classifier)
and auxiliary heads.  ``build_ladder_model`` turns a spec into a LadderModel
whose ``record`` method emits the whole forward graph into a GraphBuilder,
wrapping nodes in the scope tags ("stem", "unit", "cat", "proj1x1", "conv3x3",
"td", "tu") that the checkpointing policies select on.

Modules own their Parameters; the model aggregates them in construction order,
which is also the initialization and checkpoint order.  Construction is cheap
and allocates only parameter buffers, no activations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from . import kernels as K
from .kernels import ConvParams

F32 = np.float32

# name -> (kind, units per block, growth rate, default stem width)
BACKBONES = {
    "dn121": ("dense", (6, 12, 24, 16), 32, 64),
    "dn169": ("dense", (6, 12, 32, 32), 32, 64),
    "dn161": ("dense", (6, 12, 36, 24), 48, 96),
    "rn50": ("res-bottleneck", (3, 4, 6, 3), None, 64),
    "rn18": ("res-basic", (2, 2, 2, 2), None, 64),
    "toy": ("dense", None, None, 64),
}

# output channels per residual block
RES_WIDTHS = {"res-bottleneck": (256, 512, 1024, 2048), "res-basic": (64, 128, 256, 512)}

SPP_GRID_ROWS = (1, 2, 4, 8)

_SPLITS_BY_FACTOR = {32: 0, 64: 1, 128: 2}


@dataclass(frozen=True)
class ArchSpec:
    """Declarative model configuration; serializes to a flat JSON object."""

    backbone: str
    num_classes: int
    toy_units: tuple | None = None
    toy_growth: int | None = None
    stem_width: int | None = None
    downsample_factor: int = 32
    output_stride: int = 4
    split_block: int | None = None
    split_unit_index: int | None = None
    dilations: tuple = (1, 1, 1, 1)
    upsample_width: int = 128
    use_spp: bool = True
    dws_upsampling: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.toy_units is not None:
            object.__setattr__(self, "toy_units", tuple(int(n) for n in self.toy_units))
        self._validate()

    def _validate(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.backbone == "toy":
            if self.toy_units is None or self.toy_growth is None:
                raise ValueError("toy backbone requires toy_units and toy_growth")
            if len(self.toy_units) != 4 or min(self.toy_units) < 1:
                raise ValueError(f"toy_units must be 4 positive counts, got {self.toy_units}")
            if self.toy_growth < 1:
                raise ValueError(f"toy_growth must be positive, got {self.toy_growth}")
        elif self.toy_units is not None or self.toy_growth is not None:
            raise ValueError(f"toy_units/toy_growth only apply to the toy backbone, not {self.backbone!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.downsample_factor not in _SPLITS_BY_FACTOR:
            raise ValueError(f"downsample_factor must be one of {sorted(_SPLITS_BY_FACTOR)}, "
                             f"got {self.downsample_factor}")
        if self.stem_width is not None and self.stem_width < 1:
            raise ValueError(f"stem_width must be positive, got {self.stem_width}")
        if self.upsample_width < 8:
            raise ValueError(f"upsample_width must be at least 8, got {self.upsample_width}")

        if len(self.dilations) != 4 or self.dilations[0] != 1:
            raise ValueError(f"dilations must list 4 per-block factors starting at 1, got {self.dilations}")
        for prev, cur in zip(self.dilations, self.dilations[1:]):
            if cur not in (prev, 2 * prev):
                # each step either keeps the dilation or doubles it in place of a pool
                raise ValueError(f"dilations may only repeat or double block to block, got {self.dilations}")
        dilated = self.dilations != (1, 1, 1, 1)
        if dilated and self.downsample_factor != 32:
            raise ValueError("dilation replaces pooling and requires downsample_factor=32")

        kind = BACKBONES[self.backbone][0]
        if kind != "dense":
            if self.downsample_factor != 32 or dilated:
                raise ValueError("residual backbones support only downsample_factor=32 without dilation")

        n_splits = _SPLITS_BY_FACTOR[self.downsample_factor]
        if n_splits == 0:
            if self.split_block is not None or self.split_unit_index is not None:
                raise ValueError("split_block/split_unit_index require downsample_factor >= 64")
        else:
            if self.split_block is not None and self.split_block not in (3, 4):
                raise ValueError(f"split_block must be 3 or 4, got {self.split_block}")
            if self.split_unit_index is not None:
                if self.split_block is None:
                    raise ValueError("split_unit_index requires split_block")
                n = self.block_units()[self.split_block - 1]
                if not 1 <= self.split_unit_index <= n - 1:
                    raise ValueError(f"split_unit_index must lie in [1, {n - 1}] "
                                     f"for block {self.split_block}, got {self.split_unit_index}")

        u, fs = self.output_stride, self.final_stride()
        if u not in (2, 4) and u != fs:
            raise ValueError(f"output_stride must be 2, 4, or the full factor {fs}, got {u}")
        if fs % u or (fs // u) & (fs // u - 1):
            raise ValueError(f"output_stride {u} must divide downsampling {fs} by a power of two")

    # -- derived layout

    def block_units(self):
        kind, units, _, _ = BACKBONES[self.backbone]
        return self.toy_units if self.backbone == "toy" else units

    def growth(self):
        return self.toy_growth if self.backbone == "toy" else BACKBONES[self.backbone][2]

    def resolved_stem_width(self):
        return self.stem_width if self.stem_width is not None else BACKBONES[self.backbone][3]

    def kind(self):
        return BACKBONES[self.backbone][0]

    def pool_before(self, i):
        """Whether a stride-2 pool precedes block i (1-based, i >= 2)."""
        return self.dilations[i - 1] == self.dilations[i - 2]

    def final_stride(self):
        """Stride of the last block's output relative to the input."""
        removed = sum(1 for i in (2, 3, 4) if not self.pool_before(i))
        return self.downsample_factor >> removed

    def splits(self):
        """{1-based block index: units before the internal pool}."""
        n_splits = _SPLITS_BY_FACTOR[self.downsample_factor]
        if n_splits == 0:
            return {}
        units = self.block_units()
        chosen = self.split_block if self.split_block is not None else 3
        out = {chosen: self.split_unit_index if self.split_unit_index is not None
               else units[chosen - 1] // 2}
        if n_splits == 2:
            other = 7 - chosen
            out[other] = units[other - 1] // 2
        return out

    def num_tus(self):
        fs = self.final_stride()
        return 0 if self.output_stride == fs else int(math.log2(fs // self.output_stride))

    # -- serialization

    def to_json(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, doc):
        if not isinstance(doc, dict):
            raise ValueError(f"ArchSpec document must be an object, got {type(doc).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown ArchSpec fields: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# building blocks
#
# Modules hold Parameters and running statistics; record() emits graph nodes.
# parameters()/bn_states() enumerate in a fixed order so that initialization
# and checkpoints are deterministic.


class Conv2d:
    def __init__(self, name, cp, group):
        self.name = name
        self.cp = cp
        self.w = ag.Parameter(name + ".w", np.zeros(cp.weight_shape, F32), group)

    def parameters(self):
        return [self.w]

    def bn_states(self):
        return []

    def record(self, g, x, name=None):
        return g.conv(x, self.w, self.cp, name=name)


class BatchNorm2d:
    def __init__(self, name, channels, group):
        self.name = name
        self.gamma = ag.Parameter(name + ".gamma", np.ones(channels, F32), group)
        self.beta = ag.Parameter(name + ".beta", np.zeros(channels, F32), group)
        self.state = K.BNState(channels)

    def parameters(self):
        return [self.gamma, self.beta]

    def bn_states(self):
        return [(self.name, self.state)]

    def record(self, g, x, mode):
        return g.batch_norm(x, self.gamma, self.beta, self.state, mode)


def _collect(modules, method):
    out = []
    for m in modules:
        out.extend(getattr(m, method)())
    return out


class Stem:
    """7x7 stride-2 convolution, BN, ReLU, 3x3 stride-2 max-pool: 4x subsampling."""

    def __init__(self, width, in_channels=3, name="stem", group="stem"):
        self.width = width
        self.conv = Conv2d(name + ".conv", ConvParams(in_channels, width, 7, 2, 3), group)
        self.bn = BatchNorm2d(name + ".bn", width, group)

    def parameters(self):
        return _collect((self.conv, self.bn), "parameters")

    def bn_states(self):
        return self.bn.bn_states()

    def record(self, g, x, mode):
        with g.scope("stem"):
            h = self.conv.record(g, x)
            h = self.bn.record(g, h, mode)
            h = g.relu(h)
            h = g.max_pool(h, 3, 2, 1)
        return h


class DenseUnit:
    """BN-ReLU-1x1 (to 4k) then BN-ReLU-3x3 (to k) on the concatenated inputs."""

    def __init__(self, name, in_channels, k, dilation, group):
        self.bn1 = BatchNorm2d(name + ".bn1", in_channels, group)
        self.conv1 = Conv2d(name + ".conv1", ConvParams(in_channels, 4 * k, 1), group)
        self.bn2 = BatchNorm2d(name + ".bn2", 4 * k, group)
        self.conv2 = Conv2d(name + ".conv2",
                            ConvParams(4 * k, k, 3, 1, dilation, dilation), group)

    def parameters(self):
        return _collect((self.bn1, self.conv1, self.bn2, self.conv2), "parameters")

    def bn_states(self):
        return _collect((self.bn1, self.conv1, self.bn2, self.conv2), "bn_states")

    def record(self, g, feats, mode):
        with g.scope("unit"):
            with g.scope("cat"):
                x = g.concat(feats)
            with g.scope("proj1x1"):
                h = self.bn1.record(g, x, mode)
                h = g.relu(h)
                h = self.conv1.record(g, h)
            with g.scope("conv3x3"):
                h = self.bn2.record(g, h, mode)
                h = g.relu(h)
                h = self.conv2.record(g, h)
        return h


class DenseBlock:
    """n dense units; an optional internal stride-2 average pool after split_at units.

    All tensors entering units after the split are pooled once, via the running
    concatenation (pooling commutes with channel concatenation).
    """

    def __init__(self, c_in, n, k, split_at=None, dilation=1, name="block", group="backbone"):
        if n < 1:
            raise ValueError(f"dense block needs at least one unit, got {n}")
        if split_at is not None and not 1 <= split_at <= n - 1:
            raise ValueError(f"split_at must lie in [1, {n - 1}], got {split_at}")
        self.name = name
        self.c_in, self.n, self.k = c_in, n, k
        self.split_at = split_at
        self.dilation = dilation
        self.units = [DenseUnit(f"{name}.u{j}", c_in + j * k, k, dilation, group)
                      for j in range(n)]
        self.c_out = c_in + n * k

    def parameters(self):
        return _collect(self.units, "parameters")

    def bn_states(self):
        return _collect(self.units, "bn_states")

    def record(self, g, x, mode):
        """Returns (block output, tensor before the internal pool or None)."""
        feats = [x]
        split_skip = None
        for j, unit in enumerate(self.units):
            if self.split_at == j:
                split_skip = g.concat(feats, name=f"{self.name}.split")
                feats = [g.avg_pool(split_skip, 2, 2)]
            feats.append(unit.record(g, feats, mode))
        return g.concat(feats, name=f"{self.name}.out"), split_skip


class TransitionDown:
    """BN-ReLU-1x1 halving the channels, then a 2x2 stride-2 average pool.

    The pool is dropped when the following block compensates with dilation.
    """

    def __init__(self, c_in, pool=True, name="td", group="backbone"):
        self.bn = BatchNorm2d(name + ".bn", c_in, group)
        self.conv = Conv2d(name + ".conv", ConvParams(c_in, c_in // 2, 1), group)
        self.pool = pool
        self.c_out = c_in // 2

    def parameters(self):
        return _collect((self.bn, self.conv), "parameters")

    def bn_states(self):
        return self.bn.bn_states()

    def record(self, g, x, mode):
        with g.scope("td"):
            h = self.bn.record(g, x, mode)
            h = g.relu(h)
            h = self.conv.record(g, h)
            if self.pool:
                h = g.avg_pool(h, 2, 2)
        return h


class ResUnit:
    """Pre-activation residual unit; bottleneck (1x1, 3x3, 1x1) or basic (two 3x3)."""

    def __init__(self, name, c_in, c_out, stride, bottleneck, group):
        self.bottleneck = bottleneck
        mid = c_out // 4 if bottleneck else c_out
        self.bn1 = BatchNorm2d(name + ".bn1", c_in, group)
        if bottleneck:
            self.conv1 = Conv2d(name + ".conv1", ConvParams(c_in, mid, 1), group)
            self.bn2 = BatchNorm2d(name + ".bn2", mid, group)
            self.conv2 = Conv2d(name + ".conv2", ConvParams(mid, mid, 3, stride, 1), group)
            self.bn3 = BatchNorm2d(name + ".bn3", mid, group)
            self.conv3 = Conv2d(name + ".conv3", ConvParams(mid, c_out, 1), group)
        else:
            self.conv1 = Conv2d(name + ".conv1", ConvParams(c_in, mid, 3, stride, 1), group)
            self.bn2 = BatchNorm2d(name + ".bn2", mid, group)
            self.conv2 = Conv2d(name + ".conv2", ConvParams(mid, c_out, 3, 1, 1), group)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(name + ".proj", ConvParams(c_in, c_out, 1, stride), group)

    def _members(self):
        out = [self.bn1, self.conv1, self.bn2, self.conv2]
        if self.bottleneck:
            out += [self.bn3, self.conv3]
        if self.proj is not None:
            out.append(self.proj)
        return out

    def parameters(self):
        return _collect(self._members(), "parameters")

    def bn_states(self):
        return _collect(self._members(), "bn_states")

    def record(self, g, x, mode):
        with g.scope("unit"):
            a = g.relu(self.bn1.record(g, x, mode))
            h = self.conv1.record(g, a)
            h = g.relu(self.bn2.record(g, h, mode))
            h = self.conv2.record(g, h)
            if self.bottleneck:
                h = g.relu(self.bn3.record(g, h, mode))
                h = self.conv3.record(g, h)
            shortcut = self.proj.record(g, a) if self.proj is not None else x
            out = g.add(h, shortcut)
        return out


class ResBlock:
    def __init__(self, c_in, c_out, n, stride, bottleneck, name="block", group="backbone"):
        self.name = name
        self.units = [ResUnit(f"{name}.u{j}", c_in if j == 0 else c_out, c_out,
                              stride if j == 0 else 1, bottleneck, group)
                      for j in range(n)]
        self.c_out = c_out

    def parameters(self):
        return _collect(self.units, "parameters")

    def bn_states(self):
        return _collect(self.units, "bn_states")

    def record(self, g, x, mode):
        for unit in self.units:
            x = unit.record(g, x, mode)
        return x


class PyramidPooling:
    """Project to D/2, pool over coarse grids, project each to D/8, upsample,
    concatenate back to D channels and blend to D/4."""

    def __init__(self, d_in, grid_rows=SPP_GRID_ROWS, name="spp", group="spp"):
        if d_in % 8:
            raise ValueError(f"pyramid pooling input channels must divide by 8, got {d_in}")
        self.grid_rows = tuple(grid_rows)
        self.proj = Conv2d(name + ".proj", ConvParams(d_in, d_in // 2, 1), group)
        self.branches = [Conv2d(f"{name}.g{t}", ConvParams(d_in // 2, d_in // 8, 1), group)
                         for t in range(len(self.grid_rows))]
        self.blend = Conv2d(name + ".blend",
                            ConvParams(d_in // 2 + len(self.grid_rows) * (d_in // 8),
                                       d_in // 4, 1), group)
        self.c_out = d_in // 4

    def parameters(self):
        return _collect([self.proj] + self.branches + [self.blend], "parameters")

    def bn_states(self):
        return []

    def record(self, g, x, mode):
        """Returns (blended output, list of pooled-and-projected branch nodes)."""
        _, _, h, w = g._shape(x)
        base = self.proj.record(g, x)
        parts, pooled = [base], []
        for rows, conv in zip(self.grid_rows, self.branches):
            p = g.grid_avg_pool(base, min(rows, h))
            p = conv.record(g, p)
            pooled.append(p)
            parts.append(g.resize(p, h, w))
        return self.blend.record(g, g.concat(parts), name="spp.out"), pooled


class TransitionUp:
    """Bilinear 2x upsample, add the 1x1-projected skip, reduce to `width`,
    finish with a single 3x3 convolution (depthwise separable when dws)."""

    def __init__(self, c_low, c_skip, width, dws=False, name="tu", group="tu"):
        self.name = name
        self.skip_proj = Conv2d(name + ".skip", ConvParams(c_skip, c_low, 1), group)
        self.reduce = None
        if c_low != width:
            self.reduce = Conv2d(name + ".reduce", ConvParams(c_low, width, 1), group)
        if dws:
            self.conv_dw = Conv2d(name + ".dw", ConvParams(width, width, 3, 1, 1, 1, width), group)
            self.conv_pw = Conv2d(name + ".pw", ConvParams(width, width, 1), group)
            self._convs = [self.conv_dw, self.conv_pw]
        else:
            self.conv = Conv2d(name + ".conv", ConvParams(width, width, 3, 1, 1), group)
            self._convs = [self.conv]
        self.c_out = width

    def parameters(self):
        mods = [self.skip_proj] + ([self.reduce] if self.reduce else []) + self._convs
        return _collect(mods, "parameters")

    def bn_states(self):
        return []

    def record(self, g, low, skip, mode):
        _, _, lh, lw = g._shape(low)
        _, _, sh, sw = g._shape(skip)
        if (sh, sw) != (2 * lh, 2 * lw):
            raise ValueError(f"{self.name}: skip {sh}x{sw} must be exactly twice "
                             f"the low-resolution input {lh}x{lw}")
        with g.scope("tu"):
            up = g.resize(low, sh, sw)
            h = g.add(up, self.skip_proj.record(g, skip))
            if self.reduce is not None:
                h = self.reduce.record(g, h)
            for conv in self._convs[:-1]:
                h = conv.record(g, h)
            out = self._convs[-1].record(g, h, name=self.name + ".out")
        return out


# ---------------------------------------------------------------------------
# full model


@dataclass(frozen=True)
class Head:
    """One logit head: where its node lives and what image window a logit covers.

    grid is None for uniformly strided heads; for pyramid-pooling heads it holds
    (rows, cols, feature_h, feature_w) so targets can follow the grid partition.
    """
    name: str
    node: int
    stride: int
    grid: tuple | None = None


@dataclass(frozen=True)
class Heads:
    final: Head
    aux: tuple


class LadderModel:
    """Built topology plus parameter buffers; emits graphs via record()."""

    def __init__(self, spec, seed=None):
        self.spec = spec
        kind = spec.kind()
        units = spec.block_units()
        width = spec.resolved_stem_width()
        splits = spec.splits()

        self.stem = Stem(width)
        self.blocks, self.tds = [], []
        strides = []  # output stride of each block
        stride = 4
        c = width
        if kind == "dense":
            k = spec.growth()
            for i in range(4):
                if i > 0:
                    pool = spec.pool_before(i + 1)
                    self.tds.append(TransitionDown(c, pool, name=f"td{i}", group=f"td{i}"))
                    c = self.tds[-1].c_out
                    stride *= 2 if pool else 1
                split_at = splits.get(i + 1)
                self.blocks.append(DenseBlock(c, units[i], k, split_at, spec.dilations[i],
                                              name=f"db{i + 1}", group=f"db{i + 1}"))
                c = self.blocks[-1].c_out
                stride *= 2 if split_at is not None else 1
                strides.append(stride)
        else:
            widths = RES_WIDTHS[kind]
            for i in range(4):
                stride *= 2 if i > 0 else 1
                self.blocks.append(ResBlock(c, widths[i], units[i], 1 if i == 0 else 2,
                                            kind == "res-bottleneck",
                                            name=f"db{i + 1}", group=f"db{i + 1}"))
                c = self.blocks[-1].c_out
                strides.append(stride)
        self.block_strides = tuple(strides)
        assert strides[-1] == spec.final_stride()

        self.spp = None
        if spec.use_spp:
            self.spp = PyramidPooling(c)
            c = self.spp.c_out

        self.tus = []
        num_tus = spec.num_tus()
        if num_tus:
            skip_channels = self._skip_channels()
            if len(skip_channels) < num_tus:
                raise ValueError(f"output_stride {spec.output_stride} needs {num_tus} skip "
                                 f"tensors but the backbone provides {len(skip_channels)}")
            for j in range(num_tus):
                c_skip = skip_channels[len(skip_channels) - 1 - j][1]
                tu = TransitionUp(c, c_skip, spec.upsample_width, spec.dws_upsampling,
                                  name=f"tu{j + 1}", group=f"tu{j + 1}")
                self.tus.append(tu)
                c = tu.c_out

        self.classifier = Conv2d("cls", ConvParams(c, spec.num_classes, 1), "cls")
        self.aux_heads = []
        if self.spp is not None:
            d8 = self.spp.branches[0].cp.out_channels
            self.aux_heads += [Conv2d(f"aux.spp{t}", ConvParams(d8, spec.num_classes, 1), "aux")
                               for t in range(len(self.spp.grid_rows))]
        self.aux_heads += [Conv2d(f"aux.tu{j + 1}", ConvParams(spec.upsample_width,
                                                               spec.num_classes, 1), "aux")
                           for j in range(len(self.tus))]

        mods = [self.stem]
        for i, b in enumerate(self.blocks):
            if i > 0 and self.tds:
                mods.append(self.tds[i - 1])
            mods.append(b)
        mods += ([self.spp] if self.spp else []) + self.tus + [self.classifier] + self.aux_heads
        self.params = _collect(mods, "parameters")
        self.bn_states = _collect(mods, "bn_states")
        names = [p.name for p in self.params]
        assert len(set(names)) == len(names)

        if seed is not None:
            init_parameters(self, seed)

    # -- layout helpers

    def _skip_channels(self):
        """(stride, channels) of each skip tensor, ascending stride."""
        out = []
        stride = 4
        for i, b in enumerate(self.blocks):
            if isinstance(b, DenseBlock):
                if i > 0:
                    stride *= 2 if self.tds[i - 1].pool else 1
                if b.split_at is not None:
                    out.append((stride, b.c_in + b.split_at * b.k))
                    stride *= 2
            else:
                stride = self.block_strides[i]
            out.append((stride, b.c_out))
        return out[:-1]  # the last block feeds the head path, not a skip

    def parameters(self):
        return list(self.params)

    def param_bytes(self):
        return sum(p.nbytes() for p in self.params)

    # -- graph emission

    def record(self, g, image, mode="train"):
        """Emit the forward graph on builder g from the image node; returns Heads.

        The final head holds logits at output_stride; callers add the last
        bilinear upsample (eval) or attach losses (training).
        """
        spec = self.spec
        _, _, h, w = g._shape(image)
        fs = spec.final_stride()
        if h % fs or w % fs:
            raise ValueError(f"input {h}x{w} must be divisible by the downsampling factor {fs}")

        x = self.stem.record(g, image, mode)
        skips = []
        stride = 4
        for i, block in enumerate(self.blocks):
            if isinstance(block, DenseBlock):
                if i > 0:
                    x = self.tds[i - 1].record(g, x, mode)
                    stride *= 2 if self.tds[i - 1].pool else 1
                x, split_skip = block.record(g, x, mode)
                if split_skip is not None:
                    skips.append((stride, split_skip))
                    stride *= 2
            else:
                x = block.record(g, x, mode)
                stride = self.block_strides[i]
            skips.append((stride, x))
        skips.pop()

        aux = []
        if self.spp is not None:
            x, pooled = self.spp.record(g, x, mode)
            fh, fw = h // stride, w // stride
            for p, head in zip(pooled, self.aux_heads[:len(pooled)]):
                node = head.record(g, p, name=head.name)
                _, _, rows, cols = g._shape(node)
                aux.append(Head(head.name, node, stride, (rows, cols, fh, fw)))

        tu_heads = self.aux_heads[len(self.spp.grid_rows):] if self.spp else self.aux_heads
        for tu, head in zip(self.tus, tu_heads):
            s, skip = skips.pop()
            x = tu.record(g, x, skip, mode)
            stride //= 2
            assert stride == s
            node = head.record(g, x, name=head.name)
            aux.append(Head(head.name, node, stride))

        logits = self.classifier.record(g, x, name="logits")
        return Heads(Head("logits", logits, stride), tuple(aux))

    # -- parameter state

    def state_dict(self):
        out = {p.name: p.data for p in self.params}
        for name, st in self.bn_states:
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return out

    def load_state_dict(self, tensors):
        want = self.state_dict()
        missing = sorted(set(want) - set(tensors))
        extra = sorted(set(tensors) - set(want))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        # copy unconditionally: optimizer steps mutate p.data in place and
        # must never reach back into the caller's tensors
        for p in self.params:
            t = tensors[p.name]
            if t.shape != p.data.shape:
                raise ValueError(f"{p.name}: shape {t.shape} does not match {p.data.shape}")
            p.data = np.array(t, F32, order="C")
        for name, st in self.bn_states:
            st.running_mean = np.array(tensors[name + ".running_mean"], F32, order="C")
            st.running_var = np.array(tensors[name + ".running_var"], F32, order="C")
            st.initialized = True


# ---------------------------------------------------------------------------
# construction entry points


def build_stem(width):
    return Stem(width)


def build_dense_block(f_in, n, k, split_at=None):
    return DenseBlock(f_in, n, k, split_at)


def build_transition_down(c_in):
    return TransitionDown(c_in)


def build_spp(d_in, grid_rows=SPP_GRID_ROWS):
    return PyramidPooling(d_in, grid_rows)


def build_transition_up(c_low, c_skip, width):
    return TransitionUp(c_low, c_skip, width)


def build_ladder_model(spec, seed=None):
    return LadderModel(spec, seed)


def init_parameters(model, seed):
    """He-normal convolution weights, unit/zero BN affines, reset BN statistics."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        if p.data.ndim == 4:
            fan_in = p.data.shape[1] * p.data.shape[2] * p.data.shape[3]
            p.data = rng.normal(0.0, math.sqrt(2.0 / fan_in), p.data.shape).astype(F32)
        elif p.name.endswith(".gamma"):
            p.data = np.ones(p.data.shape, F32)
        else:
            p.data = np.zeros(p.data.shape, F32)
        p.grad = None
    for _, st in model.bn_states:
        st.running_mean = np.zeros(st.channels, F32)
        st.running_var = np.ones(st.channels, F32)
        st.initialized = False
        st.reset_accumulators()
    return model


# ---------------------------------------------------------------------------
# residual emulation of a dense block


class ResidualEmulation:
    """Residual block computing the same function as a dense block.

    The running tensor carries all F_in + n*k channels from the start; unit i
    reads the first F_in + i*k of them (zero weights elsewhere), and writes its
    k maps into its own channel band, so each residual sum touches disjoint
    channels.  Weights and statistics are copied from the dense block at
    construction time.
    """

    def __init__(self, block):
        if block.split_at is not None:
            raise ValueError("a dense block with an internal split has no "
                             "single-resolution residual equivalent")
        self.c_in, self.n, self.k = block.c_in, block.n, block.k
        self.c_out = block.c_out
        name = block.name + ".emu"

        w = np.zeros((self.c_out, self.c_in, 1, 1), F32)
        w[range(self.c_in), range(self.c_in), 0, 0] = 1.0
        self.embed = Conv2d(name + ".embed", ConvParams(self.c_in, self.c_out, 1), "emu")
        self.embed.w.data = w

        self.units = []
        for i, unit in enumerate(block.units):
            used = self.c_in + i * self.k
            self.units.append(self._emulated_unit(f"{name}.u{i}", unit, used))

    def _emulated_unit(self, name, unit, used):
        k, c_out = self.k, self.c_out
        bn1 = BatchNorm2d(name + ".bn1", c_out, "emu")
        bn1.gamma.data[:used] = unit.bn1.gamma.data
        bn1.beta.data[:used] = unit.bn1.beta.data
        bn1.state.running_mean[:used] = unit.bn1.state.running_mean
        bn1.state.running_var[:used] = unit.bn1.state.running_var
        bn1.state.initialized = unit.bn1.state.initialized

        conv1 = Conv2d(name + ".conv1", ConvParams(c_out, 4 * k, 1), "emu")
        conv1.w.data[:, :used] = unit.conv1.w.data

        bn2 = BatchNorm2d(name + ".bn2", 4 * k, "emu")
        bn2.gamma.data = unit.bn2.gamma.data.copy()
        bn2.beta.data = unit.bn2.beta.data.copy()
        bn2.state.running_mean = unit.bn2.state.running_mean.copy()
        bn2.state.running_var = unit.bn2.state.running_var.copy()
        bn2.state.initialized = unit.bn2.state.initialized

        cp = unit.conv2.cp
        conv2 = Conv2d(name + ".conv2",
                       ConvParams(4 * k, c_out, 3, 1, cp.padding, cp.dilation), "emu")
        conv2.w.data[used:used + k] = unit.conv2.w.data
        return (bn1, conv1, bn2, conv2)

    def parameters(self):
        out = self.embed.parameters()
        for mods in self.units:
            out.extend(_collect(mods, "parameters"))
        return out

    def record(self, g, x, mode="train"):
        y = self.embed.record(g, x)
        for bn1, conv1, bn2, conv2 in self.units:
            with g.scope("unit"):
                h = g.relu(bn1.record(g, y, mode))
                h = conv1.record(g, h)
                h = g.relu(bn2.record(g, h, mode))
                h = conv2.record(g, h)
                y = g.add(y, h)
        return y


def emulate_dense_block_as_residual(block):
    return ResidualEmulation(block)


# ---------------------------------------------------------------------------
# whole-model program helpers


def build_eval_program(model, batch, h, w):
    """Image -> class logits at full input resolution, eval-mode statistics."""
    g = ag.GraphBuilder()
    image = g.input("image", (batch, 3, h, w))
    heads = model.record(g, image, mode="eval")
    full = g.resize(heads.final.node, h, w, name="logits_full")
    return g.build([full])


def build_train_program(model, batch, h, w, final_weight=0.6, aux_weight=0.4,
                        use_aux=True):
    """Image plus per-head soft targets -> composite scalar loss, train mode.

    Inputs are named target.<head>/valid.<head> per head; without aux the
    final head takes all the weight and the auxiliary convolutions fall out
    of the pruned program. Returns (program, heads).
    """
    classes = model.spec.num_classes
    g = ag.GraphBuilder()
    image = g.input("image", (batch, 3, h, w))
    heads = model.record(g, image, mode="train")

    def ce(head):
        _, _, hh, ww = g._shape(head.node)
        t = g.input(f"target.{head.name}", (batch, classes, hh, ww))
        v = g.input(f"valid.{head.name}", (batch, hh, ww))
        return g.cross_entropy(head.node, t, v, name=f"ce.{head.name}")

    use_aux = use_aux and bool(heads.aux)
    terms, weights = [ce(heads.final)], [final_weight if use_aux else 1.0]
    if use_aux:
        for head in heads.aux:
            terms.append(ce(head))
            weights.append(aux_weight / len(heads.aux))
    loss = g.weighted_sum(terms, weights, name="loss")
    return g.build([loss]), heads
