"""Training loop: AMSGrad with a cosine schedule, soft-target losses,
photometric-free augmentation, mIoU evaluation and checkpoint bundles.

Subsampled heads are supervised with soft targets: the class histogram of the
label window each logit covers, normalized to a distribution, with windows of
pure ignore pixels masked out.  The composite loss weights the final head 0.6
and spreads 0.4 over the auxiliary heads.

Determinism contract: with a fixed seed every random decision derives from
np.random.default_rng seeded by an explicit key list - [seed, epoch] for the
shuffle and [seed, epoch, sample_index] for that sample's augmentation - so a
rerun reproduces training bitwise on a single thread regardless of batch
composition.
"""

import json
import math
import os
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from . import dataio
from . import kernels as K
from . import nets as N
from .dataio import IGNORE

F32 = np.float32

MS_SCALES = (0.5, 0.75, 1.0, 1.5, 2.0)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    """Optimization and augmentation settings.

    flip / random_crop / scale_jitter toggle independently so augmentation
    ablations (none, flip, flip+crop, flip+crop+scale) are plain config edits.
    Parameter groups listed in pretrained_groups train at base_lr divided by
    pretrained_lr_divisor.
    """

    epochs: int = 30
    batch: int = 4
    crop: int = 128
    base_lr: float = 4e-4
    flip: bool = True
    random_crop: bool = True
    scale_jitter: bool = True
    scale_range: tuple = (0.5, 2.0)
    final_weight: float = 0.6
    aux_weight: float = 0.4
    use_aux: bool = True
    pretrained_groups: tuple = ()
    pretrained_lr_divisor: float = 4.0
    policy: str = "none"
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range",
                           tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "pretrained_groups",
                           tuple(self.pretrained_groups))
        self._validate()

    def _validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be positive, got {self.batch}")
        if self.crop < 8:
            raise ValueError(f"crop must be at least 8, got {self.crop}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if len(self.scale_range) != 2 or not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError(f"scale_range must be 0 < lo <= hi, got {self.scale_range}")
        if self.final_weight <= 0 or self.aux_weight < 0:
            raise ValueError(f"head weights must be positive, got "
                             f"{self.final_weight}/{self.aux_weight}")
        if abs(self.final_weight + self.aux_weight - 1.0) > 1e-9:
            raise ValueError(f"final_weight + aux_weight must sum to 1, got "
                             f"{self.final_weight} + {self.aux_weight}")
        if self.pretrained_lr_divisor < 1:
            raise ValueError(f"pretrained_lr_divisor must be at least 1, got "
                             f"{self.pretrained_lr_divisor}")
        if self.policy not in ag.VARIANTS:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {list(ag.VARIANTS)}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    def to_json(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, doc):
        if not isinstance(doc, dict):
            raise ValueError(f"TrainConfig document must be an object, got {type(doc).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {', '.join(unknown)}")
        return cls(**doc)


def load_config(path):
    """One JSON document with an arch section and an optional train section."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"config must be an object with arch/train sections, "
                         f"got {type(doc).__name__}")
    unknown = sorted(set(doc) - {"arch", "train"})
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(unknown)}")
    if "arch" not in doc:
        raise ValueError("config is missing the arch section")
    return N.ArchSpec.from_json(doc["arch"]), TrainConfig.from_json(doc.get("train", {}))


# ---------------------------------------------------------------------------
# optimizer

class OptimState:
    """AMSGrad moments plus per-parameter learning-rate scales.

    vhat tracks the running maximum of the bias-corrected second moment, so
    an effective step size never grows back when the raw moment decays.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, group_lr=None):
        if not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.step = 0
        self.rejected = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.vhat = [np.zeros_like(p.data) for p in params]
        gl = dict(group_lr or {})
        self.scale = [float(gl.get(p.group, 1.0)) for p in params]


def amsgrad_step(params, grads, state, lr):
    """One AMSGrad update in place; returns whether the step was applied.

    Any non-finite gradient rejects the whole step (counted in
    state.rejected) so one bad batch cannot poison the moments.  A grad of
    None marks a parameter outside the recorded loss graph; skipping it is
    exactly the zero-gradient update, which moves nothing.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters vs {len(grads)} gradients")
    for g in grads:
        if g is not None and not np.isfinite(g).all():
            state.rejected += 1
            return False
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v, vh, sc in zip(params, grads, state.m, state.v,
                                  state.vhat, state.scale):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        np.maximum(vh, v / c2, out=vh)
        p.data -= (sc * lr / c1) * m / (np.sqrt(vh) + state.eps)
    state.step = t
    return True


def cosine_lr(epoch, total, base_lr):
    """Half-cosine decay from base_lr at epoch 0 toward 0 at epoch == total."""
    if total < 1:
        raise ValueError(f"total epochs must be positive, got {total}")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


# ---------------------------------------------------------------------------
# soft targets

def _check_labels(labels, num_classes, ignore_label):
    bad = (labels != ignore_label) & (labels >= num_classes)
    if bad.any():
        raise ValueError(f"label value {int(labels[bad].max())} outside "
                         f"[0, {num_classes}) and not ignore ({ignore_label})")


def soft_targets(labels, window, num_classes, ignore_label=IGNORE):
    """Normalized class histograms over non-overlapping windows.

    Returns (target, valid): target is (C, H/window, W/window) float32 rows
    summing to 1, valid is float32 0/1 with 0 where a window holds only
    ignore pixels (such a window also gets an all-zero distribution).
    """
    h, w = labels.shape
    if h % window or w % window:
        raise ValueError(f"{h}x{w} labels are not divisible by window {window}")
    _check_labels(labels, num_classes, ignore_label)
    lh, lw = h // window, w // window
    win = labels.reshape(lh, window, lw, window).transpose(0, 2, 1, 3)
    win = win.reshape(lh, lw, window * window)
    counts = np.empty((num_classes, lh, lw), np.float64)
    for c in range(num_classes):
        counts[c] = (win == c).sum(axis=2)
    total = counts.sum(axis=0)
    target = (counts / np.maximum(total, 1.0)).astype(F32)
    return target, (total > 0).astype(F32)


def grid_soft_targets(labels, rows, cols, num_classes, stride=1,
                      ignore_label=IGNORE):
    """Soft targets over the pyramid-pooling partition.

    Cell (i, j) of the pooled grid covers the feature cells between the
    rounded bounds the pooling kernel uses; scaling those bounds by the
    feature stride yields the label window to histogram.
    """
    h, w = labels.shape
    if h % stride or w % stride:
        raise ValueError(f"{h}x{w} labels are not divisible by stride {stride}")
    _check_labels(labels, num_classes, ignore_label)
    rb = [b * stride for b in K.grid_bounds(h // stride, rows)]
    cb = [b * stride for b in K.grid_bounds(w // stride, cols)]
    target = np.zeros((num_classes, rows, cols), F32)
    valid = np.zeros((rows, cols), F32)
    for i in range(rows):
        for j in range(cols):
            cell = labels[rb[i]:rb[i + 1], cb[j]:cb[j + 1]]
            vals = cell[cell != ignore_label]
            if vals.size:
                hist = np.bincount(vals.ravel(), minlength=num_classes)
                target[:, i, j] = hist / vals.size
                valid[i, j] = 1.0
    return target, valid


def head_feeds(heads, labels, num_classes, needed=None, ignore_label=IGNORE):
    """target.<head>/valid.<head> feeds for a batch of label maps.

    needed restricts emission to input names a pruned program still expects
    (auxiliary targets disappear with use_aux=False).
    """
    feeds = {}
    for head in (heads.final,) + tuple(heads.aux):
        tname, vname = f"target.{head.name}", f"valid.{head.name}"
        if needed is not None and tname not in needed:
            continue
        ts, vs = [], []
        for lab in labels:
            if head.grid is None:
                t, v = soft_targets(lab, head.stride, num_classes, ignore_label)
            else:
                rows, cols, _, _ = head.grid
                t, v = grid_soft_targets(lab, rows, cols, num_classes,
                                         head.stride, ignore_label)
            ts.append(t)
            vs.append(v)
        feeds[tname] = np.stack(ts)
        feeds[vname] = np.stack(vs)
    return feeds


# ---------------------------------------------------------------------------
# augmentation

def _nearest_labels(labels, oh, ow):
    # same half-pixel source mapping as the bilinear kernel, rounded half-up
    h, w = labels.shape
    ry = np.floor((np.arange(oh) + 0.5) * (h / oh)).astype(np.int64)
    rx = np.floor((np.arange(ow) + 0.5) * (w / ow)).astype(np.int64)
    return labels[np.ix_(np.clip(ry, 0, h - 1), np.clip(rx, 0, w - 1))]


def _span(extent, crop, rng):
    """(src, dst, length) placement of one axis; rng None centers it."""
    if extent >= crop:
        lo = extent - crop
        src = int(rng.integers(lo + 1)) if rng is not None else lo // 2
        return src, 0, crop
    pad = crop - extent
    dst = int(rng.integers(pad + 1)) if rng is not None else pad // 2
    return 0, dst, extent


def augment(image, labels, cfg, rng, mean_pixel, ignore_label=IGNORE):
    """Mirror, rescale and crop one sample to (3, crop, crop).

    Out-of-frame image pixels take the dataset mean; out-of-frame labels are
    ignore.  With every switch off and crop equal to the image size this is
    the identity.
    """
    img, lab = image, labels
    if cfg.flip and rng.random() < 0.5:
        img = img[:, :, ::-1]
        lab = lab[:, ::-1]
    if cfg.scale_jitter:
        f = float(rng.uniform(cfg.scale_range[0], cfg.scale_range[1]))
        oh = max(1, K._iround(img.shape[1] * f))
        ow = max(1, K._iround(img.shape[2] * f))
        if (oh, ow) != img.shape[1:]:
            img = K.bilinear_resize(np.ascontiguousarray(img)[None], oh, ow)[0]
            lab = _nearest_labels(lab, oh, ow)
    c = cfg.crop
    sy, dy, hh = _span(img.shape[1], c, rng if cfg.random_crop else None)
    sx, dx, ww = _span(img.shape[2], c, rng if cfg.random_crop else None)
    out = np.empty((3, c, c), F32)
    out[:] = np.asarray(mean_pixel, F32).reshape(3, 1, 1)
    olab = np.full((c, c), ignore_label, np.uint8)
    out[:, dy:dy + hh, dx:dx + ww] = img[:, sy:sy + hh, sx:sx + ww]
    olab[dy:dy + hh, dx:dx + ww] = lab[sy:sy + hh, sx:sx + ww]
    return out, olab


# ---------------------------------------------------------------------------
# evaluation

def confusion(pred, labels, num_classes, ignore_label=IGNORE):
    """num_classes x num_classes counts, rows = labels, cols = predictions."""
    if pred.shape != labels.shape:
        raise ValueError(f"prediction {pred.shape} vs labels {labels.shape}")
    _check_labels(labels, num_classes, ignore_label)
    if pred.max(initial=0) >= num_classes:
        raise ValueError(f"prediction value {int(pred.max())} outside [0, {num_classes})")
    m = labels != ignore_label
    idx = labels[m].astype(np.int64) * num_classes + pred[m].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


def miou(conf):
    """(mean IoU over classes present in labels or predictions, per-class IoU).

    Absent classes carry IoU nan and are excluded from the mean; an all-zero
    matrix has no classes to average and is an error.
    """
    conf = np.asarray(conf, np.float64)
    if conf.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(conf)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = denom > 0
    iou = np.full(conf.shape[0], np.nan)
    iou[present] = tp[present] / denom[present]
    return float(iou[present].mean()), iou


class Predictor:
    """Inference with eval programs cached per input size.

    probs() averages softmax outputs over scales and mirror flips; inputs are
    padded with the dataset mean pixel up to the downsampling multiple and
    predictions cropped back, so any size works.
    """

    def __init__(self, model, mean_pixel=None):
        self.model = model
        self.mean_pixel = (np.zeros(3, F32) if mean_pixel is None
                           else np.asarray(mean_pixel, F32))
        self._progs = {}

    def _logits(self, x):
        b, _, h, w = x.shape
        prog = self._progs.get((b, h, w))
        if prog is None:
            prog = N.build_eval_program(self.model, b, h, w)
            self._progs[(b, h, w)] = prog
        outs, _ = ag.trace_forward(prog, {"image": x}, grad_enabled=False)
        return outs[0]

    def _pad(self, image):
        h, w = image.shape[1:]
        fs = self.model.spec.final_stride()
        ph, pw = -h % fs, -w % fs
        if not ph and not pw:
            return image
        out = np.empty((3, h + ph, w + pw), F32)
        out[:] = self.mean_pixel.reshape(3, 1, 1)
        out[:, :h, :w] = image
        return out

    def batch_probs(self, images):
        """Single-scale class probabilities for same-sized images."""
        h, w = images[0].shape[1:]
        x = np.stack([self._pad(np.ascontiguousarray(im, F32)) for im in images])
        return K.softmax_probs(self._logits(x))[:, :, :h, :w]

    def probs(self, image, scales=(1.0,), flips=False):
        """Averaged class probabilities at the image's own resolution.

        Scales are visited in sorted order so the result does not depend on
        how the caller lists them.
        """
        if not scales:
            raise ValueError("probs needs at least one scale")
        _, h, w = image.shape
        image = np.ascontiguousarray(image, F32)
        acc, n = None, 0
        for s in sorted(scales):
            oh, ow = max(1, K._iround(h * s)), max(1, K._iround(w * s))
            scaled = (image if (oh, ow) == (h, w)
                      else K.bilinear_resize(image[None], oh, ow)[0])
            padded = self._pad(scaled)
            for flip in (False, True) if flips else (False,):
                x = padded[:, :, ::-1] if flip else padded
                p = K.softmax_probs(self._logits(np.ascontiguousarray(x)[None]))[0]
                if flip:
                    p = p[:, :, ::-1]
                p = p[:, :oh, :ow]
                if (oh, ow) != (h, w):
                    p = K.bilinear_resize(np.ascontiguousarray(p)[None], h, w)[0]
                acc = p.astype(np.float64) if acc is None else acc + p
                n += 1
        return (acc / n).astype(F32)

    def predict(self, image, ms=False):
        """Class-id map; ms averages over MS_SCALES and mirror flips."""
        p = self.probs(image, MS_SCALES if ms else (1.0,), flips=ms)
        return p.argmax(axis=0).astype(np.uint8)


def evaluate(model, samples, num_classes, ms=False, mean_pixel=None, batch=8,
             scales=None, flips=None):
    """(mIoU, per-class IoU, confusion) over samples.

    Single-scale evaluation batches runs of same-sized images; multi-scale
    goes one image at a time through the ensemble, visiting MS_SCALES
    unless scales overrides the list and mirror-averaging unless flips
    says otherwise (both default to following ms).
    """
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if (scales is not None or flips is not None) and not ms:
        raise ValueError("scales and flips only apply to multi-scale evaluation")
    ens_scales = MS_SCALES if scales is None else tuple(scales)
    ens_flips = ms if flips is None else bool(flips)
    predictor = Predictor(model, mean_pixel)
    conf = np.zeros((num_classes, num_classes), np.int64)
    i = 0
    while i < len(samples):
        if ms:
            chunk = samples[i:i + 1]
            p = predictor.probs(chunk[0].image, ens_scales, ens_flips)
            preds = [p.argmax(axis=0).astype(np.uint8)]
        else:
            j = i + 1
            while (j < len(samples) and j - i < batch
                   and samples[j].image.shape == samples[i].image.shape):
                j += 1
            chunk = samples[i:j]
            probs = predictor.batch_probs([s.image for s in chunk])
            preds = probs.argmax(axis=1).astype(np.uint8)
        for s, pred in zip(chunk, preds):
            conf += confusion(pred, s.labels, num_classes)
        i += len(chunk)
    mean, per_class = miou(conf)
    return mean, per_class, conf


# ---------------------------------------------------------------------------
# batch statistics

def recompute_bn_stats(model, images, batch=8):
    """Replace EMA normalization statistics with exact activation moments.

    One accumulation pass: each batch-norm layer tallies float64 sums over
    every batch, then load_accumulated() turns them into population
    statistics.  Rerunning on the same images reproduces the same values.
    """
    if not len(images):
        raise ValueError("cannot recompute statistics from an empty image set")
    for _, st in model.bn_states:
        st.reset_accumulators()
    progs = {}
    i = 0
    while i < len(images):
        j = i + 1
        while (j < len(images) and j - i < batch
               and images[j].shape == images[i].shape):
            j += 1
        x = np.stack([np.ascontiguousarray(im, F32) for im in images[i:j]])
        prog = progs.get(x.shape)
        if prog is None:
            g = ag.GraphBuilder()
            heads = model.record(g, g.input("image", x.shape), mode="accumulate")
            prog = g.build([heads.final.node])
            progs[x.shape] = prog
        ag.trace_forward(prog, {"image": x}, grad_enabled=False)
        i = j
    for _, st in model.bn_states:
        st.load_accumulated()


# ---------------------------------------------------------------------------
# checkpoint bundles

_MANIFEST_KEYS = ("format", "arch", "tensors")


def save_checkpoint(out_dir, model, extra=None):
    """Write a bundle: manifest.json plus one LDNT file per state tensor."""
    extra = dict(extra or {})
    clash = sorted(set(extra) & set(_MANIFEST_KEYS))
    if clash:
        raise ValueError(f"extra manifest keys collide: {', '.join(clash)}")
    tdir = os.path.join(out_dir, "tensors")
    os.makedirs(tdir, exist_ok=True)
    state = model.state_dict()
    index = {}
    for i, name in enumerate(sorted(state)):
        rel = f"tensors/{i:04d}.ldnt"
        dataio.write_ldnt(os.path.join(out_dir, rel), np.ascontiguousarray(state[name]))
        index[name] = rel
    manifest = {"format": "ldnt-bundle", "arch": model.spec.to_json(),
                "tensors": index, **extra}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_checkpoint(path):
    """Rebuild (model, manifest) from a bundle directory."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "ldnt-bundle":
        raise ValueError(f"{path}: manifest is not an ldnt-bundle")
    model = N.build_ladder_model(N.ArchSpec.from_json(manifest["arch"]))
    tensors = {name: dataio.read_ldnt(os.path.join(path, rel))
               for name, rel in manifest["tensors"].items()}
    model.load_state_dict(tensors)
    return model, manifest


# ---------------------------------------------------------------------------
# training loop

def split_dataset(dataset, val_fraction):
    """Deterministic tail split; filenames are sorted, so the tail is stable."""
    n_val = max(1, int(round(val_fraction * len(dataset.samples))))
    if n_val >= len(dataset.samples):
        raise ValueError(f"validation split {n_val} leaves no training samples")
    return dataset.samples[:-n_val], dataset.samples[-n_val:]


def train(model, cfg, dataset, out_dir):
    """Optimize model in place; write train_log.csv and a checkpoint bundle.

    Per epoch: shuffle, augment, step AMSGrad at the cosine rate, then log
    the epoch's mean loss and validation mIoU.  After the last epoch the
    EMA batch-norm statistics are replaced by exact moments over the
    training images and the final validation mIoU is measured on those.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_samples, val_samples = split_dataset(dataset, cfg.val_fraction)
    if len(train_samples) < cfg.batch:
        raise ValueError(f"batch {cfg.batch} exceeds the {len(train_samples)} "
                         f"training samples")
    classes = dataset.num_classes

    program, heads = N.build_train_program(model, cfg.batch, cfg.crop, cfg.crop,
                                           cfg.final_weight, cfg.aux_weight,
                                           cfg.use_aux)
    needed = set(program.input_ids)
    groups = {p.group for p in model.params}
    unknown = sorted(set(cfg.pretrained_groups) - groups)
    if unknown:
        raise ValueError(f"pretrained_groups not in the model: {', '.join(unknown)}")
    opt = OptimState(model.params,
                     group_lr={g: 1.0 / cfg.pretrained_lr_divisor
                               for g in cfg.pretrained_groups})

    rows = []
    with open(os.path.join(out_dir, "train_log.csv"), "w") as log:
        log.write("epoch,lr,train_loss,val_miou\n")
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(
                len(train_samples))
            losses = []
            for step in range(len(train_samples) // cfg.batch):
                idxs = order[step * cfg.batch:(step + 1) * cfg.batch]
                ims, labs = [], []
                for i in idxs:
                    s = train_samples[int(i)]
                    rng = np.random.default_rng([cfg.seed, epoch, int(i)])
                    im, lab = augment(s.image, s.labels, cfg, rng,
                                      dataset.mean_pixel)
                    ims.append(im)
                    labs.append(lab)
                feeds = {"image": np.stack(ims)}
                feeds.update(head_feeds(heads, np.stack(labs), classes, needed))
                outs, ex = ag.trace_forward(program, feeds, policy=cfg.policy)
                ex.backward()
                if amsgrad_step(model.params, [p.grad for p in model.params],
                                opt, lr):
                    losses.append(float(outs[0]))
                for p in model.params:
                    p.grad = None
            train_loss = float(np.mean(losses)) if losses else math.nan
            val_miou, _, _ = evaluate(model, val_samples, classes,
                                      mean_pixel=dataset.mean_pixel)
            rows.append((epoch + 1, lr, train_loss, val_miou))
            log.write(f"{epoch + 1},{lr:.8f},{train_loss:.6f},{val_miou:.6f}\n")
            log.flush()

    recompute_bn_stats(model, [s.image for s in train_samples], cfg.batch)
    final_miou, per_class, _ = evaluate(model, val_samples, classes,
                                        mean_pixel=dataset.mean_pixel)
    ckpt = os.path.join(out_dir, "checkpoint")
    save_checkpoint(ckpt, model, extra={
        "train": cfg.to_json(),
        "dataset": {"num_classes": classes,
                    "palette": [list(c) for c in dataset.palette],
                    "mean_pixel": [float(v) for v in dataset.mean_pixel]},
        "final_val_miou": round(final_miou, 6),
    })
    return {"final_val_miou": final_miou, "per_class_iou": per_class,
            "rows": rows, "checkpoint": ckpt, "rejected_steps": opt.rejected}
