"""Synthetic shape datasets, PPM/PGM/LDNT file formats, colorization.

All randomness in dataset synthesis comes from a counter-based splitmix64
stream (constants below), so generated datasets are byte-identical across
platforms and numpy versions. Images are single precision in [0, 1], labels
are uint8 class ids with 255 reserved for ignore.

Dataset directory layout: images/NNNN.ppm, labels/NNNN.pgm, meta.json
(num_classes, palette, mean_pixel).
"""

import json
import os
from dataclasses import dataclass, fields

import numpy as np

# LDNT tensor files are defined with the array conventions; re-exported here
# because datasets and checkpoint bundles are written through this module.
from .tensor import read_ldnt, write_ldnt

IGNORE = 255

# splitmix64 (Steele et al.): state advances by the golden-ratio increment,
# outputs are finalized with two xor-multiply rounds
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# class 0 is background; shape classes follow
PALETTE = (
    (40, 40, 48),     # background
    (225, 80, 60),    # disk
    (70, 160, 235),   # rectangle
    (240, 200, 70),   # triangle
    (120, 215, 100),  # ring
)
SHAPE_KINDS = ("disk", "rectangle", "triangle", "ring")


def _mix(z):
    with np.errstate(over="ignore"):  # wrapping is the algorithm
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based splitmix64; draw n values as one vectorized batch."""

    def __init__(self, seed):
        self._base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def u64(self, n):
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._base + idx * _GAMMA)

    def floats(self, n):
        """n float64 values in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)) * 2.0 ** -53

    def uniform(self, lo, hi, n=1):
        return lo + (hi - lo) * self.floats(n)

    def below(self, bound, n=1):
        return (self.floats(n) * bound).astype(np.int64)


def stream_seed(seed, index):
    """Independent per-item stream key for (dataset seed, item index)."""
    with np.errstate(over="ignore"):
        return int(_mix(np.uint64(seed) * _GAMMA + np.uint64(index + 1)))


# ---------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 5
    image_size: int = 128
    shapes_per_image: tuple = (3, 8)
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image",
                           tuple(int(v) for v in self.shapes_per_image))
        if not 2 <= self.num_classes <= len(PALETTE):
            raise ValueError(f"num_classes must be in [2, {len(PALETTE)}], "
                             f"got {self.num_classes}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be at least 16, got {self.image_size}")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"shapes_per_image must be an increasing positive "
                             f"range, got {self.shapes_per_image}")
        if not 0 <= self.noise <= 0.5:
            raise ValueError(f"noise must lie in [0, 0.5], got {self.noise}")

    def to_json(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, doc):
        if not isinstance(doc, dict):
            raise ValueError(f"SynthSpec document must be an object, got {type(doc).__name__}")
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown SynthSpec fields: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class Shape:
    kind: str
    cls: int
    cy: float
    cx: float
    size: float  # bounding half-extent in pixels
    shade: float


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8, 255 = ignore


def make_shapes(spec, index):
    """Deterministic shape list for one image; sizes span 4..S/3 px so the
    dataset always contains sub-12 px instances."""
    rng = SplitMix64(stream_seed(spec.seed, index))
    lo, hi = spec.shapes_per_image
    count = int(rng.below(hi - lo + 1)[0]) + lo
    kinds = len(SHAPE_KINDS[:spec.num_classes - 1])
    out = []
    for _ in range(count):
        kind_i = int(rng.below(kinds)[0])
        cy, cx = rng.uniform(0.0, spec.image_size, 2)
        size = float(rng.uniform(4.0, spec.image_size / 3.0, 1)[0])
        shade = float(rng.uniform(-0.18, 0.18, 1)[0])
        out.append(Shape(SHAPE_KINDS[kind_i], kind_i + 1, float(cy), float(cx),
                         size, shade))
    return out


def _mask(shape, yy, xx):
    dy, dx = yy - shape.cy, xx - shape.cx
    s = shape.size
    if shape.kind == "disk":
        return dy * dy + dx * dx <= s * s
    if shape.kind == "rectangle":
        return (np.abs(dy) <= s * 0.8) & (np.abs(dx) <= s)
    if shape.kind == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) * 0.5)
    r_in = s * 0.55
    d2 = dy * dy + dx * dx
    return (d2 <= s * s) & (d2 >= r_in * r_in)


def make_sample(spec, index):
    """One deterministic Sample: shapes over background plus additive noise."""
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    palette = np.asarray(PALETTE, np.float64) / 255.0
    image = np.empty((3, n, n), np.float64)
    image[:] = palette[0][:, None, None]
    labels = np.zeros((n, n), np.uint8)

    for shape in make_shapes(spec, index):
        m = _mask(shape, yy, xx)
        color = np.clip(palette[shape.cls] + shape.shade, 0.0, 1.0)
        image[:, m] = color[:, None]
        labels[m] = shape.cls

    rng = SplitMix64(stream_seed(spec.seed, index) ^ 0x5EED)
    noise = (rng.floats(3 * n * n).reshape(3, n, n) - 0.5) * 2 * spec.noise
    image = np.clip(image + noise, 0.0, 1.0)
    # store at file precision so in-memory and reloaded samples agree
    u8 = image_to_u8(image.astype(np.float32))
    return Sample(u8_to_image(u8), labels)


def generate_synthetic(spec, count, out_dir):
    """Write count samples under out_dir in the documented layout."""
    if count < 1:
        raise ValueError(f"dataset needs at least one sample, got {count}")
    img_dir = os.path.join(out_dir, "images")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)

    total = np.zeros(3, np.float64)
    for i in range(count):
        s = make_sample(spec, i)
        write_ppm(os.path.join(img_dir, f"{i:04d}.ppm"), image_to_u8(s.image))
        write_pgm(os.path.join(lab_dir, f"{i:04d}.pgm"), s.labels)
        total += s.image.mean(axis=(1, 2))

    meta = {
        "num_classes": spec.num_classes,
        "palette": [list(c) for c in PALETTE[:spec.num_classes]],
        "mean_pixel": [round(float(v), 6) for v in total / count],
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


@dataclass
class Dataset:
    samples: list
    num_classes: int
    palette: tuple
    mean_pixel: np.ndarray  # (3,) float32


def load_dataset(root):
    with open(os.path.join(root, "meta.json")) as fh:
        meta = json.load(fh)
    names = sorted(os.listdir(os.path.join(root, "images")))
    samples = []
    for name in names:
        image = u8_to_image(read_ppm(os.path.join(root, "images", name)))
        labels = read_pgm(os.path.join(root, "labels", name[:-4] + ".pgm"))
        samples.append(Sample(image, labels))
    if not samples:
        raise ValueError(f"no images under {root}")
    return Dataset(samples, meta["num_classes"],
                   tuple(tuple(c) for c in meta["palette"]),
                   np.asarray(meta["mean_pixel"], np.float32))


# ---------------------------------------------------------------------------
# image conversions

def image_to_u8(image):
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(rgb):
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)


def colorize(prediction, palette):
    """Class-id map -> RGB u8 via the palette; ignore (255) renders black."""
    pred = np.asarray(prediction)
    pal = np.zeros((256, 3), np.uint8)
    pal[:len(palette)] = palette
    bad = (pred >= len(palette)) & (pred != IGNORE)
    if bad.any():
        raise ValueError(f"label {int(pred[bad][0])} outside the "
                         f"{len(palette)}-entry palette")
    return pal[pred]


# ---------------------------------------------------------------------------
# PPM (P6) and PGM (P5)

def _read_header(fh, magic):
    got = fh.read(2)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    vals = []
    while len(vals) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok.isdigit():
            raise ValueError(f"malformed header token {tok!r}")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}, expected 255")
    return w, h


def _read_payload(fh, count):
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated payload: expected {count} bytes, got {len(data)}")
    return np.frombuffer(data, np.uint8)


def write_ppm(path, rgb):
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM wants (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        return _read_payload(fh, 3 * w * h).reshape(h, w, 3)


def write_pgm(path, gray):
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM wants (H, W) uint8, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        return _read_payload(fh, w * h).reshape(h, w)
