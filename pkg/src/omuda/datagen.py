"""Procedural street-scene generator with a controllable source/target appearance shift.

Label layouts depend only on the per-image seed, so a source and a target image
drawn with the same seed share their label plane; the domain only changes colors,
texture and noise.
"""
import functools
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

IGNORE = 255
MAGIC = b"OMDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHB")

DEFAULT_CLASS_NAMES = ("sky", "road", "building", "vegetation", "car", "person", "sign", "pole")
DEFAULT_RARITY = (0.30, 0.30, 0.20, 0.12, 0.04, 0.02, 0.015, 0.005)

_PALETTE = np.array([
    [0.55, 0.70, 0.95],  # sky
    [0.36, 0.36, 0.40],  # road
    [0.62, 0.46, 0.36],  # building
    [0.26, 0.56, 0.22],  # vegetation
    [0.18, 0.24, 0.72],  # car
    [0.86, 0.22, 0.22],  # person
    [0.95, 0.85, 0.12],  # sign
    [0.72, 0.70, 0.62],  # pole
])

# (width range, height range, elliptical) at the 64-pixel reference size
_TEMPLATES = (
    ((10, 16), (5, 8), False),   # car-like
    ((3, 5), (6, 10), True),     # person-like
    ((3, 5), (3, 5), False),     # sign-like
    ((1, 2), (8, 16), False),    # pole-like
)


@dataclass(frozen=True)
class ClassPartition:
    foreground: tuple
    background: tuple

    def __post_init__(self):
        object.__setattr__(self, "foreground", tuple(sorted(int(k) for k in self.foreground)))
        object.__setattr__(self, "background", tuple(sorted(int(k) for k in self.background)))

    def validate(self, K):
        fg, bg = set(self.foreground), set(self.background)
        if not fg or not bg:
            raise ConfigError("foreground and background must both be non-empty", "partition")
        if fg & bg:
            raise ConfigError(f"classes {sorted(fg & bg)} are in both sets", "partition")
        if fg | bg != set(range(K)):
            raise ConfigError(f"partition must cover exactly 0..{K - 1}", "partition")

    def is_foreground(self, labels):
        """Boolean mask of pixels whose label is a foreground class."""
        return np.isin(labels, self.foreground)

    def is_background(self, labels):
        return np.isin(labels, self.background)


@dataclass(frozen=True)
class DomainShiftParams:
    hue_shift: float = 50.0
    brightness_scale: float = 0.8
    noise_sigma: float = 6.0
    texture_seed_offset: int = 1000

    def validate(self):
        if not self.brightness_scale > 0:
            raise ConfigError("must be > 0", "scene.shift.brightness_scale")
        if not self.noise_sigma >= 0:
            raise ConfigError("must be >= 0", "scene.shift.noise_sigma")


@dataclass(frozen=True)
class SceneConfig:
    K: int = 8
    class_names: tuple = DEFAULT_CLASS_NAMES
    partition: ClassPartition = field(
        default_factory=lambda: ClassPartition(foreground=(4, 5, 6, 7), background=(0, 1, 2, 3)))
    H: int = 64
    W: int = 64
    shift: DomainShiftParams = field(default_factory=DomainShiftParams)
    rarity: tuple = DEFAULT_RARITY

    def validate(self):
        if self.K < 2:
            raise ConfigError("need at least two classes", "scene.K")
        if self.K >= IGNORE:
            raise ConfigError(f"must be < {IGNORE}", "scene.K")
        if len(self.class_names) != self.K:
            raise ConfigError(f"expected {self.K} names", "scene.class_names")
        if len(self.rarity) != self.K:
            raise ConfigError(f"expected {self.K} weights", "scene.rarity")
        if any(r < 0 for r in self.rarity):
            raise ConfigError("weights must be >= 0", "scene.rarity")
        if self.H < 32 or self.W < 32:
            raise ConfigError("H and W must be >= 32", "scene.H")
        if self.H > 65535 or self.W > 65535:
            raise ConfigError("H and W must fit in 16 bits", "scene.H")
        self.partition.validate(self.K)
        if not any(self.rarity[k] > 0 for k in self.partition.background):
            raise ConfigError("at least one background class needs positive weight", "scene.rarity")
        self.shift.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        d["rarity"] = list(self.rarity)
        d["partition"] = {"foreground": list(self.partition.foreground),
                          "background": list(self.partition.background)}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "partition" in d:
            d["partition"] = ClassPartition(**d["partition"])
        if "shift" in d:
            d["shift"] = DomainShiftParams(**d["shift"])
        for key in ("class_names", "rarity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LabeledImage:
    rgb: np.ndarray      # H x W x 3 uint8
    labels: np.ndarray   # H x W uint8, 255 = ignore

    @property
    def shape(self):
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, LabeledImage):
            return NotImplemented
        return np.array_equal(self.rgb, other.rgb) and np.array_equal(self.labels, other.labels)


def target_view(images):
    """Label-free view of a dataset: read-only RGB arrays only.

    This is the only form in which target-domain images reach the trainer.
    """
    out = []
    for im in images:
        rgb = im.rgb.view()
        rgb.flags.writeable = False
        out.append(rgb)
    return out


def _seed_words(seed):
    s = int(seed) & 0xFFFFFFFFFFFFFFFF
    return [s & 0xFFFFFFFF, s >> 32]


def image_seed(seed, index):
    """Per-image 64-bit seed, independent of generation order."""
    state = np.random.SeedSequence(_seed_words(seed) + [int(index)]).generate_state(1, np.uint64)
    return int(state[0])


@functools.lru_cache(maxsize=None)
def _template_area(template, scale):
    (w0, w1), (h0, h1), ellipse = template
    total, count = 0, 0
    for w in range(_scaled(w0, scale), _scaled(w1, scale) + 1):
        for h in range(_scaled(h0, scale), _scaled(h1, scale) + 1):
            total += int(_shape_mask(w, h, ellipse).sum())
            count += 1
    return total / count


def _scaled(v, scale):
    return max(1, int(round(v * scale)))


def _shape_mask(w, h, ellipse):
    if not ellipse:
        return np.ones((h, w), dtype=bool)
    yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def _layout_labels(config, rng):
    H, W = config.H, config.W
    r = np.asarray(config.rarity, dtype=np.float64)
    t = r / r.sum()
    bg = [k for k in config.partition.background if t[k] > 0]
    fg = [k for k in config.partition.foreground if t[k] > 0]
    labels = np.empty((H, W), dtype=np.uint8)
    scale = min(H, W) / 64.0

    fg_total = float(sum(t[k] for k in fg))
    if len(bg) == 1:
        labels[:] = bg[0]
        top_rows = 0
    else:
        top = bg[0]
        top_rows = int(np.clip(round(H * t[top] * rng.uniform(0.75, 1.25)), 1, H - 2))
        labels[:top_rows] = top
        rest_rows = H - top_rows
        rest = bg[1:]
        free = max(1.0 - t[top] - fg_total, 1e-6)
        share = np.array([t[k] / free for k in rest])
        share /= share.sum()
        bottom = rest[0]
        if len(rest) == 1:
            labels[top_rows:] = bottom
        else:
            bot_rows = int(np.clip(round(rest_rows * share[0] * rng.uniform(0.75, 1.25)), 1, rest_rows - 1))
            labels[H - bot_rows:] = bottom
            middle = rest[1:]
            pm = share[1:] / share[1:].sum()
            col = 0
            while col < W:
                width = int(rng.integers(_scaled(6, scale), _scaled(20, scale) + 1))
                k = middle[int(rng.choice(len(middle), p=pm))]
                labels[top_rows:H - bot_rows, col:col + width] = k
                col += width

    # foreground objects, painted largest-template first; smaller ones may occlude
    region_top = top_rows
    region_area = (H - region_top) * W
    order = sorted(fg, key=lambda k: _TEMPLATES[config.partition.foreground.index(k) % len(_TEMPLATES)][0][0],
                   reverse=True)
    painted_after = fg_total
    for k in order:
        tmpl = _TEMPLATES[config.partition.foreground.index(k) % len(_TEMPLATES)]
        painted_after -= t[k]
        area = _template_area(tmpl, scale)
        survive = max(1.0 - painted_after * H * W / region_area, 0.1)
        lam = t[k] * H * W / (area * survive)
        n_obj = int(rng.poisson(lam))
        (w0, w1), (h0, h1), ellipse = tmpl
        for _ in range(n_obj):
            w = min(int(rng.integers(_scaled(w0, scale), _scaled(w1, scale) + 1)), W)
            h = min(int(rng.integers(_scaled(h0, scale), _scaled(h1, scale) + 1)), H - region_top)
            y = int(rng.integers(region_top, H - h + 1))
            x = int(rng.integers(0, W - w + 1))
            m = _shape_mask(w, h, ellipse)
            patch = labels[y:y + h, x:x + w]
            patch[m] = k
    return labels


def _palette(K):
    if K <= len(_PALETTE):
        return _PALETTE[:K]
    extra = []
    for k in range(len(_PALETTE), K):
        hue = (k * 0.618033988749895) % 1.0
        extra.append(_hsv_to_rgb(hue, 0.6, 0.8))
    return np.vstack([_PALETTE, np.array(extra)])


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, tt = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, tt, p), (q, v, p), (p, v, tt), (p, q, v), (tt, p, v), (v, p, q)][i]


def _hue_rotation(degrees):
    """RGB rotation about the gray axis."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def _render(config, labels, domain, rng):
    K = config.K
    pal = _palette(K)
    tint = rng.normal(0.0, 0.04, size=(K, 3))
    base = np.clip(pal + tint, 0.0, 1.0)
    img = base[labels]
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    if domain == "target":
        sh = config.shift
        img = img @ _hue_rotation(sh.hue_shift).T
        img = img * sh.brightness_scale
        if sh.noise_sigma > 0:
            img = img + rng.normal(0.0, sh.noise_sigma / 255.0, size=img.shape)
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def generate_scene(config: SceneConfig, domain: str, seed: int) -> LabeledImage:
    """Render one labeled scene; deterministic in (config, domain, seed)."""
    config.validate()
    if domain not in ("source", "target"):
        raise ConfigError(f"unknown domain {domain!r}", "domain")
    words = _seed_words(seed)
    labels = _layout_labels(config, np.random.default_rng(words + [0]))
    if domain == "source":
        app_key = words + [1, 0]
    else:
        app_key = words + [1, 1, int(config.shift.texture_seed_offset) & 0xFFFFFFFF]
    rgb = _render(config, labels, domain, np.random.default_rng(app_key))
    return LabeledImage(rgb=rgb, labels=labels)


def generate_dataset(config: SceneConfig, domain: str, n: int, seed: int):
    return [generate_scene(config, domain, image_seed(seed, i)) for i in range(n)]


def write_dataset(path, images, config: SceneConfig, domain=None, seed=None):
    """Write ``meta.json`` and ``images.bin`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    H, W = config.H, config.W
    meta = dict(config.to_dict(), n=len(images), domain=domain, seed=seed)
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(os.path.join(path, "images.bin"), "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(images), H, W, config.K))
        for i, im in enumerate(images):
            if im.rgb.shape != (H, W, 3) or im.labels.shape != (H, W):
                raise FormatError("image shape does not match config", image_index=i)
            fh.write(np.ascontiguousarray(im.rgb, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(im.labels, dtype=np.uint8).tobytes())


def read_meta(path):
    with open(os.path.join(path, "meta.json"), encoding="utf-8") as fh:
        return json.load(fh)


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns ``(images, config)``."""
    meta = read_meta(path)
    config = SceneConfig.from_dict({k: meta[k] for k in
                                    ("K", "class_names", "partition", "H", "W", "shift", "rarity")})
    with open(os.path.join(path, "images.bin"), "rb") as fh:
        buf = fh.read()
    images = decode_images(buf)
    hdr = _HEADER.unpack_from(buf, 0)
    if (hdr[3], hdr[4], hdr[5]) != (config.H, config.W, config.K):
        raise FormatError("header disagrees with meta.json", offset=0)
    return images, config


def decode_images(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic", offset=0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, version, n, H, W, K = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    off = _HEADER.size
    plane = H * W
    images = []
    for i in range(n):
        if off + 3 * plane > len(buf):
            raise FormatError("truncated rgb plane", offset=len(buf), image_index=i)
        rgb = np.frombuffer(buf, dtype=np.uint8, count=3 * plane, offset=off).reshape(H, W, 3).copy()
        off += 3 * plane
        if off + plane > len(buf):
            raise FormatError("truncated label plane", offset=len(buf), image_index=i)
        labels = np.frombuffer(buf, dtype=np.uint8, count=plane, offset=off).reshape(H, W).copy()
        off += plane
        images.append(LabeledImage(rgb=rgb, labels=labels))
    if off != len(buf):
        raise FormatError("trailing bytes after last image", offset=off)
    return images
