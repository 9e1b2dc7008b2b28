"""Per-pixel two-layer segmentation network with hand-written backward pass.

The same :class:`SegModel` type serves as student, EMA teacher and the source
of the frozen feature extractor.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError, TrainingDivergence
from .numerics import cross_entropy, softmax

D_IN = 9
D_HID = 32
PARAM_NAMES = ("W1", "b1", "W2", "b2")
ENCODER_PARAMS = ("W1", "b1")

CKPT_MAGIC = b"OMCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIII")


def _box3(a):
    """Sum over clamped 3x3 windows of the leading two axes."""
    H, W = a.shape[:2]
    pad = np.pad(a, ((1, 1), (1, 1)) + ((0, 0),) * (a.ndim - 2), mode="edge")
    return [pad[dy:dy + H, dx:dx + W] for dy in range(3) for dx in range(3)]


def featurize(rgb):
    """Per-pixel features: rgb, 3x3 mean rgb, 3x3 gray std, row/H, col/W.

    Returns an ``H x W x 9`` float64 array.
    """
    rgb = np.asarray(rgb)
    H, W = rgb.shape[:2]
    if H < 3 or W < 3:
        raise ArgumentError("image must be at least 3x3")
    x = rgb.astype(np.float64) / 255.0
    win = _box3(x)
    mean = sum(win) / 9.0
    gray = x.mean(axis=2)
    gwin = _box3(gray)
    gmean = sum(gwin) / 9.0
    gvar = sum((g - gmean) ** 2 for g in gwin) / 9.0
    out = np.empty((H, W, D_IN))
    out[..., 0:3] = x
    out[..., 3:6] = mean
    out[..., 6] = np.sqrt(gvar)
    out[..., 7] = (np.arange(H) / H)[:, None]
    out[..., 8] = (np.arange(W) / W)[None, :]
    return out


@dataclass
class SegModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng, d_in=D_IN, d_hid=D_HID, k=8):
        return cls(W1=rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, d_hid)),
                   b1=rng.normal(0.0, 0.1, d_hid),
                   W2=rng.normal(0.0, np.sqrt(1.0 / d_hid), (d_hid, k)),
                   b2=np.zeros(k))

    @classmethod
    def zeros(cls, d_in=D_IN, d_hid=D_HID, k=8):
        return cls(np.zeros((d_in, d_hid)), np.zeros(d_hid), np.zeros((d_hid, k)), np.zeros(k))

    @property
    def dims(self):
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return SegModel(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def to_vector(self):
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def with_vector(self, vec):
        """New model with the same shapes, parameters taken from ``vec``."""
        out, off = [], 0
        for n in PARAM_NAMES:
            a = getattr(self, n)
            out.append(np.asarray(vec[off:off + a.size], dtype=np.float64).reshape(a.shape).copy())
            off += a.size
        return SegModel(*out)

    def is_finite(self):
        return all(np.isfinite(getattr(self, n)).all() for n in PARAM_NAMES)


def grads_to_vector(grads):
    return np.concatenate([grads[n].ravel() for n in PARAM_NAMES])


def add_grads(a, b, scale=1.0):
    return {n: a[n] + scale * b[n] for n in PARAM_NAMES}


def zero_grads(model):
    return {n: np.zeros_like(getattr(model, n)) for n in PARAM_NAMES}


def forward(model: SegModel, feats):
    """Return ``(neck, logits)`` for features of shape ``(..., D_in)``."""
    feats = np.asarray(feats)
    lead = feats.shape[:-1]
    x = feats.reshape(-1, feats.shape[-1])
    neck = x @ model.W1
    neck += model.b1
    np.maximum(neck, 0.0, out=neck)
    logits = neck @ model.W2
    logits += model.b2
    return neck.reshape(lead + (neck.shape[1],)), logits.reshape(lead + (logits.shape[1],))


def predict(model: SegModel, feats):
    return np.argmax(forward(model, feats)[1], axis=-1)


def backward(model: SegModel, feats, d_logits=None, d_neck=None, neck=None):
    """Parameter gradients given upstream gradients on logits and/or neck.

    ``neck`` may pass in the activations from :func:`forward` to skip recomputing
    them. ReLU's subgradient at zero is taken as zero.
    """
    d_in, d_hid, k = model.dims
    x = np.asarray(feats).reshape(-1, d_in)
    if neck is None:
        neck = forward(model, feats)[0]
    neck = np.asarray(neck).reshape(-1, d_hid)
    grads = {}
    if d_logits is not None:
        dl = np.asarray(d_logits).reshape(-1, k)
        grads["W2"] = neck.T @ dl
        grads["b2"] = np.ones(dl.shape[0]) @ dl
        g = dl @ model.W2.T
    else:
        grads["W2"] = np.zeros_like(model.W2)
        grads["b2"] = np.zeros_like(model.b2)
        g = np.zeros_like(neck)
    if d_neck is not None:
        g += np.asarray(d_neck).reshape(-1, d_hid)
    np.multiply(g, neck > 0.0, out=g)
    grads["W1"] = x.T @ g
    grads["b1"] = np.ones(g.shape[0]) @ g
    return grads


def ema_update(teacher: SegModel, student: SegModel, alpha: float) -> SegModel:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not 0.0 <= alpha < 1.0:
        raise ArgumentError("alpha must lie in [0, 1)")
    for n in PARAM_NAMES:
        t, s = getattr(teacher, n), getattr(student, n)
        if t.shape != s.shape:
            raise ArgumentError(f"shape mismatch on {n}: {t.shape} vs {s.shape}")
        t *= alpha
        t += (1.0 - alpha) * s
    return teacher


@dataclass
class OptimizerState:
    """AdamW moments plus the warmup schedule."""
    lr_enc: float = 6e-4
    lr_dec: float = 6e-3
    warmup: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_factor(self, step=None):
        step = self.step if step is None else step
        if self.warmup <= 0:
            return 1.0
        return min(1.0, step / self.warmup)

    def effective_lrs(self, step=None):
        f = self.lr_factor(step)
        return self.lr_enc * f, self.lr_dec * f


def optimizer_step(state: OptimizerState, model: SegModel, grads):
    """One decoupled-weight-decay Adam step with linear warmup; updates in place."""
    for n in PARAM_NAMES:
        if not np.isfinite(grads[n]).all():
            raise TrainingDivergence(f"non-finite gradient in {n}", term=n)
    state.step += 1
    t = state.step
    lr_enc, lr_dec = state.effective_lrs(t)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for n in PARAM_NAMES:
        p, g = getattr(model, n), grads[n]
        if n not in state.m:
            state.m[n] = np.zeros_like(p)
            state.v[n] = np.zeros_like(p)
        m, v = state.m[n], state.v[n]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = lr_enc if n in ENCODER_PARAMS else lr_dec
        p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return model, state


@dataclass(frozen=True)
class PretrainedExtractor:
    """Frozen first layer of a segmentation model."""
    W1: np.ndarray
    b1: np.ndarray
    provenance: str

    @classmethod
    def from_model(cls, model: SegModel, provenance):
        W1 = model.W1.copy()
        b1 = model.b1.copy()
        W1.flags.writeable = False
        b1.flags.writeable = False
        return cls(W1, b1, provenance)

    def __call__(self, feats):
        return np.maximum(feats @ self.W1 + self.b1, 0.0)


EXTRACTOR_MODES = ("auxiliary-pretrained", "fixed-random")


def pretrain_extractor(mode, seed, aux_images=None, K=8, d_hid=D_HID, iterations=300,
                       batch_size=6, lr=1e-2) -> PretrainedExtractor:
    """Build the frozen extractor.

    ``auxiliary-pretrained`` fits a fresh model with plain cross-entropy on the
    labeled mixed-domain ``aux_images`` and keeps its first layer;
    ``fixed-random`` keeps a seeded random first layer.
    """
    if mode not in EXTRACTOR_MODES:
        raise ArgumentError(f"unknown extractor mode {mode!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 77])
    model = SegModel.init(rng, D_IN, d_hid, K)
    if mode == "fixed-random":
        return PretrainedExtractor.from_model(model, mode)
    if not aux_images:
        raise ArgumentError("auxiliary pretraining needs labeled images")
    feats = [featurize(im.rgb) for im in aux_images]
    labels = [im.labels for im in aux_images]
    opt = OptimizerState(lr_enc=lr, lr_dec=lr, warmup=10, weight_decay=0.01)
    for _ in range(iterations):
        ids = rng.integers(len(feats), size=batch_size)
        x = np.stack([feats[i] for i in ids])
        y = np.stack([labels[i] for i in ids])
        _, logits = forward(model, x)
        _, d_logits = cross_entropy(softmax(logits), y)
        optimizer_step(opt, model, backward(model, x, d_logits=d_logits))
    return PretrainedExtractor.from_model(model, mode)


def linear_probe_accuracy(extractor, train_images, test_images, iterations=300, lr=0.05,
                          pixels_per_image=256, seed=0):
    """Pixel accuracy of a softmax-regression probe on frozen extractor features."""
    rng = np.random.default_rng(seed)

    def sample(images):
        xs, ys = [], []
        for im in images:
            f = extractor(featurize(im.rgb)).reshape(-1, extractor.W1.shape[1])
            y = im.labels.ravel()
            idx = rng.choice(y.size, size=min(pixels_per_image, y.size), replace=False)
            xs.append(f[idx])
            ys.append(y[idx])
        return np.concatenate(xs), np.concatenate(ys)

    xtr, ytr = sample(train_images)
    xte, yte = sample(test_images)
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-6
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    K = int(max(ytr.max(), yte.max())) + 1
    Wp = np.zeros((xtr.shape[1], K))
    bp = np.zeros(K)
    m = {"W": np.zeros_like(Wp), "b": np.zeros_like(bp)}
    v = {"W": np.zeros_like(Wp), "b": np.zeros_like(bp)}
    for t in range(1, iterations + 1):
        _, d = cross_entropy(softmax(xtr @ Wp + bp), ytr)
        for key, p, g in (("W", Wp, xtr.T @ d), ("b", bp, d.sum(0))):
            m[key] = 0.9 * m[key] + 0.1 * g
            v[key] = 0.999 * v[key] + 0.001 * g * g
            p -= lr * (m[key] / (1 - 0.9 ** t)) / (np.sqrt(v[key] / (1 - 0.999 ** t)) + 1e-8)
    return float(np.mean(np.argmax(xte @ Wp + bp, axis=1) == yte))


def encode_checkpoint(model: SegModel) -> bytes:
    d_in, d_hid, k = model.dims
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, d_in, d_hid, k)]
    parts += [np.ascontiguousarray(getattr(model, n), dtype="<f8").tobytes() for n in PARAM_NAMES]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> SegModel:
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(buf))
    _, version, d_in, d_hid, k = _CKPT_HEADER.unpack_from(buf, 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    shapes = ((d_in, d_hid), (d_hid,), (d_hid, k), (k,))
    off = _CKPT_HEADER.size
    arrays = []
    for name, shape in zip(PARAM_NAMES, shapes):
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(buf):
            raise FormatError(f"truncated parameter {name}", offset=len(buf))
        arrays.append(np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off)
                      .astype(np.float64).reshape(shape))
        off += nbytes
    if off != len(buf):
        raise FormatError("trailing bytes after parameters", offset=off)
    return SegModel(*arrays)


def save_checkpoint(path, model: SegModel):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
