"""Mean-teacher self-training loop with the three masking components.

One iteration:

* source batch (class-aware sampled) -> supervised CE and foreground distillation
* target batch -> teacher pseudo-labels -> weighted loss on the clean image
* masked target image -> the same weighted loss against the same pseudo-labels
* one AdamW step on the summed gradient, reliability update, EMA teacher update
"""
import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cam, cdm, fdm
from .config import Config
from .datagen import LabeledImage, generate_dataset, image_seed, read_dataset, target_view, write_dataset
from .errors import DataError, TrainingDivergence
from .eval import ConfusionMatrix
from .model import (OptimizerState, PretrainedExtractor, SegModel, add_grads, backward, ema_update,
                    featurize, forward, optimizer_step, pretrain_extractor, save_checkpoint)
from .numerics import cross_entropy, softmax

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "L_S", "L_T", "L_M", "L_KD", "L_Total", "lr_enc", "lr_dec")


@dataclass
class Datasets:
    """Training inputs; target images are held without labels."""
    source: list
    target: list                      # rgb arrays only
    target_val: list                  # labeled, evaluation only
    aux: list = field(default_factory=list)
    class_names: tuple = ()

    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def features(self, split, i):
        """Cached per-pixel features of image ``i`` of ``source`` or ``target``."""
        key = (split, i)
        f = self._cache.get(key)
        if f is None:
            rgb = self.source[i].rgb if split == "source" else self.target[i]
            f = self._cache[key] = featurize(rgb)
        return f

    @classmethod
    def build(cls, source, target, target_val, aux=(), class_names=()):
        if target and isinstance(target[0], LabeledImage):
            target = target_view(target)
        return cls(list(source), list(target), list(target_val), list(aux), tuple(class_names))


@dataclass
class StepInputs:
    """Everything a loss evaluation needs, with all randomness already drawn."""
    feats_s: np.ndarray               # B x H x W x D_in
    labels_s: np.ndarray              # B x H x W
    feats_t: Optional[np.ndarray] = None
    pseudo: Optional[np.ndarray] = None
    feats_m: Optional[np.ndarray] = None
    pre_stats: Optional[fdm.RelationalStats] = None
    fg_ids: tuple = ()                # source images that contributed an embedding
    fg_counts: tuple = ()
    weights: Optional[np.ndarray] = None   # per-class CDM weights; None = plain CE


@dataclass
class StepLosses:
    L_S: float = 0.0
    L_T: float = 0.0
    L_M: float = 0.0
    L_KD: float = 0.0
    L_D: float = 0.0
    L_A: float = 0.0
    L_Total: float = 0.0


@dataclass
class LossTerms:
    """Which terms to include; used to isolate single terms for gradient checks."""
    source: bool = True
    target: bool = True
    masked: bool = True
    distance: bool = True
    angle: bool = True


def _target_loss(probs, pseudo, weights):
    if weights is None:
        return cross_entropy(probs, pseudo)
    return cdm.class_weighted_ce(probs, pseudo, weights)


def step_losses(student: SegModel, inp: StepInputs, partition, lambda_kd, normalization="mean",
                terms: LossTerms = LossTerms()):
    """Loss values and parameter gradients of the total objective for fixed inputs.

    Returns ``(StepLosses, grads, target_logits)``.
    """
    B = inp.feats_s.shape[0]
    parts = [inp.feats_s]
    if inp.feats_t is not None:
        parts.append(inp.feats_t)
    if inp.feats_m is not None:
        parts.append(inp.feats_m)
    x = np.concatenate(parts, axis=0) if len(parts) > 1 else inp.feats_s
    neck, logits = forward(student, x)
    probs = softmax(logits, axis=-1)
    d_logits = np.empty_like(logits)
    out = StepLosses()

    L_S, g = cross_entropy(probs[:B], inp.labels_s)
    out.L_S = L_S
    d_logits[:B] = g if terms.source else 0.0

    off = B
    target_logits = None
    if inp.feats_t is not None:
        nt = inp.feats_t.shape[0]
        target_logits = logits[off:off + nt]
        out.L_T, g = _target_loss(probs[off:off + nt], inp.pseudo, inp.weights)
        d_logits[off:off + nt] = g if terms.target else 0.0
        off += nt
    if inp.feats_m is not None:
        nm = inp.feats_m.shape[0]
        out.L_M, g = _target_loss(probs[off:off + nm], inp.pseudo, inp.weights)
        d_logits[off:off + nm] = g if terms.masked else 0.0

    kd_rows = None
    if inp.pre_stats is not None and len(inp.fg_ids) >= 2:
        fg = partition.is_foreground(inp.labels_s[list(inp.fg_ids)])
        fg_necks = [neck[i][fg[n]] for n, i in enumerate(inp.fg_ids)]
        neck_stats = fdm.relational_stats(np.stack([f.mean(axis=0) for f in fg_necks]), normalization)
        kd = fdm.kd_loss(inp.pre_stats, neck_stats)
        out.L_D, out.L_A, out.L_KD = kd.L_D, kd.L_A, kd.L_KD
        g_pts = np.zeros_like(kd.grad_D)
        if terms.distance:
            g_pts += kd.grad_D
        if terms.angle:
            g_pts += kd.grad_A
        # the distillation gradient only touches source foreground pixels
        kd_rows = (
            np.concatenate([x[i][fg[n]] for n, i in enumerate(inp.fg_ids)]),
            np.concatenate(fg_necks),
            np.concatenate([np.broadcast_to(lambda_kd * g_pts[n] / inp.fg_counts[n], f.shape)
                            for n, f in enumerate(fg_necks)]),
        )

    out.L_Total = out.L_S + lambda_kd * out.L_KD + out.L_T + out.L_M
    for name in ("L_S", "L_T", "L_M", "L_KD"):
        if not np.isfinite(getattr(out, name)):
            raise TrainingDivergence(f"non-finite loss {name}", term=name)
    grads = backward(student, x, d_logits=d_logits, neck=neck)
    if kd_rows is not None:
        x_fg, neck_fg, g_fg = kd_rows
        grads = add_grads(grads, backward(student, x_fg, d_neck=g_fg, neck=neck_fg))
    return out, grads, target_logits


def extractor_embeddings(extractor, feats_s, labels_s, partition, n_min_fg, normalization):
    """Pooled extractor embeddings of the source batch; returns ``(stats, ids, counts)``."""
    ids, counts, pts = [], [], []
    for i in range(feats_s.shape[0]):
        fg = partition.is_foreground(labels_s[i])
        n = int(fg.sum())
        if n < n_min_fg:
            continue
        ids.append(i)
        counts.append(n)
        pts.append(extractor(feats_s[i][fg]).mean(axis=0))
    if len(ids) < 2:
        return None, tuple(ids), tuple(counts)
    return fdm.relational_stats(np.stack(pts), normalization), tuple(ids), tuple(counts)


def masked_images(config: Config, rgb_batch, pseudo, rng):
    """Masked copies of each target image, one independent mask pair per image."""
    c = config.cam
    partition = config.scene.partition
    out = []
    for rgb, pl in zip(rgb_batch, pseudo):
        H, W = pl.shape
        if c.mask_strategy == "cam":
            mb = cam.make_block_mask(H, W, min(cam.scaled_block(c.block_back, H), H, W), c.mask_ratio, rng)
            mf = cam.make_block_mask(H, W, min(cam.scaled_block(c.block_fore, H), H, W), c.mask_ratio, rng)
        elif c.mask_strategy == "random":
            mb = mf = cam.make_random_mask(H, W, c.mask_ratio, rng)
        else:
            mb = mf = cam.make_grid_mask(H, W, min(cam.scaled_block(c.block_fore, H), H, W), rng)
        out.append(cam.combine_masked_image(rgb, pl, partition, mb, mf))
    return out


@dataclass
class TrainState:
    student: SegModel
    teacher: SegModel
    extractor: Optional[PretrainedExtractor]
    optim: OptimizerState
    reliability: cdm.ReliabilityState
    iteration: int = 0


@dataclass
class TrainLogRecord:
    iter: int
    L_S: float
    L_T: float
    L_M: float
    L_KD: float
    L_Total: float
    lr_enc: float
    lr_dec: float
    beta_hash: str = ""

    def row(self):
        return [str(self.iter)] + [repr(float(getattr(self, k))) for k in LOG_FIELDS[1:]]


class Sampler:
    """Draws source and target batches and masks from per-purpose random streams."""

    def __init__(self, config: Config, datasets: Datasets, seed):
        self.config = config
        self.datasets = datasets
        ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xDA7A])
        s_src, s_tgt, s_mask = ss.spawn(3)
        self.rng_src = np.random.default_rng(s_src)
        self.rng_tgt = np.random.default_rng(s_tgt)
        self.rng_mask = np.random.default_rng(s_mask)
        K = config.scene.K
        partition = config.scene.partition
        self.dist = None
        if config.cam.sampling == "cam":
            freq = cam.compute_frequencies(datasets.source, K)
            dist = cam.sampling_distribution(freq, partition, config.cam.t_b, config.cam.t_f,
                                             config.cam.p_fg_branch)
            self.index = cam.build_class_index(datasets.source, K, config.cam.n_min)
            # classes with no qualifying image cannot be drawn
            self.dist = _restrict(dist, self.index)
            cam.check_index_coverage(self.dist, self.index)

    def source_ids(self, n):
        if self.dist is None:
            return [int(i) for i in self.rng_src.integers(len(self.datasets.source), size=n)]
        return [cam.sample_source_image(self.dist, self.index, self.rng_src) for _ in range(n)]

    def target_ids(self, n):
        return [int(i) for i in self.rng_tgt.integers(len(self.datasets.target), size=n)]


def _restrict(dist, index):
    def branch(classes, p):
        p = np.array([pk if len(index.get(k, ())) else 0.0 for k, pk in zip(classes, p)])
        return p / p.sum() if p.sum() > 0 else p

    p_fore = branch(dist.fore_classes, dist.p_fore)
    p_back = branch(dist.back_classes, dist.p_back)
    p_fg = dist.p_fg_branch
    if p_fore.sum() == 0:
        p_fg = 0.0
    elif p_back.sum() == 0:
        p_fg = 1.0
    return cam.SamplingDistribution(dist.fore_classes, p_fore, dist.back_classes, p_back, p_fg)


def build_step_inputs(config: Config, state: TrainState, datasets: Datasets, sampler: Sampler):
    B = config.train.batch_size
    partition = config.scene.partition
    src_ids = sampler.source_ids(B)
    feats_s = np.stack([datasets.features("source", i) for i in src_ids])
    labels_s = np.stack([datasets.source[i].labels for i in src_ids])
    inp = StepInputs(feats_s=feats_s, labels_s=labels_s)

    if config.fdm.mode == "on" and state.extractor is not None:
        inp.pre_stats, inp.fg_ids, inp.fg_counts = extractor_embeddings(
            state.extractor, feats_s, labels_s, partition, config.fdm.n_min_fg, config.fdm.normalization)

    if config.train.self_training and state.iteration >= config.train.target_warmup:
        tgt_ids = sampler.target_ids(B)
        rgb_t = [datasets.target[i] for i in tgt_ids]
        inp.feats_t = np.stack([datasets.features("target", i) for i in tgt_ids])
        inp.pseudo = cdm.pseudo_labels(state.teacher, inp.feats_t)
        if config.cam.mask_strategy != "none":
            xm = masked_images(config, rgb_t, inp.pseudo, sampler.rng_mask)
            inp.feats_m = np.stack([featurize(x) for x in xm])
        if config.cdm.mode != "off":
            inp.weights = state.reliability.weights(config.cdm.mode)
    return inp


def train_step(config: Config, state: TrainState, inp: StepInputs):
    """Apply one optimization step in place and return the logged losses."""
    losses, grads, target_logits = step_losses(
        state.student, inp, config.scene.partition, config.train.lambda_kd, config.fdm.normalization)
    optimizer_step(state.optim, state.student, grads)
    if target_logits is not None:
        cdm.update_reliability(state.reliability, np.argmax(target_logits, axis=-1), inp.pseudo)
    state.iteration += 1
    alpha = config.train.alpha
    if config.train.ema_ramp:
        alpha = min(1.0 - 1.0 / (state.iteration + 1), alpha)
    ema_update(state.teacher, state.student, alpha)
    return losses


def init_state(config: Config, datasets: Datasets, extractor=None):
    rng = np.random.default_rng([int(config.train.seed) & 0xFFFFFFFF, 0x5EED])
    student = SegModel.init(rng, k=config.scene.K)
    o = config.optim
    optim = OptimizerState(lr_enc=o.lr_enc, lr_dec=o.lr_dec, warmup=o.warmup, weight_decay=o.weight_decay,
                           beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    if extractor is None and config.fdm.mode == "on":
        extractor = build_extractor(config, datasets)
    rel = cdm.ReliabilityState.create(config.scene.K, config.cdm.init, config.cdm.decay)
    return TrainState(student, student.copy(), extractor, optim, rel)


_EXTRACTOR_CACHE = {}


def build_extractor(config: Config, datasets: Datasets):
    e = config.extractor
    digest = hashlib.sha256()
    for im in datasets.aux:
        digest.update(im.rgb.tobytes())
        digest.update(im.labels.tobytes())
    key = (e.mode, e.seed, e.iterations, e.lr, config.scene.K, digest.hexdigest())
    if key not in _EXTRACTOR_CACHE:
        _EXTRACTOR_CACHE.clear()
        _EXTRACTOR_CACHE[key] = pretrain_extractor(e.mode, e.seed, datasets.aux, K=config.scene.K,
                                                   iterations=e.iterations, lr=e.lr)
    return _EXTRACTOR_CACHE[key]


def evaluate(model: SegModel, images, K, feats=None):
    cm = ConfusionMatrix(K)
    for n, im in enumerate(images):
        f = featurize(im.rgb) if feats is None else feats[n]
        cm.accumulate(np.argmax(forward(model, f)[1], axis=-1), im.labels)
    return cm


@dataclass
class TrainResult:
    student: SegModel
    teacher: SegModel
    best: SegModel
    best_miou: float
    final_miou: float
    records: list
    events: list
    state: TrainState
    diverged: Optional[str] = None


def _beta_hash(beta):
    return hashlib.sha256(np.ascontiguousarray(beta, dtype="<f8").tobytes()).hexdigest()[:16]


def run_training(config: Config, datasets: Datasets, out_dir=None, extractor=None) -> TrainResult:
    """Train from scratch; deterministic in ``config`` (including its seed)."""
    config.validate()
    K = config.scene.K
    names = datasets.class_names or config.scene.class_names
    state = init_state(config, datasets, extractor)
    sampler = Sampler(config, datasets, config.train.seed)
    val_feats = [featurize(im.rgb) for im in datasets.target_val]
    records, events = [], []
    best, best_miou = state.student.copy(), -1.0

    def do_eval(it):
        nonlocal best, best_miou
        res = evaluate(state.student, datasets.target_val, K, val_feats).iou()
        ev = {"iter": it, "mIoU": res.miou,
              "per_class_iou": {names[k]: res.per_class[k] for k in range(K)},
              "beta": [float(b) for b in state.reliability.beta]}
        events.append(ev)
        if res.miou > best_miou:
            best, best_miou = state.student.copy(), res.miou
        return res.miou

    diverged = None
    for it in range(1, config.train.iterations + 1):
        inp = build_step_inputs(config, state, datasets, sampler)
        try:
            losses = train_step(config, state, inp)
        except TrainingDivergence as exc:
            diverged = str(exc)
            log.error("diverged at iteration %d: %s", it, exc)
            break
        lr_enc, lr_dec = state.optim.effective_lrs()
        records.append(TrainLogRecord(it, losses.L_S, losses.L_T, losses.L_M, losses.L_KD, losses.L_Total,
                                      lr_enc, lr_dec, _beta_hash(state.reliability.beta)))
        if it % config.train.eval_interval == 0:
            miou = do_eval(it)
            log.info("iter %d mIoU %.4f", it, miou)
    if not events or events[-1]["iter"] != state.iteration:
        do_eval(state.iteration)
    final_miou = events[-1]["mIoU"]
    result = TrainResult(state.student, state.teacher, best, best_miou, final_miou, records, events, state,
                         diverged)
    if out_dir is not None:
        write_outputs(out_dir, config, result)
    if diverged is not None:
        raise TrainingDivergence(diverged)
    return result


def format_log(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_outputs(out_dir, config: Config, result: TrainResult):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(format_log(result.records))
    with open(os.path.join(out_dir, "events.jsonl"), "w", encoding="utf-8") as fh:
        for ev in result.events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    if result.diverged is not None:
        save_checkpoint(os.path.join(out_dir, "last_good.omck"), result.student)
        return
    save_checkpoint(os.path.join(out_dir, "final.omck"), result.student)
    save_checkpoint(os.path.join(out_dir, "best.omck"), result.best)


SPLITS = {"source": ("source", 0), "target": ("target", 1), "target_val": ("target", 2),
          "aux_source": ("source", 3), "aux_target": ("target", 4)}


def split_seed(config: Config, split):
    return image_seed(config.data.seed, SPLITS[split][1])


def generate_splits(config: Config):
    """All dataset splits as ``{name: (images, domain, seed)}``; aux mixes both domains equally."""
    d = config.data
    sizes = {"source": d.n_source, "target": d.n_target, "target_val": d.n_val,
             "aux_source": d.n_aux // 2, "aux_target": d.n_aux - d.n_aux // 2}
    out = {}
    for name, n in sizes.items():
        domain = SPLITS[name][0]
        seed = split_seed(config, name)
        out[name] = (generate_dataset(config.scene, domain, n, seed), domain, seed)
    return out


def make_datasets(config: Config) -> Datasets:
    s = generate_splits(config)
    return Datasets.build(s["source"][0], s["target"][0], s["target_val"][0],
                          s["aux_source"][0] + s["aux_target"][0], config.scene.class_names)


DATA_DIRS = ("source", "target", "target_val", "aux")


def save_datasets(config: Config, out_dir):
    """Generate every split and write it under ``out_dir/<split>``; aux holds both domains."""
    s = generate_splits(config)
    layout = {
        "source": (s["source"][0], "source", s["source"][2]),
        "target": (s["target"][0], "target", s["target"][2]),
        "target_val": (s["target_val"][0], "target", s["target_val"][2]),
        "aux": (s["aux_source"][0] + s["aux_target"][0], "mixed", config.data.seed),
    }
    for name, (images, domain, seed) in layout.items():
        write_dataset(os.path.join(out_dir, name), images, config.scene, domain=domain, seed=seed)
    return {name: len(v[0]) for name, v in layout.items()}


def load_datasets(data_dir):
    """Read a directory written by :func:`save_datasets`; returns ``(Datasets, SceneConfig)``."""
    loaded = {}
    for name in DATA_DIRS:
        path = os.path.join(data_dir, name)
        if name == "aux" and not os.path.isdir(path):
            loaded[name] = ([], None)
            continue
        try:
            loaded[name] = read_dataset(path)
        except FileNotFoundError as exc:
            raise DataError(f"missing dataset split {name!r} under {data_dir}") from exc
    scene = loaded["source"][1]
    for name, (_, sc) in loaded.items():
        if sc is not None and (sc.K, sc.H, sc.W, sc.partition) != (scene.K, scene.H, scene.W, scene.partition):
            raise DataError(f"split {name!r} disagrees with the source split's scene")
    ds = Datasets.build(loaded["source"][0], loaded["target"][0], loaded["target_val"][0],
                        loaded["aux"][0], scene.class_names)
    return ds, scene
