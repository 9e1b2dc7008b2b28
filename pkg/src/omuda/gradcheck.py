"""Finite-difference verification of every differentiable loss path on a tiny batch."""
import numpy as np

from . import cdm
from .config import Config
from .model import SegModel, featurize, grads_to_vector, pretrain_extractor
from .numerics import GradCheckReport, finite_diff_check
from .trainer import LossTerms, StepInputs, extractor_embeddings, masked_images, step_losses

# which terms each named check differentiates; L_D and L_A are checked at unit weight
TERM_SETS = {
    "L_S": LossTerms(True, False, False, False, False),
    "L_T": LossTerms(False, True, False, False, False),
    "L_M": LossTerms(False, False, True, False, False),
    "L_D": LossTerms(False, False, False, True, False),
    "L_A": LossTerms(False, False, False, False, True),
    "L_Total": LossTerms(),
}


def split_biases(W1, feats_fg, feats_all, lo=30, hi=70):
    """Hidden biases that put every unit's ReLU threshold inside the foreground data.

    A unit active on every foreground pixel only translates the pooled
    embeddings, which the relational losses ignore exactly, so its bias gradient
    is a structural zero that finite differences resolve only to rounding noise.
    Each threshold sits in the widest gap between the ``lo`` and ``hi``
    percentiles of the unit's foreground pre-activations; measuring gaps over
    ``feats_all`` keeps every pixel of the batch clear of the ReLU kink.
    """
    z_fg = feats_fg @ W1
    z_all = feats_all @ W1
    b = np.empty(W1.shape[1])
    for j in range(W1.shape[1]):
        a, c = np.percentile(z_fg[:, j], [lo, hi])
        vals = np.unique(np.concatenate([[a, c], z_all[(z_all[:, j] >= a) & (z_all[:, j] <= c), j]]))
        g = int(np.argmax(np.diff(vals)))
        b[j] = -0.5 * (vals[g] + vals[g + 1])
    return b


def gradcheck_batch(seed=0, n=3, size=8, config: Config = None):
    """Seeded ``n``-image ``size`` x ``size`` source/target batch with every loss term active.

    Returns ``(student, StepInputs, partition, lambda_kd, normalization)``.
    """
    config = config or Config()
    K = config.scene.K
    partition = config.scene.partition
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6C4E])
    # distinct per-image base colours keep the pooled embeddings well apart
    base = rng.uniform(0, 255, (n, 1, 1, 3))
    rgb_s = np.clip(base + rng.normal(0, 30, (n, size, size, 3)), 0, 255).astype(np.uint8)
    labels_s = rng.integers(0, K, (n, size, size)).astype(np.uint8)
    rgb_t = rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8)

    student = SegModel.init(rng, k=K)
    teacher = SegModel.init(rng, k=K)
    extractor = pretrain_extractor("fixed-random", seed, K=K)

    feats_s = np.stack([featurize(x) for x in rgb_s])
    inp = StepInputs(feats_s=feats_s, labels_s=labels_s)
    inp.pre_stats, inp.fg_ids, inp.fg_counts = extractor_embeddings(
        extractor, feats_s, labels_s, partition, 1, config.fdm.normalization)
    inp.feats_t = np.stack([featurize(x) for x in rgb_t])
    inp.pseudo = cdm.pseudo_labels(teacher, inp.feats_t)
    inp.feats_m = np.stack([featurize(x) for x in masked_images(config, list(rgb_t), inp.pseudo, rng)])

    D = feats_s.shape[-1]
    fg = partition.is_foreground(labels_s)
    feats_all = np.concatenate([inp.feats_s, inp.feats_t, inp.feats_m]).reshape(-1, D)
    student.b1[:] = split_biases(student.W1, feats_s[fg], feats_all)

    state = cdm.ReliabilityState(rng.uniform(0.1, 0.9, K), config.cdm.decay, np.zeros(K, dtype=np.int64))
    inp.weights = state.weights(config.cdm.mode if config.cdm.mode != "off" else "paper")
    return student, inp, partition, config.train.lambda_kd, config.fdm.normalization


def check_gradients(seed=0, step=1e-5, tolerance=1e-4, config: Config = None, names=None):
    """Run the central-difference check for each named term; returns ``{name: GradCheckReport}``."""
    student, inp, partition, lambda_kd, norm = gradcheck_batch(seed, config=config)
    vec = student.to_vector()
    reports = {}
    for name in names or TERM_SETS:
        terms = TERM_SETS[name]
        # isolated distillation terms are checked unweighted
        lam = lambda_kd if name == "L_Total" else 1.0

        def f(v, name=name, terms=terms, lam=lam):
            out = step_losses(student.with_vector(v), inp, partition, lam, norm, terms)[0]
            return getattr(out, name)

        _, grads, _ = step_losses(student, inp, partition, lam, norm, terms)
        reports[name] = finite_diff_check(f, vec, grads_to_vector(grads), step, tolerance)
    return reports


def all_passed(reports):
    return all(r.passed for r in reports.values())


__all__ = ["TERM_SETS", "GradCheckReport", "split_biases", "gradcheck_batch", "check_gradients",
           "all_passed"]
