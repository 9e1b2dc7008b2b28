"""Class decoupling: pseudo-labels, class-normalized CE and per-class reliability weights."""
from dataclasses import dataclass, field

import numpy as np

from .datagen import IGNORE
from .errors import ArgumentError
from .model import forward
from .numerics import PROB_FLOOR

WEIGHT_MODES = ("paper", "inverted")


def pseudo_labels(teacher, feats):
    """Per-pixel argmax of teacher logits; ties go to the lowest class index."""
    _, logits = forward(teacher, feats)
    return np.argmax(logits, axis=-1).astype(np.uint8)


def per_class_mean_ce(probs, labels, ignore_index=IGNORE):
    """Return ``(mean_ce, counts)`` per class; classes with no pixels get 0."""
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[-1]
    p = probs.reshape(-1, K)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    valid = y != ignore_index
    if np.any(y[valid] >= K) or np.any(y[valid] < 0):
        raise ArgumentError("label outside [0, K)")
    idx = np.nonzero(valid)[0]
    nll = -np.log(np.maximum(p[idx, y[idx]], PROB_FLOOR))
    counts = np.bincount(y[idx], minlength=K).astype(np.float64)
    sums = np.bincount(y[idx], weights=nll, minlength=K)
    means = np.divide(sums, counts, out=np.zeros(K), where=counts > 0)
    return means, counts


def class_weighted_ce(probs, labels, weights, ignore_index=IGNORE):
    """sum_k w_k / n_k * sum_{i: label_i = k} -log p_{i,k}, and its logit gradient."""
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[-1]
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (K,):
        raise ArgumentError(f"expected {K} weights, got shape {w.shape}")
    means, counts = per_class_mean_ce(probs, labels, ignore_index)
    loss = float(w @ means)
    p = probs.reshape(-1, K)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    grad = np.zeros_like(p)
    idx = np.nonzero(y != ignore_index)[0]
    if idx.size:
        yk = y[idx]
        scale = np.divide(w, counts, out=np.zeros(K), where=counts > 0)[yk]
        grad[idx] = p[idx] * scale[:, None]
        grad[idx, yk] -= scale
    return loss, grad.reshape(probs.shape)


def class_normalized_loss(probs, labels, ignore_index=IGNORE):
    K = np.asarray(probs).shape[-1]
    return class_weighted_ce(probs, labels, np.ones(K), ignore_index)


@dataclass
class ReliabilityState:
    """Running per-class disagreement rate between student and pseudo-labels."""
    beta: np.ndarray
    decay: float = 0.9
    seen: np.ndarray = field(default=None)

    @classmethod
    def create(cls, K, init=0.5, decay=0.9):
        return cls(beta=np.full(K, float(init)), decay=float(decay), seen=np.zeros(K, dtype=np.int64))

    def copy(self):
        return ReliabilityState(self.beta.copy(), self.decay, self.seen.copy())

    def weights(self, mode="paper"):
        if mode == "paper":
            return self.beta.copy()
        if mode == "inverted":
            return 1.0 - self.beta
        raise ArgumentError(f"unknown weighting mode {mode!r}")


def disagreement_rates(student_pred, pseudo, K):
    """Per-class ``(r_k, m_k)``; ``r_k`` is NaN where class k has no pseudo pixels."""
    student_pred = np.asarray(student_pred).ravel()
    pseudo = np.asarray(pseudo).ravel()
    if student_pred.shape != pseudo.shape:
        raise ArgumentError("student prediction and pseudo-label shapes disagree")
    m = np.bincount(pseudo, minlength=K)[:K].astype(np.float64)
    agree = np.bincount(pseudo[student_pred == pseudo], minlength=K)[:K].astype(np.float64)
    r = np.full(K, np.nan)
    present = m > 0
    r[present] = 1.0 - agree[present] / m[present]
    return r, m


def update_reliability(state: ReliabilityState, student_pred, pseudo) -> ReliabilityState:
    """Blend this batch's disagreement rates into the running ``beta``; in place."""
    K = state.beta.shape[0]
    r, m = disagreement_rates(student_pred, pseudo, K)
    present = m > 0
    state.beta[present] = state.decay * state.beta[present] + (1.0 - state.decay) * r[present]
    np.clip(state.beta, 0.0, 1.0, out=state.beta)
    state.seen[present] += 1
    return state


def weighted_loss(probs, pseudo, state: ReliabilityState, mode="paper"):
    """Class-normalized pseudo-label CE scaled per class by the reliability weight."""
    return class_weighted_ce(probs, pseudo, state.weights(mode))
