"""Dense-array kernels, elementary losses and a central-difference gradient checker.

Everything works on float64 numpy arrays.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ArgumentError, DegenerateVectorError, EvaluationError

EPS = 1e-12
PROB_FLOOR = 1e-12


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"axis {axis} invalid for shape {x.shape}")
    moved = np.moveaxis(x, axis, -1)
    shape = moved.shape
    z = moved.reshape(-1, shape[-1])
    # column-wise loops beat numpy's reductions over a short trailing axis
    m = z[:, 0].copy()
    for j in range(1, z.shape[1]):
        np.maximum(m, z[:, j], out=m)
    e = z - m[:, None]
    np.exp(e, out=e)
    e /= (e @ np.ones(z.shape[1]))[:, None]
    return np.moveaxis(e.reshape(shape), -1, axis)


def smooth_l1(x):
    """Huber-style loss: 0.5 x^2 when |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return out if out.ndim else float(out)


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return out if out.ndim else float(out)


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ArgumentError(f"length mismatch {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < EPS or nv < EPS:
        raise DegenerateVectorError("vector norm below 1e-12")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cross_entropy(probs, labels, ignore_index=255):
    """Mean negative log-likelihood over non-ignored pixels.

    ``probs`` has the class axis last; ``labels`` matches the leading shape.
    Returns ``(loss, grad wrt logits)``. With no valid pixels the loss is 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    flat_p = probs.reshape(-1, k)
    flat_y = np.asarray(labels).reshape(-1).astype(np.int64)
    valid = flat_y != ignore_index
    n = int(valid.sum())
    grad = np.zeros_like(flat_p)
    if n == 0:
        return 0.0, grad.reshape(probs.shape)
    idx = np.nonzero(valid)[0]
    y = flat_y[idx]
    picked = np.maximum(flat_p[idx, y], PROB_FLOOR)
    loss = float(-np.log(picked).sum() / n)
    grad[idx] = flat_p[idx]
    grad[idx, y] -= 1.0
    grad /= n
    return loss, grad.reshape(probs.shape)


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    parameter_count: int
    passed: bool
    tolerance: float = 1e-4

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_relative_error:.3e} "
                f"params={self.parameter_count} tol={self.tolerance:g}")


def finite_diff_check(f: Callable[[np.ndarray], float], params, analytic_grad,
                      step=1e-5, tolerance=1e-4) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``params``.

    ``f`` receives a perturbed copy of ``params`` each call. The relative error
    per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ArgumentError("step must be positive")
    p = np.array(params, dtype=np.float64, copy=True)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if g.shape != p.shape:
        raise ArgumentError(f"gradient shape {g.shape} != params shape {p.shape}")
    flat = p.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(p))
        flat[i] = orig - step
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at parameter {i}")
        numeric[i] = (fp - fm) / (2.0 * step)
    a = g.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    err = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(err, int(flat.size), err < tolerance, tolerance)
