"""Dense vector primitives, similarity, losses and a finite-difference checker.

Everything here works on 1-D float64 numpy arrays. Functions validate their
inputs and raise rather than silently returning zeros.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

EPS = 1e-10
PROB_FLOOR = 1e-12


class DegenerateVector(ValueError):
    """Raised when a vector's norm is at or below ``EPS``."""


def as_vector(a, name: str = "vector") -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains NaN or Inf")
    return v


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    return a, b


def dot(a, b) -> float:
    a, b = _pair(a, b)
    return float(a @ b)


def l2_norm(a) -> float:
    a = as_vector(a)
    return float(np.sqrt(a @ a))


def l2_normalize(a) -> np.ndarray:
    a = as_vector(a)
    n = float(np.sqrt(a @ a))
    if n <= EPS:
        raise DegenerateVector(f"cannot normalize vector with norm {n:.3e}")
    return a / n


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na <= EPS or nb <= EPS:
        raise DegenerateVector("cosine similarity undefined for zero-norm input")
    c = float(a @ b) / (na * nb)
    # rounding can push |c| a hair past 1
    return min(1.0, max(-1.0, c))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax; accepts a vector or a (batch, classes) matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain NaN or Inf")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, target: int) -> float:
    p = as_vector(probs, "probs")
    if not 0 <= int(target) < p.size:
        raise ValueError(f"target {target} out of range for {p.size} classes")
    return float(-np.log(max(p[int(target)], PROB_FLOOR)))


def batch_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy of a (batch, classes) probability matrix."""
    picked = probs[np.arange(len(targets)), targets]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def finite_diff_grad(f: Callable[[np.ndarray], float], params, h: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` may have any shape; it is perturbed in place and restored.
    When ``indices`` (flat positions) is given only those coordinates are
    evaluated and the rest of the returned array is left at zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    p = np.asarray(params, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(p)
        flat[i] = old - h
        fm = f(p)
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < 1e-12:
        return diff
    return diff / scale
