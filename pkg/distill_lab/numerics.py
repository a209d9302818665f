"""
Dense numerics for distill-lab.

Matrices are 2-D float64 numpy arrays. This module holds the loss functions
(with analytic gradients with respect to logits), a cyclic Jacobi solver for
symmetric eigenproblems and the central finite-difference oracle that the
test-suite uses to check every gradient in the package.

All functions are pure: inputs are never mutated.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from .errors import ConvergenceError, DomainError, ShapeError

logger = logging.getLogger('distill-lab.numerics')

Matrix = np.ndarray
LossAndGrad = Tuple[float, Matrix]

PROB_FLOOR = 1e-300
ROW_SUM_TOLERANCE = 1e-9
JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order.

    Column k of ``eigenvectors`` is the unit eigenvector for ``eigenvalues[k]``.
    """
    eigenvalues: np.ndarray
    eigenvectors: Matrix

    def reconstruct(self) -> Matrix:
        """Return V diag(lambda) V^T."""
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def as_matrix(value, name: str = 'matrix') -> Matrix:
    """Coerce ``value`` to a finite 2-D float64 array (1-D becomes a row)."""
    array = np.array(value, dtype=np.float64, copy=True)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be 2-D", array.shape)
    ensure_finite(array, name)
    return array


def ensure_finite(array: np.ndarray, name: str = 'result') -> np.ndarray:
    """Raise DomainError if ``array`` holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise DomainError(f"{name} contains non-finite entries")
    return array


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch", a.shape, b.shape)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with shape validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: inner dimensions differ", a.shape, b.shape)
    return ensure_finite(a @ b, 'matmul result')


def softmax(logits: Matrix, temperature: float = 1.0) -> Matrix:
    """Row-wise softmax of ``logits / temperature``.

    Uses max-subtraction, so the result is invariant to a constant shift of
    each row and never overflows.
    """
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature!r}")
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z.reshape(1, -1)
    ensure_finite(z, 'logits')
    scaled = z / temperature
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    exp = np.exp(scaled)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return probs[0] if squeeze else probs


def cross_entropy(labels: Matrix, probs: Matrix) -> LossAndGrad:
    """Mean negative log-likelihood of one-hot ``labels`` under ``probs``.

    Returns the loss and its gradient with respect to the logits that
    produced ``probs`` through a unit-temperature softmax:
    ``(probs - labels) / batch``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    _check_same_shape(labels, probs, 'cross_entropy')
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE):
        raise DomainError("cross_entropy: probability rows must sum to 1")
    batch = probs.shape[0]
    log_probs = np.log(np.maximum(probs, PROB_FLOOR))
    loss = float(-np.sum(labels * log_probs) / batch)
    grad = (probs - labels) / batch
    return loss, grad


def kl_divergence(p: Matrix, q: Matrix) -> float:
    """Mean over rows of KL(p || q); zero entries are floored at 1e-300."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_same_shape(p, q, 'kl_divergence')
    if p.ndim == 1:
        p = p.reshape(1, -1)
        q = q.reshape(1, -1)
    ratio = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    value = float(np.sum(p * ratio) / p.shape[0])
    return max(0.0, value)


def mse_logits(z_s: Matrix, target: Matrix) -> LossAndGrad:
    """Batch mean of the squared row-wise 2-norm of ``z_s - target``."""
    z_s = np.asarray(z_s, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(z_s, target, 'mse_logits')
    batch = z_s.shape[0]
    diff = z_s - target
    loss = float(np.sum(diff * diff) / batch)
    grad = 2.0 * diff / batch
    return loss, grad


def _jacobi_rotation(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    """Annihilate a[p, q] in place with a symmetric Schur rotation."""
    apq = a[p, q]
    g = 100.0 * abs(apq)
    app, aqq = abs(a[p, p]), abs(a[q, q])
    if app + g == app and aqq + g == aqq:
        # below the precision of both pivots
        a[p, q] = a[q, p] = 0.0
        return
    h = a[q, q] - a[p, p]
    if abs(h) + g == abs(h):
        t = apq / h
    else:
        tau = h / (2.0 * apq)
        if tau >= 0:
            t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
        else:
            t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
    c = 1.0 / math.sqrt(1.0 + t * t)
    s = t * c

    col_p = a[:, p].copy()
    col_q = a[:, q].copy()
    a[:, p] = c * col_p - s * col_q
    a[:, q] = s * col_p + c * col_q
    row_p = a[p, :].copy()
    row_q = a[q, :].copy()
    a[p, :] = c * row_p - s * row_q
    a[q, :] = s * row_p + c * row_q
    a[p, q] = a[q, p] = 0.0

    vec_p = v[:, p].copy()
    vec_q = v[:, q].copy()
    v[:, p] = c * vec_p - s * vec_q
    v[:, q] = s * vec_p + c * vec_q


def _off_diagonal_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def symmetric_eigen(m: Matrix, tolerance: float = JACOBI_TOLERANCE,
                    max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    The input is symmetrized as (M + M^T) / 2. Iteration stops once the
    off-diagonal Frobenius norm falls below ``tolerance * max(1, ||M||_F)``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("symmetric_eigen requires a square matrix", m.shape)
    ensure_finite(m, 'symmetric_eigen input')
    n = m.shape[0]
    a = (m + m.T) / 2.0
    v = np.eye(n)
    threshold = tolerance * max(1.0, float(np.linalg.norm(a)))

    off = _off_diagonal_norm(a)
    sweeps = 0
    while off > threshold:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi eigensolver did not converge in {max_sweeps} sweeps", off)
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] != 0.0:
                    _jacobi_rotation(a, v, p, q)
        sweeps += 1
        off = _off_diagonal_norm(a)
    logger.debug("Jacobi converged after %d sweeps (off-diagonal %.3e)", sweeps, off)

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind='stable')
    eigenvalues = eigenvalues[order]
    v = v[:, order]
    v /= np.linalg.norm(v, axis=0, keepdims=True)
    if n:
        pivots = np.argmax(np.abs(v), axis=0)
        signs = np.sign(v[pivots, np.arange(n)])
        signs[signs == 0] = 1.0
        v = v * signs
    return EigenDecomposition(eigenvalues=eigenvalues, eigenvectors=v)


def finite_difference_check(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                            analytic_grad: np.ndarray, step: float = 1e-5,
                            floor: float = 1e-8) -> float:
    """Compare ``analytic_grad`` against central differences of ``loss_fn``.

    Returns the maximum over coordinates of
    ``|a - b| / max(|a|, |b|, floor)``. Raising ``floor`` turns the check
    absolute for coordinates whose gradient is close to zero.
    """
    if not step > 0:
        raise DomainError(f"finite-difference step must be positive, got {step!r}")
    base = np.array(params, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    flat = base.reshape(-1)
    if analytic.size != flat.size:
        raise ShapeError("finite_difference_check: gradient size differs from params",
                         analytic.shape, flat.shape)
    worst = 0.0
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + step
        plus = float(loss_fn(base.copy()))
        flat[index] = original - step
        minus = float(loss_fn(base.copy()))
        flat[index] = original
        numeric = (plus - minus) / (2.0 * step)
        denom = max(abs(numeric), abs(analytic[index]), floor)
        worst = max(worst, abs(numeric - analytic[index]) / denom)
    return worst
