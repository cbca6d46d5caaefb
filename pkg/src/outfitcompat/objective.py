"""MAP training objective.

The loss is the summed binary cross-entropy of the readout plus three
priors: a matrix-variate normal prior on every metric-network weight matrix
(a trace penalty against a learned, unit-trace column covariance), and
Laplacian (L1) priors on the fine-tuned encoder filters and the readout
vector.  Column covariances are refit in closed form between gradient
phases, see :func:`covariance_update`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .nn import sigmoid

__all__ = [
    "RegWeights",
    "CovarianceState",
    "DegenerateWeightsError",
    "bce_loss",
    "trace_reg",
    "trace_reg_grad",
    "l1_reg",
    "l1_subgrad",
    "jacobi_eigh",
    "psd_sqrt",
    "gram_sqrt",
    "covariance_update",
    "total_loss",
]

PROB_CLAMP = 1e-12


class DegenerateWeightsError(ValueError):
    """The closed-form covariance is undefined for an all-zero weight matrix."""


@dataclass(frozen=True)
class RegWeights:
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3)


def _check_symmetric(A, what, tol=1e-10):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{what} must be square, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > tol * scale:
        raise ValueError(f"{what} is not symmetric")
    return A


@dataclass
class CovarianceState:
    """Column covariances, one per metric layer, plus the inversion stabilizer."""

    matrices: list
    eps: float = 1e-8
    _precisions: list = field(default=None, repr=False, compare=False)

    @classmethod
    def identity(cls, dims, eps=1e-8):
        """Maximum-entropy start ``I / Q`` for each input dimension ``Q``."""
        return cls([np.eye(q) / q for q in dims], eps=eps)

    def precisions(self):
        """Cached ``(Lambda + eps I)^-1`` for every layer."""
        if self._precisions is None:
            out = []
            for lam in self.matrices:
                q = lam.shape[0]
                out.append(cho_solve(_cho(lam, self.eps), np.eye(q)))
            self._precisions = out
        return self._precisions

    def check(self, sym_tol=1e-12, eig_tol=1e-10, trace_tol=1e-10):
        for j, lam in enumerate(self.matrices):
            if np.max(np.abs(lam - lam.T)) >= sym_tol:
                raise ValueError(f"covariance {j} not symmetric")
            if np.linalg.eigvalsh(lam).min() < -eig_tol:
                raise ValueError(f"covariance {j} not positive semi-definite")
            if abs(np.trace(lam) - 1.0) > trace_tol:
                raise ValueError(f"covariance {j} trace {np.trace(lam)!r} != 1")


def _cho(lam, eps):
    lam = _check_symmetric(lam, "covariance")
    try:
        return cho_factor(lam + eps * np.eye(lam.shape[0]), lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite after stabilization") from exc


# -- data term -------------------------------------------------------------------


def bce_loss(probs, labels):
    """Summed binary cross-entropy; probabilities are clamped away from 0 and 1."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probs and labels differ in shape: {p.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return float(-np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))


# -- priors ----------------------------------------------------------------------


def trace_reg(W, lam, eps=1e-8):
    """``tr(W (Lambda + eps I)^-1 W^T)`` via a Cholesky solve."""
    W = np.asarray(W, dtype=np.float64)
    X = cho_solve(_cho(lam, eps), W.T)
    return float(np.sum(W.T * X))


def trace_reg_grad(W, lam, eps=1e-8):
    W = np.asarray(W, dtype=np.float64)
    return 2.0 * cho_solve(_cho(lam, eps), W.T).T


def l1_reg(arrays):
    """Sum of absolute values over one array or an iterable of arrays."""
    if isinstance(arrays, np.ndarray):
        return float(np.abs(arrays).sum())
    return float(sum(np.abs(a).sum() for a in arrays))


def l1_subgrad(arrays):
    if isinstance(arrays, np.ndarray):
        return np.sign(arrays)
    return [np.sign(a) for a in arrays]


# -- covariance closed form ---------------------------------------------------


def _round_robin(n):
    """Tournament schedule: n-1 rounds of disjoint index pairs covering all pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.int64), np.array(q, dtype=np.int64)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _rotate_rows(M, p, q, c, s):
    Mp, Mq = M[p], M[q]
    M[p] = c[:, None] * Mp - s[:, None] * Mq
    M[q] = s[:, None] * Mp + c[:, None] * Mq


def jacobi_eigh(A, tol=1e-12, max_sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations inside a round touch disjoint rows and can be applied
    together.  Iteration stops once the off-diagonal Frobenius norm drops
    below ``tol`` times the norm of ``A``.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns,
    sorted by ascending eigenvalue.
    """
    A = _check_symmetric(A, "matrix").copy()
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    Vt = np.eye(n)
    scale = np.linalg.norm(A)
    if n < 2 or scale == 0.0:
        return np.diag(A).copy(), Vt

    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            if not np.any(apq):
                continue
            app, aqq = A[p, p], A[q, q]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                theta = (aqq - app) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(apq == 0, 0.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            # A <- P^T A P as two row rotations around a transpose (A symmetric)
            _rotate_rows(A, p, q, c, s)
            A = np.ascontiguousarray(A.T)
            _rotate_rows(A, p, q, c, s)
            A[p, q] = 0.0
            A[q, p] = 0.0
            _rotate_rows(Vt, p, q, c, s)

    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], Vt.T[:, order]


def psd_sqrt(A):
    """Symmetric square root of a PSD matrix; negative eigenvalues are clamped to 0."""
    w, V = jacobi_eigh(A)
    root = (V * np.sqrt(np.maximum(w, 0.0))) @ V.T
    return 0.5 * (root + root.T)


def gram_sqrt(W):
    """``(W^T W)^{1/2}`` for a ``P x Q`` matrix.

    When ``P < Q`` the eigenproblem is solved on the smaller ``W W^T`` and
    mapped back through ``W^T (W W^T)^{-1/2} W`` on its positive eigenspace.
    """
    W = np.asarray(W, dtype=np.float64)
    P, Q = W.shape
    if P >= Q:
        return psd_sqrt(W.T @ W)
    s, U = jacobi_eigh(W @ W.T)
    keep = s > max(P, Q) * np.finfo(float).eps * max(s.max(), 0.0)
    if not np.any(keep):
        return np.zeros((Q, Q))
    B = (U[:, keep] / s[keep] ** 0.25).T @ W
    root = B.T @ B
    return 0.5 * (root + root.T)


def covariance_update(W):
    """Minimizer of ``tr(W L^-1 W^T)`` over PSD ``L`` with unit trace.

    Equals ``(W^T W)^{1/2}`` scaled to trace one.
    """
    root = gram_sqrt(W)
    tr = np.trace(root)
    if not tr > 0:
        raise DegenerateWeightsError("weight matrix is zero; covariance update undefined")
    lam = root / tr
    lam = lam / np.trace(lam)
    return 0.5 * (lam + lam.T)


# -- full objective -----------------------------------------------------------


def total_loss(model, feats, right, left, labels, covs, reg, l1_in_grad=True,
               update_running=True):
    """Regularized loss and gradients for one mini-batch.

    ``covs`` is held fixed.  Returns ``(loss, grads, probs)`` where ``grads``
    covers ``model.trainable_names()``.  With ``l1_in_grad=False`` the L1
    terms still enter the loss value but not the gradients (used when the
    trainer applies them by soft-thresholding instead).
    """
    labels = np.asarray(labels, dtype=np.float64)
    logits = model.forward(feats, right, left, mode="train", update_running=update_running)
    probs = sigmoid(logits)
    loss = bce_loss(probs, labels)
    grads = model.backward(probs - labels)

    params = model.params
    if reg.lambda1:
        for j, (name, prec) in enumerate(zip(model.metric_weight_names(), covs.precisions())):
            WP = params[name] @ prec
            loss += reg.lambda1 * float(np.sum(WP * params[name]))
            grads[name] = grads[name] + 2.0 * reg.lambda1 * WP
    for lam, names in ((reg.lambda2, model.filter_l1_names()),
                       (reg.lambda3, model.readout_l1_names())):
        if not lam:
            continue
        for name in names:
            loss += lam * float(np.abs(params[name]).sum())
            if l1_in_grad:
                grads[name] = grads[name] + lam * np.sign(params[name])
    return loss, grads, probs
