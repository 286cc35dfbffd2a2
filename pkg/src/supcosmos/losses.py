"""Loss terms of the supervised COSMOS objective with analytic gradients.

All reconstruction losses are evaluated per sample (one sample per row) and
summed over the batch. Every function returns the value together with its
gradients so callers never need a separate backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .numeric import ShapeError, as_matrix

COSINE_MODES = ("standard", "paper_literal", "off")
MI_EPS = 1e-12


class DegenerateVectorError(ValueError):
    """A zero-norm vector was passed where a direction is required."""


class LabelError(ValueError):
    pass


def _pair(x, xhat) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x)
    xhat = as_matrix(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"x has shape {x.shape} but xhat has shape {xhat.shape}")
    return x, xhat


def euclidean_loss(x, xhat) -> tuple[float, np.ndarray]:
    """Sum of squared differences and its gradient ``2 (xhat - x)``."""
    x, xhat = _pair(x, xhat)
    diff = xhat - x
    return float(np.sum(diff * diff)), 2.0 * diff


def cosine_loss(x, xhat, mode: str = "standard", strict: bool = True) -> tuple[float, np.ndarray]:
    """Row-wise cosine similarity summed over rows, with gradient w.r.t. ``xhat``.

    ``mode="paper_literal"`` divides by the product of *squared* norms instead,
    which is neither bounded nor scale invariant.

    With ``strict=False`` rows where either vector is zero contribute nothing
    and receive a zero gradient. Blank image patches and fully dropped codes
    produce such rows during training.
    """
    if mode not in ("standard", "paper_literal"):
        raise ValueError(f"unknown cosine mode {mode!r}")
    x, xhat = _pair(x, xhat)
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    ny = np.linalg.norm(xhat, axis=1, keepdims=True)
    bad = (nx == 0) | (ny == 0)
    if np.any(bad):
        if strict:
            raise DegenerateVectorError("cosine similarity is undefined for zero-norm rows")
        nx = np.where(bad, 1.0, nx)
        ny = np.where(bad, 1.0, ny)
    dot = np.sum(x * xhat, axis=1, keepdims=True)
    if mode == "standard":
        sim = dot / (nx * ny)
        grad = x / (nx * ny) - sim * xhat / (ny * ny)
    else:
        sim = dot / (nx * nx * ny * ny)
        grad = x / (nx * nx * ny * ny) - 2.0 * sim * xhat / (ny * ny)
    # a zero row in either argument makes dot zero, so only the gradient needs masking
    grad = np.where(bad, 0.0, grad)
    return float(np.sum(sim)), grad


def mahalanobis_loss(x, xhat, M) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed squared pseudo-distance ``d^T M d`` with ``d = x - xhat``.

    Returns ``(value, grad_xhat, grad_M)``. ``M`` need not be symmetric and
    its gradient is not symmetrized.
    """
    x, xhat = _pair(x, xhat)
    M = np.asarray(M, dtype=np.float64)
    m = x.shape[1]
    if M.shape != (m, m):
        raise ShapeError(f"metric has shape {M.shape}, expected ({m}, {m})")
    d = x - xhat
    Md = d @ M.T
    value = float(np.sum(d * Md))
    grad_xhat = -(d @ (M + M.T))
    grad_M = d.T @ d
    return value, grad_xhat, grad_M


def _check_labels(yl, n: int, n_classes: int) -> np.ndarray:
    yl = np.asarray(yl)
    if yl.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {yl.shape}")
    if not np.issubdtype(yl.dtype, np.integer):
        if not np.all(np.equal(np.mod(yl, 1), 0)):
            raise LabelError("labels must be integers")
        yl = yl.astype(np.int64)
    if np.any(yl < 0) or np.any(yl >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return yl


def soft_joint(yp, yl) -> np.ndarray:
    """Joint table ``p[j, k]`` over (predicted class j, true class k) from soft counts."""
    yp = as_matrix(yp)
    n, c = yp.shape
    if n == 0:
        raise ValueError("empty batch")
    yl = _check_labels(yl, n, c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), yl] = 1.0
    return yp.T @ onehot / n


def mutual_information(yp, yl) -> tuple[float, np.ndarray]:
    """Mutual information (nats) between soft predictions and labels.

    ``yp`` is ``n x C`` with probability rows; ``yl`` holds ``n`` integer
    labels in ``[0, C)``. Returns the value and its gradient w.r.t. ``yp``.
    """
    yp = as_matrix(yp)
    n, c = yp.shape
    if n == 0:
        raise ValueError("empty batch")
    yl = _check_labels(yl, n, c)
    joint = soft_joint(yp, yl)
    p_pred = joint.sum(axis=1)
    p_true = joint.sum(axis=0)
    log_joint = np.log(joint + MI_EPS)
    log_pred = np.log(p_pred + MI_EPS)
    log_true = np.log(p_true + MI_EPS)
    cell = log_joint - log_pred[:, None] - log_true[None, :]
    value = float(np.sum(joint * cell))

    # d/dp[j,k] through the joint cell itself, and through the marginals.
    d_joint = cell + joint / (joint + MI_EPS)
    d_joint -= (p_pred / (p_pred + MI_EPS))[:, None]
    d_joint -= (p_true / (p_true + MI_EPS))[None, :]
    grad = d_joint[:, yl].T / n
    return value, grad


@dataclass
class LossBreakdown:
    euclidean: float = 0.0
    cosine: float = 0.0
    mahalanobis: float = 0.0
    mutual_info: float = 0.0
    regularizer: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    total: float = 0.0

    def recompute_total(self) -> float:
        return (self.euclidean - self.cosine + self.mahalanobis
                - self.lambda1 * self.mutual_info + self.lambda2 * self.regularizer)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            raise ValueError("cannot average an empty list of breakdowns")
        out = cls(**{f.name: float(np.mean([getattr(b, f.name) for b in items])) for f in fields(cls)})
        out.total = out.recompute_total()
        return out


@dataclass
class LossGrads:
    """Gradients of the total loss w.r.t. reconstruction, metric and predictions."""
    xhat: np.ndarray
    M: np.ndarray | None
    probs: np.ndarray | None


@dataclass(frozen=True)
class LossTerms:
    """Which terms enter the objective and with what weights."""
    euclidean: bool = False
    cosine_mode: str = "standard"
    mahalanobis: bool = True
    lambda1: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        if self.cosine_mode not in COSINE_MODES:
            raise ValueError(f"cosine_mode must be one of {COSINE_MODES}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")


def supervised_cosmos_loss(x, xhat, M, yp, yl, terms: LossTerms,
                           reg: float = 0.0) -> tuple[LossBreakdown, LossGrads]:
    """Assemble the combined objective.

    total = euclidean - cosine + mahalanobis - lambda1 * MI + lambda2 * reg

    Disabled terms contribute zero; ``reg`` is the already-evaluated
    regularizer value (its gradient lives with the parameters it penalizes).
    """
    x, xhat = _pair(x, xhat)
    out = LossBreakdown(lambda1=terms.lambda1, lambda2=terms.lambda2, regularizer=float(reg))
    g_xhat = np.zeros_like(xhat)
    g_M = None
    g_probs = None
    if terms.euclidean:
        out.euclidean, g = euclidean_loss(x, xhat)
        g_xhat += g
    if terms.cosine_mode != "off":
        out.cosine, g = cosine_loss(x, xhat, terms.cosine_mode, strict=False)
        g_xhat -= g
    if terms.mahalanobis:
        if M is None:
            raise ShapeError("mahalanobis term enabled but no metric given")
        out.mahalanobis, g, g_M = mahalanobis_loss(x, xhat, M)
        g_xhat += g
    if yp is not None and yl is not None:
        out.mutual_info, g = mutual_information(yp, yl)
        g_probs = -terms.lambda1 * g
    out.total = out.recompute_total()
    return out, LossGrads(g_xhat, g_M, g_probs)
