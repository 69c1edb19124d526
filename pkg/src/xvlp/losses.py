"""Alignment objectives: image-text InfoNCE, view-invariance InfoNCE, and the
negative-free decorrelation pair (feature-wise and sample-wise) that pulls the
two text views together.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import Tensor

log = logging.getLogger(__name__)

TEMP_DEFAULT = 0.07       # shared temperature for both InfoNCE losses
LAMBDA_DEFAULT = 5.1e-3   # off-diagonal weight in the decorrelation losses
EPS_NUM = 1e-8            # floor that guards zero-variance columns/rows

IGNORE_LABEL = -1


def _check_unit_rows(x: Tensor, name: str) -> None:
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"{name} rows must be unit-norm (worst deviation {worst:.3g})")


def _diag_log_softmax_sum(logits: Tensor, axis: int) -> Tensor:
    """Sum over i of log softmax(logits, axis)[i, i]."""
    k = logits.shape[0]
    eye = Tensor(np.eye(k))
    lp = nm.log(nm.softmax(logits, axis=axis))
    return nm.sum_(nm.mul(lp, eye))


def cvl_loss(v_hat: Tensor, l_hat: Tensor, sigma: float = TEMP_DEFAULT) -> Tensor:
    """Symmetric image<->text InfoNCE over in-batch pairs, averaged over 2K terms.

    Both inputs are K x d with unit-norm rows; row i of each matrix belongs to
    the same underlying pair.
    """
    if v_hat.shape != l_hat.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {l_hat.shape}")
    _check_unit_rows(v_hat, "v_hat")
    _check_unit_rows(l_hat, "l_hat")
    k = v_hat.shape[0]
    logits = nm.scale(nm.matmul(v_hat, nm.transpose(l_hat)), 1.0 / sigma)
    v2l = _diag_log_softmax_sum(logits, axis=1)
    l2v = _diag_log_softmax_sum(logits, axis=0)
    return nm.scale(nm.add(v2l, l2v), -1.0 / (2.0 * k))


def ssv_loss(v_hat: Tensor, v_hat_prime: Tensor, sigma: float = TEMP_DEFAULT) -> Tensor:
    """One-direction InfoNCE between two augmented-view image embeddings."""
    if v_hat.shape != v_hat_prime.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {v_hat_prime.shape}")
    _check_unit_rows(v_hat, "v_hat")
    _check_unit_rows(v_hat_prime, "v_hat_prime")
    k = v_hat.shape[0]
    logits = nm.scale(nm.matmul(v_hat, nm.transpose(v_hat_prime)), 1.0 / sigma)
    return nm.scale(_diag_log_softmax_sum(logits, axis=1), -1.0 / k)


def batch_normalize(z: Tensor) -> Tensor:
    """Per-column: subtract the batch mean, divide by sqrt(K) * population std.

    The epsilon acts as a floor on the std, so constant columns map to zeros
    and well-scaled columns come out with exactly unit L2 norm.
    """
    k = z.shape[0]
    if k < 2:
        raise ValueError(f"batch_normalize needs K >= 2 rows, got {k}")
    mu = nm.mean(z, axis=0, keepdims=True)
    sd = nm.sqrt(nm.variance(z, axis=0, keepdims=True))
    denom = nm.scale(nm.maximum_scalar(sd, EPS_NUM), math.sqrt(k))
    return nm.div(nm.sub(z, mu), denom)


def feature_normalize(z: Tensor) -> Tensor:
    """Per-row analog of batch_normalize: center and scale along the feature axis."""
    d = z.shape[1]
    mu = nm.mean(z, axis=1, keepdims=True)
    sd = nm.sqrt(nm.variance(z, axis=1, keepdims=True))
    denom = nm.scale(nm.maximum_scalar(sd, EPS_NUM), math.sqrt(d))
    return nm.div(nm.sub(z, mu), denom)


def _decorrelation(c: Tensor, lam: float) -> Tensor:
    """(1/n) [sum_j (1 - C_jj)^2 + lam * sum_{i != j} C_ij^2] for square C."""
    n = c.shape[0]
    eye = Tensor(np.eye(n))
    off = Tensor(1.0 - np.eye(n))
    d = nm.sub(eye, nm.mul(c, eye))
    diag_term = nm.sum_(nm.mul(d, d))
    o = nm.mul(c, off)
    off_term = nm.sum_(nm.mul(o, o))
    return nm.scale(nm.add(diag_term, nm.scale(off_term, lam)), 1.0 / n)


def ctr_tf_loss(z_a: Tensor, z_b: Tensor, lam: float = LAMBDA_DEFAULT) -> Tensor:
    """Feature-dimension decorrelation between the two text views.

    Cross-view correlation C = normalize(Z_A)^T normalize(Z_B) is D' x D';
    diagonal drawn to 1, off-diagonal to 0.
    """
    if z_a.shape != z_b.shape:
        raise ValueError(f"shape mismatch {z_a.shape} vs {z_b.shape}")
    c = nm.matmul(nm.transpose(batch_normalize(z_a)), batch_normalize(z_b))
    return _decorrelation(c, lam)


def ctr_tt_loss(z_a: Tensor, z_b: Tensor, lam: float = LAMBDA_DEFAULT) -> Tensor:
    """Sample-dimension twin of ctr_tf_loss: C = normalize(Z_A) normalize(Z_B)^T, K x K."""
    if z_a.shape != z_b.shape:
        raise ValueError(f"shape mismatch {z_a.shape} vs {z_b.shape}")
    if z_a.shape[0] < 2:
        raise ValueError(f"ctr_tt_loss needs K >= 2 rows, got {z_a.shape[0]}")
    c = nm.matmul(feature_normalize(z_a), nm.transpose(feature_normalize(z_b)))
    return _decorrelation(c, lam)


def ctr_loss(z_a: Tensor, z_b: Tensor, lam: float = LAMBDA_DEFAULT) -> Tensor:
    return nm.add(ctr_tf_loss(z_a, z_b, lam), ctr_tt_loss(z_a, z_b, lam))


def mlm_loss(logits: Tensor, labels: np.ndarray, candidate_mask: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy over labeled positions (label IGNORE_LABEL elsewhere).

    candidate_mask, when given, restricts the softmax to a boolean subset of
    the vocabulary; tokens outside it get exactly zero probability and zero
    gradient. Labels must lie inside the candidate set.
    """
    labels = np.asarray(labels)
    vocab = logits.shape[-1]
    flat_logits = nm.reshape(logits, (-1, vocab)) if logits.ndim == 3 else logits
    flat_labels = labels.reshape(-1)
    labeled = flat_labels != IGNORE_LABEL
    n_labeled = int(labeled.sum())
    if n_labeled == 0:
        log.warning("mlm_loss: no labeled positions in batch; returning 0")
        return Tensor(np.zeros(()))

    if candidate_mask is not None:
        candidate_mask = np.asarray(candidate_mask, dtype=bool)
        if not candidate_mask[flat_labels[labeled]].all():
            raise ValueError("mlm labels fall outside the candidate mask")
        bias = np.where(candidate_mask, 0.0, -1e9)
        flat_logits = nm.add(flat_logits, Tensor(bias))

    onehot = np.zeros((flat_labels.size, vocab))
    onehot[np.arange(flat_labels.size)[labeled], flat_labels[labeled]] = 1.0
    weights = labeled.astype(np.float64).reshape(-1, 1)

    shift = Tensor(flat_logits.data.max(axis=1, keepdims=True))
    lse = nm.add(nm.log(nm.sum_(nm.exp(nm.sub(flat_logits, shift)), axis=1, keepdims=True)), shift)
    picked = nm.sum_(nm.mul(flat_logits, Tensor(onehot)), axis=1, keepdims=True)
    per_row = nm.mul(nm.sub(lse, picked), Tensor(weights))
    return nm.scale(nm.sum_(per_row), 1.0 / n_labeled)


@dataclass
class LossBreakdown:
    """Per-step scalar view of every component; serialized flat into metrics."""
    cvl: float = 0.0
    ssv: float = 0.0
    tf: float = 0.0
    tt: float = 0.0
    ctr: float = 0.0
    mlm: float = 0.0
    total: float = 0.0


def total_loss(parts: dict[str, Tensor], enabled: dict[str, bool] | None = None) -> tuple[Tensor, LossBreakdown]:
    """Unit-weight sum of the enabled components.

    parts maps component name (cvl, ssv, tf, tt, mlm) to its scalar Tensor;
    absent or disabled components contribute nothing and report 0.
    """
    enabled = enabled or {}

    def on(name: str) -> bool:
        return name in parts and enabled.get(name, True)

    bd = LossBreakdown()
    terms: list[Tensor] = []
    for name in ("cvl", "ssv", "mlm"):
        if on(name):
            terms.append(parts[name])
            setattr(bd, name, float(parts[name].data))
    ctr_on = enabled.get("ctr", True)
    for name in ("tf", "tt"):
        if ctr_on and on(name):
            terms.append(parts[name])
            setattr(bd, name, float(parts[name].data))
    bd.ctr = bd.tf + bd.tt

    if not terms:
        raise ValueError("total_loss: every component is disabled or absent")
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    bd.total = float(total.data)
    return total, bd
