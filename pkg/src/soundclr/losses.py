"""Cross-entropy, supervised contrastive and hybrid losses with input gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import log_softmax, softmax

UNIT_TOL = 1e-6
LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: float = 0.5
    self_in_numerator: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature tau must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    per_sample: np.ndarray | None = None


@dataclass
class HybridValue:
    value: float
    grad_logits: np.ndarray
    grad_z: np.ndarray
    cross_entropy: float
    sup_contrastive: float


def _check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or (num_classes is not None and labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> LossValue:
    """Mean of -log softmax(logits)[label]; gradient (softmax - onehot) / N."""
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = log_softmax(logits)
    per_sample = -logp[np.arange(n), labels]
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return LossValue(float(per_sample.mean()), grad, per_sample)


def _logsumexp_masked(s: np.ndarray, mask: np.ndarray):
    """Row-wise log-sum-exp over masked entries, plus the masked softmax weights."""
    masked = np.where(mask, s, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    total = e.sum(axis=1, keepdims=True)
    return (m + np.log(total))[:, 0], e / total


def _log_ratio(s, lse_pos, lse_all, neg, self_in: bool) -> np.ndarray:
    """log(sum over denominator / sum over positives) per anchor.

    The denominator sum is the positive sum plus the negatives, minus the
    anchor's own term when it sits in the numerator. While that ratio lies
    in [1/2, 2] it is evaluated as log1p(exp(lse_neg - lse_pos) - self_term),
    which keeps full relative precision as the loss approaches zero; outside
    it the plain difference of log-sum-exps is already well conditioned.
    """
    has_neg = neg.any(axis=1)
    lse_neg = np.full(len(s), -np.inf)
    if has_neg.any():
        lse_neg[has_neg], _ = _logsumexp_masked(s[has_neg], neg[has_neg])
    d = lse_neg - lse_pos
    self_term = np.exp(np.diag(s) - lse_pos) if self_in else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        near = np.log1p(np.exp(np.minimum(d, 0.0)) - self_term)
    use_near = (d <= 0.0) & (near >= -LN2)
    return np.where(use_near, near, lse_all - lse_pos)


def sup_contrastive_unchecked(z: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> LossValue:
    """Supervised contrastive loss without the unit-norm precondition.

    For anchor i with positive set P(i) and denominator set A(i) = {k != i}:
    L_i = -(1/|P(i)|) * [lse_{P(i)} s_i - lse_{A(i)} s_i], s_ij = z_i . z_j / tau.
    """
    n = z.shape[0]
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos = same if cfg.self_in_numerator else same & not_self
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        lonely = sorted(set(labels[n_pos == 0].tolist()))
        raise ValueError(f"class(es) {lonely} have a single member in the batch; no positives")
    if n < 2:
        raise ValueError("contrastive loss needs at least two samples")

    s = (z @ z.T) / cfg.tau
    lse_pos, w_pos = _logsumexp_masked(s, pos)
    lse_all, w_all = _logsumexp_masked(s, not_self)
    per_anchor = _log_ratio(s, lse_pos, lse_all, ~same, cfg.self_in_numerator) / n_pos

    # dL/ds_ij, averaged over anchors
    G = -(w_pos - w_all) / (n_pos[:, None] * n)
    grad = (G + G.T) @ z / cfg.tau
    return LossValue(float(per_anchor.mean()), grad, per_anchor)


def sup_contrastive(z: np.ndarray, labels, cfg: LossConfig = LossConfig()) -> LossValue:
    n = z.shape[0]
    labels = _check_labels(labels, n)
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("sup_contrastive expects unit-norm rows")
    return sup_contrastive_unchecked(z, labels, cfg)


def hybrid(logits: np.ndarray, z: np.ndarray, labels, cfg: LossConfig = LossConfig()) -> HybridValue:
    """alpha * SupCon + (1 - alpha) * CE, with gradients to both heads."""
    ce = cross_entropy(logits, labels)
    sc = sup_contrastive(z, labels, cfg)
    a = cfg.alpha
    return HybridValue(
        value=a * sc.value + (1.0 - a) * ce.value,
        grad_logits=(1.0 - a) * ce.grad,
        grad_z=a * sc.grad,
        cross_entropy=ce.value,
        sup_contrastive=sc.value,
    )
