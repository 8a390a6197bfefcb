"""Cross-entropy, supervised contrastive loss and their convex mix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCL_FORMS = ("as_typeset", "log_inside")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    tau: float = 0.07
    include_self_in_positives: bool = False
    embedding_norm: bool = True
    scl_form: str = "as_typeset"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise LossError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.tau > 0:
            raise LossError(f"tau must be positive, got {self.tau}")
        if self.scl_form not in SCL_FORMS:
            raise LossError(f"scl_form must be one of {SCL_FORMS}, got {self.scl_form!r}")


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise LossError(f"{y.shape[0]} labels for a batch of {n}")
    return y


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Batch mean of -log softmax(logits)[y], stabilized by subtracting the row max."""
    logits = T.as_tensor(logits)
    B, K = logits.shape
    y = _labels(y, B)
    if y.min() < 0 or y.max() >= K:
        raise LossError(f"label out of range [0, {K}): {y.tolist()}")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = T.log(T.exp(shifted).sum(axis=1))
    onehot = np.zeros((B, K))
    onehot[np.arange(B), y] = 1.0
    picked = (shifted * onehot).sum(axis=1)
    return (lse - picked).mean()


def l2_normalize(z: Tensor, eps: float = 1e-12) -> Tensor:
    norm = T.sqrt((z * z).sum(axis=1, keepdims=True))
    return z / (norm + eps)


def positive_mask(y: np.ndarray, include_self: bool) -> np.ndarray:
    same = (y[:, None] == y[None, :]).astype(float)
    if not include_self:
        np.fill_diagonal(same, 0.0)
    return same


def _masked_logsumexp(s: Tensor, mask: np.ndarray) -> Tensor:
    # row max over the masked entries only; rows are guaranteed nonempty by callers
    m = np.where(mask > 0, s.data, -np.inf).max(axis=1, keepdims=True)
    return T.log((T.exp(s - m) * mask).sum(axis=1)) + m[:, 0]


def scl_per_sample(z, y, tau: float = 0.07, include_self: bool = False, embedding_norm: bool = True,
                   form: str = "as_typeset", skip_missing: bool = False) -> tuple[Tensor, np.ndarray]:
    """Per-sample supervised contrastive losses and the mask of samples that were scored.

    ``as_typeset``:  L_i = -(1/N_i) * log( sum_{j in P(i)} e^{s_ij} / sum_{k != i} e^{s_ik} )
    ``log_inside``:  L_i = -(1/N_i) * sum_{j in P(i)} log( e^{s_ij} / sum_{k != i} e^{s_ik} )

    with s_ij = z_i . z_j / tau, P(i) the same-label set (self per ``include_self``)
    and N_i = |P(i)|.
    """
    if form not in SCL_FORMS:
        raise LossError(f"scl form must be one of {SCL_FORMS}, got {form!r}")
    z = T.as_tensor(z)
    B = z.shape[0]
    if B < 2:
        raise LossError(f"supervised contrastive loss needs a batch of at least 2, got {B}")
    y = _labels(y, B)
    pos = positive_mask(y, include_self)
    n_pos = pos.sum(axis=1)
    keep = n_pos > 0
    if not keep.all():
        missing = np.flatnonzero(~keep).tolist()
        if not skip_missing:
            raise LossError(f"samples {missing} have no positive pair; loss undefined")
    if embedding_norm:
        z = l2_normalize(z)
    s = (z @ z.T) * (1.0 / tau)
    others = 1.0 - np.eye(B)
    log_den = _masked_logsumexp(s, others)
    n_safe = np.where(keep, n_pos, 1.0)
    if form == "as_typeset":
        pos_rows = np.where(keep[:, None], pos, others)
        log_num = _masked_logsumexp(s, pos_rows)
        per = (log_num - log_den) * (-1.0 / n_safe)
    else:
        per = ((s * pos).sum(axis=1) - log_den * n_pos) * (-1.0 / n_safe)
    return per, keep


def scl(z, y, tau: float = 0.07, cfg: LossConfig | None = None, skip_missing: bool = False) -> Tensor:
    """Batch-mean supervised contrastive loss over the scored samples."""
    cfg = cfg or LossConfig(tau=tau)
    per, keep = scl_per_sample(z, y, tau, cfg.include_self_in_positives, cfg.embedding_norm,
                               cfg.scl_form, skip_missing)
    if keep.all():
        return per.mean()
    if not keep.any():
        raise LossError("no sample in the batch has a positive pair")
    return (per * keep.astype(float)).sum() * (1.0 / keep.sum())


def hybrid(ce, scl_value, lam: float) -> Tensor:
    """lam * ce + (1 - lam) * scl."""
    if not 0.0 <= lam <= 1.0:
        raise LossError(f"lambda must lie in [0, 1], got {lam}")
    return T.as_tensor(ce) * lam + T.as_tensor(scl_value) * (1.0 - lam)


def hybrid_loss(logits: Tensor, features: Tensor, y, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Training objective; a term whose weight is zero is not evaluated."""
    parts = {}
    ce = scl_value = None
    if cfg.lam > 0:
        ce = cross_entropy(logits, y)
        parts["ce"] = ce.item()
    if cfg.lam < 1 and features.shape[0] >= 2:
        scl_value = scl(features, y, cfg.tau, cfg, skip_missing=True) if _any_pair(y) else None
        if scl_value is not None:
            parts["scl"] = scl_value.item()
    if ce is None and scl_value is None:
        raise LossError("batch admits neither loss term (lambda=0 and no positive pairs)")
    if ce is None:
        return scl_value, parts
    if scl_value is None:
        # no positive pair in this batch: the contrastive term contributes nothing
        return ce if cfg.lam == 1.0 else ce * cfg.lam, parts
    return hybrid(ce, scl_value, cfg.lam), parts


def _any_pair(y) -> bool:
    _, counts = np.unique(np.asarray(y), return_counts=True)
    return bool((counts > 1).any())
