from enum import StrEnum

import numpy as np

from grad_core import ops
from grad_core.exceptions import LabelOutOfRange, ShapeError
from grad_core.tape import Var


def _as_rows(logits: Var) -> Var:
    if logits.ndim == 1:
        return ops.reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 1-D or 2-D, got {logits.shape}")
    return logits


def _labels_for(rows: Var, labels) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.shape[0] != rows.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {rows.shape[0]} rows of logits")
    classes = rows.shape[1]
    if np.any(labels < 0) or np.any(labels >= classes):
        raise LabelOutOfRange(f"labels must lie in [0, {classes}), got {labels.tolist()}")
    return labels


def _reduce(per_row: Var, reduction: str) -> Var:
    if reduction == "mean":
        return ops.mean(per_row)
    if reduction == "sum":
        return ops.sum(per_row)
    if reduction == "none":
        return per_row
    raise ValueError(f"unknown reduction {reduction!r}")


def log_softmax(logits: Var) -> Var:
    return logits - ops.logsumexp(logits, axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Var, labels, reduction: str = "mean") -> Var:
    """``-log softmax(logits)[label]`` per row, with max-subtraction stabilization."""
    rows = _as_rows(logits)
    labels = _labels_for(rows, labels)
    per_row = -ops.pick(log_softmax(rows), labels)
    return _reduce(per_row, reduction)


def kl_divergence(p_logits: Var, q_logits, reduction: str = "mean") -> Var:
    """``KL(softmax(p) || softmax(q))`` per row."""
    q_shape = q_logits.shape if isinstance(q_logits, Var) else np.shape(q_logits)
    if tuple(p_logits.shape) != tuple(q_shape):
        raise ShapeError(f"kl_divergence: {p_logits.shape} vs {q_shape}")
    p_rows = _as_rows(p_logits)
    if isinstance(q_logits, Var):
        q_rows = _as_rows(q_logits)
    else:
        q_rows = p_rows.tape.constant(np.asarray(q_logits).reshape(p_rows.shape))
    log_p = log_softmax(p_rows)
    log_q = log_softmax(q_rows)
    per_row = ops.sum(ops.exp(log_p) * (log_p - log_q), axis=-1)
    return _reduce(per_row, reduction)


def cw_margin(logits: Var, labels, reduction: str = "mean") -> Var:
    """Untargeted margin ``max_{j != y} z_j - z_y``; positive means misclassified."""
    rows = _as_rows(logits)
    labels = _labels_for(rows, labels)
    others = np.ones(rows.shape, dtype=bool)
    others[np.arange(rows.shape[0]), labels] = False
    per_row = ops.max_where(rows, others, axis=-1) - ops.pick(rows, labels)
    return _reduce(per_row, reduction)


class LossKind(StrEnum):
    CROSS_ENTROPY = "cross_entropy"
    CW_MARGIN = "cw_margin"
    KL_TO_NATURAL = "kl_to_natural"


def per_example_loss(kind: LossKind | str, logits: Var, labels, natural_logits=None) -> Var:
    """Per-row attack loss; ``kl_to_natural`` needs the unperturbed logits."""
    kind = LossKind(kind)
    if kind is LossKind.CROSS_ENTROPY:
        return softmax_cross_entropy(logits, labels, reduction="none")
    if kind is LossKind.CW_MARGIN:
        return cw_margin(logits, labels, reduction="none")
    if natural_logits is None:
        raise ValueError("kl_to_natural needs the natural logits")
    return kl_divergence(logits, natural_logits, reduction="none")
