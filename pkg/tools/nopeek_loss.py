"""
NoPeek objective: alpha1 * DCOR(X, Z) + alpha2 * CCE(Y_true, Y_hat).

The attribute variant swaps X for a protected attribute S and scores only the
remaining heads. A batch on which dcor is undefined (constant S, or a Z that
collapsed to one point) trains on the task loss alone.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from tools import numcore as nc
from tools.config import ALPHA1, ALPHA2
from tools.depmeasure import DegenerateVarianceError, dcor_node
from tools.model import cce, multi_head_cce

log = logging.getLogger("nopeek.loss")


class AttributeConfigError(ValueError):
    """Raised when the protected attribute is also trained as a head."""


@dataclass(frozen=True)
class NoPeekWeights:
    alpha1: float = ALPHA1  # distance-correlation weight; 0 is plain training
    alpha2: float = ALPHA2  # cross-entropy weight

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


def batch_leakage(source, Z: nc.Tensor) -> nc.Tensor | None:
    """dcor(source, Z) on the tape, or None when either side is constant on this batch."""
    try:
        return dcor_node(source, Z)
    except DegenerateVarianceError as e:
        log.debug("skipping dcor term on a %d-row batch: %s", Z.shape[0], e)
        return None


def _task_loss(logits, y_true) -> nc.Tensor:
    if isinstance(logits, Mapping):
        return multi_head_cce(logits, y_true)
    return cce(logits, y_true)


def _with_leakage(loss: nc.Tensor, source, Z: nc.Tensor, alpha1: float) -> nc.Tensor:
    if alpha1 > 0:
        leak = batch_leakage(source, Z)
        if leak is not None:
            loss = leak * alpha1 + loss
    return loss


def nopeek_loss(
    X,
    Z: nc.Tensor,
    logits: nc.Tensor | Mapping[str, nc.Tensor],
    y_true: np.ndarray | Mapping[str, np.ndarray],
    w: NoPeekWeights,
) -> nc.Tensor:
    """Combined loss; with alpha1 = 0 the dcor term is not even evaluated."""
    return _with_leakage(_task_loss(logits, y_true) * w.alpha2, X, Z, w.alpha1)


def attribute_loss(
    S: np.ndarray,
    Z: nc.Tensor,
    logits: Mapping[str, nc.Tensor],
    y_true: Mapping[str, np.ndarray],
    w: NoPeekWeights,
    protected: str | None = None,
) -> nc.Tensor:
    """alpha1 * DCOR(S, Z) + alpha2 * sum of CCE over the kept heads."""
    if protected is not None and (protected in logits or protected in y_true):
        raise AttributeConfigError(f"protected attribute {protected!r} is also a head")
    S = nc.as_matrix(S, name="S")
    if S.shape[0] != Z.shape[0]:
        raise nc.DimensionError(f"S has {S.shape[0]} rows, Z has {Z.shape[0]}")
    return _with_leakage(multi_head_cce(logits, y_true) * w.alpha2, S, Z, w.alpha1)
