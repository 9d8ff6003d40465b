"""
Sample distance covariance / correlation.

dcor(X, Z) = dCov / sqrt(dVarX * dVarZ) with
    dCov  = sqrt(sum(A * B) / n^2)
    dVarX = sqrt(sum(A * A) / n^2)
    dVarZ = sqrt(sum(B * B) / n^2)
where A, B are the double-centered pairwise-distance matrices of X and Z.
Squared distances are floored at eps before the square root, so a
zero-distance pair contributes sqrt(eps) rather than 0.

`dcor_node` builds the same computation on the autodiff tape; `dcor` is its
value. `dcor_grad_analytic` is an independent closed form for
d(dcor^2)/dZ, used as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tools import numcore as nc
from tools.config import DCOR_EPS, DEGENERATE_VARIANCE


class SampleSizeError(ValueError):
    """Raised when fewer than two samples are given."""


class DegenerateVarianceError(ValueError):
    """Raised when one of the samples is (numerically) constant."""

    def __init__(self, message: str, variance_product: float):
        super().__init__(message)
        self.variance_product = variance_product


@dataclass(frozen=True)
class CenteredDistanceMatrix:
    """Double-centered distance matrix; rows and columns sum to ~0."""

    n: int
    A: np.ndarray


def _check_rows(X: np.ndarray, what: str) -> None:
    if X.shape[0] < 2:
        raise SampleSizeError(f"{what}: need at least 2 samples, got {X.shape[0]}")


def pairwise_dist(X, eps: float = DCOR_EPS) -> np.ndarray:
    """n x n Euclidean distances with the squared distance clamped at eps."""
    X = nc.as_matrix(X, name="X")
    _check_rows(X, "pairwise_dist")
    return nc.pairwise_dist(X, eps).value


def double_center(D) -> CenteredDistanceMatrix:
    D = nc.as_matrix(D, name="D")
    return CenteredDistanceMatrix(n=D.shape[0], A=nc.double_center(D).value)


def _value(x: nc.Tensor | np.ndarray) -> np.ndarray:
    return x.value if isinstance(x, nc.Tensor) else nc.as_matrix(x)


def dcor_node(X: nc.Operand, Z: nc.Operand, eps: float = DCOR_EPS) -> nc.Tensor:
    """Differentiable distance correlation (1x1 tensor)."""
    xv, zv = _value(X), _value(Z)
    _check_rows(xv, "dcor")
    if xv.shape[0] != zv.shape[0]:
        raise nc.DimensionError(
            f"dcor: X has {xv.shape[0]} rows, Z has {zv.shape[0]}", (xv.shape, zv.shape)
        )
    n2 = float(xv.shape[0]) ** 2
    A = nc.double_center(nc.pairwise_dist(X, eps))
    B = nc.double_center(nc.pairwise_dist(Z, eps))

    # inner sums can dip below zero at float precision; clamp before sqrt
    dcov = nc.sqrt(nc.sum(A * B) / n2)
    dvar_x = nc.sqrt(nc.sum(A * A) / n2)
    dvar_z = nc.sqrt(nc.sum(B * B) / n2)

    product = dvar_x.item() * dvar_z.item()
    if product < DEGENERATE_VARIANCE:
        raise DegenerateVarianceError(
            f"dcor: degenerate sample (dVarX*dVarZ={product:.3e})", product
        )
    return dcov / nc.sqrt(dvar_x * dvar_z)


def dcor(X, Z, eps: float = DCOR_EPS) -> float:
    return dcor_node(nc.as_matrix(X), nc.as_matrix(Z), eps).item()


def dcor_grad_analytic(X, Z, eps: float = DCOR_EPS) -> np.ndarray:
    """
    d(dcor^2)/dZ in Laplacian form.

    With c = sum(A*B), u = sum(A*A), v = sum(B*B) we have dcor^2 = c / sqrt(u v).
    Differentiating through the raw distances b_ij of Z:

        G = A / sqrt(u v) - c B / (sqrt(u) v^1.5)
        W_ij = G_ij / b_ij   (0 where the eps clamp is active)
        grad = 2 (diag(W 1) - W) Z
    """
    X, Z = nc.as_matrix(X), nc.as_matrix(Z)
    _check_rows(X, "dcor_grad_analytic")
    A = double_center(pairwise_dist(X, eps)).A

    r = np.sum(Z * Z, axis=1, keepdims=True)
    sq = r - 2.0 * (Z @ Z.T) + r.T
    np.fill_diagonal(sq, 0.0)
    active = sq > eps
    b = np.sqrt(np.maximum(sq, eps))
    B = double_center(b).A

    u, v, c = float(np.sum(A * A)), float(np.sum(B * B)), float(np.sum(A * B))
    product = np.sqrt(max(u, 0.0)) * np.sqrt(max(v, 0.0)) / float(X.shape[0]) ** 2
    if product < DEGENERATE_VARIANCE:
        raise DegenerateVarianceError(
            f"dcor_grad_analytic: degenerate sample (dVarX*dVarZ={product:.3e})", product
        )
    if c <= 0.0:
        return np.zeros_like(Z)

    G = A / np.sqrt(u * v) - c * B / (np.sqrt(u) * v**1.5)
    W = np.where(active, G / b, 0.0)
    return 2.0 * (W.sum(axis=1, keepdims=True) * Z - W @ Z)
