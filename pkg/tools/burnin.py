"""
Device-level decorrelation ("burn-in"). Runs on the client before any frame
is sent.

Maximizes the difference of two Laplacian-form dependence surrogates

    f(Z) = Tr(Z'L_Y Z) / sqrt(Tr(Y'L_Y Y) Tr(Z'L_Z Z))
         - Tr(Z'L_X Z) / sqrt(Tr(X'L_X X) Tr(Z'L_Z Z))

with L_A = -J D2_A J (J the centering projection, D2_A the squared Euclidean
distance matrix of A's rows). With that construction f is invariant to
rotating, translating and rescaling Z, and f(Y) has a first term of exactly 1.

Two update modes: safeguarded gradient ascent, and a majorization-style
Z <- H Z step that falls back to ascent whenever it would lower f.
This module must not depend on the wire or transport modules.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from tools import numcore as nc
from tools.audit import digest, log_event
from tools.config import (
    BURNIN_ALPHA,
    BURNIN_BETA,
    BURNIN_GAMMA2,
    BURNIN_ITERS,
    BURNIN_MAX_REJECTIONS,
    BURNIN_PREFIT_STEPS,
    DEGENERATE_VARIANCE,
)
from tools.depmeasure import dcor, double_center
from tools.model import AdamState, SplitModel, adam_step, forward_client

log = logging.getLogger("nopeek.burnin")

MONOTONE_SLACK = 1e-12


class DegenerateDataError(ValueError):
    """Raised when a trace normalizer is not strictly positive."""


class LinearAlgebraError(RuntimeError):
    """Raised when the MM operator cannot be formed."""


@dataclass(frozen=True)
class LaplacianSurrogate:
    L_X: np.ndarray
    L_Y: np.ndarray
    k_X: float
    k_Y: float
    digest_X: str
    digest_Y: str

    @property
    def n(self) -> int:
        return self.L_X.shape[0]


@dataclass(frozen=True)
class BurninState:
    Z: np.ndarray
    iteration: int = 0
    f_history: tuple[float, ...] = ()
    step: float = BURNIN_ALPHA
    beta: float = BURNIN_BETA
    gamma2: float = BURNIN_GAMMA2
    stalled: bool = False
    fallbacks: int = 0

    @property
    def f(self) -> float:
        return self.f_history[-1]


def sq_dist(A: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - A[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def laplacian(A: np.ndarray) -> np.ndarray:
    """-J D2 J; equals 2 J A A' J and is positive semi-definite."""
    return -double_center(sq_dist(A)).A


def trace_form(Z: np.ndarray, L: np.ndarray) -> float:
    """Tr(Z' L Z)."""
    return float(np.sum(Z * (L @ Z)))


def build_laplacians(X, Y) -> LaplacianSurrogate:
    X, Y = nc.as_matrix(X, name="X"), nc.as_matrix(Y, name="Y")
    if X.shape[0] < 3:
        raise DegenerateDataError(f"burn-in needs n >= 3, got {X.shape[0]}")
    if X.shape[0] != Y.shape[0]:
        raise nc.DimensionError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    L_X, L_Y = laplacian(X), laplacian(Y)
    t_x, t_y = trace_form(X, L_X), trace_form(Y, L_Y)
    if t_x <= DEGENERATE_VARIANCE or t_y <= DEGENERATE_VARIANCE:
        raise DegenerateDataError(f"non-positive trace normalizer (X: {t_x:.3e}, Y: {t_y:.3e})")
    return LaplacianSurrogate(
        L_X=L_X, L_Y=L_Y,
        k_X=1.0 / np.sqrt(t_x), k_Y=1.0 / np.sqrt(t_y),
        digest_X=digest(X), digest_Y=digest(Y),
    )


def _z_trace(Z: np.ndarray) -> float:
    t_z = trace_form(Z, laplacian(Z))
    if t_z <= DEGENERATE_VARIANCE:
        raise DegenerateDataError(f"Tr(Z'L_Z Z) = {t_z:.3e}; representation collapsed")
    return t_z


def f_terms(Z, lap: LaplacianSurrogate) -> tuple[float, float]:
    """(label term, data term); f is their difference."""
    Z = nc.as_matrix(Z, name="Z")
    if Z.shape[0] != lap.n:
        raise nc.DimensionError(f"Z has {Z.shape[0]} rows, surrogate was built for {lap.n}")
    root_z = np.sqrt(_z_trace(Z))
    return (
        lap.k_Y * trace_form(Z, lap.L_Y) / root_z,
        lap.k_X * trace_form(Z, lap.L_X) / root_z,
    )


def f_objective(Z, lap: LaplacianSurrogate) -> float:
    label_term, data_term = f_terms(Z, lap)
    return label_term - data_term


def f_gradient(Z: np.ndarray, lap: LaplacianSurrogate) -> np.ndarray:
    """Exact df/dZ, using L_Z = 2 J Z Z' J so that Tr(Z'L_Z Z) = 2 ||Zc'Zc||^2."""
    Zc = Z - Z.mean(axis=0, keepdims=True)
    gram = Zc.T @ Zc
    t_z = 2.0 * float(np.sum(gram * gram))
    if t_z <= DEGENERATE_VARIANCE:
        raise DegenerateDataError(f"Tr(Z'L_Z Z) = {t_z:.3e}; representation collapsed")
    LyZ, LxZ = lap.L_Y @ Z, lap.L_X @ Z
    numer = lap.k_Y * float(np.sum(Z * LyZ)) - lap.k_X * float(np.sum(Z * LxZ))
    d_numer = 2.0 * (lap.k_Y * LyZ - lap.k_X * LxZ)
    d_tz = 8.0 * Zc @ gram
    return d_numer / np.sqrt(t_z) - 0.5 * numer * t_z**-1.5 * d_tz


def init_state(Z0, lap: LaplacianSurrogate, *, step: float = BURNIN_ALPHA,
               beta: float = BURNIN_BETA, gamma2: float = BURNIN_GAMMA2) -> BurninState:
    Z0 = nc.as_matrix(Z0, name="Z0").copy()
    return BurninState(Z=Z0, f_history=(f_objective(Z0, lap),), step=step, beta=beta,
                       gamma2=gamma2)


def _rescaled(Z_new: np.ndarray, norm: float) -> np.ndarray:
    # f is scale-free; pinning the norm keeps Z bounded across iterations
    current = np.linalg.norm(Z_new)
    return Z_new if current == 0 else Z_new * (norm / current)


def _try_f(Z: np.ndarray, lap: LaplacianSurrogate) -> float:
    try:
        return f_objective(Z, lap)
    except DegenerateDataError:
        return -np.inf


def ascent_step(
    state: BurninState,
    lap: LaplacianSurrogate,
    *,
    max_rejections: int = BURNIN_MAX_REJECTIONS,
    initial_step: float = BURNIN_ALPHA,
) -> BurninState:
    """
    One backtracking gradient-ascent step on f.

    Accepts only if f(new) >= f(old) - 1e-12; each rejection halves the step.
    After `max_rejections` consecutive rejections the state is marked stalled
    and Z is left unchanged.
    """
    Z, f_old = state.Z, state.f
    g = f_gradient(Z, lap)
    g_norm, z_norm = np.linalg.norm(g), np.linalg.norm(Z)
    if g_norm < 1e-12 or z_norm == 0:
        return replace(state, iteration=state.iteration + 1,
                       f_history=state.f_history + (f_old,))
    direction = g * (z_norm / g_norm)
    step = state.step
    for _ in range(max_rejections):
        Z_new = _rescaled(Z + step * direction, z_norm)
        f_new = _try_f(Z_new, lap)
        if f_new >= f_old - MONOTONE_SLACK:
            return replace(state, Z=Z_new, iteration=state.iteration + 1,
                           f_history=state.f_history + (f_new,),
                           step=min(2.0 * step, initial_step))
        step *= 0.5
    log.info("ascent stalled at iteration %d (f=%.6f)", state.iteration, f_old)
    return replace(state, iteration=state.iteration + 1, f_history=state.f_history + (f_old,),
                   stalled=True)


def mm_operator(
    lap: LaplacianSurrogate,
    *,
    gamma2: float = BURNIN_GAMMA2,
    alpha: float = BURNIN_ALPHA,
    beta: float = BURNIN_BETA,
    include_lm: bool = True,
) -> np.ndarray:
    """
    H = (gamma2 D - alpha S)^+ (gamma2 D - L_M), S = k_Y L_Y - beta k_X L_X, L_M = -S.

    D is diag(row sums of |S|) + I, which keeps gamma2 D - alpha S diagonally
    dominant for alpha <= gamma2.
    """
    S = lap.k_Y * lap.L_Y - beta * lap.k_X * lap.L_X
    D = np.diag(np.abs(S).sum(axis=1) + 1.0)
    L_M = -S if include_lm else np.zeros_like(S)
    try:
        inverse = scipy.linalg.pinvh(gamma2 * D - alpha * S)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise LinearAlgebraError(f"pseudo-inverse failed: {e}") from e
    return inverse @ (gamma2 * D - L_M)


def mm_step(
    state: BurninState,
    lap: LaplacianSurrogate,
    *,
    H: np.ndarray | None = None,
    max_rejections: int = BURNIN_MAX_REJECTIONS,
) -> BurninState:
    """Z <- H Z; falls back to an ascent step if f would decrease."""
    if H is None:
        H = mm_operator(lap, gamma2=state.gamma2, beta=state.beta)
    z_norm = np.linalg.norm(state.Z)
    Z_new = _rescaled(H @ state.Z, z_norm)
    f_new = _try_f(Z_new, lap)
    if f_new >= state.f - MONOTONE_SLACK:
        return replace(state, Z=Z_new, iteration=state.iteration + 1,
                       f_history=state.f_history + (f_new,))
    fallback = ascent_step(state, lap, max_rejections=max_rejections)
    return replace(fallback, fallbacks=state.fallbacks + 1)


# ---------------------------------------------------------------------------
# Loop, trace, sweep
# ---------------------------------------------------------------------------


@dataclass
class BurninResult:
    state: BurninState
    trace: list[dict] = field(default_factory=list)

    @property
    def Z(self) -> np.ndarray:
        return self.state.Z


def _trace_row(iteration: int, f: float, X, Y, Z) -> dict:
    return {"iteration": iteration, "f": f, "dcor_xz": dcor(X, Z), "dcor_yz": dcor(Y, Z)}


def run_burnin(
    X,
    Y,
    Z0,
    *,
    iters: int = BURNIN_ITERS,
    mode: str = "ascent",
    beta: float = BURNIN_BETA,
    gamma2: float = BURNIN_GAMMA2,
    trace_every: int = 1,
    tol: float | None = None,
) -> BurninResult:
    """
    Run the safeguarded loop for `iters` iterations (or until stalled).

    If `tol` is given, stop once an iteration improves f by less than tol.
    """
    if mode not in ("ascent", "mm"):
        raise ValueError(f"unknown burn-in mode {mode!r}")
    X, Y = nc.as_matrix(X), nc.as_matrix(Y)
    lap = build_laplacians(X, Y)
    state = init_state(Z0, lap, beta=beta, gamma2=gamma2)
    H = mm_operator(lap, gamma2=gamma2, beta=beta) if mode == "mm" else None
    trace = [_trace_row(0, state.f, X, Y, state.Z)]
    for _ in range(iters):
        prev = state.f
        state = mm_step(state, lap, H=H) if mode == "mm" else ascent_step(state, lap)
        if state.iteration % trace_every == 0:
            trace.append(_trace_row(state.iteration, state.f, X, Y, state.Z))
        if state.stalled or (tol is not None and state.f - prev < tol):
            break
    log_event("burnin_done", mode=mode, iterations=state.iteration, f=round(state.f, 6),
              stalled=state.stalled, fallbacks=state.fallbacks, data_digest=lap.digest_X)
    return BurninResult(state=state, trace=trace)


def sweep_beta(X, Y, Z0, betas, *, iters: int = BURNIN_ITERS, mode: str = "mm",
               tol: float = 1e-6) -> dict[float, int]:
    """Iterations until f improves by less than tol, per beta. Report only."""
    counts = {}
    for beta in betas:
        result = run_burnin(X, Y, Z0, iters=iters, mode=mode, beta=beta, trace_every=iters + 1,
                            tol=tol)
        counts[float(beta)] = result.state.iteration
        log.info("beta=%.3g converged after %d iterations", beta, result.state.iteration)
    return counts


TRACE_COLUMNS = ("iteration", "f", "dcor_xz", "dcor_yz")


def write_trace_csv(trace: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in TRACE_COLUMNS[1:]])
    return path


# ---------------------------------------------------------------------------
# Absorbing Z into the client layers
# ---------------------------------------------------------------------------


def prefit_client(
    model: SplitModel,
    X,
    Z_target,
    *,
    steps: int = BURNIN_PREFIT_STEPS,
    lr: float = 1e-3,
) -> list[float]:
    """
    L2-regress the client layers onto Z_target. Returns the loss per step.

    The target is shifted column-wise to be non-negative first: f and dcor
    ignore translations, and the client stack ends in a relu.
    """
    X = nc.as_matrix(X)
    target = nc.as_matrix(Z_target)
    target = target - np.minimum(target.min(axis=0, keepdims=True), 0.0)
    state = AdamState(model.client_parameters(), lr=lr, decay=1.0)
    losses = []
    for _ in range(steps):
        Z = forward_client(model, X)
        loss = nc.mean(nc.sum_squares(Z - target, axis=1))
        nc.backward(loss)
        adam_step(state)
        losses.append(loss.item())
    log.info("prefit: L2 %.4f -> %.4f over %d steps", losses[0], losses[-1], steps)
    return losses
