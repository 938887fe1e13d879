"""Entropic mirror descent on the product of simplices.

The update is the closed-form KL-proximal step

    h_i <- h_i * exp(-alpha * grad_i) / <h_i, exp(-alpha * grad_i)>

applied to the gradient of the entropy-regularized potential.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError
from .routing_game import LowerProblem
from .simplex import BlockLayout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LowerSolveConfig:
    alpha: float
    iters: int
    tol: float | None = None

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")


@dataclass
class LowerResult:
    h_final: np.ndarray
    iterations: int = 0
    eps_h: list[float] = field(default_factory=list)
    min_entry: list[float] = field(default_factory=list)
    converged: bool = False


def kl_divergence(h, h_ref) -> float:
    """Generalized KL divergence ``sum h ln(h/h_ref) - h + h_ref`` with ``0 ln 0 = 0``."""
    h = np.asarray(h, dtype=float)
    h_ref = np.asarray(h_ref, dtype=float)
    if np.any(h_ref <= 0):
        raise DomainError("reference distribution must be strictly positive")
    if np.any(h < 0):
        raise DomainError("distribution must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(h > 0, h * np.log(h / h_ref), 0.0)
    return float(max(np.sum(terms - h + h_ref), 0.0))


def mirror_update(layout: BlockLayout, h: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
    """One multiplicative-weights step given an already evaluated gradient."""
    z = -alpha * np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite gradient in mirror step")
    z -= layout.expand(layout.block_max(z))
    w = h * np.exp(z)
    return w / layout.expand(layout.block_sum(w))


def pmd_step(prob: LowerProblem, h, y, alpha: float) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return mirror_update(prob.layout, h, prob.grad_h_reg(h, y), alpha)


def fixed_point_residual(prob: LowerProblem, h, y, alpha: float) -> float:
    return float(np.max(np.abs(pmd_step(prob, h, y, alpha) - h)))


def solve_lower(prob: LowerProblem, y, h0, cfg: LowerSolveConfig, h_star=None) -> LowerResult:
    """Run ``cfg.iters`` mirror steps from ``h0``.

    With ``cfg.tol`` set, stops early once the KL divergence between
    consecutive iterates drops below it.  Passing ``h_star`` records
    ``KL(h_star, h_t)`` for ``t = 0..T``.
    """
    h = prob.layout.check(h0, strict=True)
    res = LowerResult(h_final=h)
    if h_star is not None:
        res.eps_h.append(kl_divergence(h_star, h))
    res.min_entry.append(float(h.min()))
    for t in range(cfg.iters):
        h_next = pmd_step(prob, h, y, cfg.alpha)
        step_kl = kl_divergence(h_next, h) if cfg.tol is not None else None
        h = h_next
        if h_star is not None:
            res.eps_h.append(kl_divergence(h_star, h))
        res.min_entry.append(float(h.min()))
        res.iterations = t + 1
        if step_kl is not None and step_kl < cfg.tol:
            res.converged = True
            break
    res.h_final = h
    return res


def default_reference_step(prob: LowerProblem, h, y) -> float:
    """Step ``1 / (||hess g|| + eta)`` at ``h``; inside the range where the fixed point is attracting."""
    lg = float(np.linalg.norm(prob.hessian_h(h, y), 2))
    return 1.0 / (lg + prob.eta)


def reference_solve(
    prob: LowerProblem,
    y,
    h0=None,
    *,
    alpha: float | None = None,
    tol: float = 1e-14,
    max_iter: int = 200_000,
    residual_tol: float = 1e-12,
) -> np.ndarray:
    """High-accuracy lower-level solution used as the ``h*(y)`` oracle."""
    h = prob.layout.uniform() if h0 is None else prob.layout.check(h0, strict=True)
    if alpha is None:
        alpha = default_reference_step(prob, h, y)
    for _ in range(max_iter):
        h_next = pmd_step(prob, h, y, alpha)
        done = kl_divergence(h_next, h) < tol
        h = h_next
        if done and fixed_point_residual(prob, h, y, alpha) <= residual_tol:
            return h
    log.warning("reference solve stopped at max_iter=%d (residual %.3g)", max_iter,
                fixed_point_residual(prob, h, y, alpha))
    return h


def log_interior_floor(eta: float, omega_g: float, d_max: int) -> float:
    if not eta > 0 or omega_g < 0 or d_max < 1:
        raise ValueError("need eta > 0, omega_g >= 0, d_max >= 1")
    return -2.0 * omega_g / eta - math.log(d_max)


def interior_floor(eta: float, omega_g: float, d_max: int) -> float:
    """``exp(-2 omega_g / eta) / d_max``: lower bound on every iterate from a uniform start.

    May underflow to zero for large ``omega_g / eta``; use
    :func:`log_interior_floor` when the logarithm is what is needed.
    """
    nu = math.exp(log_interior_floor(eta, omega_g, d_max))
    if nu >= 1.0:
        log.warning("interior floor reached 1 (omega_g=0, d_max=1): the simplex is a single point")
    return nu
