"""Double-loop solver: mirror descent below, projected gradient above.

Each outer iteration warm-starts the lower level from the previous
iterate, resets the Jacobian estimate to zero, runs ``D`` coupled
mirror/Jacobian steps and moves ``y`` along the estimated hypergradient.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .applications import UpperObjective
from .errors import DomainError, NumericalError
from .jacobian import build_MU, exact_jacobian, jacobian_step
from .lower_solver import kl_divergence, mirror_update, reference_solve
from .routing_game import LowerProblem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs matching shapes and lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def project(self, y) -> np.ndarray:
        return np.clip(np.asarray(y, dtype=float), self.lo, self.hi)

    def contains(self, y) -> bool:
        y = np.asarray(y, dtype=float)
        return bool(np.all(y >= self.lo) and np.all(y <= self.hi))


def as_box(box) -> Box:
    return box if isinstance(box, Box) else Box(*box)


def hypergradient(upper: UpperObjective, h_D, R_D, y) -> np.ndarray:
    g = upper.grad_y(h_D, y) + np.asarray(R_D).T @ upper.grad_h(h_D, y)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite hypergradient")
    return g


def exact_gradient(upper: UpperObjective, prob: LowerProblem, y, h_star=None, **reference_kw) -> np.ndarray:
    """Hypergradient at the reference lower solution and its exact Jacobian."""
    y = np.asarray(y, dtype=float)
    if h_star is None:
        h_star = reference_solve(prob, y, **reference_kw)
    R_star = exact_jacobian(prob, y, h_star)
    return hypergradient(upper, h_star, R_star, y)


def project_box(y, box) -> np.ndarray:
    return as_box(box).project(y)


def stationarity_sq(grad_F, y, box) -> float:
    """Squared distance of ``-grad_F`` to the normal cone of the box at ``y``."""
    box = as_box(box)
    y = np.asarray(y, dtype=float)
    g = np.asarray(grad_F, dtype=float)
    if not box.contains(y):
        raise ValueError("y lies outside the box")
    at_lo = y <= box.lo
    at_hi = y >= box.hi
    s = np.abs(g)
    # a degenerate coordinate (lo == hi) has the whole line as normal cone
    s = np.where(at_lo & at_hi, 0.0, s)
    s = np.where(at_lo & ~at_hi, np.maximum(0.0, -g), s)
    s = np.where(at_hi & ~at_lo, np.maximum(0.0, g), s)
    return float(np.sum(s**2))


@dataclass
class BilevelConfig:
    K: int
    D: int
    beta: float
    alpha: float
    box: object
    record_errors: bool = False
    record_jacobian: bool = True
    inner_snapshots: tuple[int, ...] = (0,)
    reference_alpha: float | None = None
    reference_tol: float = 1e-14
    reference_max_iter: int = 200_000

    def __post_init__(self) -> None:
        if self.K < 1 or self.D < 1:
            raise ValueError("K and D must be at least 1")
        if self.beta < 0 or not self.alpha > 0:
            raise ValueError("need beta >= 0 and alpha > 0")


@dataclass
class RunTrace:
    objective: list[float] = field(default_factory=list)
    stationarity_sq: list[float] = field(default_factory=list)
    eps_h0: list[float] = field(default_factory=list)
    eps_h: list[float] = field(default_factory=list)
    eps_r: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    inner: dict[int, dict[str, list[float]]] = field(default_factory=dict)
    h_final: np.ndarray | None = None
    y_final: np.ndarray | None = None

    @property
    def K(self) -> int:
        return len(self.objective)

    def mean_wall_ms(self) -> float:
        return float(np.mean(self.wall_ms)) if self.wall_ms else float("nan")


def _projector(box) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(box, "project"):
        return box.project
    if callable(box):
        return box
    return as_box(box).project


def _stationarity(grad, y, box, project) -> float:
    if isinstance(box, Box) or isinstance(box, tuple):
        return stationarity_sq(grad, y, box)
    # generic convex set: squared unit-step gradient mapping
    return float(np.sum((y - project(y - grad)) ** 2))


def _jacobian_error(R_star, R) -> float:
    """Squared spectral-norm error; NaN when the exact Jacobian is not tracked."""
    if R_star is None:
        return float("nan")
    return float(np.linalg.norm(R - R_star, 2) ** 2)


def run_algorithm1(upper: UpperObjective, prob: LowerProblem, cfg: BilevelConfig, y0, h0) -> RunTrace:
    layout = prob.layout
    project = _projector(cfg.box)
    box = as_box(cfg.box) if isinstance(cfg.box, tuple) else cfg.box
    y = np.asarray(y0, dtype=float).copy()
    if not np.allclose(project(y), y, rtol=0.0, atol=0.0):
        raise ValueError("y0 must be feasible")
    h = layout.check(h0, strict=True).copy()
    trace = RunTrace()
    d_u = prob.n_upper
    for k in range(cfg.K):
        h_star = R_star = None
        if cfg.record_errors:
            h_star = reference_solve(
                prob, y, h, alpha=cfg.reference_alpha, tol=cfg.reference_tol, max_iter=cfg.reference_max_iter
            )
            if cfg.record_jacobian:
                R_star = exact_jacobian(prob, y, h_star)
            trace.eps_h0.append(kl_divergence(h_star, h))
        snap = cfg.record_errors and k in cfg.inner_snapshots
        if snap:
            inner = {"eps_h": [kl_divergence(h_star, h)], "eps_r": [_jacobian_error(R_star, 0.0)]}

        started = time.perf_counter()
        R = np.zeros((layout.dim, d_u))
        for t in range(cfg.D):
            try:
                grad = prob.grad_h_reg(h, y)
                h_next = mirror_update(layout, h, grad, cfg.alpha)
                R = jacobian_step(build_MU(prob, h, h_next, y, cfg.alpha), R)
            except (DomainError, NumericalError) as exc:
                raise type(exc)(f"inner step failed at k={k}, t={t}: {exc}") from exc
            h = h_next
            if snap:
                inner["eps_h"].append(kl_divergence(h_star, h))
                inner["eps_r"].append(_jacobian_error(R_star, R))
        objective = upper.value(h, y)
        if not np.isfinite(objective):
            raise NumericalError(f"non-finite upper objective at k={k}, t={cfg.D}")
        g_hat = hypergradient(upper, h, R, y)
        stat = _stationarity(g_hat, y, box, project)
        y_next = project(y - cfg.beta * g_hat)
        trace.wall_ms.append((time.perf_counter() - started) * 1e3)

        trace.objective.append(float(objective))
        trace.stationarity_sq.append(stat)
        trace.y.append(y.copy())
        if cfg.record_errors:
            trace.eps_h.append(kl_divergence(h_star, h))
            trace.eps_r.append(_jacobian_error(R_star, R))
        if snap:
            trace.inner[k] = inner
        y = y_next
    trace.h_final = h
    trace.y_final = y
    return trace
