"""Forward differentiation of the mirror-descent map with respect to ``y``.

Differentiating one mirror step gives the linear recursion

    R_{t+1} = M_t R_t + U_t,
    M_t = B_t [(1 - eta alpha) diag(1 / h_t) - alpha hess_h g(h_t, y)],
    U_t = -alpha B_t cross_h g(h_t, y),

with ``B_t`` the block-diagonal matrix ``diag(h_{t+1}) - h_{t+1} h_{t+1}^T``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import DomainError, NumericalError
from .routing_game import LowerProblem
from .simplex import BlockLayout

MAX_CONDITION = 1e12


def apply_B(layout: BlockLayout, h: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``B(h) @ V`` without forming ``B``."""
    hv = h[:, None] * V if V.ndim == 2 else h * V
    return hv - (h[:, None] if V.ndim == 2 else h) * layout.expand(layout.block_sum(hv))


def build_B(h_next, layout: BlockLayout) -> np.ndarray:
    h = np.asarray(h_next, dtype=float)
    B = np.zeros((layout.dim, layout.dim))
    for s in layout.slices():
        hi = h[s]
        B[s, s] = np.diag(hi) - np.outer(hi, hi)
    return B


@dataclass
class DynamicsMatrices:
    """Lazily assembled ``M_t``, ``U_t`` and ``B_t`` for one mirror step.

    :meth:`apply` evaluates ``M R + U`` through matrix products with the
    model's Hessian, which is what the solver loop uses; the dense
    properties exist for spectral diagnostics.
    """

    prob: LowerProblem
    h_t: np.ndarray
    h_next: np.ndarray
    y: np.ndarray
    alpha: float
    _U: np.ndarray | None = field(default=None, init=False, repr=False)

    @property
    def layout(self) -> BlockLayout:
        return self.prob.layout

    @property
    def shrink(self) -> float:
        return 1.0 - self.prob.eta * self.alpha

    @cached_property
    def B(self) -> np.ndarray:
        return build_B(self.h_next, self.layout)

    @cached_property
    def M(self) -> np.ndarray:
        inner = self.shrink * np.diag(1.0 / self.h_t) - self.alpha * self.prob.hessian_h(self.h_t, self.y)
        return apply_B(self.layout, self.h_next, inner)

    @property
    def U(self) -> np.ndarray:
        if self._U is None:
            cross = self.prob.cross_hessian(self.h_t, self.y)
            self._U = -self.alpha * apply_B(self.layout, self.h_next, cross)
        return self._U

    def apply_M(self, R: np.ndarray) -> np.ndarray:
        inner = self.shrink * R / self.h_t[:, None] - self.alpha * self.prob.model.hessian_matmul(
            self.h_t, self.y, R
        )
        return apply_B(self.layout, self.h_next, inner)

    def apply(self, R: np.ndarray) -> np.ndarray:
        return self.apply_M(R) + self.U


def build_MU(prob: LowerProblem, h_t, h_next, y, alpha: float) -> DynamicsMatrices:
    h_t = np.asarray(h_t, dtype=float)
    if np.any(h_t <= 0):
        raise DomainError("current iterate must be strictly positive")
    return DynamicsMatrices(prob, h_t, np.asarray(h_next, dtype=float), np.asarray(y, dtype=float), alpha)


def jacobian_step(dyn: DynamicsMatrices, R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    expected = (dyn.layout.dim, dyn.prob.n_upper)
    if R.shape != expected:
        raise ValueError(f"R has shape {R.shape}, expected {expected}")
    return dyn.apply(R)


def exact_jacobian(prob: LowerProblem, y, h_star, alpha: float | None = None) -> np.ndarray:
    """Solve ``(I - M*) R = U*`` at a converged lower solution ``h_star``.

    The solution does not depend on ``alpha`` as long as ``I - M*`` is
    invertible; the default ``1 / (||hess g|| + eta)`` keeps the spectrum of
    ``M*`` inside ``[0, 1 - eta alpha]``.
    """
    h_star = np.asarray(h_star, dtype=float)
    y = np.asarray(y, dtype=float)
    if alpha is None:
        alpha = 1.0 / (float(np.linalg.norm(prob.hessian_h(h_star, y), 2)) + prob.eta)
    dyn = build_MU(prob, h_star, h_star, y, alpha)
    A = np.eye(prob.layout.dim) - dyn.M
    with warnings.catch_warnings():
        # singularity is reported below through the condition estimate
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    rcond, info = scipy.linalg.lapack.dgecon(lu, np.linalg.norm(A, 1), norm="1")
    if info != 0 or rcond * MAX_CONDITION < 1.0:
        raise NumericalError(f"I - M* is singular or ill-conditioned (rcond={rcond:.3g})")
    return scipy.linalg.lu_solve((lu, piv), dyn.U)


def jacobian_fixed_point_residual(prob: LowerProblem, y, h_star, R_star, alpha: float) -> float:
    dyn = build_MU(prob, h_star, h_star, y, alpha)
    return float(np.linalg.norm(jacobian_step(dyn, R_star) - R_star))
