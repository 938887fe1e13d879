"""Lower-level potential functions and their derivatives.

Every lower-level model implements the :class:`CostModel` surface: the
potential ``g(h, y)``, ``grad_h``, ``hessian_h`` and the cross derivative
``d/dy grad_h`` (shape ``dim_h x dim_y``).  :class:`LowerProblem` adds the
entropic term ``eta * sum(h ln h - h)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .network import PathFlowSpace, RoadNetwork
from .simplex import BlockLayout


def _checked_capacity(K, y):
    cap = np.asarray(K, dtype=float) + np.asarray(y, dtype=float)
    if np.any(cap <= 0):
        raise DomainError("effective capacity K + y must be positive")
    return cap


def link_cost(A, B, K, y, x):
    """BPR travel time ``A + B (x / (K + y))**4``, elementwise."""
    cap = _checked_capacity(K, y)
    return A + B * (np.asarray(x, dtype=float) / cap) ** 4


def link_cost_dx(A, B, K, y, x):
    cap = _checked_capacity(K, y)
    return 4.0 * B * np.asarray(x, dtype=float) ** 3 / cap**4


def link_cost_dy(A, B, K, y, x):
    cap = _checked_capacity(K, y)
    return -4.0 * B * np.asarray(x, dtype=float) ** 4 / cap**5


def link_potential(A, B, K, y, x):
    """Closed-form integral of :func:`link_cost` over ``[0, x]``."""
    cap = _checked_capacity(K, y)
    x = np.asarray(x, dtype=float)
    return A * x + B * x**5 / (5.0 * cap**4)


class CostModel:
    """Interface for a lower-level potential over a product of simplices."""

    layout: BlockLayout
    n_upper: int

    def value(self, h, y) -> float:
        raise NotImplementedError

    def grad_h(self, h, y) -> np.ndarray:
        raise NotImplementedError

    def hessian_h(self, h, y) -> np.ndarray:
        raise NotImplementedError

    def cross_hessian(self, h, y) -> np.ndarray:
        raise NotImplementedError

    def hessian_matmul(self, h, y, V) -> np.ndarray:
        """``hessian_h(h, y) @ V``; models override this when a cheaper product exists."""
        return self.hessian_h(h, y) @ V


class RoutingGame(CostModel):
    """Potential of the routing game with quartic BPR link costs.

    ``upper_links[j]`` is the link whose capacity is expanded by ``y[j]``.
    """

    def __init__(self, net: RoadNetwork, space: PathFlowSpace, upper_links=None):
        self.net = net
        self.space = space
        self.layout = space.layout
        if upper_links is None:
            upper_links = net.expandable_links()
        upper_links = np.asarray(upper_links, dtype=int)
        if len(set(upper_links.tolist())) != upper_links.size:
            raise ValueError("upper-level link ids must be distinct")
        if upper_links.size and (upper_links.min() < 0 or upper_links.max() >= net.n_links):
            raise ValueError("upper-level link id outside the network")
        self.upper_links = upper_links
        self.n_upper = int(upper_links.size)

    def link_capacity_shift(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_upper,):
            raise ValueError(f"y has shape {y.shape}, expected ({self.n_upper},)")
        shift = np.zeros(self.net.n_links)
        shift[self.upper_links] = y
        return shift

    def _terms(self, h, y):
        x = self.space.incidence.T @ np.asarray(h, dtype=float)
        return x, self.link_capacity_shift(y)

    def link_flows(self, h) -> np.ndarray:
        return self.space.incidence.T @ np.asarray(h, dtype=float)

    def costs(self, h, y) -> np.ndarray:
        x, ys = self._terms(h, y)
        n = self.net
        return link_cost(n.free_flow_time, n.bpr_coeff, n.capacity, ys, x)

    def value(self, h, y) -> float:
        x, ys = self._terms(h, y)
        n = self.net
        return float(np.sum(link_potential(n.free_flow_time, n.bpr_coeff, n.capacity, ys, x)))

    def grad_h(self, h, y) -> np.ndarray:
        return self.space.incidence @ self.costs(h, y)

    def _cost_slope(self, h, y):
        x, ys = self._terms(h, y)
        n = self.net
        return link_cost_dx(n.free_flow_time, n.bpr_coeff, n.capacity, ys, x)

    def hessian_h(self, h, y) -> np.ndarray:
        inc = self.space.incidence
        return (inc * self._cost_slope(h, y)) @ inc.T

    def hessian_matmul(self, h, y, V) -> np.ndarray:
        inc = self.space.incidence
        slope = self._cost_slope(h, y)
        inner = inc.T @ V
        inner = slope[:, None] * inner if inner.ndim == 2 else slope * inner
        return inc @ inner

    def cross_hessian(self, h, y) -> np.ndarray:
        x, ys = self._terms(h, y)
        n = self.net
        dcdy = link_cost_dy(n.free_flow_time, n.bpr_coeff, n.capacity, ys, x)
        links = self.upper_links
        return self.space.incidence[:, links] * dcdy[links]

    def gradient_bound(self) -> float:
        """Bound on ``||grad_h g||`` over the whole simplex product.

        Link flow never exceeds the total demand of the OD pairs whose paths
        use the link, so costs are evaluated there at zero expansion.
        """
        n = self.net
        c_max = link_cost(n.free_flow_time, n.bpr_coeff, n.capacity, 0.0, self._flow_bound())
        row_bound = np.abs(self.space.incidence) @ c_max
        return float(np.linalg.norm(row_bound))

    def hessian_bound(self) -> float:
        """Bound on ``||hess_h g||_2``; the cost slope is increasing in the flow."""
        n = self.net
        slope = link_cost_dx(n.free_flow_time, n.bpr_coeff, n.capacity, 0.0, self._flow_bound())
        inc = self.space.incidence
        return float(np.linalg.norm((inc * slope) @ inc.T, 2))

    def _flow_bound(self) -> np.ndarray:
        inc = self.space.incidence
        x_max = np.zeros(self.net.n_links)
        for s, xi in zip(self.layout.slices(), self.space.demand):
            x_max += xi * (inc[s] > 0).any(axis=0)
        return x_max


@dataclass(frozen=True)
class LowerProblem:
    model: CostModel
    eta: float

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    @property
    def layout(self) -> BlockLayout:
        return self.model.layout

    @property
    def n_upper(self) -> int:
        return self.model.n_upper

    def value(self, h, y) -> float:
        return self.model.value(h, y)

    def value_reg(self, h, y) -> float:
        h = np.asarray(h, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(h > 0, h * np.log(h), 0.0) - h
        return self.model.value(h, y) + self.eta * float(ent.sum())

    def grad_h(self, h, y) -> np.ndarray:
        return self.model.grad_h(h, y)

    def grad_h_reg(self, h, y) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if np.any(h <= 0):
            raise DomainError("regularized gradient needs strictly positive h")
        return self.model.grad_h(h, y) + self.eta * np.log(h)

    def hessian_h(self, h, y) -> np.ndarray:
        return self.model.hessian_h(h, y)

    def cross_hessian(self, h, y) -> np.ndarray:
        return self.model.cross_hessian(h, y)


def potential_value(prob: LowerProblem, h, y) -> float:
    return prob.value(h, y)


def grad_h(prob: LowerProblem, h, y) -> np.ndarray:
    return prob.grad_h(h, y)


def grad_h_reg(prob: LowerProblem, h, y) -> np.ndarray:
    return prob.grad_h_reg(h, y)


def hessian_h(prob: LowerProblem, h, y) -> np.ndarray:
    return prob.hessian_h(h, y)


def cross_hessian(prob: LowerProblem, h, y) -> np.ndarray:
    return prob.cross_hessian(h, y)
