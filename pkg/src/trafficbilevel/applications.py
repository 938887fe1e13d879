"""Concrete bilevel instances: capacity expansion and a quadratic toy game."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import DemandTable, RoadNetwork, k_shortest_paths
from .routing_game import CostModel, RoutingGame, link_cost, link_cost_dx, link_cost_dy
from .simplex import BlockLayout


class UpperObjective:
    """Upper-level objective ``f(h, y)`` with both partial gradients."""

    def value(self, h, y) -> float:
        raise NotImplementedError

    def grad_h(self, h, y) -> np.ndarray:
        raise NotImplementedError

    def grad_y(self, h, y) -> np.ndarray:
        raise NotImplementedError


class NetworkDesign(UpperObjective):
    """Total travel time plus ``theta * sum(d_a y_a**2)`` over expanded links.

    Travel cost on the upper level is the same BPR time as on the lower level.
    """

    def __init__(self, game: RoutingGame, theta: float = 0.001):
        if theta < 0:
            raise ValueError("theta must be nonnegative")
        self.game = game
        self.theta = float(theta)
        self.invest = game.net.invest_coeff[game.upper_links]
        self.upper_bound = game.net.expansion_ub[game.upper_links]

    def _link_terms(self, h, y):
        net = self.game.net
        x = self.game.link_flows(h)
        ys = self.game.link_capacity_shift(y)
        args = (net.free_flow_time, net.bpr_coeff, net.capacity, ys, x)
        return x, args

    def value(self, h, y) -> float:
        x, args = self._link_terms(h, y)
        y = np.asarray(y, dtype=float)
        travel = float(np.sum(link_cost(*args) * x))
        return travel + self.theta * float(np.sum(self.invest * y**2))

    def travel_time(self, h, y) -> float:
        x, args = self._link_terms(h, y)
        return float(np.sum(link_cost(*args) * x))

    def grad_h(self, h, y) -> np.ndarray:
        x, args = self._link_terms(h, y)
        marginal = link_cost(*args) + x * link_cost_dx(*args)
        return self.game.space.incidence @ marginal

    def grad_y(self, h, y) -> np.ndarray:
        x, args = self._link_terms(h, y)
        links = self.game.upper_links
        y = np.asarray(y, dtype=float)
        return (x * link_cost_dy(*args))[links] + 2.0 * self.theta * self.invest * y

    def box(self):
        return np.zeros_like(self.upper_bound), self.upper_bound.copy()


class ToyGame(CostModel):
    """``g(h, y) = (h . y)**2 / 2`` with ``y`` living in the same space as ``h``."""

    def __init__(self, layout: BlockLayout):
        if min(layout.sizes) < 2:
            raise ValueError("toy blocks need at least two coordinates")
        self.layout = layout
        self.n_upper = layout.dim

    def value(self, h, y) -> float:
        return 0.5 * float(np.dot(h, y)) ** 2

    def grad_h(self, h, y) -> np.ndarray:
        return float(np.dot(h, y)) * np.asarray(y, dtype=float)

    def hessian_h(self, h, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.outer(y, y)

    def hessian_matmul(self, h, y, V) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.outer(y, y @ V) if V.ndim == 2 else y * (y @ V)

    def cross_hessian(self, h, y) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        y = np.asarray(y, dtype=float)
        # rows follow h and columns follow y: d(grad_h g)_i / dy_j = (h.y) delta_ij + y_i h_j
        return float(np.dot(h, y)) * np.eye(h.size) + np.outer(y, h)


    def gradient_bound(self, radius: float = 1.0) -> float:
        """Worst case of ``|grad_h g|`` over the simplex product for ``|y| <= radius``.

        ``|h . y| <= |h|_2 |y|`` and ``|h|_2 <= sqrt(N)``, so one population
        gives 1 and ``N`` populations give ``sqrt(N)``.
        """
        return float(np.sqrt(self.layout.n_blocks)) * radius**2

    def hessian_bound(self, radius: float = 1.0) -> float:
        return radius**2


def toy_derivatives(p: ToyGame, h, y):
    return p.value(h, y), p.grad_h(h, y), p.hessian_h(h, y), p.cross_hessian(h, y)


def toy_instance(seed: int, n_blocks: int = 2, block_size: int = 30) -> tuple[ToyGame, np.ndarray]:
    """Toy game with ``y`` drawn uniformly on the unit sphere."""
    rng = np.random.default_rng(seed)
    game = ToyGame(BlockLayout((block_size,) * n_blocks))
    y = rng.standard_normal(game.n_upper)
    return game, y / np.linalg.norm(y)


def toy_start(game: ToyGame, seed: int, concentration: float = 0.3, floor: float = 1e-12) -> np.ndarray:
    """Random interior starting flows, Dirichlet per block.

    A concentration below one puts most mass on a few coordinates, a start far
    from equilibrium; entries are floored at ``floor`` and renormalized.
    """
    layout = game.layout
    h = np.maximum(layout.random_interior(np.random.default_rng([seed, 1]), concentration), floor)
    return h / layout.expand(layout.block_sum(h))


@dataclass
class ToyUpper(UpperObjective):
    """``|h - target|**2 / 2 + weight * |y|**2 / 2``: a smooth upper level for the toy game."""

    target: np.ndarray
    weight: float = 0.1

    def value(self, h, y) -> float:
        h = np.asarray(h, dtype=float)
        y = np.asarray(y, dtype=float)
        return 0.5 * float(np.sum((h - self.target) ** 2)) + 0.5 * self.weight * float(y @ y)

    def grad_h(self, h, y) -> np.ndarray:
        return np.asarray(h, dtype=float) - self.target

    def grad_y(self, h, y) -> np.ndarray:
        return self.weight * np.asarray(y, dtype=float)


def toy_bilevel(seed: int, n_blocks: int = 2, block_size: int = 3, weight: float = 0.1):
    """Toy lower game, a target-tracking upper objective and the box ``|y_j| <= 1/sqrt(dim)``.

    The box keeps ``|y| <= 1``, where the toy potential has unit gradient and
    Hessian bounds.
    """
    game, y0 = toy_instance(seed, n_blocks, block_size)
    rng = np.random.default_rng([seed, 2])
    upper = ToyUpper(target=game.layout.random_interior(rng), weight=weight)
    half = 1.0 / np.sqrt(game.n_upper)
    lo = np.full(game.n_upper, -half)
    hi = np.full(game.n_upper, half)
    return game, upper, (lo, hi), np.clip(y0, lo, hi)


def random_routing_instance(seed: int, paths_per_pair: int = 3, n_origins: int = 2):
    """Small coupled routing game: each origin reaches a shared sink through ``paths_per_pair`` hubs.

    Origins are nodes ``1..n_origins``, hubs follow, and the sink is the last
    node.  Hub-to-sink links are shared by every OD pair and are the upper
    links.  Returns the game and a feasible capacity expansion ``y``.
    """
    rng = np.random.default_rng(seed)
    hubs = np.arange(n_origins + 1, n_origins + paths_per_pair + 1)
    sink = n_origins + paths_per_pair + 1
    tail = [o for o in range(1, n_origins + 1) for _ in hubs] + list(hubs)
    head = [int(m) for _ in range(n_origins) for m in hubs] + [sink] * paths_per_pair
    m = len(tail)
    A = rng.uniform(1.0, 3.0, m)
    ub = np.zeros(m)
    ub[-paths_per_pair:] = 1.0
    net = RoadNetwork(
        n_nodes=sink,
        tail=np.array(tail),
        head=np.array(head),
        free_flow_time=A,
        bpr_coeff=0.15 * A,
        capacity=rng.uniform(0.5, 1.5, m),
        invest_coeff=np.where(ub > 0, 1.0, 0.0),
        expansion_ub=ub,
    )
    demand = DemandTable(tuple(range(1, n_origins + 1)), (sink,) * n_origins, rng.uniform(0.5, 1.5, n_origins))
    space = k_shortest_paths(net, demand, paths_per_pair)
    game = RoutingGame(net, space)
    return game, rng.uniform(0.0, 1.0, paths_per_pair)
