"""Double-loop bilevel optimization over entropy-regularized routing games.

The lower level is a potential game on a product of simplices solved by
entropic mirror descent; the upper level runs projected gradient descent
with hypergradients obtained by differentiating through the inner loop.
"""

from .applications import NetworkDesign, ToyGame, ToyUpper, random_routing_instance, toy_bilevel, toy_instance
from .bilevel import BilevelConfig, Box, RunTrace, exact_gradient, hypergradient, run_algorithm1, stationarity_sq
from .errors import DataError, DomainError, NumericalError, ParseError, ValidationError
from .jacobian import build_MU, exact_jacobian, jacobian_step
from .lower_solver import LowerSolveConfig, kl_divergence, pmd_step, reference_solve, solve_lower
from .network import DemandTable, PathFlowSpace, RoadNetwork, k_shortest_paths, load_sioux_falls, load_tntp
from .routing_game import LowerProblem, RoutingGame
from .simplex import BlockLayout

__version__ = "0.1.0"
