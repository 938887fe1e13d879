"""Numerical checks of the convergence analysis.

Covers the factorization of the softmax Jacobian ``B``, spectra of the
dynamics matrices, the stability certificate constants and its linear
matrix inequality, sampled problem constants and empirical rate fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import DomainError, NumericalError
from .jacobian import build_MU, jacobian_step
from .lower_solver import kl_divergence, log_interior_floor, mirror_update
from .routing_game import LowerProblem, RoutingGame
from .simplex import BlockLayout

LMI_TOL = 1e-9
CERT_S = 4.0


# ------------------------------------------------------------------ B factorization


def factor_B(h, layout: BlockLayout) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Lam, V)`` with ``B(h) = Lam Lam^T`` and ``Lam = diag(sqrt h) V``.

    Per block, ``[sqrt(h_i), V_i]`` is an orthonormal basis obtained by
    Householder QR (the stable form of Gram-Schmidt) of ``[sqrt(h_i), I]``.
    Both outputs are block diagonal with ``d_i - 1`` columns per block, so a
    block of size one contributes no column.
    """
    h = layout.check(h, strict=True)
    n_cols = layout.dim - layout.n_blocks
    V = np.zeros((layout.dim, n_cols))
    col = 0
    for s in layout.slices():
        d = s.stop - s.start
        if d == 1:
            continue
        u = np.sqrt(h[s])
        u = u / np.linalg.norm(u)
        Q, _ = np.linalg.qr(np.column_stack([u, np.eye(d)]))
        V[s, col : col + d - 1] = Q[:, 1:d]
        col += d - 1
    return np.sqrt(h)[:, None] * V, V


def sqrt_h_matrix(h, layout: BlockLayout) -> np.ndarray:
    """Columns ``sqrt(h_i)`` placed on their own block rows (dim x N)."""
    E = np.zeros((layout.dim, layout.n_blocks))
    for i, s in enumerate(layout.slices()):
        E[s, i] = np.sqrt(h[s])
    return E


# ------------------------------------------------------------------------- spectra


@dataclass(frozen=True)
class Spectrum:
    radius: float
    norm: float
    eigenvalues: np.ndarray


def spectrum_M(M) -> Spectrum:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("spectrum needs a square matrix")
    try:
        eig = scipy.linalg.eigvals(M)
        norm = float(np.linalg.norm(M, 2))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    return Spectrum(float(np.max(np.abs(eig))) if eig.size else 0.0, norm, eig)


def tangent_basis(layout: BlockLayout) -> np.ndarray:
    """Orthonormal basis of ``{v : every block of v sums to zero}``."""
    Q = np.zeros((layout.dim, layout.dim - layout.n_blocks))
    col = 0
    for s in layout.slices():
        d = s.stop - s.start
        if d > 1:
            Q[s, col : col + d - 1] = scipy.linalg.null_space(np.ones((1, d)))
            col += d - 1
    return Q


def tangent_spectrum(M, layout: BlockLayout) -> Spectrum:
    """Spectrum of ``M`` restricted to the zero-block-sum subspace.

    Every dynamics matrix has the form ``B X`` and ``1^T B = 0``, so ``M``
    maps into that subspace.  The remaining eigenvalues are ``N`` structural
    zeros, one per population.
    """
    Q = tangent_basis(layout)
    return spectrum_M(Q.T @ np.asarray(M, dtype=float) @ Q)


def transient_length(Ms: Sequence[np.ndarray], M_star: np.ndarray, tol: float) -> int | None:
    """First ``t`` with ``||M_t - M*||_2 <= tol``, or ``None`` if never reached."""
    for t, M in enumerate(Ms):
        if np.linalg.norm(M - M_star, 2) <= tol:
            return t
    return None


# -------------------------------------------------------------- stability certificate


@dataclass(frozen=True)
class StabilityCertificate:
    eta: float
    alpha: float
    L_g: float
    nu_min: float
    lam: float
    mu_tilde: float
    C_P: float
    eps_bar: float
    s: float
    omega: float
    lmi_min_eig: float | None = None
    passed: bool | None = None

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def admissible_step(eta: float, L_g: float) -> float:
    """``alpha_bar = 1 / (2 L_g**2 / eta + 2 eta)``."""
    return 1.0 / (2.0 * L_g**2 / eta + 2.0 * eta)


def stability_constants(eta: float, alpha: float, L_g: float, nu_min: float, *, strict: bool = True):
    """Certificate constants for step ``alpha``.

    With ``strict`` (the default) a step above ``admissible_step`` raises;
    ``strict=False`` evaluates the formulas anyway for inspection.
    """
    if not (eta > 0 and alpha > 0 and L_g >= 0):
        raise ValueError("need eta > 0, alpha > 0, L_g >= 0")
    if not 0 < nu_min < 1:
        raise ValueError(f"nu_min must lie in (0, 1), got {nu_min!r}")
    bound = admissible_step(eta, L_g)
    if strict and alpha > bound:
        raise DomainError(
            f"alpha={alpha:g} exceeds the admissible bound alpha_bar = 1/(2 L_g^2/eta + 2 eta) = {bound:.6g}"
        )
    shrink = 1.0 - eta * alpha
    mu = (eta * alpha / 4.0) / (1.0 + 16.0 * shrink**2 * L_g**2 / eta**2)
    s = CERT_S
    C_P = (1.5 * s + 1.0) / mu
    eps_bar = min(math.sqrt(2.0 * nu_min / C_P), nu_min**1.5 / (2.0 * C_P * shrink) if shrink > 0 else math.inf)
    omega = 3.0 * C_P / nu_min + C_P**2 * shrink**2 / nu_min**3
    return StabilityCertificate(
        eta=eta, alpha=alpha, L_g=L_g, nu_min=nu_min, lam=1.0 - eta * alpha / 2.0,
        mu_tilde=mu, C_P=C_P, eps_bar=eps_bar, s=s, omega=omega,
    )


def lmi_slack(M_star, P, lam: float, eps: float, s: float, omega: float) -> np.ndarray:
    """``blkdiag(lam P, s I, omega I) - A^T blkdiag(P, s I, I) A`` with ``A = [[M, eps I, I], [I, 0, 0], [I, 0, 0]]``."""
    M = np.asarray(M_star, dtype=float)
    P = np.asarray(P, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n) or P.shape != (n, n):
        raise ValueError(f"M and P must be square of equal size, got {M.shape} and {P.shape}")
    I = np.eye(n)
    Z = np.zeros((n, n))
    A = np.block([[M, eps * I, I], [I, Z, Z], [I, Z, Z]])
    Q = scipy.linalg.block_diag(P, s * I, I)
    L = scipy.linalg.block_diag(lam * P, s * I, omega * I)
    S = L - A.T @ Q @ A
    return 0.5 * (S + S.T)


def lmi_check(M_star, P, lam: float, eps: float, s: float, omega: float, *, scaled: bool = True) -> float:
    """Smallest eigenvalue of the symmetrized slack.

    The certificate constants span hundreds of orders of magnitude, so by
    default the slack is first Jacobi-scaled, ``D^-1/2 S D^-1/2`` with
    ``D = |diag S|``.  That congruence keeps the inertia, hence the sign of
    the smallest eigenvalue, while reducing the entries to order one.
    """
    S = lmi_slack(M_star, P, lam, eps, s, omega)
    if scaled:
        d = np.sqrt(np.abs(np.diag(S)))
        d[d == 0] = 1.0
        S = S / np.outer(d, d)
    if not np.all(np.isfinite(S)):
        raise NumericalError("LMI slack has nonfinite entries")
    return float(scipy.linalg.eigvalsh(S)[0])


def certify(prob: LowerProblem, y, h_star, alpha: float, L_g: float, nu_min: float, *, eps_scale: float = 1.0):
    """Evaluate the certificate constants and the LMI at the fixed point ``h_star``."""
    cert = stability_constants(prob.eta, alpha, L_g, nu_min)
    M = build_MU(prob, h_star, h_star, y, alpha).M
    P = cert.C_P * np.diag(1.0 / np.asarray(h_star, dtype=float))
    mine = lmi_check(M, P, cert.lam, eps_scale * cert.eps_bar, cert.s, cert.omega)
    return StabilityCertificate(**{**cert.as_row(), "lmi_min_eig": mine, "passed": mine >= -LMI_TOL})


# -------------------------------------------------------------------- constants


@dataclass(frozen=True)
class ProblemConstants:
    omega_g: float
    L_g: float
    log_nu_min: float
    kl_max: float
    lambda_yh: float | None = None
    C0: float | None = None

    @property
    def nu_min(self) -> float:
        return math.exp(self.log_nu_min)

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.__dataclass_fields__}
        row["nu_min"] = self.nu_min
        return row


def kl_bound(sizes: Sequence[int], log_nu: float) -> float:
    """``N ln(1/nu) + nu sum_i d_i ln(1/d_i)``: largest KL error from a uniform start."""
    d = np.asarray(sizes, dtype=float)
    return float(-len(d) * log_nu + math.exp(log_nu) * np.sum(-d * np.log(d)))


def estimate_constants(prob: LowerProblem, samples: Iterable[tuple[np.ndarray, np.ndarray]]) -> ProblemConstants:
    """Sampled bounds on the lower-level derivatives at points ``(h, y)``.

    For the routing game ``omega_g`` is the global bound from
    :meth:`RoutingGame.gradient_bound` rather than the sampled maximum.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    grad = hess = cross = 0.0
    for h, y in samples:
        grad = max(grad, float(np.linalg.norm(prob.grad_h(h, y))))
        hess = max(hess, float(np.linalg.norm(prob.hessian_h(h, y), 2)))
        cross = max(cross, float(np.linalg.norm(prob.cross_hessian(h, y), 2)))
    if isinstance(prob.model, RoutingGame):
        grad = prob.model.gradient_bound()
    layout = prob.layout
    log_nu = log_interior_floor(prob.eta, grad, layout.max_size)
    log_c0 = math.log(4.0 * cross) - math.log(prob.eta) - 0.5 * log_nu if cross > 0 else -math.inf
    c0 = math.exp(log_c0) if log_c0 < 700 else math.inf
    return ProblemConstants(grad, hess, log_nu, kl_bound(layout.sizes, log_nu), cross, c0)


# ------------------------------------------------------------------------ rates


def fit_rate(trace: Sequence[float]) -> float:
    """Geometric rate from a least-squares fit of ``log e_t`` over the tail half."""
    e = np.asarray(trace, dtype=float)
    if e.size < 3:
        raise ValueError("need at least three entries")
    if np.any(~(e > 0)):
        raise ValueError("errors must be strictly positive")
    t = np.arange(e.size)
    tail = slice(e.size // 2, None)
    slope = np.polyfit(t[tail], np.log(e[tail]), 1)[0]
    return float(math.exp(slope))


# ------------------------------------------------------------- inner dynamics


@dataclass
class InnerTrace:
    eps_h: list[float]
    eps_r: list[float]
    spectra_t: list[int]
    rho: list[float]
    norm: list[float]
    M_gap: list[float]
    h_final: np.ndarray


def trace_inner(prob: LowerProblem, y, h0, alpha: float, T: int, h_star, R_star, *, spectra_every: int = 0):
    """Run ``T`` mirror steps with the Jacobian recursion from ``R = 0``.

    Records ``KL(h*, h_t)`` and ``||R_t - R*||_2**2`` for ``t = 0..T``.  With
    ``spectra_every > 0`` the spectral radius and norm of ``M_t`` and the
    distance ``||M_t - M*||_2`` are sampled every that many steps.
    """
    layout = prob.layout
    h = layout.check(h0, strict=True).copy()
    y = np.asarray(y, dtype=float)
    R = np.zeros((layout.dim, prob.n_upper))
    M_star = build_MU(prob, h_star, h_star, y, alpha).M if spectra_every else None
    out = InnerTrace([kl_divergence(h_star, h)], [float(np.linalg.norm(R_star, 2) ** 2)], [], [], [], [], h)
    for t in range(T):
        h_next = mirror_update(layout, h, prob.grad_h_reg(h, y), alpha)
        dyn = build_MU(prob, h, h_next, y, alpha)
        if spectra_every and t % spectra_every == 0:
            sp = spectrum_M(dyn.M)
            out.spectra_t.append(t)
            out.rho.append(sp.radius)
            out.norm.append(sp.norm)
            out.M_gap.append(float(np.linalg.norm(dyn.M - M_star, 2)))
        R = jacobian_step(dyn, R)
        h = h_next
        out.eps_h.append(kl_divergence(h_star, h))
        out.eps_r.append(float(np.linalg.norm(R - R_star, 2) ** 2))
    out.h_final = h
    return out


def positive_prefix(errors: Sequence[float], floor: float = 1e-24) -> list[float]:
    """Leading run of entries above ``floor``: the part of a trace not yet at round-off."""
    out = []
    for e in errors:
        if not e > floor:
            break
        out.append(float(e))
    return out
