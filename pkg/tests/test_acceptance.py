"""Acceptance suite: one test and one summary line per criterion.

Run with ``pytest tests/test_acceptance.py``; the summary section at the
end of the run lists PASS/FAIL per criterion.  The Sioux Falls criteria
take about a minute.
"""

import math

import numpy as np
import pytest

from conftest import central_diff, rel_err, report_criterion
from trafficbilevel import cli
from trafficbilevel import diagnostics as diag
from trafficbilevel.applications import (
    NetworkDesign,
    random_routing_instance,
    toy_bilevel,
    toy_instance,
    toy_start,
)
from trafficbilevel.bilevel import BilevelConfig, Box, exact_gradient, hypergradient, run_algorithm1
from trafficbilevel.jacobian import build_B, build_MU, exact_jacobian, jacobian_fixed_point_residual, jacobian_step
from trafficbilevel.lower_solver import LowerSolveConfig, log_interior_floor, mirror_update, reference_solve, solve_lower
from trafficbilevel.routing_game import LowerProblem
from trafficbilevel.simplex import BlockLayout

SEEDS_20 = range(20)


# ------------------------------------------------------------------ shared runs


@pytest.fixture(scope="module")
def contraction_runs():
    """Twenty toy games (two populations of three routes) at the admissible step ``1/(L_g + eta/nu)``."""
    eta = 1.0
    runs = []
    for seed in SEEDS_20:
        game, y = toy_instance(seed, 2, 3)
        prob = LowerProblem(game, eta)
        log_nu = log_interior_floor(eta, game.gradient_bound(), game.layout.max_size)
        nu = math.exp(log_nu)
        alpha = 1.0 / (game.hessian_bound() + eta / nu)
        h_star = reference_solve(prob, y)
        res = solve_lower(prob, y, game.layout.uniform(), LowerSolveConfig(alpha, 1500), h_star=h_star)
        runs.append(dict(eta=eta, alpha=alpha, nu=nu, log_nu=log_nu, sizes=game.layout.sizes, res=res))
    return runs


FIG3_SEEDS = (0, 1, 2)
FIG3_T = 16000


@pytest.fixture(scope="module")
def fig3_runs():
    out = []
    for seed in FIG3_SEEDS:
        game, y = toy_instance(seed)
        prob = LowerProblem(game, 0.02)
        h_star = reference_solve(prob, y)
        R_star = exact_jacobian(prob, y, h_star)
        tr = diag.trace_inner(prob, y, toy_start(game, seed), 0.05, FIG3_T, h_star, R_star, spectra_every=20)
        log_nu = log_interior_floor(0.02, game.gradient_bound(), game.layout.max_size)
        out.append(dict(seed=seed, trace=tr, sizes=game.layout.sizes, log_nu=log_nu))
    return out


TOY_BILEVEL = dict(eta=0.1, alpha=0.5, beta=0.5, K=60, D=200)


@pytest.fixture(scope="module")
def toy_bilevel_run():
    game, upper, box, y0 = toy_bilevel(0)
    prob = LowerProblem(game, TOY_BILEVEL["eta"])
    cfg = BilevelConfig(K=TOY_BILEVEL["K"], D=TOY_BILEVEL["D"], beta=TOY_BILEVEL["beta"],
                        alpha=TOY_BILEVEL["alpha"], box=box, record_errors=True)
    trace = run_algorithm1(upper, prob, cfg, y0, game.layout.uniform())
    log_nu = log_interior_floor(prob.eta, game.gradient_bound(), game.layout.max_size)
    return dict(trace=trace, sizes=game.layout.sizes, log_nu=log_nu)


SF_SWEEP = (40, 80, 120)


@pytest.fixture(scope="module")
def sioux_falls_sweep(tmp_path_factory):
    """The capacity-expansion protocol through the command line runner."""
    out = tmp_path_factory.mktemp("siouxfalls")
    cfg = cli.ExperimentConfig(D_list=SF_SWEEP, figures="none")
    cli.run_experiment(cfg, out)
    traces = {D: cli_rows(out / f"trace_D{D}.csv") for D in SF_SWEEP}
    summary = {int(r["D"]): r for r in cli_rows(out / "summary.csv")}
    return traces, summary


def cli_rows(path):
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ criteria


def test_criterion_01_lower_level_contraction(contraction_runs):
    worst_slack = -math.inf
    worst_fit = -math.inf
    for run in contraction_runs:
        e = np.array(run["res"].eps_h)
        q = 1.0 - run["eta"] * run["alpha"]
        worst_slack = max(worst_slack, float(np.max(e[1:] - (q * e[:-1] + 1e-12))))
        fitted = diag.fit_rate(diag.positive_prefix(e))
        worst_fit = max(worst_fit, fitted - (q + 0.01))
    ok = worst_slack <= 0 and worst_fit <= 0
    report_criterion(1, "lower-level contraction", ok,
                     f"max step slack {worst_slack:.3g} (<= 0), max fitted rate minus bound {worst_fit:.3g} (<= 0)")


def test_criterion_02_interior_floor(contraction_runs):
    margin = min(min(r["res"].min_entry) - r["nu"] for r in contraction_runs)
    report_criterion(2, "interior floor", margin >= 0, f"min over runs of (min entry - nu_min) = {margin:.3g}")


def test_criterion_03_kl_global_bound(contraction_runs, fig3_runs, toy_bilevel_run):
    checks = []
    for r in contraction_runs:
        checks.append((r["res"].eps_h[0], diag.kl_bound(r["sizes"], r["log_nu"])))
    for r in fig3_runs:
        checks.append((r["trace"].eps_h[0], diag.kl_bound(r["sizes"], r["log_nu"])))
    bound = diag.kl_bound(toy_bilevel_run["sizes"], toy_bilevel_run["log_nu"])
    checks += [(e, bound) for e in toy_bilevel_run["trace"].eps_h0]

    inst = cli.build_instance(cli.ExperimentConfig())
    prob = inst.prob
    cfg = BilevelConfig(K=3, D=40, beta=0.25, alpha=0.5, box=inst.box, record_errors=True,
                        record_jacobian=False, reference_alpha=0.5)
    tr = run_algorithm1(inst.upper, prob, cfg, inst.y0, inst.h0)
    const = diag.estimate_constants(prob, [(inst.h0, inst.y0)])
    checks += [(e, const.kl_max) for e in tr.eps_h0]

    worst = max(e / b for e, b in checks)
    report_criterion(3, "KL global bound", worst <= 1.0,
                     f"{len(checks)} initial errors, max ratio eps_h0 / bound = {worst:.3g}")


def test_criterion_04_jacobian_fixed_point_and_uniqueness():
    worst_res = worst_gap = 0.0
    for seed, size in [(0, 3), (1, 3), (2, 5), (3, 30)]:
        game, y = toy_instance(seed, 2, size)
        prob = LowerProblem(game, 0.1)
        h_star = reference_solve(prob, y)
        alpha = 1.0 / (np.linalg.norm(prob.hessian_h(h_star, y), 2) + prob.eta)
        R1 = exact_jacobian(prob, y, h_star, alpha)
        R2 = exact_jacobian(prob, y, h_star, alpha / 2)
        worst_res = max(worst_res, jacobian_fixed_point_residual(prob, y, h_star, R1, alpha))
        worst_gap = max(worst_gap, float(np.abs(R1 - R2).max()))
    ok = worst_res <= 1e-10 and worst_gap <= 1e-9
    report_criterion(4, "Jacobian fixed point and uniqueness", ok,
                     f"max ||Phi(R*) - R*||_F = {worst_res:.3g}, max |R*(a) - R*(a/2)| = {worst_gap:.3g}")


def test_criterion_05_jacobian_finite_differences():
    worst = 0.0
    for seed in range(5):
        game, y = toy_instance(seed, 2, 3)
        prob = LowerProblem(game, 0.1)
        R = exact_jacobian(prob, y, reference_solve(prob, y, tol=1e-14))
        fd = central_diff(lambda v: reference_solve(prob, v, tol=1e-14), y, step=1e-4)
        worst = max(worst, float(np.abs(R - fd).max()))
    report_criterion(5, "Jacobian vs finite differences", worst <= 1e-5, f"max entrywise error {worst:.3g}")


def test_criterion_06_hypergradient_oracle():
    worst_hyper = worst_exact = 0.0
    for seed in range(3):
        game, upper, box, y = toy_bilevel(seed)
        prob = LowerProblem(game, 0.1)
        fd = central_diff(lambda v: upper.value(reference_solve(prob, v), v), y, step=1e-4)
        h = game.layout.uniform()
        R = np.zeros((game.layout.dim, game.n_upper))
        for _ in range(2000):
            h1 = mirror_update(game.layout, h, prob.grad_h_reg(h, y), 0.5)
            R = jacobian_step(build_MU(prob, h, h1, y, 0.5), R)
            h = h1
        worst_hyper = max(worst_hyper, rel_err(hypergradient(upper, h, R, y), fd))
        worst_exact = max(worst_exact, rel_err(exact_gradient(upper, prob, y), fd))
    ok = worst_hyper <= 1e-3 and worst_exact <= 1e-5
    report_criterion(6, "hypergradient oracle", ok,
                     f"D=2000 relative error {worst_hyper:.3g} (<= 1e-3), exact {worst_exact:.3g} (<= 1e-5)")


def test_criterion_07_toy_phenomenology(fig3_runs):
    details = []
    ok = True
    for run in fig3_runs:
        tr = run["trace"]
        e_h = np.array(tr.eps_h)
        e_r = np.array(tr.eps_r)
        rho = np.array(tr.rho)
        norm = np.array(tr.norm)
        t = np.array(tr.spectra_t)
        a = bool(np.all(np.diff(e_h) < 0))
        t_peak = int(np.argmax(e_r))
        b = t_peak > 1 and e_r[-1] < 1e-6
        c = bool(np.any(rho[t < 1000] > 1.0)) and rho[-1] < 1.0
        d = bool(np.all(rho < norm))
        ok &= a and b and c and d
        details.append(f"seed {run['seed']}: (a) {a} (b) peak t={t_peak}, final {e_r[-1]:.2g} "
                       f"(c) max rho {rho.max():.4f}, last {rho[-1]:.4f} (d) {d}")
    report_criterion(7, "toy phenomenology", ok, "; ".join(details))


def _envelope_instances():
    rng = np.random.default_rng(2024)
    for seed in range(10):
        game, y = random_routing_instance(seed)
        yield LowerProblem(game, float(rng.uniform(0.5, 5.0))), y, rng
    for seed in range(10):
        game, y = toy_instance(100 + seed, int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        yield LowerProblem(game, float(rng.uniform(0.02, 1.0))), y, rng


def test_criterion_08_fixed_point_eigenvalue_envelope():
    worst = -math.inf
    worst_full = -math.inf
    for prob, y, rng in _envelope_instances():
        h_star = reference_solve(prob, y)
        L_g = float(np.linalg.norm(prob.hessian_h(h_star, y), 2))
        alpha = float(rng.uniform(0.05, 1.0)) / (L_g + prob.eta)
        M = build_MU(prob, h_star, h_star, y, alpha).M
        lo, hi = 1.0 - (L_g + prob.eta) * alpha - 1e-8, 1.0 - prob.eta * alpha + 1e-8
        eig = diag.tangent_spectrum(M, prob.layout).eigenvalues
        viol = max(float(np.max(lo - eig.real)), float(np.max(eig.real - hi)), float(np.max(np.abs(eig.imag))) - 1e-8)
        worst = max(worst, viol)
        # at alpha = 1/(L_g + eta) the envelope starts at zero and holds for the full spectrum too
        a1 = 1.0 / (L_g + prob.eta)
        full = diag.spectrum_M(build_MU(prob, h_star, h_star, y, a1).M).eigenvalues
        worst_full = max(worst_full, float(np.max(-1e-8 - full.real)), float(np.max(full.real - (1 - prob.eta * a1) - 1e-8)))
    ok = worst <= 0 and worst_full <= 0
    report_criterion(8, "fixed-point eigenvalue envelope", ok,
                     f"20 instances, worst violation on the zero-block-sum subspace {worst:.3g}; "
                     f"full spectrum at alpha=1/(L_g+eta) {worst_full:.3g}")


def test_criterion_09_lmi_certificate():
    results = []
    game, y = toy_instance(0)
    prob = LowerProblem(game, 0.02)
    h_star = reference_solve(prob, y)
    nu = math.exp(log_interior_floor(0.02, game.gradient_bound(), game.layout.max_size))
    alpha = 0.9 * diag.admissible_step(0.02, game.hessian_bound())
    results.append(diag.certify(prob, y, h_star, alpha, game.hessian_bound(), nu))
    for seed in range(10):
        game, y = random_routing_instance(seed)
        prob = LowerProblem(game, game.gradient_bound() / 2)
        h_star = reference_solve(prob, y)
        const = diag.estimate_constants(prob, [(h_star, y), (game.layout.uniform(), y)])
        L_g = max(const.L_g, game.hessian_bound())
        alpha = 0.9 * diag.admissible_step(prob.eta, L_g)
        results.append(diag.certify(prob, y, h_star, alpha, L_g, const.nu_min))
    ok = all(c.passed for c in results)
    mins = [c.lmi_min_eig for c in results]
    report_criterion(9, "LMI certificate", ok,
                     f"toy min eig {mins[0]:.3g}; routing instances min {min(mins[1:]):.3g} (pass >= -1e-9)")


def test_criterion_10_B_factorization():
    layout = BlockLayout((30, 2, 7, 1, 12))
    rng = np.random.default_rng(10)
    worst = dict(recon=0.0, orth=0.0, perp=0.0, norm=0.0)
    for _ in range(100):
        h = layout.random_interior(rng, float(rng.uniform(0.3, 3.0)))
        B = build_B(h, layout)
        Lam, V = diag.factor_B(h, layout)
        worst["recon"] = max(worst["recon"], float(np.linalg.norm(B - Lam @ Lam.T)))
        worst["orth"] = max(worst["orth"], float(np.abs(V.T @ V - np.eye(V.shape[1])).max()))
        worst["perp"] = max(worst["perp"], float(np.abs(diag.sqrt_h_matrix(h, layout).T @ V).max()))
        worst["norm"] = max(worst["norm"], float(np.linalg.norm(B, 2)))
    ok = worst["recon"] <= 1e-10 and worst["orth"] <= 1e-10 and worst["perp"] <= 1e-10 and worst["norm"] <= 1 + 1e-12
    report_criterion(10, "B factorization", ok, ", ".join(f"{k} {v:.3g}" for k, v in worst.items()))


def test_criterion_11_sioux_falls_sweep(sioux_falls_sweep):
    _, summary = sioux_falls_sweep
    final = {D: float(summary[D]["final_objective"]) for D in SF_SWEEP}
    wall = [float(summary[D]["mean_wall_ms"]) for D in SF_SWEEP]
    ok = final[120] <= final[40] and all(a < b for a, b in zip(wall, wall[1:]))
    report_criterion(11, "Sioux Falls objective and cost vs D", ok,
                     "final objective " + ", ".join(f"D={D}: {v:.4f}" for D, v in final.items())
                     + "; mean wall ms " + ", ".join(f"{w:.1f}" for w in wall))


def test_criterion_12_stationarity_trend(toy_bilevel_run, sioux_falls_sweep):
    traces, _ = sioux_falls_sweep
    pairs = {"toy": toy_bilevel_run["trace"].stationarity_sq}
    for D, rows in traces.items():
        pairs[f"SF D={D}"] = [float(r["stationarity_sq"]) for r in rows]
    ok = True
    parts = []
    for name, s in pairs.items():
        first, last = float(np.mean(s[:10])), float(np.mean(s[-10:]))
        ok &= last <= first
        parts.append(f"{name}: {first:.3g} -> {last:.3g}")
    report_criterion(12, "stationarity trend", ok, "; ".join(parts))


def test_criterion_13_derivatives_against_finite_differences():
    rng = np.random.default_rng(13)
    worst = {}

    def note(name, a, b):
        worst[name] = max(worst.get(name, 0.0), rel_err(a, b))

    for i in range(50):
        game, _ = random_routing_instance(i % 10)
        h = game.layout.random_interior(rng)
        y = rng.uniform(0.0, 1.0, game.n_upper)
        note("routing grad", game.grad_h(h, y), central_diff(lambda v: game.value(v, y), h))
        note("routing hessian", game.hessian_h(h, y), central_diff(lambda v: game.grad_h(v, y), h))
        note("routing cross", game.cross_hessian(h, y), central_diff(lambda v: game.grad_h(h, v), y))
        nd = NetworkDesign(game, theta=float(rng.uniform(0.0, 1.0)))
        note("design grad_h", nd.grad_h(h, y), central_diff(lambda v: nd.value(v, y), h))
        note("design grad_y", nd.grad_y(h, y), central_diff(lambda v: nd.value(h, v), y))

        toy, _ = toy_instance(i, 2, 4)
        h = toy.layout.random_interior(rng)
        y = rng.standard_normal(toy.n_upper)
        y /= np.linalg.norm(y)
        note("toy grad", toy.grad_h(h, y), central_diff(lambda v: toy.value(v, y), h))
        note("toy hessian", toy.hessian_h(h, y), central_diff(lambda v: toy.grad_h(v, y), h))
        note("toy cross", toy.cross_hessian(h, y), central_diff(lambda v: toy.grad_h(h, v), y))
    ok = max(worst.values()) <= 1e-5
    report_criterion(13, "derivatives vs finite differences", ok,
                     ", ".join(f"{k} {v:.2g}" for k, v in worst.items()))
