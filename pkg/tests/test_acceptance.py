"""Acceptance criteria, each checked at its stated tolerance.

Every test appends one PASS/FAIL line to the terminal summary.
"""

import functools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from platoon_h2.homotopy import (
    HomotopySettings,
    f1_closed_form,
    homotopy_continue,
    newton_solve,
    perturbation_first_order,
)
from platoon_h2.lyapunov import performance
from platoon_h2.model import FormationSpec, StructuredGain, assemble
from platoon_h2.scaling import (
    ControllerFamily,
    FamilyKind,
    FitModel,
    PenaltyRule,
    closed_form_performance,
    fit_power_law,
    simulate_variance,
    sweep,
)
from platoon_h2.symmetric import (
    GradientSettings,
    SymmetricGainVector,
    analytic_symmetric_no_follower,
    gradient_descend,
    gradient_sg,
    objective_sg,
    optimal_symmetric_gain,
)

TENS = tuple(range(10, 101, 10))
DEFAULT_GRID = (10, 20, 30, 40, 50, 75, 100)
UNION = tuple(sorted(set(TENS) | set(DEFAULT_GRID)))


def record(number, checks):
    """``checks``: list of (label, ok).  Emits one line and returns overall status."""
    ok = all(c for _, c in checks)
    detail = "; ".join(f"{label} [{'ok' if c else 'FAIL'}]" for label, c in checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@functools.lru_cache(maxsize=None)
def _sweep(kind, penalty="constant:1", model="single", follower=True, grid=UNION):
    fam = ControllerFamily(kind, penalty=PenaltyRule.parse(penalty))
    res = sweep(fam, grid, FormationSpec(grid[0], model, follower))
    assert all(r.error is None for r in res.rows), [r.error for r in res.rows]
    return {r.n: r for r in res.rows}


def _column(rows, grid, name):
    return np.array([getattr(rows[n], name) for n in grid])


def _fit(rows, grid, name, model, exponent=None):
    return fit_power_law(np.array(grid, float), _column(rows, grid, name), model, exponent)


def _rel(a, b):
    return abs(a - b) / abs(b)


def test_criterion_1_analytic_symmetric_optimum():
    # |tr(K^-1) - r tr(K)| = 2 |k . grad J|, so a 1e-8 identity needs a gradient well below 1e-8 * r
    settings = GradientSettings(grad_tol=1e-10)
    t0 = time.perf_counter()
    worst_k, worst_trace = 0.0, 0.0
    for r in (0.5, 1.0, 2.0):
        for n in range(1, 51):
            spec = FormationSpec(n, has_follower=False, control_penalty_r=r)
            k = gradient_descend(spec, settings)
            exact = analytic_symmetric_no_follower(spec)
            worst_k = max(worst_k, float(np.abs(k.k - exact.k).max()))
            km = k.matrix()
            tr_inv, tr = np.trace(np.linalg.inv(km)), np.trace(km)
            worst_trace = max(worst_trace, _rel(tr_inv, r * tr))
    elapsed = time.perf_counter() - t0
    ok = record(
        1,
        [
            (f"max |k - k*| = {worst_k:.2e} <= 1e-6", worst_k <= 1e-6),
            (f"trace identity rel err {worst_trace:.2e} <= 1e-8", worst_trace <= 1e-8),
            (f"runtime {elapsed:.1f}s < 10s", elapsed < 10),
        ],
    )
    assert ok


def test_criterion_2_symmetric_gradient():
    rng = np.random.default_rng(2)
    worst = 0.0
    points = 0
    h = 1e-6
    while points < 50:
        n = int(rng.choice([2, 5, 10]))
        follower = bool(points % 2)
        spec = FormationSpec(n, has_follower=follower, control_penalty_r=float(rng.uniform(0.5, 2)))
        k = SymmetricGainVector(rng.uniform(0.2, 3.0, n + 1 if follower else n), follower)
        if not k.is_positive_definite():
            continue
        g = gradient_sg(k, spec)
        fd = np.empty_like(g)
        for i in range(g.size):
            e = np.zeros_like(g)
            e[i] = h
            fd[i] = (
                objective_sg(SymmetricGainVector(k.k + e, follower), spec)
                - objective_sg(SymmetricGainVector(k.k - e, follower), spec)
            ) / (2 * h)
        worst = max(worst, float(np.abs(g - fd).max()))
        points += 1
    assert record(2, [(f"{points} points, max inf-norm gap {worst:.2e} <= 1e-5", worst <= 1e-5)])


def test_criterion_3_closed_form_equivalence():
    cases = [
        ("uniform single follower", ControllerFamily(FamilyKind.UNIFORM_SYMMETRIC), "single", True),
        ("uniform single no follower", ControllerFamily(FamilyKind.UNIFORM_SYMMETRIC), "single", False),
        ("look-ahead single", ControllerFamily(FamilyKind.LOOK_AHEAD), "single", True),
        ("uniform double", ControllerFamily(FamilyKind.UNIFORM_SYMMETRIC, 1.0, 3.0), "double", True),
        ("look-ahead double 1/4,1", ControllerFamily(FamilyKind.LOOK_AHEAD, 0.25, 1.0), "double", True),
    ]
    checks = []
    for label, fam, model, follower in cases:
        worst = 0.0
        for n in range(1, 101):
            spec = FormationSpec(n, model, follower)
            cf = closed_form_performance(fam, spec)
            rep = performance(assemble(spec, fam.design(spec)), spec)
            for a, b in ((cf.pi_g, rep.pi_g), (cf.pi_l, rep.pi_l), (cf.pi_ctr, rep.pi_ctr)):
                worst = max(worst, _rel(a, b))
        checks.append((f"{label} {worst:.1e}", worst <= 1e-8))
    assert record(3, checks)


def test_criterion_4_first_order_correction():
    worst_f, worst_nf, worst_sym = 0.0, 0.0, 0.0
    for n in range(2, 21):
        for follower in (True, False):
            f1 = perturbation_first_order(FormationSpec(n, has_follower=follower)).f1
            gap = float(np.abs(f1.stacked() - f1_closed_form(n, follower).stacked()).max())
            if follower:
                worst_f = max(worst_f, gap)
                worst_sym = max(worst_sym, float(np.abs(f1.forward - f1.backward[::-1]).max()))
            else:
                worst_nf = max(worst_nf, gap)
    ok = record(
        4,
        [
            (f"follower gap {worst_f:.1e} <= 1e-8", worst_f <= 1e-8),
            (f"no-follower gap {worst_nf:.1e} <= 1e-8", worst_nf <= 1e-8),
            (f"central symmetry {worst_sym:.1e} <= 1e-10", worst_sym <= 1e-10),
        ],
    )
    assert ok


def test_criterion_5_homotopy_convergence():
    t0 = time.perf_counter()
    spec = FormationSpec(50)
    settings = HomotopySettings(grad_tol=1e-6)
    trace = homotopy_continue(spec, settings=settings)
    final = trace.final
    gain = final.gain
    sym = float(np.abs(gain.forward - gain.backward[::-1]).max())
    direct = newton_solve(spec, np.eye(50), optimal_symmetric_gain(spec), settings, full_output=True)
    agree = float(np.abs(direct.gain.stacked() - gain.stacked()).max())
    elapsed = time.perf_counter() - t0
    ok = record(
        5,
        [
            (f"eps={final.epsilon:g}", final.epsilon == 1.0),
            (f"|grad J| = {final.grad_norm:.1e} <= 1e-6", final.grad_norm <= 1e-6),
            (f"central symmetry {sym:.1e} <= 1e-5", sym <= 1e-5),
            (f"b1 = {gain.backward[0]:.4f} < 0", gain.backward[0] < 0),
            (f"fN = {gain.forward[-1]:.4f} < 0", gain.forward[-1] < 0),
            (f"Newton from symmetric optimum differs by {agree:.1e} <= 1e-5", agree <= 1e-5),
            (f"runtime {elapsed:.1f}s < 120s", elapsed < 120),
        ],
    )
    assert ok


def test_criterion_6_scaling_exponents():
    free = FitModel.FREE_EXPONENT
    cases = [
        ("uniform sym follower g", _sweep(FamilyKind.UNIFORM_SYMMETRIC), "pi_g", 1.0),
        ("uniform sym no follower g", _sweep(FamilyKind.UNIFORM_SYMMETRIC, follower=False), "pi_g", 1.0),
        ("look-ahead g", _sweep(FamilyKind.LOOK_AHEAD), "pi_g", 0.5),
        ("optimal sym g", _sweep(FamilyKind.OPTIMAL_SYMMETRIC), "pi_g", 0.5),
        ("optimal nonsym g", _sweep(FamilyKind.OPTIMAL_NONSYMMETRIC), "pi_g", 0.25),
        ("optimal sym l", _sweep(FamilyKind.OPTIMAL_SYMMETRIC), "pi_l", -0.5),
        ("optimal nonsym l", _sweep(FamilyKind.OPTIMAL_NONSYMMETRIC), "pi_l", -0.25),
    ]
    checks = []
    for label, rows, name, target in cases:
        p = _fit(rows, TENS, name, free).exponent
        checks.append((f"{label} p={p:.3f} (want {target:+g})", abs(p - target) <= 0.05))
    assert record(6, checks)


def test_criterion_7_caption_fits():
    fixed = FitModel.POWER_PLUS_CONST
    sym = _sweep(FamilyKind.OPTIMAL_SYMMETRIC)
    nonsym = _sweep(FamilyKind.OPTIMAL_NONSYMMETRIC)
    cases = [
        ("sym g a*sqrt(N)+b", sym, "pi_g", 0.5, 0.2784),
        ("nonsym g a*N^(1/4)+b", nonsym, "pi_g", 0.25, 0.4459),
        ("sym l a/sqrt(N)+b", sym, "pi_l", -0.5, 1.8570),
        ("nonsym l a/N^(1/4)+b", nonsym, "pi_l", -0.25, 1.4738),
    ]
    checks = []
    for label, rows, name, p, target in cases:
        a = _fit(rows, DEFAULT_GRID, name, fixed, p).a
        checks.append((f"{label} a={a:.4f} vs {target} ({_rel(a, target):.1%})", _rel(a, target) <= 0.10))
    assert record(7, checks)


def test_criterion_8_bounded_energy():
    fixed = FitModel.POWER_PLUS_CONST
    sym = _sweep(FamilyKind.OPTIMAL_SYMMETRIC, "linear:0.08")
    nonsym = _sweep(FamilyKind.OPTIMAL_NONSYMMETRIC, "sqrt:0.175")
    look = _sweep(FamilyKind.LOOK_AHEAD)
    upper = [n for n in UNION if n >= 50]
    ctr = np.concatenate([_column(sym, upper, "pi_ctr"), _column(nonsym, upper, "pi_ctr")])
    a_lin = _fit(sym, DEFAULT_GRID, "pi_g", fixed, 1.0).a
    a_sqrt = _fit(nonsym, DEFAULT_GRID, "pi_g", fixed, 0.5).a
    far = [n for n in UNION if n >= 30]
    order = bool(np.all(_column(look, far, "pi_g") < _column(sym, far, "pi_g")))
    ok = record(
        8,
        [
            (f"pi_ctr in [{ctr.min():.3f}, {ctr.max():.3f}] within [0.9, 1.1]", ctr.min() >= 0.9 and ctr.max() <= 1.1),
            (f"linear a={a_lin:.4f} vs 0.0793 ({_rel(a_lin, 0.0793):.1%})", _rel(a_lin, 0.0793) <= 0.15),
            (f"sqrt a={a_sqrt:.4f} vs 0.1807 ({_rel(a_sqrt, 0.1807):.1%})", _rel(a_sqrt, 0.1807) <= 0.15),
            ("look-ahead pi_g below optimal symmetric for N >= 30", order),
        ],
    )
    assert ok


def test_criterion_9_double_integrator_parity():
    fixed = FitModel.POWER_PLUS_CONST
    single = homotopy_continue(FormationSpec(50)).final.gain
    double = homotopy_continue(FormationSpec(50, "double")).final.gain
    corr_f = float(np.corrcoef(single.forward, double.forward)[0, 1])
    corr_b = float(np.corrcoef(single.backward, double.backward)[0, 1])
    rows = _sweep(FamilyKind.OPTIMAL_NONSYMMETRIC, model="double", grid=DEFAULT_GRID)
    fits = [
        ("g a*N^(1/4)+b", "pi_g", 0.25, 0.0736),
        ("ctr a*N^(1/4)+b", "pi_ctr", 0.25, 0.2742),
        ("l a/N^(1/4)+b", "pi_l", -0.25, 1.1793),
    ]
    checks = [
        (f"Pearson forward {corr_f:.4f} >= 0.95", corr_f >= 0.95),
        (f"Pearson backward {corr_b:.4f} >= 0.95", corr_b >= 0.95),
    ]
    for label, name, p, target in fits:
        a = _fit(rows, DEFAULT_GRID, name, fixed, p).a
        checks.append((f"{label} a={a:.4f} vs {target} ({_rel(a, target):.1%})", _rel(a, target) <= 0.15))
    assert record(9, checks)


def _mc_configs():
    one = FormationSpec(1)
    yield "single N=1 f=1", one, StructuredGain([1.0], [0.0])
    s10 = FormationSpec(10)
    yield "single uniform N=10", s10, StructuredGain.uniform(s10)
    s20 = FormationSpec(20)
    yield "single look-ahead N=20", s20, StructuredGain.look_ahead(s20, 1.0)
    d5 = FormationSpec(5, "double")
    yield "double uniform N=5", d5, StructuredGain.uniform(d5, 1.0, 3.0)
    d10 = FormationSpec(10, "double")
    yield "double optimal N=10", d10, homotopy_continue(d10).final.gain


@pytest.mark.slow
def test_criterion_10_monte_carlo():
    checks = []
    for seed, (label, spec, gain) in enumerate(_mc_configs()):
        sys = assemble(spec, gain)
        exact = performance(sys, spec).pi_g
        est = simulate_variance(sys, spec, seed=seed)
        z = (est.pi_g - exact) / est.se_g
        checks.append((f"{label} z={z:+.2f}", abs(z) <= 3.0))
    assert record(10, checks)
