"""Acceptance gates for the package as a whole.

Each test prints one ``PASS`` or ``FAIL`` line with the measured value and
the tolerance it was held to, then asserts. The lines are also repeated in
the pytest terminal summary. Run on its own with::

    pytest tests/test_acceptance.py -v
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dpvb.gibbs import BlockedState, count_components, run_chain
from dpvb.harness import (
    ExperimentConfig,
    benchmark,
    estimate_truncation,
    held_out_groups,
    load_or_generate,
    split_dataset,
)
from dpvb.model import GroupedDataset, ModelConfig, expected_weights, stick_break
from dpvb.predictive import (
    HeldOutGroup,
    compare_methods,
    component_bound,
    inner_vb,
    predict_groups,
    state_log_densities,
)
from dpvb.special import Rng, digamma, ln_gamma
from dpvb.vb import VBState, init_state, run_vb, vb_step
from oracles import blocked_two_atom_predictive, log_component_marginal_quadrature

PUBLISHED_POLYA = [-96.19, -98.43, -89.45, -97.35, -104.31, -95.64, -90.36, -99.84, -92.86, -95.11]
PUBLISHED_BLOCKED = [-97.40, -99.67, -90.59, -98.53, -105.84, -96.76, -91.50, -100.82, -95.53, -96.32]
PUBLISHED_VB = [-97.29, -99.88, -90.46, -98.74, -105.90, -96.88, -91.37, -100.62, -95.47, -96.54]

SEED = 0

pytestmark = pytest.mark.slow


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig.from_dict({"seed": SEED})


@pytest.fixture(scope="module")
def split(cfg):
    data, truth = load_or_generate(cfg)
    train, test = split_dataset(cfg, data)
    return train, test, truth


@pytest.fixture(scope="module")
def vb_fit(cfg, split):
    train = split[0]
    start = time.perf_counter()
    state, rep = run_vb(train, ModelConfig(10, 1.0), tol=1e-6)
    summary = estimate_truncation(state, data=train)
    return state, rep, summary, time.perf_counter() - start


def test_criterion_1_component_recovery(split, vb_fit):
    truth = split[2]
    _, _, summary, seconds = vb_fit
    atoms = truth.measure.atoms
    weights = truth.measure.weights
    nearest = [int(np.argmin(np.abs(atoms - loc))) for loc in summary.locations]
    loc_err = max(abs(loc - atoms[k]) for loc, k in zip(summary.locations, nearest))
    w_err = max(abs(w - weights[k]) for w, k in zip(summary.weights, nearest))
    ok = (summary.count == 5 and len(set(nearest)) == 5 and loc_err <= 0.3 and w_err <= 0.08
          and seconds < 10.0)
    report(1, "component recovery", ok,
           f"count={summary.count} (need 5), max |location err|={loc_err:.3f} (<=0.3), "
           f"max |weight err|={w_err:.3f} (<=0.08), runtime={seconds:.2f}s (<10s)")


def test_criterion_2_vb_iterations(vb_fit):
    rep = vb_fit[1]
    ok = rep.converged and rep.iterations <= 100
    report(2, "VB convergence speed", ok, f"converged={rep.converged} in {rep.iterations} iterations (<=100)")


def test_criterion_3_predictive_agreement(cfg, split, vb_fit):
    train, test, _ = split
    start = time.perf_counter()
    trace = run_chain("blocked", train, ModelConfig(10, 1.0), cfg.stage_rng("blocked"), total=10_000,
                      burnin_frac=0.8, stride=25)
    groups = held_out_groups(test)
    rng = cfg.stage_rng("predict")
    vb_vals = [r.log_predictive for r in predict_groups("vb", vb_fit[0], groups)]
    gibbs_vals = [r.log_predictive for r in predict_groups("blocked", trace, groups, rng)]
    seconds = time.perf_counter() - start
    m_vb, m_gibbs = float(np.mean(vb_vals)), float(np.mean(gibbs_vals))
    rel = abs(m_vb - m_gibbs) / abs(m_gibbs)
    cmp = compare_methods(gibbs_vals, vb_vals)
    ok = len(groups) == 10 and rel <= 0.02 and cmp.p_pooled > 0.05 and seconds < 600
    report(3, "predictive agreement", ok,
           f"mean VB={m_vb:.3f}, mean blocked={m_gibbs:.3f}, relative diff={rel:.4f} (<=0.02), "
           f"p={cmp.p_pooled:.4f} (>0.05), runtime={seconds:.1f}s (<600s)")


def test_criterion_4_published_t_tests():
    bv = compare_methods(PUBLISHED_BLOCKED, PUBLISHED_VB).p_pooled
    pb = compare_methods(PUBLISHED_POLYA, PUBLISHED_BLOCKED).p_pooled
    ok = abs(bv - 0.9923) <= 0.01 and abs(pb - 0.5049) <= 0.01
    report(4, "published t-test reproduction", ok,
           f"blocked vs VB p={bv:.4f} (0.9923+-0.01), Polya vs blocked p={pb:.4f} (0.5049+-0.01), "
           f"two-sample pooled t")


def test_criterion_5_component_count_posterior(cfg, split):
    train = split[0]
    trace = run_chain("polya", train, ModelConfig(10, 1.0), cfg.stage_rng("polya"), total=20_000,
                      burnin_frac=0.8, stride=25, s_aux=3)
    hist = count_components(trace)
    mode = max(hist, key=hist.get)
    mass = sum(hist.get(k, 0.0) for k in (5, 6, 7))
    ok = mode in (5, 6, 7) and mass >= 0.75
    shown = ", ".join(f"{k}:{v:.3f}" for k, v in sorted(hist.items()))
    report(5, "component-count posterior", ok,
           f"mode={mode} (in 5..7), mass on 5..7={mass:.3f} (>=0.75), {len(trace)} retained, "
           f"histogram {{{shown}}}")


def test_criterion_6_speed(cfg):
    rep = benchmark(cfg, engines=["vb", "blocked"], blocked_total=100_000)
    ratio = rep["ratios"]["blocked/vb"]
    extrapolated = rep["extrapolated_ratios"]["blocked_reference_scale/vb"]
    ok = ratio >= 100
    report(6, "speed", ok,
           f"blocked(1e5 scans)/VB wall time={ratio:.0f}x (>=100x); extrapolated to 2.5e6 scans "
           f"{extrapolated:.0f}x (reported, consistent with >=1e3x: {extrapolated >= 1e3})")


def _outer(a, b2, g, h):
    a = np.atleast_1d(float(a))
    return VBState(np.ones((1, 1)), a, np.array([b2]), np.ones(1), np.ones(1), 0.0, 1.0, 1.0, 1.0, g, h)


def test_criterion_7_lower_bound():
    gen = np.random.default_rng(2024)
    worst = -math.inf
    for _ in range(20):
        a = gen.normal(0, 2)
        b2 = gen.uniform(0.05, 2)
        g = gen.uniform(1, 10)
        h = gen.uniform(0.5, 10)
        n = int(gen.integers(1, 6))
        y = gen.normal(gen.normal(a, 1), math.sqrt(h / g), n)
        outer = _outer(a, b2, g, h)
        held = HeldOutGroup(y)
        bound = component_bound(held, 0, outer, inner_vb(held, 0, outer, tol=1e-12))
        exact = log_component_marginal_quadrature(y, a, b2, g, h)
        worst = max(worst, bound - exact)
    report(7, "lower-bound property", worst <= 1e-4,
           f"max (F_b - ln L_b) over 20 instances={worst:.3e} (<=1e-4)")


def test_criterion_8_oracle_equivalence():
    groups = [[0.1, 0.6], [1.9, 2.4]]
    ynew = [1.0, 1.3]
    mu, tau2, sigma2, alpha = 1.0, 1.5, 0.4, 1.0
    exact = math.exp(blocked_two_atom_predictive(groups, ynew, alpha, mu, tau2, sigma2))
    w = np.array([0.5, 1.0])
    init = BlockedState(np.array([0, 1]), np.array([0.3, 2.0]), w, w * [1, 0.5], mu, tau2, sigma2)
    trace = run_chain("blocked", GroupedDataset.from_groups(groups), ModelConfig(2, alpha), Rng(8),
                      total=100_000, burnin_frac=0.0, stride=1, init=init, fixed=("mu", "tau2", "sigma2"))
    dens = np.exp(state_log_densities(trace, HeldOutGroup(ynew)))
    batches = dens[: dens.size // 50 * 50].reshape(50, -1).mean(axis=1)
    se = batches.std(ddof=1) / math.sqrt(50)
    z = abs(dens.mean() - exact) / se

    gen = np.random.default_rng(88)
    worst_step = math.inf
    for _ in range(20):
        J = int(gen.integers(2, 6))
        data = GroupedDataset.from_groups(
            [gen.normal(gen.normal(0, 3), 1.0, int(gen.integers(1, 6))) for _ in range(J)])
        _, rep = run_vb(data, ModelConfig(4, float(gen.uniform(0.3, 2.0))), init="quantile", tol=1e-9,
                        max_iter=300, track_elbo=True)
        worst_step = min(worst_step, float(np.min(np.diff(rep.elbo_trace))))
    ok = z <= 3.0 and worst_step >= -1e-8
    report(8, "oracle equivalence", ok,
           f"blocked predictive {dens.mean():.5f} vs exact {exact:.5f}, |diff|/SE={z:.2f} (<=3); "
           f"min ELBO step over 20 instances={worst_step:.2e} (>=-1e-8)")


def test_criterion_9_invariants():
    gen = np.random.default_rng(99)
    failures = {}

    def check(name, cond):
        if not cond:
            failures[name] = failures.get(name, 0) + 1

    for i in range(1000):
        J = int(gen.integers(2, 6))
        data = GroupedDataset.from_groups(
            [gen.normal(gen.normal(0, 3), 1.0, int(gen.integers(1, 6))) for _ in range(J)])
        B = int(gen.integers(4, 8))
        model = ModelConfig(B, float(gen.uniform(0.2, 3.0)))
        state = init_state(data, model, policy=str(gen.choice(["gap", "quantile"])))
        state.a = gen.normal(0, 3, B)
        state, _ = vb_step(state, data, model)
        check("responsibility simplex", np.max(np.abs(state.r.sum(axis=1) - 1)) < 1e-12 and np.all(state.r >= 0))
        check("weight normalization", abs(expected_weights(state.c, state.d).sum() - 1) < 1e-10)
        sticks = np.append(gen.uniform(1e-6, 1, B - 1), 1.0)
        check("weight normalization", abs(stick_break(sticks).sum() - 1) < 1e-10)
        check("parameter positivity", np.all(state.b2 > 0) and np.all(state.c > 0) and np.all(state.d > 0)
              and min(state.g, state.h, state.k, state.s) > 0)
        x = math.exp(gen.uniform(math.log(1e-2), math.log(1e4)))
        check("digamma identity", abs(digamma(x + 1) - digamma(x) - 1 / x) < 1e-10)
        check("ln-gamma identity", abs(ln_gamma(x + 1) - ln_gamma(x) - math.log(x)) < 1e-13 * max(1, abs(ln_gamma(x))))
        u = gen.uniform(0.01, 0.99)
        check("digamma identity", abs(digamma(1 - u) - digamma(u) - math.pi / math.tan(math.pi * u)) < 1e-10)
        runs = [run_chain("blocked", data, ModelConfig(4, 1.0), Rng(i), total=3, burnin_frac=0.0, stride=1)
                for _ in range(2)]
        check("determinism", all(np.array_equal(s.atoms, t.atoms) and np.array_equal(s.c, t.c)
                                 for s, t in zip(runs[0].states, runs[1].states)))
    report(9, "invariant suites", not failures,
           "1000 randomized cases; simplex, normalization, positivity, digamma/ln-gamma identities, "
           f"determinism; failures={failures or 'none'}")
