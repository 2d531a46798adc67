"""Posterior predictive density of a new group.

Two routes:

* Monte Carlo average of p(y* | state) over a Gibbs trace;
* the variational route, which lower-bounds each component's marginal
  likelihood L_b = int f(y* | zeta, sigma^2) dQ(zeta_b) dQ(sigma^2) by a second,
  inner mean-field fit and mixes exp(F_b) with the expected stick weights.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .gibbs import BlockedState, PolyaState, Trace
from .model import expected_weights
from .special import DomainError, Rng, digamma, ln_gamma, log_sum_exp
from .vb import VBState

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class HeldOutGroup:
    y: np.ndarray
    group_id: str = ""
    n: int = field(init=False)
    mean: float = field(init=False)
    css: float = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if not np.all(np.isfinite(y)):
            raise DomainError("held-out observations must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "n", int(y.size))
        mean = float(y.mean()) if y.size else 0.0
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "css", float(np.sum((y - mean) ** 2)))

    def sq_dev(self, center):
        """sum_i (y_i - center)^2, vectorized over ``center``."""
        return self.css + self.n * (self.mean - np.asarray(center, dtype=float)) ** 2


def normal_loglik(y: HeldOutGroup, atoms, sigma2: float):
    """log prod_i phi(y_i; atom, sigma2) for each atom."""
    return -0.5 * y.n * (LOG_2PI + math.log(sigma2)) - 0.5 * y.sq_dev(atoms) / sigma2


@dataclass
class PredictiveResult:
    group_id: str
    method: str
    log_predictive: float
    wall_time_seconds: float
    diagnostics: dict = field(default_factory=dict)


def _log_density_blocked(state: BlockedState, y: HeldOutGroup) -> float:
    with np.errstate(divide="ignore"):
        log_v = np.log(state.v)
    return log_sum_exp(log_v + normal_loglik(y, state.atoms, state.sigma2))


def _log_density_polya(state: PolyaState, y: HeldOutGroup, alpha: float, n_groups: int,
                       rng: Rng, n_new_draws: int) -> float:
    counts = np.bincount(state.c, minlength=state.atoms.size)
    log_norm = math.log(alpha + n_groups)
    occupied = np.log(counts) - log_norm + normal_loglik(y, state.atoms, state.sigma2)
    # new-table mass: Monte Carlo over the base N(mu, tau2)
    fresh = rng.gen.normal(state.mu, math.sqrt(state.tau2), n_new_draws)
    new = (math.log(alpha) - log_norm
           + log_sum_exp(normal_loglik(y, fresh, state.sigma2)) - math.log(n_new_draws))
    return log_sum_exp(np.append(occupied, new))


def state_log_densities(trace: Trace, y: HeldOutGroup, rng: Rng | None = None,
                        n_new_draws: int = 32) -> np.ndarray:
    """log p(y* | state) for every retained state."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    if trace.engine == "blocked":
        return np.array([_log_density_blocked(s, y) for s in trace.states])
    rng = rng if rng is not None else Rng(0)
    return np.array([_log_density_polya(s, y, trace.alpha, trace.n_groups, rng, n_new_draws)
                     for s in trace.states])


def predictive_mcmc(trace: Trace, y: HeldOutGroup, rng: Rng | None = None,
                    n_new_draws: int = 32) -> float:
    """log of the trace average of p(y* | state)."""
    values = state_log_densities(trace, y, rng, n_new_draws)
    return log_sum_exp(values) - math.log(values.size)


@dataclass
class InnerVBState:
    """Variational factors v(zeta_b) = N(A, B2) and v(sigma^2) = IG(G, H)."""

    component: int
    A: float
    B2: float
    G: float
    H: float
    iterations: int
    converged: bool


def inner_vb(y: HeldOutGroup, b: int, outer: VBState, tol: float = 1e-8,
             max_iter: int = 500) -> InnerVBState:
    """Mean-field fit of (zeta_b, sigma^2) to y* with the outer q factors as prior."""
    a, b2, g, h = float(outer.a[b]), float(outer.b2[b]), outer.g, outer.h
    G = g + y.n / 2.0
    A, B2 = a, b2
    H = h + 0.5 * (float(y.sq_dev(A)) + y.n * B2)
    total = y.n * y.mean
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prec = (G / H) * y.n + 1.0 / b2
        A_new = ((G / H) * total + a / b2) / prec
        B2 = 1.0 / prec
        H_new = h + 0.5 * (float(y.sq_dev(A_new)) + y.n * B2)
        change = max(abs(A_new - A) / (abs(A) + 1e-10), abs(H_new - H) / (abs(H) + 1e-10))
        A, H = A_new, H_new
        if change < tol:
            converged = True
            break
    return InnerVBState(b, A, B2, G, H, it, converged)


def component_bound(y: HeldOutGroup, b: int, outer: VBState, inner: InnerVBState,
                    printed: bool = False) -> float:
    """Lower bound F_b on log L_b.

    ``printed=True`` evaluates the expression as typeset (no +1/2 in the
    normal term, both Gamma normalizers with the same sign, and -n*B2 in the
    likelihood term); it is not a valid bound and is kept for comparison.
    """
    a, b2, g, h = float(outer.a[b]), float(outer.b2[b]), outer.g, outer.h
    A, B2, G, H = inner.A, inner.B2, inner.G, inner.H
    e_log_sigma2 = math.log(H) - digamma(G)
    if printed:
        normal = 0.5 * math.log(B2 / b2) - ((A - a) ** 2 + B2) / (2.0 * b2)
        inv_gamma = ((G - g) * e_log_sigma2 + G * (1.0 - h / H)
                     + g * math.log(h) - ln_gamma(g) + G * math.log(H) - ln_gamma(G))
        lik = -0.5 * y.n * (LOG_2PI + e_log_sigma2) - 0.5 * (G / H) * (float(y.sq_dev(A)) - y.n * B2)
        return float(normal + inv_gamma + lik)
    normal = 0.5 * math.log(B2 / b2) + 0.5 - ((A - a) ** 2 + B2) / (2.0 * b2)
    inv_gamma = ((G - g) * e_log_sigma2 + G * (1.0 - h / H)
                 + g * math.log(h) - G * math.log(H) - ln_gamma(g) + ln_gamma(G))
    lik = -0.5 * y.n * (LOG_2PI + e_log_sigma2) - 0.5 * (G / H) * (float(y.sq_dev(A)) + y.n * B2)
    return float(normal + inv_gamma + lik)


def component_bounds(outer: VBState, y: HeldOutGroup, tol: float = 1e-8,
                     max_iter: int = 500) -> tuple[np.ndarray, list[InnerVBState]]:
    inners = [inner_vb(y, b, outer, tol, max_iter) for b in range(outer.truncation)]
    return np.array([component_bound(y, b, outer, inner) for b, inner in enumerate(inners)]), inners


def predictive_vb(outer: VBState, y: HeldOutGroup, tol: float = 1e-8, max_iter: int = 500) -> float:
    """log F = log sum_b E[v_b] exp(F_b)."""
    bounds, _ = component_bounds(outer, y, tol, max_iter)
    return log_sum_exp(np.log(expected_weights(outer.c, outer.d)) + bounds)


def predict_groups(method: str, fitted, groups: list[HeldOutGroup], rng: Rng | None = None,
                   n_new_draws: int = 32) -> list[PredictiveResult]:
    """Evaluate every held-out group with one fitted engine (a VBState or a Trace)."""
    results = []
    for y in groups:
        start = time.perf_counter()
        if isinstance(fitted, VBState):
            bounds, inners = component_bounds(fitted, y)
            value = log_sum_exp(np.log(fitted.expected_weights()) + bounds)
            diag = {"inner_converged": all(i.converged for i in inners),
                    "inner_max_iterations": max(i.iterations for i in inners)}
        else:
            values = state_log_densities(fitted, y, rng, n_new_draws)
            value = log_sum_exp(values) - math.log(values.size)
            diag = {"retained_states": int(values.size)}
        results.append(PredictiveResult(y.group_id, method, float(value),
                                        time.perf_counter() - start, diag))
    return results


@dataclass
class Comparison:
    mean_a: float
    mean_b: float
    t_pooled: float
    p_pooled: float
    t_welch: float
    p_welch: float
    df_welch: float
    degenerate: bool = False

    def to_json(self) -> dict:
        return dict(self.__dict__)


def compare_methods(values_a, values_b) -> Comparison:
    """Two-sided two-sample t-tests (pooled variance and Welch)."""
    a = np.asarray(values_a, dtype=float)
    b = np.asarray(values_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    na, nb = a.size, b.size
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    diff = ma - mb
    if va == 0.0 and vb == 0.0:
        if diff == 0.0:
            return Comparison(ma, mb, 0.0, 1.0, 0.0, 1.0, float(na + nb - 2), degenerate=True)
        t = math.copysign(math.inf, diff)
        return Comparison(ma, mb, t, 0.0, t, 0.0, float(na + nb - 2), degenerate=True)

    df_pooled = na + nb - 2
    pooled = ((na - 1) * va + (nb - 1) * vb) / df_pooled
    t_pooled = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    se2_a, se2_b = va / na, vb / nb
    t_welch = diff / math.sqrt(se2_a + se2_b)
    df_welch = (se2_a + se2_b) ** 2 / (se2_a ** 2 / (na - 1) + se2_b ** 2 / (nb - 1))
    p_pooled = float(2.0 * stats.t.sf(abs(t_pooled), df_pooled))
    p_welch = float(2.0 * stats.t.sf(abs(t_welch), df_welch))
    return Comparison(ma, mb, t_pooled, p_pooled, t_welch, p_welch, float(df_welch))
