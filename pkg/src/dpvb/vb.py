"""Coordinate-ascent variational Bayes for the truncated-DP random-effects model.

The approximating posterior factorizes as

    q(c) q(w) q(zeta) q(sigma^2) q(mu | tau^2) q(tau^2)

with q(c_j) multinomial(r_j), q(w_b) = Beta(c_b, d_b), q(zeta_b) = N(a_b, b2_b),
q(sigma^2) = IG(g, h), q(mu | tau^2) = N(e, tau^2 / f2), q(tau^2) = IG(k, s).
The last stick fraction is fixed at w_B = 1, so q(w_B) carries bookkeeping
parameters only.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConfigError, GroupedDataset, ModelConfig, expected_weights
from .special import digamma, ln_gamma, log_sum_exp

LOG_2PI = math.log(2.0 * math.pi)
S_FLOOR = 1e-30


@dataclass(frozen=True)
class PrintedFormulas:
    """Switches that select the update formulas exactly as typeset.

    All default to False, i.e. the forms that follow from the model:

    stick_digamma
        use psi(c_l) instead of psi(d_l) for E[log(1 - w_l)] in the
        responsibilities, and keep the psi(c_B) - psi(c_B + d_B) term for
        the last component.
    stick_index
        sum r_jb instead of r_jl inside d_b.
    sigma_scale
        add b2_b once per group instead of n_j * b2_b inside h.
    """

    stick_digamma: bool = False
    stick_index: bool = False
    sigma_scale: bool = False


@dataclass
class VBState:
    r: np.ndarray
    a: np.ndarray
    b2: np.ndarray
    c: np.ndarray
    d: np.ndarray
    e: float
    f2: float
    k: float
    s: float
    g: float
    h: float

    @property
    def truncation(self) -> int:
        return int(self.a.size)

    def copy(self) -> "VBState":
        return dataclasses.replace(
            self, r=self.r.copy(), a=self.a.copy(), b2=self.b2.copy(),
            c=self.c.copy(), d=self.d.copy())

    def expected_weights(self) -> np.ndarray:
        return expected_weights(self.c, self.d)

    def scalars(self) -> np.ndarray:
        """Every scalar parameter in a fixed order (r excluded)."""
        return np.concatenate([self.a, self.b2, self.c, self.d,
                               [self.e, self.f2, self.k, self.s, self.g, self.h]])

    def to_json(self) -> dict:
        return {
            "r": self.r.tolist(),
            "a": self.a.tolist(),
            "b2": self.b2.tolist(),
            "c": self.c.tolist(),
            "d": self.d.tolist(),
            "e": self.e,
            "f2": self.f2,
            "k": self.k,
            "s": self.s,
            "g": self.g,
            "h": self.h,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VBState":
        arr = {key: np.asarray(obj[key], dtype=float) for key in ("r", "a", "b2", "c", "d")}
        return cls(**arr, **{key: float(obj[key]) for key in ("e", "f2", "k", "s", "g", "h")})


@dataclass
class VBReport:
    converged: bool
    iterations: int
    max_rel_change: float
    wall_time_seconds: float
    expected_weights: np.ndarray
    a: np.ndarray
    b2: np.ndarray
    g: float
    h: float
    k: float
    s: float
    s_floor_hits: int = 0
    elbo_trace: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "max_rel_change": self.max_rel_change,
            "wall_time_seconds": self.wall_time_seconds,
            "expected_weights": self.expected_weights.tolist(),
            "a": self.a.tolist(),
            "b2": self.b2.tolist(),
            "sigma2": {"g": self.g, "h": self.h, "mean": self.h / (self.g - 1) if self.g > 1 else None},
            "tau2": {"k": self.k, "s": self.s, "mean": self.s / (self.k - 1) if self.k > 1 else None},
            "s_floor_hits": self.s_floor_hits,
            "elbo_trace": list(self.elbo_trace),
        }


def check_truncation(truncation: int) -> None:
    # k = B/2 - 3/2 must be positive for q(tau^2) to be proper
    if truncation < 4:
        raise ConfigError(f"variational engine needs truncation >= 4, got {truncation}")


def _sq_dev(data: GroupedDataset, a: np.ndarray) -> np.ndarray:
    """(J, B) matrix of sum_i (y_ij - a_b)^2."""
    n = data.n[:, None]
    # centered form avoids cancellation in sumsq - 2 a sum + n a^2
    return data.css[:, None] + n * (data.means[:, None] - a[None, :]) ** 2


def expected_log_sticks(c, d, printed: bool = False):
    """(E[log w_b], E[log(1 - w_b)]) under q(w_b) = Beta(c_b, d_b)."""
    dig_cd = digamma(c + d)
    log_w = digamma(c) - dig_cd
    if printed:
        log_1mw = log_w.copy()
    else:
        log_1mw = digamma(d) - dig_cd
        log_w = log_w.copy()
        log_w[-1] = 0.0
    return log_w, log_1mw


def expected_log_weights(c, d, printed: bool = False) -> np.ndarray:
    log_w, log_1mw = expected_log_sticks(np.asarray(c, float), np.asarray(d, float), printed)
    return log_w + np.concatenate([[0.0], np.cumsum(log_1mw[:-1])])


def update_responsibilities(state: VBState, data: GroupedDataset,
                            printed: PrintedFormulas = PrintedFormulas()) -> np.ndarray:
    prec = state.g / state.h
    logits = -0.5 * prec * (_sq_dev(data, state.a) + data.n[:, None] * state.b2[None, :])
    logits = logits + expected_log_weights(state.c, state.d, printed.stick_digamma)[None, :]
    return np.exp(logits - log_sum_exp(logits, axis=1)[:, None])


def update_atoms(state: VBState, data: GroupedDataset) -> tuple[np.ndarray, np.ndarray]:
    prec_sigma = state.g / state.h
    prec_tau = state.k / state.s
    r = state.r
    precision = prec_sigma * (r * data.n[:, None]).sum(axis=0) + prec_tau
    a = (prec_sigma * (r * data.sums[:, None]).sum(axis=0) + prec_tau * state.e) / precision
    return a, 1.0 / precision


def update_sticks(state: VBState, alpha: float,
                  printed: PrintedFormulas = PrintedFormulas()) -> tuple[np.ndarray, np.ndarray]:
    mass = state.r.sum(axis=0)
    c = mass + 1.0
    if printed.stick_index:
        B = mass.size
        d = alpha + mass * (B - 1 - np.arange(B))
    else:
        tail = np.concatenate([np.cumsum(mass[::-1])[::-1][1:], [0.0]])
        d = alpha + tail
    d[-1] = alpha
    return c, d


def update_mu_tau(state: VBState) -> tuple[float, float, float, float, bool]:
    """Returns (e, f2, k, s, floored) where ``floored`` flags the s guard."""
    B = state.truncation
    check_truncation(B)
    e = float(state.a.mean())
    s = 0.5 * float(np.sum((state.a - e) ** 2 + state.b2))
    floored = s < S_FLOOR
    return e, float(B), B / 2.0 - 1.5, max(s, S_FLOOR), floored


def update_sigma(state: VBState, data: GroupedDataset,
                 printed: PrintedFormulas = PrintedFormulas()) -> tuple[float, float]:
    g = data.n_total / 2.0
    spread = data.n[:, None] * state.b2[None, :]
    if printed.sigma_scale:
        spread = np.broadcast_to(state.b2[None, :], spread.shape)
    h = 0.5 * float(np.sum(state.r * (_sq_dev(data, state.a) + spread)))
    return g, h


def gap_clusters(means: np.ndarray, max_clusters: int, threshold: float) -> np.ndarray:
    """Label sorted 1-d values by cutting at gaps wider than ``threshold``.

    At most ``max_clusters - 1`` cuts are made (the widest ones).  Labels are
    ordered by decreasing cluster size, ties broken by location.
    """
    order = np.argsort(means, kind="stable")
    gaps = np.diff(means[order])
    cuts = np.flatnonzero(gaps > threshold)
    if cuts.size > max_clusters - 1:
        cuts = np.sort(np.argsort(-gaps, kind="stable")[:max_clusters - 1])
    sorted_labels = np.zeros(means.size, dtype=int)
    for cut in cuts:
        sorted_labels[cut + 1:] += 1
    labels = np.empty(means.size, dtype=int)
    labels[order] = sorted_labels
    K = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=K)
    locs = np.bincount(labels, weights=means, minlength=K) / sizes
    rank = np.lexsort((locs, -sizes))
    relabel = np.empty(K, dtype=int)
    relabel[rank] = np.arange(K)
    return relabel[labels]


def init_state(data: GroupedDataset, config: ModelConfig, policy: str = "gap",
               gap_z: float = 5.0) -> VBState:
    """Deterministic data-driven starting point.

    ``policy="gap"`` cuts the sorted group means wherever neighbours differ by
    more than ``gap_z`` standard errors of a group mean, puts one component on
    each cut-out cluster (largest first) with hard responsibilities, and parks
    the remaining components, empty, at the grand mean.

    ``policy="quantile"`` puts the B atoms at quantiles of the group means with
    uniform responsibilities.  Several atoms then share one cluster and the
    coordinate ascent needs many more sweeps to separate them.
    """
    B = config.truncation
    J = data.n_groups
    check_truncation(B)
    means = data.means
    pooled = data.pooled_variance()
    spread = float(np.var(means)) if J > 1 else pooled
    spread = spread if spread > 0 else pooled
    g = data.n_total / 2.0
    k = B / 2.0 - 1.5
    state = VBState(
        r=np.full((J, B), 1.0 / B),
        a=np.quantile(means, (np.arange(B) + 0.5) / B),
        b2=np.full(B, pooled),
        c=np.full(B, 1.0 + J / B),
        d=config.alpha + J * (B - 1 - np.arange(B)) / B,
        e=float(means.mean()),
        f2=float(B),
        k=k,
        s=k * spread,
        g=g,
        h=g * pooled,
    )
    if policy == "quantile":
        return state
    if policy != "gap":
        raise ConfigError(f"unknown initialization policy {policy!r}")
    threshold = gap_z * math.sqrt(pooled / float(np.median(data.n)))
    labels = gap_clusters(means, B, threshold)
    K = int(labels.max()) + 1
    state.a = np.full(B, float(means.mean()))
    state.a[:K] = np.bincount(labels, weights=means, minlength=K) / np.bincount(labels, minlength=K)
    state.r = np.zeros((J, B))
    state.r[np.arange(J), labels] = 1.0
    state.c, state.d = update_sticks(state, config.alpha)
    return state


def vb_step(state: VBState, data: GroupedDataset, config: ModelConfig,
            printed: PrintedFormulas = PrintedFormulas()) -> tuple[VBState, bool]:
    """One full cycle of the five updates; returns the new state and the s-floor flag."""
    new = state.copy()
    new.r = update_responsibilities(new, data, printed)
    new.a, new.b2 = update_atoms(new, data)
    new.c, new.d = update_sticks(new, config.alpha, printed)
    new.e, new.f2, new.k, new.s, floored = update_mu_tau(new)
    new.g, new.h = update_sigma(new, data, printed)
    return new, floored


def max_relative_change(old: VBState, new: VBState) -> float:
    x0, x1 = old.scalars(), new.scalars()
    return float(np.max(np.abs(x1 - x0) / (np.abs(x0) + 1e-10)))


def run_vb(data: GroupedDataset, config: ModelConfig, init: VBState | str | None = None,
           tol: float = 1e-6, max_iter: int = 1000,
           printed: PrintedFormulas = PrintedFormulas(),
           track_elbo: bool = False) -> tuple[VBState, VBReport]:
    """Iterate the update cycle until the largest relative parameter change is below ``tol``.

    ``init`` is a starting VBState or an :func:`init_state` policy name.  Hitting ``max_iter`` is reported via ``converged=False``, not raised.
    """
    check_truncation(config.truncation)
    if not tol > 0:
        raise ConfigError("tol must be > 0")
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    if isinstance(init, VBState):
        state = init.copy()
    else:
        state = init_state(data, config, policy=init or "gap")
    if state.truncation != config.truncation or state.r.shape[0] != data.n_groups:
        raise ConfigError("initial state does not match data/truncation")

    start = time.perf_counter()
    elbos = [elbo(state, data, config)] if track_elbo else []
    floor_hits = 0
    change = math.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new, floored = vb_step(state, data, config, printed)
        floor_hits += floored
        change = max_relative_change(state, new)
        state = new
        if track_elbo:
            elbos.append(elbo(state, data, config))
        if change < tol:
            converged = True
            break
    wall = time.perf_counter() - start

    report = VBReport(
        converged=converged, iterations=iterations, max_rel_change=change,
        wall_time_seconds=wall, expected_weights=state.expected_weights(),
        a=state.a.copy(), b2=state.b2.copy(), g=state.g, h=state.h, k=state.k, s=state.s,
        s_floor_hits=floor_hits, elbo_trace=elbos,
    )
    return state, report


def _beta_entropy(c, d):
    return (ln_gamma(c) + ln_gamma(d) - ln_gamma(c + d)
            - (c - 1) * digamma(c) - (d - 1) * digamma(d) + (c + d - 2) * digamma(c + d))


def _inv_gamma_entropy(shape, scale):
    return shape + math.log(scale) + ln_gamma(shape) - (1 + shape) * digamma(shape)


def elbo(state: VBState, data: GroupedDataset, config: ModelConfig) -> float:
    """Evidence lower bound E_q[log p(y, c, w, zeta, sigma^2, mu, tau^2)] - E_q[log q].

    The improper prior 1/sigma^2 (flat in mu and tau^2) enters unnormalized,
    so the bound is defined up to that fixed additive convention.
    """
    B = state.truncation
    alpha = config.alpha
    r = state.r
    e_log_sigma2 = math.log(state.h) - digamma(state.g)
    e_prec_sigma = state.g / state.h
    e_log_tau2 = math.log(state.s) - digamma(state.k)
    e_prec_tau = state.k / state.s

    # likelihood
    quad = _sq_dev(data, state.a) + data.n[:, None] * state.b2[None, :]
    loglik = np.sum(r * (-0.5 * data.n[:, None] * (LOG_2PI + e_log_sigma2) - 0.5 * e_prec_sigma * quad))
    # labels given sticks
    log_c = np.sum(r * expected_log_weights(state.c, state.d)[None, :])
    # stick prior Beta(1, alpha), b < B
    _, log_1mw = expected_log_sticks(state.c, state.d)
    log_sticks = np.sum(math.log(alpha) + (alpha - 1.0) * log_1mw[:-1])
    # atoms given base N(mu, tau^2); E[(zeta-mu)^2/tau^2] = (k/s)((a-e)^2 + b2) + 1/f2
    dev = e_prec_tau * ((state.a - state.e) ** 2 + state.b2) + 1.0 / state.f2
    log_atoms = np.sum(-0.5 * (LOG_2PI + e_log_tau2) - 0.5 * dev)
    log_prior_sigma = -e_log_sigma2

    with np.errstate(divide="ignore", invalid="ignore"):
        ent_c = -np.sum(np.where(r > 0, r * np.log(r), 0.0))
    ent_w = np.sum(_beta_entropy(state.c[:-1], state.d[:-1])) if B > 1 else 0.0
    ent_zeta = np.sum(0.5 * (np.log(state.b2) + LOG_2PI + 1.0))
    ent_sigma = _inv_gamma_entropy(state.g, state.h)
    ent_mu = 0.5 * (LOG_2PI + 1.0 - math.log(state.f2) + e_log_tau2)
    ent_tau = _inv_gamma_entropy(state.k, state.s)

    return float(loglik + log_c + log_sticks + log_atoms + log_prior_sigma
                 + ent_c + ent_w + ent_zeta + ent_sigma + ent_mu + ent_tau)


def save_state(state: VBState, path) -> None:
    Path(path).write_text(json.dumps(state.to_json(), indent=2) + "\n", encoding="utf-8")


def load_state(path) -> VBState:
    return VBState.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
