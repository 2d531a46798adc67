"""Gibbs samplers for the DP random-effects model.

Two engines share the same hyperparameter steps:

* ``polya``: marginal sampler over the partition, with auxiliary atoms for
  the non-conjugate base distribution (Neal's algorithm 8).
* ``blocked``: truncated stick-breaking sampler that keeps the weights.

Labels are 0-based.  The prior on (sigma^2, mu, tau^2) is proportional to
1/sigma^2, which gives

    sigma^2 | . ~ IG(N/2, SS/2)
    mu | .      ~ N(mean(zeta), tau^2 / K)
    tau^2 | .   ~ IG(K/2 - 1, sum (zeta - mu)^2 / 2)

with K the number of atoms entering the base density.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .model import ConfigError, GroupedDataset, ModelConfig, stick_break
from .special import (
    Rng,
    categorical_from_log,
    sample_beta,
    sample_categorical_rows,
    sample_inverse_gamma,
    sample_normal,
)

HYPERPARAMETERS = frozenset({"mu", "tau2", "sigma2"})
TAU2_CEILING = 1e100


class ChainDivergence(RuntimeError):
    """A hyperparameter draw left the representable range."""


@dataclass
class PolyaState:
    c: np.ndarray
    atoms: np.ndarray
    mu: float
    tau2: float
    sigma2: float

    @property
    def n_components(self) -> int:
        return int(self.atoms.size)

    def check(self) -> None:
        K = self.atoms.size
        if K == 0 or set(np.unique(self.c).tolist()) != set(range(K)):
            raise AssertionError("labels must be exactly 0..K-1, each used")
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise AssertionError("variances must be positive")

    def copy(self) -> "PolyaState":
        return replace(self, c=self.c.copy(), atoms=self.atoms.copy())

    def to_json(self) -> dict:
        return {"c": self.c.tolist(), "atoms": self.atoms.tolist(),
                "mu": self.mu, "tau2": self.tau2, "sigma2": self.sigma2}

    @classmethod
    def from_json(cls, obj: dict) -> "PolyaState":
        return cls(np.asarray(obj["c"], dtype=int), np.asarray(obj["atoms"], dtype=float),
                   float(obj["mu"]), float(obj["tau2"]), float(obj["sigma2"]))


@dataclass
class BlockedState:
    c: np.ndarray
    atoms: np.ndarray
    w: np.ndarray
    v: np.ndarray
    mu: float
    tau2: float
    sigma2: float

    @property
    def n_components(self) -> int:
        """Number of occupied components."""
        return int(np.unique(self.c).size)

    def check(self) -> None:
        if self.w[-1] != 1.0:
            raise AssertionError("last stick fraction must be 1")
        if np.max(np.abs(self.v - stick_break(self.w))) > 1e-10 or abs(self.v.sum() - 1) > 1e-10:
            raise AssertionError("weights out of sync with stick fractions")
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise AssertionError("variances must be positive")

    def copy(self) -> "BlockedState":
        return replace(self, c=self.c.copy(), atoms=self.atoms.copy(), w=self.w.copy(), v=self.v.copy())

    def to_json(self) -> dict:
        return {"c": self.c.tolist(), "atoms": self.atoms.tolist(), "w": self.w.tolist(),
                "v": self.v.tolist(), "mu": self.mu, "tau2": self.tau2, "sigma2": self.sigma2}

    @classmethod
    def from_json(cls, obj: dict) -> "BlockedState":
        return cls(np.asarray(obj["c"], dtype=int), np.asarray(obj["atoms"], dtype=float),
                   np.asarray(obj["w"], dtype=float), np.asarray(obj["v"], dtype=float),
                   float(obj["mu"]), float(obj["tau2"]), float(obj["sigma2"]))


@dataclass
class Trace:
    engine: str
    states: list
    total: int
    burnin: int
    stride: int
    alpha: float
    n_groups: int
    wall_time_seconds: float = 0.0
    seed: int | None = None
    tau2_skips: int = 0

    def __len__(self) -> int:
        return len(self.states)

    def metadata(self) -> dict:
        return {"engine": self.engine, "total": self.total, "burnin": self.burnin,
                "stride": self.stride, "alpha": self.alpha, "n_groups": self.n_groups,
                "retained": len(self.states), "seed": self.seed, "tau2_skips": self.tau2_skips,
                "wall_time_seconds": self.wall_time_seconds}

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for state in self.states:
                fh.write(json.dumps(state.to_json()) + "\n")
            fh.write(json.dumps({"footer": True, **self.metadata()}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Trace":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        footer = json.loads(lines[-1])
        if not footer.get("footer"):
            raise ValueError(f"{path}: missing footer record")
        state_cls = PolyaState if footer["engine"] == "polya" else BlockedState
        states = [state_cls.from_json(json.loads(line)) for line in lines[:-1]]
        return cls(footer["engine"], states, footer["total"], footer["burnin"], footer["stride"],
                   footer["alpha"], footer["n_groups"], footer["wall_time_seconds"],
                   footer.get("seed"), footer.get("tau2_skips", 0))


def _check_fixed(fixed: Iterable[str]) -> frozenset:
    fixed = frozenset(fixed)
    unknown = fixed - HYPERPARAMETERS
    if unknown:
        raise ConfigError(f"unknown hyperparameters to fix: {sorted(unknown)}")
    return fixed


def _label_log_kernel(data: GroupedDataset, atoms: np.ndarray, sigma2: float, rows=None) -> np.ndarray:
    """log prod_i phi(y_ij; atom, sigma2) up to a per-group constant."""
    n = data.n if rows is None else data.n[rows]
    means = data.means if rows is None else data.means[rows]
    return -0.5 * n[:, None] * (means[:, None] - atoms[None, :]) ** 2 / sigma2


def draw_atoms(rng: Rng, data: GroupedDataset, c: np.ndarray, n_atoms: int,
               mu: float, tau2: float, sigma2: float) -> np.ndarray:
    """Normal full conditionals of all atoms; unoccupied ones fall back to N(mu, tau2)."""
    n_k = np.bincount(c, weights=data.n, minlength=n_atoms)
    s_k = np.bincount(c, weights=data.sums, minlength=n_atoms)
    precision = n_k / sigma2 + 1.0 / tau2
    mean = (s_k / sigma2 + mu / tau2) / precision
    return np.asarray(sample_normal(rng, mean, 1.0 / precision), dtype=float)


def _residual_ss(data: GroupedDataset, c: np.ndarray, atoms: np.ndarray) -> float:
    return float(np.sum(data.css + data.n * (data.means - atoms[c]) ** 2))


def draw_hyperparameters(rng: Rng, data: GroupedDataset, c: np.ndarray, atoms: np.ndarray,
                         mu: float, tau2: float, sigma2: float, fixed: frozenset):
    """Draw sigma^2, then mu, then tau^2.  Returns (mu, tau2, sigma2, tau2_skipped)."""
    if "sigma2" not in fixed:
        sigma2 = float(sample_inverse_gamma(rng, data.n_total / 2.0, 0.5 * _residual_ss(data, c, atoms)))
    K = atoms.size
    if "mu" not in fixed:
        mu = float(sample_normal(rng, atoms.mean(), tau2 / K))
    skipped = False
    if "tau2" not in fixed:
        if K < 3:
            # shape K/2 - 1 <= 0: keep the previous tau2
            skipped = True
        else:
            scale = 0.5 * float(np.sum((atoms - mu) ** 2))
            tau2 = float(sample_inverse_gamma(rng, K / 2.0 - 1.0, max(scale, 1e-300)))
            if not tau2 < TAU2_CEILING:
                # flat prior on tau2 with a single occupied cluster: no recurrence
                raise ChainDivergence(f"tau2 diverged ({tau2:.3g}); too few occupied components "
                                      "to identify the base variance")
    return mu, tau2, sigma2, skipped


def polya_scan(state: PolyaState, data: GroupedDataset, config: ModelConfig, s_aux: int,
               rng: Rng, fixed: Iterable[str] = ()) -> tuple[PolyaState, bool]:
    """One scan of the auxiliary-atom Polya-urn sampler.

    Returns the new state and whether the tau^2 draw was skipped (K < 3).
    """
    if s_aux < 1:
        raise ConfigError("s_aux must be >= 1")
    fixed = _check_fixed(fixed)
    alpha = config.alpha
    mu, tau2, sigma2 = state.mu, state.tau2, state.sigma2
    c = state.c.copy()
    atoms = list(state.atoms)
    counts = np.bincount(c, minlength=len(atoms)).tolist()
    log_aux = math.log(alpha / s_aux)
    sd_tau = math.sqrt(tau2)
    scale = 0.5 / sigma2
    gen = rng.gen
    n_list = data.n.tolist()
    mean_list = data.means.tolist()

    for j in range(data.n_groups):
        old = int(c[j])
        counts[old] -= 1
        if counts[old] == 0:
            # singleton: its atom is reused as the first auxiliary
            aux = [atoms.pop(old)]
            counts.pop(old)
            c[c > old] -= 1
            c[j] = -1
            aux.extend(gen.normal(mu, sd_tau, s_aux - 1).tolist())
        else:
            aux = gen.normal(mu, sd_tau, s_aux).tolist()
        K = len(atoms)
        cand = atoms + aux
        prec, ybar = n_list[j] * scale, mean_list[j]
        logw = [math.log(m) for m in counts] + [log_aux] * s_aux
        logw = [lw - prec * (ybar - z) ** 2 for lw, z in zip(logw, cand)]
        pick = categorical_from_log(gen.random(), logw)
        if pick >= K:
            atoms.append(cand[pick])
            counts.append(1)
            c[j] = K
        else:
            counts[pick] += 1
            c[j] = pick

    atoms = draw_atoms(rng, data, c, len(atoms), mu, tau2, sigma2)
    mu, tau2, sigma2, skipped = draw_hyperparameters(rng, data, c, atoms, mu, tau2, sigma2, fixed)
    return PolyaState(c, atoms, mu, tau2, sigma2), skipped


def draw_sticks(rng: Rng, c: np.ndarray, B: int, alpha: float) -> np.ndarray:
    """w_b ~ Beta(M_b + 1, alpha + sum_{l>b} M_l) for b < B, w_B = 1."""
    M = np.bincount(np.asarray(c, dtype=int), minlength=B).astype(float)
    tail = np.concatenate([np.cumsum(M[::-1])[::-1][1:], [0.0]])
    w = np.ones(B)
    if B > 1:
        w[:-1] = sample_beta(rng, M[:-1] + 1.0, alpha + tail[:-1])
        w[:-1] = np.clip(w[:-1], np.finfo(float).tiny, 1.0)
    return w


def blocked_scan(state: BlockedState, data: GroupedDataset, config: ModelConfig, rng: Rng,
                 fixed: Iterable[str] = ()) -> BlockedState:
    """One scan of the truncated stick-breaking (blocked) sampler."""
    fixed = _check_fixed(fixed)
    B = state.atoms.size
    if "tau2" not in fixed and B < 3:
        raise ConfigError("blocked sampler with random tau2 needs truncation >= 3")
    mu, tau2, sigma2 = state.mu, state.tau2, state.sigma2

    with np.errstate(divide="ignore"):
        log_v = np.log(state.v)
    c = sample_categorical_rows(rng, log_v[None, :] + _label_log_kernel(data, state.atoms, sigma2))

    atoms = draw_atoms(rng, data, c, B, mu, tau2, sigma2)

    w = draw_sticks(rng, c, B, config.alpha)
    v = stick_break(w)

    mu, tau2, sigma2, _ = draw_hyperparameters(rng, data, c, atoms, mu, tau2, sigma2, fixed)
    return BlockedState(c, atoms, w, v, mu, tau2, sigma2)


def _nearest_seed(means: np.ndarray, n_seeds: int) -> tuple[np.ndarray, np.ndarray]:
    seeds = np.quantile(means, (np.arange(n_seeds) + 0.5) / n_seeds)
    return np.argmin(np.abs(means[:, None] - seeds[None, :]), axis=1), seeds


def _init_hyper(data: GroupedDataset) -> tuple[float, float, float]:
    means = data.means
    tau2 = float(np.var(means)) if data.n_groups > 1 else 0.0
    pooled = data.pooled_variance()
    # near-identical group means would start tau2 at rounding noise
    floor = pooled / float(np.mean(data.n))
    return float(data.values.mean()), max(tau2, floor), pooled


def init_polya(data: GroupedDataset) -> PolyaState:
    """Groups assigned to the nearest of ceil(J/4) quantile-spaced seeds."""
    means = data.means
    labels, _ = _nearest_seed(means, max(1, math.ceil(data.n_groups / 4)))
    used, c = np.unique(labels, return_inverse=True)
    atoms = np.bincount(c, weights=means) / np.bincount(c)
    mu, tau2, sigma2 = _init_hyper(data)
    return PolyaState(c.astype(int), atoms, mu, tau2, sigma2)


def init_blocked(data: GroupedDataset, config: ModelConfig) -> BlockedState:
    """Groups assigned to the nearest of B quantile-spaced seeds, uniform weights."""
    B = config.truncation
    means = data.means
    c, seeds = _nearest_seed(means, B)
    counts = np.bincount(c, minlength=B)
    sums = np.bincount(c, weights=means, minlength=B)
    atoms = np.where(counts > 0, sums / np.maximum(counts, 1), seeds)
    w = 1.0 / (B - np.arange(B))
    mu, tau2, sigma2 = _init_hyper(data)
    return BlockedState(c.astype(int), atoms, w, stick_break(w), mu, tau2, sigma2)


def retained_count(total: int, burnin: int, stride: int) -> int:
    return (total - burnin) // stride


def run_chain(engine: str, data: GroupedDataset, config: ModelConfig, rng: Rng, total: int,
              burnin_frac: float = 0.8, stride: int = 25, init=None, s_aux: int = 3,
              fixed: Iterable[str] = ()) -> Trace:
    """Run ``total`` scans, discard the first ``floor(burnin_frac * total)``,
    keep every ``stride``-th scan after that."""
    if engine not in ("polya", "blocked"):
        raise ConfigError(f"unknown engine {engine!r}")
    if stride < 1 or total < stride:
        raise ConfigError("need stride >= 1 and total >= stride")
    if not 0 <= burnin_frac < 1:
        raise ConfigError("burnin_frac must lie in [0, 1)")
    fixed = _check_fixed(fixed)
    burnin = int(math.floor(burnin_frac * total))

    if init is None:
        state = init_polya(data) if engine == "polya" else init_blocked(data, config)
    else:
        state = init.copy()
    if engine == "blocked" and state.atoms.size != config.truncation:
        raise ConfigError("initial blocked state does not match the truncation level")

    states = []
    skips = 0
    start = time.perf_counter()
    for t in range(1, total + 1):
        if engine == "polya":
            state, skipped = polya_scan(state, data, config, s_aux, rng, fixed)
            skips += skipped
        else:
            state = blocked_scan(state, data, config, rng, fixed)
        if t > burnin and (t - burnin) % stride == 0:
            states.append(state)
    wall = time.perf_counter() - start
    return Trace(engine, states, total, burnin, stride, config.alpha, data.n_groups,
                 wall, rng.seed, skips)


def count_components(trace: Trace) -> dict[int, float]:
    """Posterior frequencies of the number of distinct occupied components."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    counts = np.array([s.n_components for s in trace.states])
    values, freq = np.unique(counts, return_counts=True)
    return {int(k): float(f) / counts.size for k, f in zip(values, freq)}
