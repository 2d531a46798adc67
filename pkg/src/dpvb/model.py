"""Grouped data, truncated stick-breaking measures and the synthetic generator."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .special import DomainError, Rng, sample_beta, sample_categorical, sample_normal


class ConfigError(ValueError):
    """Invalid model or engine configuration."""


class TruncationError(ValueError):
    """Stick fractions that do not end with w_B = 1."""


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    """J groups of real observations with per-group sufficient statistics.

    Observations are stored contiguously in ``values``; group j occupies
    ``values[offsets[j]:offsets[j + 1]]``.
    """

    ids: tuple[str, ...]
    values: np.ndarray
    offsets: np.ndarray
    n: np.ndarray = field(init=False)
    sums: np.ndarray = field(init=False)
    sumsq: np.ndarray = field(init=False)
    css: np.ndarray = field(init=False)
    means: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float)
        offsets = np.asarray(self.offsets, dtype=np.int64)
        if len(self.ids) == 0:
            raise DomainError("dataset needs at least one group")
        if offsets.shape != (len(self.ids) + 1,) or offsets[0] != 0 or offsets[-1] != values.size:
            raise DomainError("offsets do not match the observation vector")
        counts = np.diff(offsets)
        if np.any(counts < 1):
            raise DomainError("every group must hold at least one observation")
        if not np.all(np.isfinite(values)):
            raise DomainError("observations must be finite")
        sums = np.add.reduceat(values, offsets[:-1])
        sumsq = np.add.reduceat(values * values, offsets[:-1])
        means = sums / counts
        centered = values - np.repeat(means, counts)
        css = np.add.reduceat(centered * centered, offsets[:-1])
        values.setflags(write=False)
        for name, arr in (("values", values), ("offsets", offsets), ("n", counts),
                          ("sums", sums), ("sumsq", sumsq), ("css", css), ("means", means)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[float]], ids: Sequence[str] | None = None):
        if ids is None:
            ids = [f"g{j:03d}" for j in range(len(groups))]
        if len(ids) != len(groups):
            raise DomainError("ids and groups differ in length")
        sizes = [len(g) for g in groups]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        flat = np.concatenate([np.asarray(g, dtype=float) for g in groups]) if groups else np.empty(0)
        return cls(tuple(str(i) for i in ids), flat, offsets)

    @property
    def n_groups(self) -> int:
        return len(self.ids)

    @property
    def n_total(self) -> int:
        return int(self.values.size)

    def group(self, j: int) -> np.ndarray:
        return self.values[self.offsets[j]:self.offsets[j + 1]]

    def groups(self) -> list[np.ndarray]:
        return [self.group(j) for j in range(self.n_groups)]

    def subset(self, indices: Iterable[int]) -> "GroupedDataset":
        idx = list(indices)
        return GroupedDataset.from_groups([self.group(j) for j in idx], [self.ids[j] for j in idx])

    def split(self, n_train: int) -> tuple["GroupedDataset", "GroupedDataset"]:
        """First ``n_train`` groups for fitting, the rest held out."""
        if not 0 < n_train < self.n_groups:
            raise ConfigError(f"n_train must lie in (0, {self.n_groups}), got {n_train}")
        return self.subset(range(n_train)), self.subset(range(n_train, self.n_groups))

    def pooled_variance(self) -> float:
        dof = self.n_total - self.n_groups
        if dof <= 0:
            return float(np.var(self.values)) or 1.0
        return float(self.css.sum() / dof)

    def to_csv(self, path) -> None:
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group_id", "value"])
        for j, gid in enumerate(self.ids):
            for y in self.group(j):
                writer.writerow([gid, repr(float(y))])
        Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")

    @classmethod
    def read_csv(cls, path) -> "GroupedDataset":
        order: list[str] = []
        rows: dict[str, list[float]] = {}
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["group_id", "value"]:
                raise DomainError(f"{path}: expected header 'group_id,value', got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise DomainError(f"{path}:{lineno}: expected two fields")
                gid, raw = row
                if gid not in rows:
                    order.append(gid)
                    rows[gid] = []
                rows[gid].append(float(raw))
        return cls.from_groups([rows[g] for g in order], order)


@dataclass(frozen=True, eq=False)
class StickBreakingMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if atoms.ndim != 1 or atoms.shape != weights.shape or atoms.size == 0:
            raise DomainError("atoms and weights must be equal-length non-empty vectors")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise DomainError(f"weights must be >= 0 and sum to 1, got sum {weights.sum()!r}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return int(self.atoms.size)


@dataclass(frozen=True)
class ModelConfig:
    """Truncation level and DP concentration.

    The prior on (sigma^2, mu, tau^2) is the improper 1/sigma^2 prior and the
    base distribution N(mu, tau^2) has both hyperparameters random; neither is
    configurable.  Engines add their own lower bounds on ``truncation``.
    """

    truncation: int
    alpha: float

    def __post_init__(self):
        if int(self.truncation) != self.truncation or self.truncation < 1:
            raise ConfigError(f"truncation must be a positive integer, got {self.truncation}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")


@dataclass
class GroundTruth:
    measure: StickBreakingMeasure
    mu: float
    tau2: float
    sigma2: float
    assignments: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise DomainError("tau2 and sigma2 must be > 0")

    def to_json(self) -> dict:
        return {
            "atoms": [float(a) for a in self.measure.atoms],
            "weights": [float(w) for w in self.measure.weights],
            "mu": float(self.mu),
            "tau2": float(self.tau2),
            "sigma2": float(self.sigma2),
            "assignments": [int(c) for c in self.assignments],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        measure = StickBreakingMeasure(np.asarray(obj["atoms"]), np.asarray(obj["weights"]))
        return cls(measure, float(obj["mu"]), float(obj["tau2"]), float(obj["sigma2"]),
                   [int(c) for c in obj.get("assignments", [])])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def stick_break(w) -> np.ndarray:
    """Weights v_b = w_b * prod_{l<b} (1 - w_l) from stick fractions ending in 1."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise DomainError("stick fractions must be a non-empty vector")
    if np.any(w <= 0) or np.any(w > 1):
        raise DomainError("stick fractions must lie in (0, 1]")
    if w[-1] != 1.0:
        raise TruncationError(f"last stick fraction must be 1, got {w[-1]!r}")
    survive = np.concatenate([[1.0], np.cumprod(1.0 - w[:-1])])
    return w * survive


def sample_truncated_dp(rng: Rng, alpha: float, truncation: int, mu: float, tau2: float) -> StickBreakingMeasure:
    if truncation < 1:
        raise DomainError("truncation must be >= 1")
    if not alpha > 0:
        raise DomainError("alpha must be > 0")
    atoms = np.asarray(sample_normal(rng, np.full(truncation, float(mu)), tau2), dtype=float)
    w = np.ones(truncation)
    if truncation > 1:
        w[:-1] = sample_beta(rng, np.ones(truncation - 1), alpha)
        # Beta(1, alpha) can round to exactly 0 for tiny alpha
        w[:-1] = np.maximum(w[:-1], np.finfo(float).tiny)
    return StickBreakingMeasure(atoms, stick_break(w))


def generate_dataset(rng: Rng, truth: GroundTruth, n_groups: int, n_per_group: int) -> GroupedDataset:
    """Draw group atoms from the truth measure and normal noise around them.

    The drawn component indices are written to ``truth.assignments``.
    """
    if n_groups < 1 or n_per_group < 1:
        raise DomainError("n_groups and n_per_group must be >= 1")
    assignments = []
    groups = []
    for _ in range(n_groups):
        b = sample_categorical(rng, truth.measure.weights)
        assignments.append(b)
        theta = truth.measure.atoms[b]
        groups.append(np.asarray(sample_normal(rng, np.full(n_per_group, theta), truth.sigma2)))
    truth.assignments = assignments
    return GroupedDataset.from_groups(groups)


def expected_weights(c, d) -> np.ndarray:
    """E[v_b] under independent q(w_b) = Beta(c_b, d_b), with w_B fixed at 1."""
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    if c.shape != d.shape or c.ndim != 1 or c.size == 0:
        raise DomainError("c and d must be equal-length non-empty vectors")
    if np.any(c <= 0) or np.any(d <= 0):
        raise DomainError("Beta parameters must be > 0")
    mean_w = c / (c + d)
    mean_w[-1] = 1.0
    survive = np.concatenate([[1.0], np.cumprod(d[:-1] / (c[:-1] + d[:-1]))])
    return mean_w * survive


# simulation truth: five atoms at mu = 0, tau^2 = 16, noise sigma^2 = 0.64
STUDY_ATOMS = (-2.22, -0.54, 1.01, 4.28, 7.10)
STUDY_WEIGHTS_PRINTED = (0.35, 0.14, 0.13, 0.13, 0.26)


def study_truth() -> GroundTruth:
    """The five-atom measure used in the simulation study.

    The printed weights sum to 1.01 and are renormalized.
    """
    w = np.asarray(STUDY_WEIGHTS_PRINTED)
    return GroundTruth(StickBreakingMeasure(np.asarray(STUDY_ATOMS), w / w.sum()),
                       mu=0.0, tau2=16.0, sigma2=0.64)
