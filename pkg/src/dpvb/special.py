"""Special functions and seeded variate generation.

digamma and ln_gamma are computed by upward recurrence to x >= 10 followed by
the asymptotic (Stirling / de Moivre) series.  Both accept scalars or arrays.
"""

from __future__ import annotations

import math

import numpy as np

_SHIFT = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# B_{2k} / (2k) for the digamma tail, k = 1..7
_DIGAMMA_COEF = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
# B_{2k} / (2k (2k - 1)) for the Stirling tail, k = 1..7
_STIRLING_COEF = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


class DomainError(ValueError):
    """Argument outside the domain of a function or distribution."""


def _positive_array(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"{name} requires finite x > 0, got {x!r}")
    return arr


def _unwrap(arr):
    return float(arr) if arr.ndim == 0 else arr


def digamma(x):
    """Logarithmic derivative of the gamma function, for x > 0."""
    z = _positive_array(x, "digamma").copy()
    acc = np.zeros_like(z)
    # psi(x) = psi(x + 1) - 1/x
    while True:
        low = z < _SHIFT
        if not low.any():
            break
        acc[low] -= 1.0 / z[low]
        z[low] += 1.0
    inv2 = 1.0 / (z * z)
    tail = np.zeros_like(z)
    for coef in reversed(_DIGAMMA_COEF):
        tail = (tail + coef) * inv2
    return _unwrap(acc + np.log(z) - 0.5 / z - tail)


def ln_gamma(x):
    """Natural log of the gamma function, for x > 0."""
    z = _positive_array(x, "ln_gamma").copy()
    prod = np.ones_like(z)
    # Gamma(x) = Gamma(x + m) / (x (x+1) ... (x+m-1))
    while True:
        low = z < _SHIFT
        if not low.any():
            break
        prod[low] *= z[low]
        z[low] += 1.0
    inv = 1.0 / z
    inv2 = inv * inv
    tail = np.zeros_like(z)
    for coef in reversed(_STIRLING_COEF):
        tail = tail * inv2 + coef
    tail *= inv
    out = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + tail - np.log(prod)
    return _unwrap(out)


def log_sum_exp(values, axis=None):
    """Stable ``log(sum(exp(values)))``.

    With ``axis`` given, reduces along that axis of a 2-d (or higher) array.
    Entries equal to ``-inf`` contribute zero mass.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DomainError("log_sum_exp of an empty sequence")
    top = np.max(arr, axis=axis, keepdims=True)
    if not np.all(np.isfinite(top)):
        if np.any(np.isnan(arr)) or np.any(top == np.inf):
            raise DomainError("log_sum_exp needs finite or -inf values")
        if axis is None:
            raise DomainError("log_sum_exp needs at least one finite value")
        raise DomainError("log_sum_exp: a slice has no finite value")
    out = top + np.log(np.sum(np.exp(arr - top), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


class Rng:
    """Seeded random stream.

    Thin owner of a PCG64 ``numpy.random.Generator``; two instances built
    from the same seed produce identical variate streams.  Not thread-safe.
    """

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else None
        else:
            seed = int(seed)
            if not 0 <= seed < 2**64:
                raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
            self._seq = np.random.SeedSequence(seed)
            self.seed = seed
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n):
        """Independent child streams, deterministic in the parent seed."""
        return [Rng(child) for child in self._seq.spawn(n)]

    def uniform(self, size=None):
        return self.gen.random(size)


def _check_positive(value, name):
    if isinstance(value, (float, int)):
        ok = 0 < value < math.inf
    else:
        arr = np.asarray(value, dtype=float)
        ok = arr.size > 0 and arr.min() > 0 and arr.max() < math.inf
    if not ok:
        raise DomainError(f"{name} must be finite and > 0, got {value!r}")


def sample_normal(rng: Rng, mean, variance):
    _check_positive(variance, "variance")
    return rng.gen.normal(mean, np.sqrt(variance))


def sample_beta(rng: Rng, shape1, shape2):
    _check_positive(shape1, "shape1")
    _check_positive(shape2, "shape2")
    return rng.gen.beta(shape1, shape2)


def sample_gamma(rng: Rng, shape, rate=1.0):
    _check_positive(shape, "shape")
    _check_positive(rate, "rate")
    # Marsaglia-Tsang squeeze/rejection, boosted for shape < 1
    return rng.gen.standard_gamma(shape) / rate


def sample_inverse_gamma(rng: Rng, shape, scale):
    """Draw with density proportional to x**(-shape-1) * exp(-scale/x)."""
    _check_positive(shape, "shape")
    _check_positive(scale, "scale")
    return scale / rng.gen.standard_gamma(shape)


def sample_categorical(rng: Rng, weights) -> int:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("categorical weights must be a non-empty vector of finite values >= 0")
    total = w.sum()
    if total <= 0:
        raise DomainError("categorical weights sum to zero")
    u = rng.gen.random() * total
    idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
    # guard the u == total rounding edge and trailing zero weights
    idx = min(idx, w.size - 1)
    while w[idx] == 0:
        idx -= 1
    return idx


def sample_categorical_log(rng: Rng, log_weights) -> int:
    """Categorical draw from unnormalized log weights."""
    lw = np.asarray(log_weights, dtype=float)
    return sample_categorical(rng, np.exp(lw - log_sum_exp(lw)))


def categorical_from_log(u: float, log_weights: list) -> int:
    """Index drawn from unnormalized log weights using one uniform ``u``.

    Scalar fast path for short candidate lists; normalization is by the
    max-shift of log_sum_exp.
    """
    top = max(log_weights)
    probs = [math.exp(x - top) for x in log_weights]
    target = u * math.fsum(probs)
    acc = 0.0
    for idx, p in enumerate(probs):
        acc += p
        if target < acc:
            return idx
    return max(i for i, p in enumerate(probs) if p > 0)


def sample_categorical_rows(rng: Rng, log_weights):
    """One categorical draw per row of an (m, K) matrix of log weights."""
    lw = np.asarray(log_weights, dtype=float)
    probs = np.exp(lw - log_sum_exp(lw, axis=1)[:, None])
    cdf = np.cumsum(probs, axis=1)
    u = rng.gen.random(lw.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    idx = np.minimum(idx, lw.shape[1] - 1)
    # never land on a zero-probability trailing column
    bad = probs[np.arange(lw.shape[0]), idx] == 0
    if bad.any():
        for row in np.flatnonzero(bad):
            idx[row] = np.flatnonzero(probs[row] > 0)[-1]
    return idx
