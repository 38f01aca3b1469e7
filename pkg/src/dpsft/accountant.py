"""Privacy accounting for compositions of subsampled Gaussian mechanisms.

Every privatized batch release (a training step or a score-accumulation step)
is one subsampled-Gaussian event (sample rate q, noise multiplier sigma).
The ledger composes their Renyi divergences additively over an order grid and
converts to (epsilon, delta) with the improved conversion

    eps(delta) = min_alpha  rdp(alpha) + log((alpha-1)/alpha)
                           - (log(delta) + log(alpha)) / (alpha - 1)

clamped at zero. The neighboring-dataset convention is add/remove-one record,
matching Poisson subsampling; sensitivity is always the clipping constant, so
only the noise multiplier is stored. Reported epsilons are conservative
relative to PRV/FFT accountants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .errors import CalibrationError, UsageError

# Integer orders 2..256 plus a fractional refinement below 2.
DEFAULT_ALPHAS: tuple[float, ...] = (1.25, 1.5, 1.75) + tuple(
    float(a) for a in range(2, 257)
)

SIGMA_SEARCH_BOUNDS = (1e-2, 1e4)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    lo, hi = min(a, b), max(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_erfc(x: float) -> float:
    # erfc(x) = 2 * Phi(-x * sqrt(2)); log_ndtr is stable far into the tail.
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _signed_log_binom(alpha: float, i: int) -> tuple[int, float]:
    """(sign, log|C(alpha, i)|) for real alpha > 1 and integer i >= 0."""
    if i == 0:
        return 1, 0.0
    x = alpha - i + 1.0  # argument of the denominator Gamma
    log_num = float(special.gammaln(alpha + 1.0) - special.gammaln(i + 1.0))
    if x > 0.0:
        return 1, log_num - float(special.gammaln(x))
    if x == math.floor(x):  # pole: integer alpha with i > alpha, coefficient is zero
        return 0, -math.inf
    # Reflection for negative non-integer x: |Gamma(x)| = pi / (|sin(pi x)| Gamma(1-x)).
    sign = 1 if math.ceil(-x) % 2 == 0 else -1
    log_abs_gamma = (
        math.log(math.pi) - math.log(abs(math.sin(math.pi * x))) - float(special.gammaln(1.0 - x))
    )
    return sign, log_num - log_abs_gamma


class _SignedLogSum:
    """Accumulates sum of +/- exp(log-magnitude) terms in log space."""

    def __init__(self):
        self.sign = 1
        self.log_abs = -math.inf

    def add(self, sign: int, log_mag: float) -> None:
        if sign == 0 or log_mag == -math.inf:
            return
        if self.log_abs == -math.inf:
            self.sign, self.log_abs = sign, log_mag
            return
        if sign == self.sign:
            self.log_abs = _log_add(self.log_abs, log_mag)
            return
        if log_mag == self.log_abs:
            self.log_abs = -math.inf
            self.sign = 1
        elif log_mag > self.log_abs:
            self.log_abs = log_mag + math.log1p(-math.exp(self.log_abs - log_mag))
            self.sign = sign
        else:
            self.log_abs = self.log_abs + math.log1p(-math.exp(log_mag - self.log_abs))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_q, log_1mq = math.log(q), math.log1p(-q)
    out = -math.inf
    for i in range(alpha + 1):
        term = (
            float(special.gammaln(alpha + 1))
            - float(special.gammaln(i + 1))
            - float(special.gammaln(alpha - i + 1))
            + i * log_q
            + (alpha - i) * log_1mq
            + (i * i - i) / (2.0 * sigma * sigma)
        )
        out = _log_add(out, term)
    return out


_MAX_FRAC_TERMS = 1000


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    s2 = 2.0 * sigma * sigma
    acc = _SignedLogSum()
    prev_mag = math.inf
    for i in range(_MAX_FRAC_TERMS):
        j = alpha - i
        sign, log_coef = _signed_log_binom(alpha, i)
        t0 = log_coef + i * log_q + j * log_1mq
        t1 = log_coef + j * log_q + i * log_1mq
        e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        s0 = t0 + (i * i - i) / s2 + e0
        s1 = t1 + (j * j - j) / s2 + e1
        acc.add(sign, s0)
        acc.add(sign, s1)
        mag = max(s0, s1)
        if i > alpha and mag < prev_mag and mag < acc.log_abs - 40.0:
            return acc.log_abs
        prev_mag = mag
    return acc.log_abs


def rdp_of_sgm(q_sample: float, sigma: float, alpha: float) -> float:
    """Renyi divergence bound of one subsampled Gaussian release at order alpha.

    Exact closed form alpha / (2 sigma^2) at q_sample = 1; the subsampled case
    follows the standard stable series evaluation of the mixture divergence.
    """
    if alpha <= 1.0:
        raise UsageError(f"Renyi order must exceed 1, got {alpha}")
    if not 0.0 < q_sample <= 1.0:
        raise UsageError(f"sample rate must be in (0, 1], got {q_sample}")
    if sigma <= 0.0:
        return math.inf
    if q_sample == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(q_sample, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q_sample, sigma, alpha)
    return max(0.0, log_a / (alpha - 1.0))


@lru_cache(maxsize=4096)
def _rdp_grid(q: float, sigma: float, alphas: tuple[float, ...]) -> tuple[float, ...]:
    return tuple(rdp_of_sgm(q, sigma, a) for a in alphas)


def eps_from_rdp(alphas, rdp_values, delta: float) -> float:
    """Best (epsilon, delta) conversion across the order grid, floored at 0."""
    if not 0.0 < delta < 1.0:
        raise UsageError(f"delta must be in (0, 1), got {delta}")
    best = math.inf
    for alpha, r in zip(alphas, rdp_values):
        if not math.isfinite(r):
            continue
        eps = r + math.log((alpha - 1.0) / alpha) - (math.log(delta) + math.log(alpha)) / (
            alpha - 1.0
        )
        best = min(best, eps)
    return max(0.0, best)


@dataclass(frozen=True)
class SgmEvent:
    """count releases of a subsampled Gaussian with the given parameters."""

    q_sample: float
    sigma: float
    count: int = 1

    def __post_init__(self):
        if not 0.0 < self.q_sample <= 1.0:
            raise UsageError(f"sample rate must be in (0, 1], got {self.q_sample}")
        if self.sigma < 0.0:
            raise UsageError(f"noise multiplier must be >= 0, got {self.sigma}")
        if self.count < 1:
            raise UsageError(f"event count must be >= 1, got {self.count}")


class PrivacyLedger:
    """Append-only record of subsampled-Gaussian releases.

    Consecutive events with identical (q, sigma) merge into one counted entry;
    equality is structural over the merged event list, so two procedures with
    the same per-batch releases compare equal regardless of how the batches
    were grouped into phases.
    """

    def __init__(self, delta: float = 1e-5, alphas: tuple[float, ...] = DEFAULT_ALPHAS):
        if not 0.0 < delta < 1.0:
            raise UsageError(f"delta must be in (0, 1), got {delta}")
        self.delta = delta
        self.alphas = tuple(alphas)
        self.events: list[SgmEvent] = []

    def record(self, q_sample: float, sigma: float, count: int = 1) -> None:
        if self.events and self.events[-1].q_sample == q_sample and self.events[-1].sigma == sigma:
            last = self.events[-1]
            self.events[-1] = SgmEvent(q_sample, sigma, last.count + count)
        else:
            self.events.append(SgmEvent(q_sample, sigma, count))

    @property
    def total_steps(self) -> int:
        return sum(e.count for e in self.events)

    def epsilon(self, delta: float | None = None) -> float:
        """Composed epsilon at the given (or ledger) delta; 0 for an empty ledger."""
        delta = self.delta if delta is None else delta
        if not 0.0 < delta < 1.0:
            raise UsageError(f"delta must be in (0, 1), got {delta}")
        if not self.events:
            return 0.0
        total = np.zeros(len(self.alphas))
        for event in self.events:
            if event.sigma == 0.0:
                return math.inf
            total += event.count * np.asarray(_rdp_grid(event.q_sample, event.sigma, self.alphas))
        return eps_from_rdp(self.alphas, total, delta)

    def copy(self) -> "PrivacyLedger":
        out = PrivacyLedger(self.delta, self.alphas)
        out.events = list(self.events)
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PrivacyLedger)
            and self.delta == other.delta
            and self.events == other.events
        )

    def __len__(self):
        return len(self.events)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "events": [
                {"q_sample": e.q_sample, "sigma": e.sigma, "count": e.count}
                for e in self.events
            ],
            "epsilon": self.epsilon(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PrivacyLedger":
        ledger = cls(delta=payload["delta"])
        for e in payload["events"]:
            ledger.record(e["q_sample"], e["sigma"], e["count"])
        return ledger


def epsilon_for(q_sample: float, sigma: float, steps: int, delta: float,
                alphas: tuple[float, ...] = DEFAULT_ALPHAS) -> float:
    """Epsilon of `steps` identical releases, without building a ledger."""
    ledger = PrivacyLedger(delta, alphas)
    ledger.record(q_sample, sigma, steps)
    return ledger.epsilon()


def calibrate_sigma(
    q_sample: float,
    total_steps: int,
    target_epsilon: float,
    delta: float,
    bounds: tuple[float, float] = SIGMA_SEARCH_BOUNDS,
    rel_tol: float = 1e-3,
) -> float:
    """Smallest noise multiplier (to rel_tol) meeting the epsilon budget.

    Bisection over sigma; the returned value satisfies eps(sigma) <= target
    while eps(sigma * (1 - rel_tol)) > target, except when the target is loose
    enough that the lower search bound already satisfies it.
    """
    if target_epsilon <= 0.0:
        raise UsageError(f"target epsilon must be > 0, got {target_epsilon}")
    if total_steps < 1:
        raise UsageError(f"total_steps must be >= 1, got {total_steps}")
    lo, hi = bounds

    def eps_at(sigma: float) -> float:
        return epsilon_for(q_sample, sigma, total_steps, delta)

    if eps_at(lo) <= target_epsilon:
        return lo
    if eps_at(hi) > target_epsilon:
        raise CalibrationError(
            f"epsilon {target_epsilon} unattainable with sigma <= {hi} "
            f"(eps({hi}) = {eps_at(hi):.4g})"
        )
    # Invariant: eps(lo) > target >= eps(hi).
    while hi - lo > 0.5 * rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi
