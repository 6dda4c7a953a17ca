"""Renyi-DP accounting for the private decoder updates.

Curves are tabulated on a fixed grid of integer orders. Per-step costs come
from the Gaussian mechanism; repeated steps compose additively and are
converted to (epsilon, delta)-DP with ``eps(alpha) + log(1/delta)/(alpha - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import GridError, InvalidParameterError, UnsupportedOrderError

DEFAULT_ORDERS = tuple(float(a) for a in range(2, 257))
DEFAULT_DELTA = 1e-5


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple
    eps: tuple

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        eps = tuple(float(e) for e in self.eps)
        if len(orders) != len(eps):
            raise GridError("orders and eps must have equal length")
        if any(a <= 1 for a in orders):
            raise InvalidParameterError("Renyi orders must exceed 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise GridError("orders must be strictly increasing")
        if any(not e >= 0 for e in eps):
            raise InvalidParameterError("RDP epsilons must be non-negative")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "eps", eps)

    def scaled(self, factor: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(factor * e for e in self.eps))


@dataclass(frozen=True)
class PrivacyParams:
    clip_bound: float = 1.0
    noise_multiplier: float = 8.0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise InvalidParameterError(f"clip_bound must be > 0, got {self.clip_bound}")
        if not self.noise_multiplier > 0:
            raise InvalidParameterError(f"noise_multiplier must be > 0, got {self.noise_multiplier}")
        if not 0 < self.delta < 1:
            raise InvalidParameterError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class PrivacySpend:
    steps: int
    epsilon: float
    delta: float
    best_order: float


def _check_order(alpha):
    if not alpha > 1:
        raise UnsupportedOrderError(f"Renyi order must exceed 1, got {alpha}")


def gaussian_rdp(alpha: float, sigma_noise: float, sensitivity: float) -> float:
    """RDP of ``f(D) + N(0, sigma_noise^2 I)`` for L2 sensitivity ``sensitivity``."""
    _check_order(alpha)
    if not sigma_noise > 0:
        raise InvalidParameterError(f"noise std must be > 0, got {sigma_noise}")
    if sensitivity < 0:
        raise InvalidParameterError(f"sensitivity must be >= 0, got {sensitivity}")
    return alpha * sensitivity ** 2 / (2.0 * sigma_noise ** 2)


def decoder_step_rdp(alpha: float, sigma: float) -> float:
    """Per-step cost of one noisy decoder update: noise std sigma*C, sensitivity 2C."""
    _check_order(alpha)
    if not sigma > 0:
        raise InvalidParameterError(f"noise multiplier must be > 0, got {sigma}")
    return 2.0 * alpha / sigma ** 2


def subsampled_gaussian_rdp(alpha: int, q: float, z: float) -> float:
    """Integer-order binomial RDP bound for a Gaussian (multiplier ``z``) sampled at rate ``q``.

    ``(alpha-1)^-1 log sum_j C(alpha, j) (1-q)^(alpha-j) q^j exp(j(j-1) / (2 z^2))``,
    summed in log space.
    """
    if isinstance(alpha, float):
        if not alpha.is_integer():
            raise UnsupportedOrderError(f"binomial bound needs an integer order, got {alpha}")
        alpha = int(alpha)
    if alpha < 2:
        raise UnsupportedOrderError(f"binomial bound needs an integer order >= 2, got {alpha}")
    if not 0.0 <= q <= 1.0:
        raise InvalidParameterError(f"sampling rate must lie in [0, 1], got {q}")
    if not z > 0:
        raise InvalidParameterError(f"noise multiplier must be > 0, got {z}")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * z ** 2)
    j = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1.0) - gammaln(j + 1.0) - gammaln(alpha - j + 1.0)
    log_terms = (log_binom + (alpha - j) * math.log1p(-q) + j * math.log(q)
                 + j * (j - 1.0) / (2.0 * z ** 2))
    return max(float(logsumexp(log_terms)) / (alpha - 1), 0.0)


def curve(fn, orders=DEFAULT_ORDERS) -> RdpCurve:
    """Tabulate ``fn(alpha)`` on ``orders``."""
    return RdpCurve(tuple(orders), tuple(fn(a) for a in orders))


def compose_rdp(curves) -> RdpCurve:
    """Pointwise sum of RDP curves on a shared order grid."""
    curves = list(curves)
    if not curves:
        raise GridError("need at least one curve")
    orders = curves[0].orders
    for c in curves[1:]:
        if c.orders != orders:
            raise GridError("curves use different order grids")
    total = np.sum([c.eps for c in curves], axis=0)
    return RdpCurve(orders, tuple(total))


def rdp_to_dp(rdp: RdpCurve, delta: float) -> tuple[float, float]:
    """Best (epsilon, order) over the grid for the given delta."""
    if not 0 < delta < 1:
        raise InvalidParameterError(f"delta must lie in (0, 1), got {delta}")
    if not rdp.orders:
        raise GridError("empty RDP curve")
    orders = np.asarray(rdp.orders)
    eps = np.asarray(rdp.eps) + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    return float(eps[i]), float(orders[i])


def eps_for_training(K: int, sigma: float, T: int, delta: float = DEFAULT_DELTA,
                     q: float | None = None, orders=DEFAULT_ORDERS) -> PrivacySpend:
    """Privacy spend of ``T`` noisy decoder updates over ``K`` disjoint subsets.

    Each step is charged the smaller (after conversion) of the subsampled bound
    at rate ``q`` (default ``1/K``) with effective multiplier ``sigma/2`` and the
    unamplified ``2 alpha / sigma^2``.
    """
    if K < 1:
        raise InvalidParameterError(f"K must be >= 1, got {K}")
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    if T < 0:
        raise InvalidParameterError(f"T must be >= 0, got {T}")
    if not 0 < delta < 1:
        raise InvalidParameterError(f"delta must lie in (0, 1), got {delta}")
    if T == 0:
        return PrivacySpend(0, 0.0, delta, float(orders[-1]))
    rate = 1.0 / K if q is None else q
    amplified = curve(lambda a: subsampled_gaussian_rdp(int(a), rate, sigma / 2.0), orders).scaled(T)
    plain = curve(lambda a: decoder_step_rdp(a, sigma), orders).scaled(T)
    best = min(rdp_to_dp(amplified, delta), rdp_to_dp(plain, delta))
    return PrivacySpend(T, best[0], delta, best[1])


@dataclass
class RdpAccountant:
    """Running tally of completed noisy decoder updates."""

    K: int
    sigma: float
    delta: float = DEFAULT_DELTA
    q: float | None = None
    steps: int = 0

    def step(self, n: int = 1) -> None:
        self.steps += n

    def spend(self) -> PrivacySpend:
        return eps_for_training(self.K, self.sigma, self.steps, self.delta, self.q)
