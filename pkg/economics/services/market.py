"""Closed-form economics of the differentiated-goods Bertrand duopoly.

Inverse demand is linear (p_i = a - beta*q_i - d*q_j); inverting it gives each
firm's demand q_i = (alpha - beta*p_i + d*p_j) / b with b = beta^2 - d^2 and
alpha = a*beta - a*d. Firms are numbered 1 and 2 throughout.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class MarketError(Exception):
    pass


class InvalidParams(MarketError):
    pass


class UndefinedEquilibrium(MarketError):
    pass


class UndefinedCartel(MarketError):
    pass


class UnsupportedMode(MarketError):
    pass


class MarketMode(str, Enum):
    DIFFERENTIATED = "differentiated"
    HOMOGENEOUS = "homogeneous"


@dataclass(frozen=True)
class MarketParams:
    a: float
    beta: float
    d: float
    c1: float
    c2: float

    @property
    def costs(self) -> tuple[float, float]:
        return (self.c1, self.c2)

    def cost(self, firm: int) -> float:
        return self.costs[_firm_slot(firm)]

    def problems(self) -> list[str]:
        issues = []
        for name in ("a", "beta", "d", "c1", "c2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                issues.append(f"{name} must be a finite number")
        if issues:
            return issues
        if self.beta <= 0:
            issues.append("beta must be positive")
        if self.d < 0:
            issues.append("d must be non-negative")
        if self.d > self.beta and not _same(self.d, self.beta):
            issues.append("d must not exceed beta (d/beta in [0, 1])")
        if self.c1 < 0 or self.c2 < 0:
            issues.append("costs must be non-negative")
        if self.a <= max(self.c1, self.c2):
            issues.append("a must exceed both marginal costs")
        return issues

    def validate(self) -> None:
        issues = self.problems()
        if issues:
            raise InvalidParams("; ".join(issues))


@dataclass(frozen=True)
class DerivedMarket:
    params: MarketParams
    b: float
    alpha: float
    mode: MarketMode

    @property
    def is_homogeneous(self) -> bool:
        return self.mode is MarketMode.HOMOGENEOUS


@dataclass(frozen=True)
class ReferencePrices:
    bertrand: tuple[float, float]
    cartel: tuple[float, float] | None = None

    def spread(self, firm: int) -> float | None:
        """p^M - p^B for one firm, or None when the cartel price is undefined."""
        if self.cartel is None:
            return None
        slot = _firm_slot(firm)
        return self.cartel[slot] - self.bertrand[slot]


@dataclass(frozen=True)
class MarketOutcome:
    q1: float
    q2: float
    pi1: float
    pi2: float

    @property
    def quantities(self) -> tuple[float, float]:
        return (self.q1, self.q2)

    @property
    def profits(self) -> tuple[float, float]:
        return (self.pi1, self.pi2)


def _firm_slot(firm: int) -> int:
    if firm not in (1, 2):
        raise ValueError(f"firm must be 1 or 2, got {firm!r}")
    return firm - 1


def _same(x: float, y: float) -> bool:
    return math.isclose(x, y, rel_tol=1e-12, abs_tol=0.0)


def _check_prices(*prices: float) -> None:
    for price in prices:
        if not math.isfinite(price) or price < 0:
            raise ValueError(f"prices must be finite and non-negative, got {price!r}")


def derive_market(params: MarketParams) -> DerivedMarket:
    params.validate()
    if _same(params.d, params.beta):
        return DerivedMarket(
            params=params,
            b=0.0,
            alpha=0.0,
            mode=MarketMode.HOMOGENEOUS,
        )
    return DerivedMarket(
        params=params,
        b=params.beta * params.beta - params.d * params.d,
        alpha=params.a * params.beta - params.a * params.d,
        mode=MarketMode.DIFFERENTIATED,
    )


def demand(market: DerivedMarket, p1: float, p2: float) -> tuple[float, float]:
    """Quantities demanded at (p1, p2), clamped at zero.

    With perfect substitutes the cheaper firm serves the whole market at
    q = (a - p)/beta; an exact tie splits it as q = (a - p)/(beta + d) each.
    """
    _check_prices(p1, p2)
    params = market.params
    if market.is_homogeneous:
        if p1 < p2:
            return (max(0.0, (params.a - p1) / params.beta), 0.0)
        if p2 < p1:
            return (0.0, max(0.0, (params.a - p2) / params.beta))
        shared = max(0.0, (params.a - p1) / (params.beta + params.d))
        return (shared, shared)

    q1 = (market.alpha - params.beta * p1 + params.d * p2) / market.b
    q2 = (market.alpha - params.beta * p2 + params.d * p1) / market.b
    return (max(0.0, q1), max(0.0, q2))


def profit(market: DerivedMarket, p1: float, p2: float) -> MarketOutcome:
    q1, q2 = demand(market, p1, p2)
    params = market.params
    return MarketOutcome(
        q1=q1,
        q2=q2,
        pi1=(p1 - params.c1) * q1,
        pi2=(p2 - params.c2) * q2,
    )


def bertrand_prices(market: DerivedMarket) -> tuple[float, float]:
    params = market.params
    if market.is_homogeneous:
        if params.c1 != params.c2:
            raise UndefinedEquilibrium(
                f"no Bertrand equilibrium formula for perfect substitutes with c1={params.c1} != c2={params.c2}"
            )
        return (params.c1, params.c2)

    beta, d, alpha = params.beta, params.d, market.alpha
    denominator = 4 * beta * beta - d * d
    numerator_1 = d * alpha + beta * d * params.c2 + 2 * beta * alpha + 2 * beta * beta * params.c1
    numerator_2 = d * alpha + beta * d * params.c1 + 2 * beta * alpha + 2 * beta * beta * params.c2
    return (numerator_1 / denominator, numerator_2 / denominator)


def cartel_prices(market: DerivedMarket) -> tuple[float, float]:
    if market.is_homogeneous:
        raise UndefinedCartel("cartel prices are undefined when d/beta = 1")
    params = market.params
    shared = market.alpha / (2 * (params.beta - params.d))
    return (shared + params.c1 / 2, shared + params.c2 / 2)


def reference_prices(market: DerivedMarket) -> ReferencePrices:
    cartel = None if market.is_homogeneous else cartel_prices(market)
    return ReferencePrices(bertrand=bertrand_prices(market), cartel=cartel)


def best_response(market: DerivedMarket, firm: int, rival_price: float) -> float:
    """Profit-maximizing price against a fixed rival price (first-order condition)."""
    if market.is_homogeneous:
        raise UnsupportedMode("best response is discontinuous for perfect substitutes")
    _check_prices(rival_price)
    params = market.params
    cost = params.cost(firm)
    return (market.alpha + params.d * rival_price + params.beta * cost) / (2 * params.beta)


def iterate_best_response(
    market: DerivedMarket,
    start: tuple[float, float],
    tolerance: float = 1e-6,
    max_iterations: int = 200,
) -> tuple[tuple[float, float], int]:
    """Simultaneous best-response dynamics from `start`.

    Returns the last price pair and the number of iterations used. The map is a
    contraction with slope d/(2*beta) <= 1/2, so it settles on the Bertrand pair.
    """
    p1, p2 = start
    for iteration in range(1, max_iterations + 1):
        next_1 = best_response(market, 1, p2)
        next_2 = best_response(market, 2, p1)
        moved = max(abs(next_1 - p1), abs(next_2 - p2))
        p1, p2 = next_1, next_2
        if moved < tolerance:
            return (p1, p2), iteration
    return (p1, p2), max_iterations


def joint_profit_grid_search(market: DerivedMarket, step: float = 0.01) -> tuple[float, float]:
    """Brute-force argmax of pi1 + pi2 over a price grid spanning [min cost, a]."""
    if market.is_homogeneous:
        raise UndefinedCartel("joint-profit search needs differentiated products")
    params = market.params
    grid = np.arange(min(params.costs), params.a + step / 2, step)
    p1, p2 = np.meshgrid(grid, grid, indexing="ij")
    q1 = np.maximum(0.0, (market.alpha - params.beta * p1 + params.d * p2) / market.b)
    q2 = np.maximum(0.0, (market.alpha - params.beta * p2 + params.d * p1) / market.b)
    joint = (p1 - params.c1) * q1 + (p2 - params.c2) * q2
    i, j = np.unravel_index(np.argmax(joint), joint.shape)
    return (float(grid[i]), float(grid[j]))
