"""Stationarity and collusion detectors over per-firm price series.

Series are plain sequences of prices for rounds 1..n (index 0 is round 1).
All functions are pure.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from economics.services.market import ReferencePrices

# Spread assumed when p^M - p^B is zero (d = 0) or undefined (perfect substitutes);
# it is the spread of the base market (8 - 6).
FALLBACK_SPREAD = 2.0

COLLUSION_WINDOW = 100
COLLUSION_MAX_MEAN_CHANGE = 0.5
RANGE_TOLERANCE = 1e-9


class DetectorError(Exception):
    pass


class InsufficientHistory(DetectorError):
    pass


class UndefinedRange(DetectorError):
    pass


class VerdictKind(str, Enum):
    CONVERGED = "converged"
    BOUNDED_OSCILLATION = "bounded_oscillation"
    NOT_STATIONARY = "not_stationary"


class StopAction(str, Enum):
    STOP = "stop"
    CONTINUE = "continue"
    HARD_STOP = "hard_stop"


@dataclass(frozen=True)
class ConvergenceParams:
    epsilon: float
    theta: float = 0.01
    window: int = 400

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DetectorError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.theta < 1:
            raise DetectorError(f"theta must lie in (0, 1), got {self.theta}")
        if self.window < 1:
            raise DetectorError(f"window must be at least 1, got {self.window}")

    @classmethod
    def for_spread(cls, spread: float | None, **overrides) -> "ConvergenceParams":
        spread = spread if spread and spread > 0 else FALLBACK_SPREAD
        values = {"epsilon": 0.05 * spread, **overrides}
        return cls(**values)

    @property
    def allowed_outliers(self) -> int:
        return math.floor(self.theta * self.window + 1e-9)


@dataclass(frozen=True)
class OscillationParams:
    bound: float
    window: int = 800

    def __post_init__(self):
        if self.bound < 0:
            raise DetectorError(f"bound must be non-negative, got {self.bound}")
        if self.window < 1:
            raise DetectorError(f"window must be at least 1, got {self.window}")

    @classmethod
    def for_spread(cls, spread: float | None, **overrides) -> "OscillationParams":
        spread = spread if spread and spread > 0 else FALLBACK_SPREAD
        values = {"bound": spread, **overrides}
        return cls(**values)


@dataclass(frozen=True)
class StationarityVerdict:
    kind: VerdictKind
    evaluated_at: int
    center: float | None = None
    lo: float | None = None
    hi: float | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "evaluated_at": self.evaluated_at,
            "center": self.center,
            "lo": self.lo,
            "hi": self.hi,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StationarityVerdict":
        return cls(
            kind=VerdictKind(data["kind"]),
            evaluated_at=int(data["evaluated_at"]),
            center=data.get("center"),
            lo=data.get("lo"),
            hi=data.get("hi"),
        )


@dataclass(frozen=True)
class CollusionFormation:
    formed_at: int | None = None


@dataclass(frozen=True)
class StoppingCriteria:
    convergence: tuple[ConvergenceParams, ConvergenceParams]
    oscillation: tuple[OscillationParams, OscillationParams]
    hard_cap: int = 2000

    @classmethod
    def from_reference(
        cls,
        refs: ReferencePrices | None,
        hard_cap: int = 2000,
        convergence_overrides: dict | None = None,
        oscillation_overrides: dict | None = None,
    ) -> "StoppingCriteria":
        spreads = [refs.spread(firm) if refs else None for firm in (1, 2)]
        return cls(
            convergence=tuple(
                ConvergenceParams.for_spread(spread, **(convergence_overrides or {})) for spread in spreads
            ),
            oscillation=tuple(
                OscillationParams.for_spread(spread, **(oscillation_overrides or {})) for spread in spreads
            ),
            hard_cap=hard_cap,
        )

    @property
    def min_window(self) -> int:
        return min(p.window for p in (*self.convergence, *self.oscillation))


@dataclass(frozen=True)
class StoppingDecision:
    action: StopAction
    verdicts: tuple[StationarityVerdict, StationarityVerdict] = field(default=())


def _trailing(series: Sequence[float], window: int) -> np.ndarray:
    if len(series) < window:
        raise InsufficientHistory(f"need {window} rounds, have {len(series)}")
    return np.asarray(series[len(series) - window:], dtype=float)


def check_convergence(series: Sequence[float], params: ConvergenceParams) -> float | None:
    """Median of the trailing window if at most theta of it strays beyond epsilon."""
    prices = _trailing(series, params.window)
    center = float(np.median(prices))
    outliers = int(np.count_nonzero(np.abs(prices - center) > params.epsilon))
    if outliers <= params.allowed_outliers:
        return center
    return None


def check_bounded_oscillation(series: Sequence[float], params: OscillationParams) -> tuple[float, float] | None:
    prices = _trailing(series, params.window)
    lo, hi = float(prices.min()), float(prices.max())
    if hi - lo <= params.bound:
        return (lo, hi)
    return None


def detect_collusion_formation(
    series1: Sequence[float],
    series2: Sequence[float],
    refs: ReferencePrices,
    window: int = COLLUSION_WINDOW,
    max_mean_change: float = COLLUSION_MAX_MEAN_CHANGE,
) -> CollusionFormation:
    """First round r at which both firms held steady, in-range prices over rounds r-window+1..r.

    Steady means the mean absolute round-to-round change inside the window is
    below `max_mean_change`; in range means p^B <= p <= p^M (inclusive).
    """
    if refs.cartel is None:
        raise UndefinedRange("collusion range needs cartel prices")
    if len(series1) != len(series2):
        raise ValueError("price series must have equal length")
    rounds = len(series1)
    if rounds < window:
        return CollusionFormation(formed_at=None)

    satisfied = np.ones(rounds - window + 1, dtype=bool)
    for slot, series in enumerate((series1, series2)):
        prices = np.asarray(series, dtype=float)
        lo = min(refs.bertrand[slot], refs.cartel[slot]) - RANGE_TOLERANCE
        hi = max(refs.bertrand[slot], refs.cartel[slot]) + RANGE_TOLERANCE

        changes = np.concatenate(([0.0], np.cumsum(np.abs(np.diff(prices)))))
        # changes[k] sums the first k differences; a window ending at index e
        # (0-based) holds differences e-window+1 .. e-1.
        ends = np.arange(window - 1, rounds)
        mean_change = (changes[ends] - changes[ends - window + 1]) / max(window - 1, 1)

        misses = np.concatenate(([0], np.cumsum((prices < lo) | (prices > hi))))
        out_of_range = misses[ends + 1] - misses[ends + 1 - window]

        satisfied &= (mean_change < max_mean_change) & (out_of_range == 0)

    hits = np.flatnonzero(satisfied)
    if hits.size == 0:
        return CollusionFormation(formed_at=None)
    return CollusionFormation(formed_at=int(hits[0]) + window)


def _firm_verdict(
    series: Sequence[float],
    convergence: ConvergenceParams,
    oscillation: OscillationParams,
    round_index: int,
) -> tuple[StationarityVerdict, bool]:
    """Best available verdict for one firm, plus whether it passes bounded oscillation."""
    center = check_convergence(series, convergence) if len(series) >= convergence.window else None
    band = check_bounded_oscillation(series, oscillation) if len(series) >= oscillation.window else None
    if center is not None:
        verdict = StationarityVerdict(kind=VerdictKind.CONVERGED, evaluated_at=round_index, center=center)
    elif band is not None:
        verdict = StationarityVerdict(
            kind=VerdictKind.BOUNDED_OSCILLATION, evaluated_at=round_index, lo=band[0], hi=band[1]
        )
    else:
        verdict = StationarityVerdict(kind=VerdictKind.NOT_STATIONARY, evaluated_at=round_index)
    return verdict, band is not None


def stopping_check(
    series1: Sequence[float],
    series2: Sequence[float],
    criteria: StoppingCriteria,
    round_index: int,
) -> StoppingDecision:
    if not len(series1) == len(series2) == round_index:
        raise ValueError(
            f"round {round_index} does not match series lengths {len(series1)} / {len(series2)}"
        )

    verdicts = []
    bounded = []
    for slot, series in enumerate((series1, series2)):
        verdict, is_bounded = _firm_verdict(
            series, criteria.convergence[slot], criteria.oscillation[slot], round_index
        )
        verdicts.append(verdict)
        bounded.append(is_bounded)

    if all(v.kind is VerdictKind.CONVERGED for v in verdicts):
        return StoppingDecision(action=StopAction.STOP, verdicts=tuple(verdicts))
    if all(bounded):
        band_verdicts = []
        for slot, series in enumerate((series1, series2)):
            lo, hi = check_bounded_oscillation(series, criteria.oscillation[slot])
            band_verdicts.append(
                StationarityVerdict(
                    kind=VerdictKind.BOUNDED_OSCILLATION, evaluated_at=round_index, lo=lo, hi=hi
                )
            )
        return StoppingDecision(action=StopAction.STOP, verdicts=tuple(band_verdicts))
    if round_index >= criteria.hard_cap:
        return StoppingDecision(action=StopAction.HARD_STOP, verdicts=tuple(verdicts))
    return StoppingDecision(action=StopAction.CONTINUE, verdicts=tuple(verdicts))
