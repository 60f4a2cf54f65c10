"""Bounded memory for one firm: the recent-round window, 20-round histogram
summaries, and the log of strategies adopted at each reflection.

A history is a list of RoundRecord seen from one firm's side (own price,
demand and profit plus the rival's price). A record with round 0 is the
pseudo-history seeded from the configured initial prices; it shows up in
windows but not in histogram bins.
"""

from dataclasses import dataclass, field, replace
from typing import Sequence


class HistoryError(Exception):
    pass


class EmptyStrategy(HistoryError):
    pass


@dataclass(frozen=True)
class RoundRecord:
    round: int
    price: float
    demand: float
    profit: float
    rival_price: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "price": self.price,
            "demand": self.demand,
            "profit": self.profit,
            "rival_price": self.rival_price,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoundRecord":
        return cls(
            round=int(data["round"]),
            price=float(data["price"]),
            demand=float(data["demand"]),
            profit=float(data["profit"]),
            rival_price=float(data["rival_price"]),
        )


@dataclass(frozen=True)
class HistogramBin:
    bin_index: int
    first_round: int
    last_round: int
    avg_price: float
    avg_demand: float
    avg_profit: float
    avg_rival_price: float
    rounds_covered: int
    partial: bool = False


@dataclass(frozen=True)
class MemoryConfig:
    window_k: int = 20
    bin_size: int = 20
    max_bins: int = 20
    reflection_period: int = 20
    strategy_capacity: int = 20

    def __post_init__(self):
        for name in ("window_k", "bin_size", "max_bins", "reflection_period", "strategy_capacity"):
            if getattr(self, name) < 1:
                raise HistoryError(f"{name} must be positive")


@dataclass(frozen=True)
class StrategyEntry:
    round: int
    text: str


@dataclass(frozen=True)
class StrategyLog:
    entries: tuple[StrategyEntry, ...] = field(default=())
    capacity: int = 20

    @property
    def latest(self) -> str | None:
        return self.entries[-1].text if self.entries else None

    def to_list(self) -> list[dict]:
        return [{"round": entry.round, "text": entry.text} for entry in self.entries]

    @classmethod
    def from_list(cls, items: list[dict], capacity: int = 20) -> "StrategyLog":
        return cls(
            entries=tuple(StrategyEntry(round=int(item["round"]), text=item["text"]) for item in items),
            capacity=capacity,
        )


def window_view(history: Sequence[RoundRecord], cfg: MemoryConfig) -> list[RoundRecord]:
    return list(history[-cfg.window_k:]) if history else []


def summarize_history(history: Sequence[RoundRecord], cfg: MemoryConfig) -> list[HistogramBin]:
    played = [record for record in history if record.round >= 1]
    bins = []
    for start in range(0, len(played), cfg.bin_size):
        members = played[start:start + cfg.bin_size]
        count = len(members)
        bins.append(
            HistogramBin(
                bin_index=start // cfg.bin_size + 1,
                first_round=members[0].round,
                last_round=members[-1].round,
                avg_price=sum(r.price for r in members) / count,
                avg_demand=sum(r.demand for r in members) / count,
                avg_profit=sum(r.profit for r in members) / count,
                avg_rival_price=sum(r.rival_price for r in members) / count,
                rounds_covered=count,
                partial=count < cfg.bin_size,
            )
        )
    return bins[-cfg.max_bins:]


def reflection_due(round_index: int, cfg: MemoryConfig) -> bool:
    if round_index < 1:
        raise ValueError(f"rounds start at 1, got {round_index}")
    return round_index % cfg.reflection_period == 0


def record_strategy(log: StrategyLog, round_index: int, text: str) -> StrategyLog:
    if not text or not text.strip():
        raise EmptyStrategy(f"empty strategy at round {round_index}")
    entries = (*log.entries, StrategyEntry(round=round_index, text=text))
    return replace(log, entries=entries[-log.capacity:])
