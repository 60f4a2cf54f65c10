from dataclasses import dataclass, field

from economics.services.memory import HistogramBin, RoundRecord, StrategyLog


@dataclass(frozen=True)
class TranscriptMessage:
    round: int
    exchange: int
    speaker: int
    text: str

    def to_dict(self) -> dict:
        return {"round": self.round, "exchange": self.exchange, "speaker": self.speaker, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict) -> "TranscriptMessage":
        return cls(
            round=int(data["round"]),
            exchange=int(data["exchange"]),
            speaker=int(data["speaker"]),
            text=data["text"],
        )


@dataclass(frozen=True)
class Observation:
    """What one firm may see when it acts in a round.

    Built from pre-round state only: the window never contains the round
    being decided. `bins` and `strategies` are filled for reflection.
    """

    round: int
    firm: int
    own_cost: float
    window: tuple[RoundRecord, ...] = ()
    bins: tuple[HistogramBin, ...] = ()
    current_strategy: str | None = None
    strategies: StrategyLog = field(default_factory=StrategyLog)
    transcript: tuple[TranscriptMessage, ...] = ()
    communication: bool = False

    @property
    def last_record(self) -> RoundRecord | None:
        return self.window[-1] if self.window else None

    @property
    def rival_last_price(self) -> float | None:
        return self.window[-1].rival_price if self.window else None
