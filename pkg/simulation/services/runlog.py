"""Per-run directory layout and JSON Lines helpers.

A run directory `<out_dir>/<run_id>/` holds:
    rounds.jsonl       one line per firm per round
    transcripts.jsonl  Phase 1 messages
    summary.json       RunResult summary
    config.yaml        the configuration the run executed with
    checkpoint.json    resumable state
"""

import json
from dataclasses import dataclass
from pathlib import Path

ROUNDS_LOG = "rounds.jsonl"
TRANSCRIPTS_LOG = "transcripts.jsonl"
SUMMARY_FILE = "summary.json"
CONFIG_SNAPSHOT = "config.yaml"
CHECKPOINT_FILE = "checkpoint.json"
LOCK_FILE = ".lock"

LOG_FIELDS = (
    "run_id",
    "round",
    "firm",
    "price",
    "demand",
    "profit",
    "rival_price",
    "reflected",
    "conversed",
    "strategy_digest",
)


class RunLogError(Exception):
    pass


@dataclass(frozen=True)
class RunLogLine:
    run_id: str
    round: int
    firm: int
    price: float
    demand: float
    profit: float
    rival_price: float
    reflected: bool = False
    conversed: bool = False
    strategy_digest: str | None = None

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in LOG_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "RunLogLine":
        missing = [name for name in LOG_FIELDS if name not in data]
        if missing:
            raise RunLogError(f"log line is missing {', '.join(missing)}")
        try:
            return cls(
                run_id=str(data["run_id"]),
                round=int(data["round"]),
                firm=int(data["firm"]),
                price=float(data["price"]),
                demand=float(data["demand"]),
                profit=float(data["profit"]),
                rival_price=float(data["rival_price"]),
                reflected=bool(data["reflected"]),
                conversed=bool(data["conversed"]),
                strategy_digest=data["strategy_digest"],
            )
        except (TypeError, ValueError) as exc:
            raise RunLogError(f"malformed log line: {exc}") from exc


def dumps(row: dict) -> str:
    return json.dumps(row, ensure_ascii=False)


def append_jsonl(path: Path, rows) -> None:
    with Path(path).open("a", encoding="utf-8") as handle:
        for row in rows:
            handle.write(dumps(row) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise RunLogError(f"log not found: {path}")
    rows = []
    with path.open(encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise RunLogError(f"{path.name} line {number} is not JSON: {exc}") from exc
    return rows


def truncate_jsonl(path: Path, last_round: int) -> None:
    """Keep only lines whose round is <= last_round, byte for byte."""
    path = Path(path)
    if not path.exists():
        path.touch()
        return
    with path.open(encoding="utf-8") as handle:
        kept = [line for line in handle if line.strip() and json.loads(line)["round"] <= last_round]
    with path.open("w", encoding="utf-8") as handle:
        handle.writelines(kept)


def read_log(path: Path) -> list[RunLogLine]:
    return [RunLogLine.from_dict(row) for row in read_jsonl(path)]


def resolve_run_dir(path: str | Path) -> Path:
    """Accept either a run directory or the rounds.jsonl inside it."""
    path = Path(path)
    return path if path.is_dir() else path.parent


def price_series(lines: list[RunLogLine]) -> tuple[list[float], list[float]]:
    by_firm = {1: {}, 2: {}}
    for line in lines:
        by_firm.setdefault(line.firm, {})[line.round] = line.price
    rounds = sorted(by_firm[1])
    return [by_firm[1][r] for r in rounds], [by_firm[2].get(r) for r in rounds]


def write_json(path: Path, document: dict) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, ensure_ascii=False)
        handle.write("\n")
