import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    run_id: str
    round: int
    config: dict
    config_digest: str
    histories: tuple[list, list]
    strategies: tuple[list, list]
    policy_states: tuple[dict, dict]
    cassette_position: int = 0

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "round": self.round,
            "config": self.config,
            "config_digest": self.config_digest,
            "histories": list(self.histories),
            "strategies": list(self.strategies),
            "policy_states": list(self.policy_states),
            "cassette_position": self.cassette_position,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Checkpoint":
        try:
            return cls(
                run_id=data["run_id"],
                round=int(data["round"]),
                config=data["config"],
                config_digest=data["config_digest"],
                histories=tuple(data["histories"]),
                strategies=tuple(data["strategies"]),
                policy_states=tuple(data["policy_states"]),
                cassette_position=int(data.get("cassette_position", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"checkpoint body is incomplete: {exc}") from exc


def _canonical(body: dict) -> str:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write atomically: a temp file in the same directory replaces the old checkpoint."""
    path = Path(path)
    body = checkpoint.to_dict()
    document = {
        "format_version": FORMAT_VERSION,
        "checksum": hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest(),
        "body": body,
    }
    tmp_path = path.with_name(f"{path.name}.tmp")
    with tmp_path.open("w", encoding="utf-8") as handle:
        json.dump(document, handle, ensure_ascii=False)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp_path, path)
    logger.info("[Checkpoint] run=%s round=%s -> %s", checkpoint.run_id, checkpoint.round, path)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ChecksumMismatch(f"checkpoint {path} is not readable JSON: {exc}") from exc

    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")
    body = document.get("body")
    expected = hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest() if isinstance(body, dict) else None
    if expected is None or expected != document.get("checksum"):
        raise ChecksumMismatch(f"checkpoint {path} failed its checksum")
    return Checkpoint.from_dict(body)
