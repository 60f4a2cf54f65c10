import json

import yaml
from django.core.management.base import BaseCommand, CommandError

from economics.services.detect import DetectorError
from economics.services.market import MarketError
from economics.services.memory import HistoryError
from simulation.services.checkpoint import CheckpointError
from simulation.services.config import ConfigError
from simulation.services.engine import RunDirectoryLocked
from simulation.services.llm_client import LlmError
from simulation.services.policy import PolicyFailure
from simulation.services.prompts import PromptError
from simulation.services.runlog import RunLogError

KNOWN_ERRORS = (
    ConfigError,
    CheckpointError,
    RunDirectoryLocked,
    PolicyFailure,
    LlmError,
    PromptError,
    MarketError,
    DetectorError,
    HistoryError,
    RunLogError,
)


def error_document(exc: Exception) -> dict:
    details = None
    if isinstance(exc, ConfigError):
        details = exc.errors
    elif isinstance(exc, PolicyFailure) and exc.cause is not None:
        details = {"cause": type(exc.cause).__name__, "message": str(exc.cause)}
    return {"error": type(exc).__name__, "message": str(exc), "details": details}


class DuopolyCommand(BaseCommand):
    """Base for the duopoly_* commands.

    Subclasses implement `run(**options)`. Known failures are reported as one
    JSON line on stderr and turned into a nonzero exit.
    """

    def handle(self, *args, **options):
        try:
            return self.run(*args, **options)
        except KNOWN_ERRORS as exc:
            self.stderr.write(json.dumps(error_document(exc), ensure_ascii=False, default=str))
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=1) from exc

    def run(self, *args, **options):
        raise NotImplementedError

    def emit(self, document: dict) -> None:
        self.stdout.write(json.dumps(document, indent=2, ensure_ascii=False))

    @staticmethod
    def parse_overrides(text: str | None) -> dict:
        """`--overrides` takes an inline YAML mapping, e.g. "{rounds: 50, seed: 3}"."""
        if not text:
            return {}
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--overrides is not valid YAML: {exc}", {"overrides": [str(exc)]}) from exc
        if not isinstance(value, dict):
            raise ConfigError("--overrides must be a mapping", {"overrides": ["Expected a mapping."]})
        return value

    @staticmethod
    def flag_overrides(options: dict) -> dict:
        overrides = {}
        for flag, key in (("rounds", "rounds"), ("seed", "seed"), ("io", "io_mode"), ("cassette", "cassette")):
            if options.get(flag) is not None:
                overrides[key] = options[flag]
        return overrides
