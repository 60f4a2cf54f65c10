"""Run configuration: YAML files and bundled experiment-group presets.

Keys follow the columns of the experiment table (planning, conversation,
persona, cost1, cost2, init_price1, init_price2, d, rounds) plus the market
constants, policies, seeds and model settings. Validation is done by
`simulation.forms.RunConfigForm`; failures raise ConfigError carrying the
form's field errors.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from django.conf import settings

from economics.services.market import MarketParams
from simulation.forms import RunConfigForm
from simulation.services.llm_client import IoMode
from simulation.services.policy import PolicySpec
from simulation.services.prompts import Persona

logger = logging.getLogger(__name__)

DEFAULT_FIRM_NAMES = ("Ed", "Gill")

# Settings that may change between a checkpoint and its continuation.
RESUMABLE_KEYS = {"planning", "conversation", "rounds", "io_mode", "cassette", "checkpoint_every"}


class ConfigError(Exception):
    def __init__(self, message: str, errors: dict | None = None):
        super().__init__(message)
        self.errors = errors or {}


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    enabled: bool


@dataclass(frozen=True)
class PhaseSchedule:
    segments: tuple[Segment, ...]

    @classmethod
    def constant(cls, enabled: bool, rounds: int) -> "PhaseSchedule":
        return cls(segments=(Segment(1, rounds, bool(enabled)),))

    @classmethod
    def from_value(cls, value, rounds: int) -> "PhaseSchedule":
        if isinstance(value, bool):
            return cls.constant(value, rounds)
        return cls(segments=tuple(Segment(start, end, enabled) for start, end, enabled in value))

    def enabled_at(self, round_index: int) -> bool:
        for segment in self.segments:
            if segment.start <= round_index <= segment.end:
                return segment.enabled
        raise ValueError(f"round {round_index} is outside the schedule")

    def to_value(self):
        if len(self.segments) == 1:
            return self.segments[0].enabled
        return [{"from": s.start, "to": s.end, "enabled": s.enabled} for s in self.segments]


@dataclass(frozen=True)
class ModelSettings:
    model_id: str = "gpt-4-0314"
    temperature: float = 0.7
    max_tokens: int = 128
    endpoint: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    parse_retries: int = 3

    def to_mapping(self) -> dict:
        return {
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "endpoint": self.endpoint,
            "api_key_env": self.api_key_env,
            "parse_retries": self.parse_retries,
        }


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    market: MarketParams
    policies: tuple[PolicySpec, PolicySpec]
    initial_prices: tuple[float, float]
    planning: PhaseSchedule
    conversation: PhaseSchedule
    personas: tuple[str, str]
    max_rounds: int
    seed: int = 0
    io_mode: str = IoMode.LIVE
    cassette: str = ""
    checkpoint_every: int = 0
    model: ModelSettings = field(default_factory=ModelSettings)
    firm_names: tuple[str, str] = DEFAULT_FIRM_NAMES
    convergence: dict = field(default_factory=dict)
    oscillation: dict = field(default_factory=dict)

    @property
    def uses_llm(self) -> bool:
        return any(spec.kind == "llm" for spec in self.policies)

    def to_mapping(self) -> dict:
        values = [Persona(p).value for p in self.personas]
        personas = values[0] if values[0] == values[1] else values
        mapping = {
            "run_id": self.run_id,
            "planning": self.planning.to_value(),
            "conversation": self.conversation.to_value(),
            "persona": personas,
            "cost1": self.market.c1,
            "cost2": self.market.c2,
            "init_price1": self.initial_prices[0],
            "init_price2": self.initial_prices[1],
            "a": self.market.a,
            "beta": self.market.beta,
            "d": self.market.d,
            "rounds": self.max_rounds,
            "policy1": self.policies[0].to_value(),
            "policy2": self.policies[1].to_value(),
            "seed": self.seed,
            "io_mode": IoMode(self.io_mode).value,
            "cassette": self.cassette,
            "checkpoint_every": self.checkpoint_every,
            "model": self.model.to_mapping(),
            "firm_names": list(self.firm_names),
            "convergence": dict(self.convergence),
            "oscillation": dict(self.oscillation),
        }
        return mapping


def from_mapping(raw: dict, default_run_id: str = "run") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping", {"__all__": ["Expected a mapping of settings."]})
    unknown = sorted(set(raw) - set(RunConfigForm.base_fields))
    if unknown:
        raise ConfigError(
            f"unknown configuration keys: {', '.join(unknown)}",
            {key: ["Unknown setting."] for key in unknown},
        )

    form = RunConfigForm(data=raw)
    if not form.is_valid():
        errors = {name: [str(message) for message in messages] for name, messages in form.errors.items()}
        summary = "; ".join(f"{name}: {' '.join(messages)}" for name, messages in errors.items())
        raise ConfigError(f"invalid configuration: {summary}", errors)

    data = form.cleaned_data
    rounds = data["rounds"]
    return RunConfig(
        run_id=data["run_id"] or default_run_id,
        market=MarketParams(a=data["a"], beta=data["beta"], d=data["d"], c1=data["cost1"], c2=data["cost2"]),
        policies=(data["policy1"], data["policy2"]),
        initial_prices=(data["init_price1"], data["init_price2"]),
        planning=PhaseSchedule.from_value(data["planning"], rounds),
        conversation=PhaseSchedule.from_value(data["conversation"], rounds),
        personas=data["persona"],
        max_rounds=rounds,
        seed=data["seed"] or 0,
        io_mode=IoMode(data["io_mode"] or IoMode.LIVE),
        cassette=data["cassette"] or "",
        checkpoint_every=data["checkpoint_every"] or 0,
        model=ModelSettings(**data["model"]) if data["model"] else ModelSettings(),
        firm_names=data["firm_names"] or DEFAULT_FIRM_NAMES,
        convergence=data["convergence"] or {},
        oscillation=data["oscillation"] or {},
    )


def _read_yaml(path: Path) -> dict:
    try:
        with path.open(encoding="utf-8") as handle:
            return yaml.safe_load(handle) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", {"__all__": [f"{path} does not exist."]}) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}", {"__all__": [str(exc)]}) from exc


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    raw = _read_yaml(path)
    return from_mapping({**raw, **(overrides or {})}, default_run_id=path.stem)


def write_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(config.to_mapping(), handle, sort_keys=False, allow_unicode=True)
    return path


def config_digest(config: RunConfig) -> str:
    """Hash of everything a continuation must keep unchanged."""
    stable = {key: value for key, value in config.to_mapping().items() if key not in RESUMABLE_KEYS}
    canonical = json.dumps(stable, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(config: RunConfig, overrides: dict, resumable_only: bool = False) -> RunConfig:
    base = config.to_mapping()
    if resumable_only:
        errors = {
            key: ["Cannot be changed when resuming a run."]
            for key, value in overrides.items()
            if key not in RESUMABLE_KEYS and value != base.get(key)
        }
        if errors:
            raise ConfigError(f"resume may only change {', '.join(sorted(RESUMABLE_KEYS))}", errors)
    return from_mapping({**base, **overrides}, default_run_id=config.run_id)


@dataclass(frozen=True)
class Preset:
    name: str
    title: str
    defaults: dict
    rows: tuple[dict, ...]

    def row_mapping(self, row: int) -> dict:
        if not 1 <= row <= len(self.rows):
            raise ConfigError(
                f"preset {self.name} has rows 1..{len(self.rows)}, not {row}",
                {"preset": [f"Row {row} does not exist."]},
            )
        return {**self.defaults, **self.rows[row - 1]}


def presets_dir() -> Path:
    return Path(getattr(settings, "DUOPOLY_PRESETS_DIR"))


def list_presets() -> list[Preset]:
    return [read_preset(path) for path in sorted(presets_dir().glob("group*.yaml"))]


def read_preset(path: Path) -> Preset:
    raw = _read_yaml(path)
    return Preset(
        name=path.stem,
        title=raw.get("title", ""),
        defaults=raw.get("defaults", {}),
        rows=tuple(raw.get("rows", [])),
    )


def load_preset(name: str, overrides: dict | None = None) -> RunConfig:
    """Resolve `group1-basic` (row 1) or `group1-basic:3` into a validated config."""
    base, _, row_text = name.partition(":")
    try:
        row = int(row_text) if row_text else 1
    except ValueError as exc:
        raise ConfigError(f"bad preset row in {name!r}", {"preset": ["Row must be an integer."]}) from exc
    path = presets_dir() / f"{base}.yaml"
    if not path.exists():
        known = ", ".join(preset.name for preset in list_presets())
        raise ConfigError(f"unknown preset {base!r}", {"preset": [f"Known presets: {known}."]})
    preset = read_preset(path)
    mapping = preset.row_mapping(row)
    logger.info("[Config] preset %s row %s", base, row)
    return from_mapping({**mapping, **(overrides or {})}, default_run_id=f"{base}-{row}")
