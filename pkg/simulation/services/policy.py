"""Pricing policies a firm can be driven by.

Scripted policies (Constant, MyopicBestResponse, GrimTrigger, Undercut, Echo)
and the tabular QLearning baseline make runs testable without a live model;
Llm wraps the chat-completion agent. Every policy exposes a versioned
`state_dict()` so checkpoints can restore it exactly.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from django.db import models

from economics.services.detect import FALLBACK_SPREAD
from economics.services.market import DerivedMarket, MarketError, best_response, reference_prices
from simulation.services.llm_agent import LlmAgent, LlmAgentConfig
from simulation.services.llm_client import ChatCompletionClient, LlmError
from simulation.services.observation import Observation
from simulation.services.prompts import PromptError

logger = logging.getLogger(__name__)

STATE_VERSION = 1


class PolicyFailure(Exception):
    def __init__(self, message: str, cause: Exception | None = None):
        super().__init__(message)
        self.cause = cause


class IncompatibleState(ValueError):
    pass


class PolicyKind(models.TextChoices):
    CONSTANT = "constant", "Constant price"
    MYOPIC_BEST_RESPONSE = "myopic_best_response", "Myopic best response"
    GRIM_TRIGGER = "grim_trigger", "Grim trigger"
    QLEARNING = "qlearning", "Q-learning"
    UNDERCUT = "undercut", "Undercut"
    ECHO = "echo", "Echo"
    LLM = "llm", "LLM agent"


# Parameters per kind; None marks a required value.
POLICY_PARAMETERS = {
    PolicyKind.CONSTANT: {"price": None},
    PolicyKind.MYOPIC_BEST_RESPONSE: {},
    PolicyKind.GRIM_TRIGGER: {"collusive": None, "punish": None, "tolerance": 0.2, "punish_length": 20},
    PolicyKind.QLEARNING: {
        "grid_size": 15,
        "grid_low": "",
        "grid_high": "",
        "learning_rate": 0.15,
        "discount": 0.95,
        "decay": 2e-5,
    },
    PolicyKind.UNDERCUT: {"step": 0.1},
    PolicyKind.ECHO: {"opening": ""},
    PolicyKind.LLM: {},
}

INTEGER_PARAMETERS = {"punish_length", "grid_size"}
TEXT_PARAMETERS = {"opening"}
# Blank means "derive from the reference prices".
OPTIONAL_PARAMETERS = {"grid_low", "grid_high"}


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    @classmethod
    def from_value(cls, value) -> "PolicySpec":
        """Parse `llm` or `{kind: grim_trigger, collusive: 8, ...}`; raises ValueError."""
        if isinstance(value, str):
            raw = {"kind": value}
        elif isinstance(value, dict):
            raw = dict(value)
        else:
            raise ValueError("policy must be a kind name or a mapping with a 'kind' key")

        kind = str(raw.pop("kind", "")).strip().lower()
        if kind not in PolicyKind.values:
            raise ValueError(f"unknown policy kind {kind!r}; expected one of {', '.join(PolicyKind.values)}")
        seed = raw.pop("seed", None)
        if seed is not None:
            if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
                raise ValueError("policy seed must be a non-negative integer")

        defaults = POLICY_PARAMETERS[PolicyKind(kind)]
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ValueError(f"{kind} does not take {', '.join(unknown)}")

        params = {}
        for name, default in defaults.items():
            value = raw.get(name, default)
            if value is None:
                raise ValueError(f"{kind} needs {name}")
            params[name] = _coerce(name, value)

        spec = cls(kind=kind, params=params, seed=seed)
        problems = spec.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return spec

    def problems(self) -> list[str]:
        p = self.params
        issues = []
        if self.kind == PolicyKind.CONSTANT and p["price"] < 0:
            issues.append("constant price must be non-negative")
        if self.kind == PolicyKind.GRIM_TRIGGER:
            if p["punish"] > p["collusive"]:
                issues.append("punish price must not exceed the collusive price")
            if p["tolerance"] <= 0:
                issues.append("tolerance must be positive")
            if p["punish_length"] < 1:
                issues.append("punish_length must be at least 1")
        if self.kind == PolicyKind.QLEARNING:
            if p["grid_size"] < 2:
                issues.append("grid_size must be at least 2")
            if not 0 < p["learning_rate"] <= 1:
                issues.append("learning_rate must lie in (0, 1]")
            if not 0 <= p["discount"] < 1:
                issues.append("discount must lie in [0, 1)")
            if p["decay"] < 0:
                issues.append("decay must be non-negative")
            if p["grid_low"] != "" and p["grid_high"] != "" and p["grid_low"] >= p["grid_high"]:
                issues.append("grid_low must be below grid_high")
        if self.kind == PolicyKind.UNDERCUT and p["step"] < 0:
            issues.append("undercut step must be non-negative")
        return issues

    def to_value(self):
        if not self.params and self.seed is None:
            return self.kind
        value = {"kind": self.kind, **self.params}
        if self.seed is not None:
            value["seed"] = self.seed
        return value


def _coerce(name: str, value):
    if name in TEXT_PARAMETERS:
        return str(value)
    if value == "" and name in OPTIONAL_PARAMETERS:
        return ""
    if isinstance(value, bool):
        raise ValueError(f"{name} must be a number")
    try:
        number = float(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{name} must be a number") from exc
    if not math.isfinite(number):
        raise ValueError(f"{name} must be finite")
    if name in INTEGER_PARAMETERS:
        if number != int(number):
            raise ValueError(f"{name} must be an integer")
        return int(number)
    return number


class Policy:
    kind = ""

    def decide_price(self, observation: Observation) -> float:
        raise NotImplementedError

    def converse(self, observation: Observation, inbound: str | None) -> str | None:
        return None

    def reflect(self, observation: Observation) -> str | None:
        return None

    def state_dict(self) -> dict:
        return {"version": STATE_VERSION, "kind": self.kind}

    def load_state(self, state: dict) -> None:
        if state.get("version") != STATE_VERSION or state.get("kind") != self.kind:
            raise IncompatibleState(
                f"cannot load {state.get('kind')!r} state v{state.get('version')} into {self.kind} v{STATE_VERSION}"
            )


class Constant(Policy):
    kind = PolicyKind.CONSTANT

    def __init__(self, price: float):
        self.price = price

    def decide_price(self, observation):
        return self.price


class MyopicBestResponse(Policy):
    kind = PolicyKind.MYOPIC_BEST_RESPONSE

    def __init__(self, market: DerivedMarket, firm: int):
        if market.is_homogeneous:
            raise ValueError("myopic best response needs differentiated products")
        self.market = market
        self.firm = firm

    def decide_price(self, observation):
        return best_response(self.market, self.firm, observation.rival_last_price)


class GrimTrigger(Policy):
    """Hold the collusive price; punish for `punish_length` rounds after any rival defection.

    A defection seen while punishing restarts the punishment.
    """

    kind = PolicyKind.GRIM_TRIGGER

    def __init__(self, collusive: float, punish: float, tolerance: float = 0.2, punish_length: int = 20):
        self.collusive = collusive
        self.punish = punish
        self.tolerance = tolerance
        self.punish_length = punish_length
        self.last_seen = 0
        self.punish_until = 0

    def decide_price(self, observation):
        threshold = self.collusive - self.tolerance
        for record in observation.window:
            if record.round < 1 or record.round <= self.last_seen:
                continue
            self.last_seen = record.round
            if record.rival_price < threshold:
                self.punish_until = observation.round + self.punish_length - 1
                logger.debug(
                    "[Policy] firm=%s rival defected in round %s; punishing through round %s",
                    observation.firm,
                    record.round,
                    self.punish_until,
                )
        return self.punish if observation.round <= self.punish_until else self.collusive

    def state_dict(self):
        return {**super().state_dict(), "last_seen": self.last_seen, "punish_until": self.punish_until}

    def load_state(self, state):
        super().load_state(state)
        self.last_seen = int(state["last_seen"])
        self.punish_until = int(state["punish_until"])


class Undercut(Policy):
    kind = PolicyKind.UNDERCUT

    def __init__(self, step: float = 0.1):
        self.step = step

    def decide_price(self, observation):
        return max(observation.own_cost, observation.rival_last_price - self.step)


class Echo(Policy):
    """Repeats whatever it is told, and matches the rival's last price."""

    kind = PolicyKind.ECHO

    def __init__(self, opening: str = ""):
        self.opening = opening

    def decide_price(self, observation):
        return observation.rival_last_price

    def converse(self, observation, inbound):
        if inbound:
            return inbound
        return self.opening or None


class QLearning(Policy):
    """Tabular Q-learning over a price grid; the state is the rival's last price snapped to the grid.

    Exploration is epsilon-greedy with epsilon = exp(-decay * round).
    """

    kind = PolicyKind.QLEARNING

    def __init__(
        self,
        grid: np.ndarray,
        rng: np.random.Generator,
        learning_rate: float = 0.15,
        discount: float = 0.95,
        decay: float = 2e-5,
    ):
        self.grid = np.asarray(grid, dtype=float)
        if self.grid.ndim != 1 or self.grid.size < 2 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("price grid must be strictly increasing")
        self.rng = rng
        self.learning_rate = learning_rate
        self.discount = discount
        self.decay = decay
        self.q = np.zeros((self.grid.size, self.grid.size))
        self.last_state: int | None = None
        self.last_action: int | None = None

    def _state(self, rival_price: float) -> int:
        return int(np.argmin(np.abs(self.grid - rival_price)))

    def decide_price(self, observation):
        previous = observation.last_record
        state = self._state(previous.rival_price)
        if self.last_action is not None and previous.round == observation.round - 1:
            target = previous.profit + self.discount * self.q[state].max()
            cell = (self.last_state, self.last_action)
            self.q[cell] += self.learning_rate * (target - self.q[cell])

        epsilon = math.exp(-self.decay * observation.round)
        explore = self.rng.random() < epsilon
        if explore:
            action = int(self.rng.integers(self.grid.size))
        else:
            action = int(np.argmax(self.q[state]))
        self.last_state, self.last_action = state, action
        return float(self.grid[action])

    def greedy_prices(self) -> list[float]:
        return [float(self.grid[i]) for i in np.argmax(self.q, axis=1)]

    def reflect(self, observation):
        pairs = ", ".join(
            f"{rival:.2f}->{own:.2f}" for rival, own in zip(self.grid, self.greedy_prices())
        )
        return f"Greedy price by rival's last price: {pairs}"

    def state_dict(self):
        return {
            **super().state_dict(),
            "grid": self.grid.tolist(),
            "q": self.q.tolist(),
            "last_state": self.last_state,
            "last_action": self.last_action,
            "rng": self.rng.bit_generator.state,
        }

    def load_state(self, state):
        super().load_state(state)
        if len(state["grid"]) != self.grid.size:
            raise IncompatibleState("checkpointed price grid has a different size")
        self.grid = np.asarray(state["grid"], dtype=float)
        self.q = np.asarray(state["q"], dtype=float)
        self.last_state = state["last_state"]
        self.last_action = state["last_action"]
        self.rng.bit_generator.state = state["rng"]


class Llm(Policy):
    kind = PolicyKind.LLM

    def __init__(self, agent: LlmAgent):
        self.agent = agent

    def _call(self, method, observation, what: str):
        try:
            return method(observation)
        except (LlmError, PromptError) as exc:
            raise PolicyFailure(
                f"{self.agent.cfg.firm_name} failed to {what} in round {observation.round}: {exc}", cause=exc
            ) from exc

    def decide_price(self, observation):
        return self._call(self.agent.decide, observation, "price")

    def converse(self, observation, inbound):
        return self._call(self.agent.converse, observation, "converse")

    def reflect(self, observation):
        return self._call(self.agent.reflect, observation, "reflect")


def qlearning_grid(market: DerivedMarket, firm: int, params: dict) -> np.ndarray:
    refs = reference_prices(market)
    slot = firm - 1
    low = refs.bertrand[slot] - 0.5
    spread = refs.spread(firm)
    if not spread:
        spread = FALLBACK_SPREAD
    high = refs.bertrand[slot] + spread + 0.5
    if params["grid_low"] != "":
        low = params["grid_low"]
    if params["grid_high"] != "":
        high = params["grid_high"]
    return np.linspace(max(low, 0.0), high, params["grid_size"])


def build_policy(
    spec: PolicySpec,
    firm: int,
    market: DerivedMarket,
    seed: np.random.SeedSequence | int | None = None,
    llm_config: LlmAgentConfig | None = None,
    client: ChatCompletionClient | None = None,
) -> Policy:
    """Instantiate the policy for `firm`; raises ValueError for settings the market cannot support."""
    p = spec.params
    kind = PolicyKind(spec.kind)
    if kind == PolicyKind.CONSTANT:
        return Constant(p["price"])
    if kind == PolicyKind.MYOPIC_BEST_RESPONSE:
        return MyopicBestResponse(market, firm)
    if kind == PolicyKind.GRIM_TRIGGER:
        return GrimTrigger(p["collusive"], p["punish"], p["tolerance"], p["punish_length"])
    if kind == PolicyKind.UNDERCUT:
        return Undercut(p["step"])
    if kind == PolicyKind.ECHO:
        return Echo(p["opening"])
    if kind == PolicyKind.QLEARNING:
        try:
            grid = qlearning_grid(market, firm, p)
        except MarketError as exc:
            raise ValueError(f"cannot place a price grid: {exc}") from exc
        rng = np.random.default_rng(spec.seed if spec.seed is not None else seed)
        return QLearning(grid, rng, p["learning_rate"], p["discount"], p["decay"])
    if llm_config is None or client is None:
        raise ValueError("llm policy needs agent settings and a chat client")
    return Llm(LlmAgent(llm_config, client))
