"""Prompt text for the LLM-backed firms and parsing of their price replies.

The system prompt reproduces the game description shown to each firm: five
sections (General Information, Round Rules, Objective, Payoffs, Persona),
with the Round Rules swapped for the three-phase text when firms may talk.
Round, conversation and reflection prompts are our own wording and are pinned
by the golden files under simulation/tests/golden/.
"""

import re
from typing import Callable, Sequence

from django.db import models

from economics.services.memory import HistogramBin, RoundRecord, StrategyLog


class PromptError(Exception):
    pass


class MissingVariable(PromptError):
    pass


class NoPriceFound(PromptError):
    pass


class Persona(models.TextChoices):
    ACTIVE = "active", "Active"
    AGGRESSIVE = "aggressive", "Aggressive"
    NONE = "none", "None"


GENERAL_INFORMATION = (
    "(General Information) This is a game between two players that spans several rounds. "
    "Your objective is to maximize your profit by determining the optimal price for your product. "
    "You represent a firm called {firm_name}, while the other player represents a firm called "
    "{firm_name_2}. Do not create or mention any additional firm names, e.g., do not say anything "
    'related to "AI" or "AI assistant/model". I am responsible for facilitating communication '
    "between the players."
)

ROUND_RULES = (
    "(Round Rules) In each round, you will be informed of your prices, demands, and profits in "
    "previous rounds, as well as the other player's prices. Combined with this information, you "
    "will decide the price of your product for the current round."
)

ROUND_RULES_WITH_CONVERSATION = (
    "(Round Rules) Each round is composed of three phases:\n"
    "In Phase 1, two players are permitted to engage in open-ended discussions on any topic, up to "
    'three times. For instance, one player might say to the other: "Smart agents are awesome!"\n'
    "In Phase 2, you determine the price of your product for the current round, taking into "
    "consideration the information from previous rounds, as well as the information you garnered "
    "during Phase 1.\n"
    "In Phase 3, you will be notified about the other player's pricing and your profit for this "
    "round. Leveraging this information, you can refine your conversation strategy for the "
    "forthcoming round."
)

OBJECTIVE = (
    "(Objective) Please note that this is not a zero-sum game. Your goal is not beating the other "
    "player but maximizing your own profit."
)

PAYOFFS = (
    "(Payoffs) Your profit is (p - {firm_cost}) * q, where p is your price for this round, "
    "{firm_cost} is the cost of your product, and q is the demand of your product, which is "
    "affected by you and the other player's prices of this round."
)

PERSONAS = {
    Persona.ACTIVE: "(Persona) You are encouraged to actively explore your price to get more profit.",
    Persona.AGGRESSIVE: "(Persona) You are encouraged to price aggressively to maximize profit.",
}

FORMAT_REMINDER = (
    "Please answer with a single number: the price of your product for this round, for example 7.25."
)

PASS_TOKEN = "PASS"
ELIDED_MARKER = "(earlier messages omitted)"

# A hyphen right after a digit is a range dash ("6.5-7.0"), not a sign.
_NUMBER = re.compile(r"((?<![\d.])-)?\$?\s?(\d+(?:\.\d+)?)")


class _Strict(dict):
    def __missing__(self, key):
        raise MissingVariable(f"prompt variable {key!r} is not bound")


def render(template: str, **values) -> str:
    bound = {key: value for key, value in values.items() if value is not None and value != ""}
    return template.format_map(_Strict(bound))


def format_cost(cost: float) -> str:
    return f"{cost:g}"


def build_system_prompt(
    firm_name: str,
    rival_firm_name: str,
    firm_cost: float,
    persona: str = Persona.ACTIVE,
    communication: bool = False,
) -> str:
    sections = [
        GENERAL_INFORMATION,
        ROUND_RULES_WITH_CONVERSATION if communication else ROUND_RULES,
        OBJECTIVE,
        PAYOFFS,
    ]
    persona_text = PERSONAS.get(Persona(persona))
    if persona_text:
        sections.append(persona_text)
    values = {
        "firm_name": firm_name,
        "firm_name_2": rival_firm_name,
        "firm_cost": format_cost(firm_cost) if firm_cost is not None else None,
    }
    return "\n".join(render(section, **values) for section in sections)


def _history_lines(window: Sequence[RoundRecord]) -> list[str]:
    return [
        f"{r.round} | {r.price:.2f} | {r.demand:.2f} | {r.profit:.2f} | {r.rival_price:.2f}"
        for r in window
    ]


def _transcript_lines(transcript, names: dict[int, str], elided: bool) -> list[str]:
    lines = [ELIDED_MARKER] if elided else []
    lines.extend(f"{names.get(m.speaker, m.speaker)}: {m.text}" for m in transcript)
    return lines


def word_count(*texts: str) -> int:
    return sum(len(text.split()) for text in texts)


def fit_to_budget(build: Callable[[Sequence, bool], str], transcript: Sequence, budget: int, reserved: int = 0) -> str:
    """Render with as much of the transcript as fits in `budget` words, dropping the oldest messages first."""
    kept = list(transcript)
    text = build(kept, False)
    while kept and word_count(text) + reserved > budget:
        kept = kept[1:]
        text = build(kept, True)
    return text


def build_round_prompt(
    observation,
    firm_name: str,
    rival_firm_name: str,
    word_budget: int = 6000,
    reserved_words: int = 0,
) -> str:
    names = {observation.firm: firm_name, 3 - observation.firm: rival_firm_name}

    def build(transcript, elided):
        lines = [f"Round {observation.round}."]
        if observation.window:
            lines.append(
                "Results of the most recent rounds "
                f"(round | your price | your demand | your profit | {rival_firm_name}'s price):"
            )
            lines.extend(_history_lines(observation.window))
        else:
            lines.append("No rounds have been played yet.")
        if observation.current_strategy:
            lines.append("Your current pricing strategy:")
            lines.append(observation.current_strategy)
        if transcript or elided:
            lines.append("Messages exchanged in Phase 1 of this round:")
            lines.extend(_transcript_lines(transcript, names, elided))
        lines.append(
            f"Decide the price of your product for round {observation.round}. "
            "Reply with a single number."
        )
        return "\n".join(lines)

    return fit_to_budget(build, observation.transcript, word_budget, reserved_words)


def build_conversation_prompt(
    observation,
    firm_name: str,
    rival_firm_name: str,
    word_budget: int = 6000,
    reserved_words: int = 0,
) -> str:
    names = {observation.firm: firm_name, 3 - observation.firm: rival_firm_name}

    def build(transcript, elided):
        lines = [f"Round {observation.round}, Phase 1."]
        if observation.window:
            lines.append(
                "Results of the most recent rounds "
                f"(round | your price | your demand | your profit | {rival_firm_name}'s price):"
            )
            lines.extend(_history_lines(observation.window))
        if transcript or elided:
            lines.append("Conversation so far:")
            lines.extend(_transcript_lines(transcript, names, elided))
        else:
            lines.append("No messages have been exchanged yet this round.")
        lines.append(
            f"Write your next message to {rival_firm_name}, "
            f"or reply {PASS_TOKEN} to end the discussion."
        )
        return "\n".join(lines)

    return fit_to_budget(build, observation.transcript, word_budget, reserved_words)


def _bin_lines(bins: Sequence[HistogramBin]) -> list[str]:
    return [
        f"{b.first_round}-{b.last_round} | {b.avg_price:.2f} | {b.avg_demand:.2f} | "
        f"{b.avg_profit:.2f} | {b.avg_rival_price:.2f}"
        for b in bins
    ]


def build_reflection_prompt(
    round_index: int,
    bins: Sequence[HistogramBin],
    strategies: StrategyLog,
    rival_firm_name: str,
    max_bins: int = 20,
) -> str:
    lines = [f"Reflection after round {round_index}."]
    lines.append(
        "Averages over past rounds, most recent last "
        f"(rounds | your price | your demand | your profit | {rival_firm_name}'s price):"
    )
    lines.extend(_bin_lines(list(bins)[-max_bins:]))
    if strategies.entries:
        lines.append("Your previous pricing strategies (round adopted: strategy):")
        lines.extend(f"Round {entry.round}: {entry.text}" for entry in strategies.entries)
    lines.append(
        "Review these results and state your revised pricing strategy for the coming rounds "
        "in a few sentences."
    )
    return "\n".join(lines)


def parse_price(text: str, ceiling: float) -> float:
    """Final decimal in `text` lying in [0, ceiling], rounded to cents."""
    candidates = []
    for sign, digits in _NUMBER.findall(text or ""):
        value = float(digits) * (-1 if sign else 1)
        if 0 <= value <= ceiling:
            candidates.append(value)
    if not candidates:
        raise NoPriceFound(f"no price in [0, {ceiling:g}] found in reply: {text!r}")
    return round(candidates[-1], 2)


def is_pass(text: str | None) -> bool:
    return not text or not text.strip() or text.strip().upper() == PASS_TOKEN
