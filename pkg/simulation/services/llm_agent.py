import logging
from dataclasses import dataclass

from simulation.services.llm_client import ChatCompletionClient, ChatMessage, ChatRequest, LlmError
from simulation.services.observation import Observation
from simulation.services.prompts import (
    FORMAT_REMINDER,
    NoPriceFound,
    Persona,
    build_conversation_prompt,
    build_reflection_prompt,
    build_round_prompt,
    build_system_prompt,
    is_pass,
    parse_price,
    word_count,
)

logger = logging.getLogger(__name__)


class ParseExhausted(LlmError):
    pass


@dataclass(frozen=True)
class LlmAgentConfig:
    firm_name: str
    rival_firm_name: str
    firm_cost: float
    price_ceiling: float
    persona: str = Persona.ACTIVE
    model_id: str = "gpt-4-0314"
    temperature: float = 0.7
    max_tokens: int = 128
    parse_retries: int = 3
    word_budget: int = 6000
    max_bins: int = 20

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be >= 0")


class LlmAgent:
    def __init__(self, cfg: LlmAgentConfig, client: ChatCompletionClient):
        self.cfg = cfg
        self.client = client

    def system_prompt(self, communication: bool) -> str:
        return build_system_prompt(
            self.cfg.firm_name,
            self.cfg.rival_firm_name,
            self.cfg.firm_cost,
            persona=self.cfg.persona,
            communication=communication,
        )

    def _request(self, *messages: ChatMessage) -> ChatRequest:
        return ChatRequest(
            model=self.cfg.model_id,
            messages=tuple(messages),
            temperature=self.cfg.temperature,
            max_tokens=self.cfg.max_tokens,
        )

    def decide(self, observation: Observation) -> float:
        system = self.system_prompt(observation.communication)
        prompt = build_round_prompt(
            observation,
            self.cfg.firm_name,
            self.cfg.rival_firm_name,
            word_budget=self.cfg.word_budget,
            reserved_words=word_count(system),
        )
        messages = [ChatMessage("system", system), ChatMessage("user", prompt)]
        reply = ""
        for attempt in range(self.cfg.parse_retries + 1):
            reply = self.client.complete(self._request(*messages))
            try:
                return parse_price(reply, self.cfg.price_ceiling)
            except NoPriceFound:
                logger.info(
                    "[LLM Agent] %s round=%s reply without a price (attempt %s)",
                    self.cfg.firm_name,
                    observation.round,
                    attempt + 1,
                )
                messages = [
                    ChatMessage("system", system),
                    ChatMessage("user", prompt),
                    ChatMessage("user", FORMAT_REMINDER),
                ]
        raise ParseExhausted(
            f"{self.cfg.firm_name} gave no usable price in round {observation.round} "
            f"after {self.cfg.parse_retries + 1} attempts; last reply: {reply!r}"
        )

    def converse(self, observation: Observation) -> str | None:
        system = self.system_prompt(True)
        prompt = build_conversation_prompt(
            observation,
            self.cfg.firm_name,
            self.cfg.rival_firm_name,
            word_budget=self.cfg.word_budget,
            reserved_words=word_count(system),
        )
        reply = self.client.complete(self._request(ChatMessage("system", system), ChatMessage("user", prompt)))
        return None if is_pass(reply) else reply.strip()

    def reflect(self, observation: Observation) -> str | None:
        system = self.system_prompt(observation.communication)
        prompt = build_reflection_prompt(
            observation.round,
            observation.bins,
            observation.strategies,
            self.cfg.rival_firm_name,
            max_bins=self.cfg.max_bins,
        )
        reply = self.client.complete(self._request(ChatMessage("system", system), ChatMessage("user", prompt)))
        return reply.strip() or None
