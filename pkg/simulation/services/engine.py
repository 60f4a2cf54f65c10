"""The round loop.

Each round r runs, in order:
    1. Phase 1 conversation, when the conversation schedule enables round r
    2. both prices, each decided from pre-round state only
    3. market evaluation and the stopping check
    4. reflection, when due and the planning schedule enables round r
    5. one log line per firm (plus any Phase 1 messages)

Initial prices enter as a round-0 record in each firm's history, visible in
the first windows but never logged, binned or fed to the detectors.
"""

import hashlib
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.conf import settings

from economics.services.detect import (
    CollusionFormation,
    DetectorError,
    StationarityVerdict,
    StopAction,
    StoppingCriteria,
    StoppingDecision,
    detect_collusion_formation,
    stopping_check,
)
from economics.services.market import MarketError, derive_market, profit, reference_prices
from economics.services.memory import (
    MemoryConfig,
    RoundRecord,
    StrategyLog,
    record_strategy,
    reflection_due,
    summarize_history,
    window_view,
)
from simulation.services.checkpoint import Checkpoint, VersionMismatch, read_checkpoint, write_checkpoint
from simulation.services.config import ConfigError, RunConfig, apply_overrides, config_digest, from_mapping, write_config
from simulation.services.llm_agent import LlmAgentConfig
from simulation.services.llm_client import Cassette, ChatCompletionClient, IoMode
from simulation.services.observation import Observation, TranscriptMessage
from simulation.services.policy import IncompatibleState, Policy, PolicyFailure, build_policy
from simulation.services.runlog import (
    CHECKPOINT_FILE,
    CONFIG_SNAPSHOT,
    LOCK_FILE,
    ROUNDS_LOG,
    SUMMARY_FILE,
    TRANSCRIPTS_LOG,
    RunLogLine,
    append_jsonl,
    truncate_jsonl,
    write_json,
)

logger = logging.getLogger(__name__)

MAX_EXCHANGES = 3


class RunDirectoryLocked(Exception):
    pass


@dataclass(frozen=True)
class RunResult:
    run_id: str
    rounds_executed: int
    outcome: str
    verdicts: tuple[StationarityVerdict, StationarityVerdict]
    collusion: CollusionFormation | None
    run_dir: Path

    @property
    def log_path(self) -> Path:
        return self.run_dir / ROUNDS_LOG

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "rounds_executed": self.rounds_executed,
            "outcome": self.outcome,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "collusion_formed_at": self.collusion.formed_at if self.collusion else None,
            "run_dir": str(self.run_dir),
        }


def strategy_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RoundMark:
    """Engine state between rounds, restored when a round aborts part way."""

    round: int
    lengths: dict[int, int]
    strategies: dict[int, StrategyLog]
    policy_states: dict[int, dict]
    cassette_position: int | None


class Engine:
    def __init__(
        self,
        config: RunConfig,
        out_dir: str | Path | None = None,
        client: ChatCompletionClient | None = None,
        decision_order: tuple[int, int] = (1, 2),
        memory: MemoryConfig | None = None,
    ):
        if sorted(decision_order) != [1, 2]:
            raise ValueError(f"decision order must be a permutation of (1, 2), got {decision_order}")
        self.config = config
        self.decision_order = tuple(decision_order)
        self.memory = memory or MemoryConfig()
        try:
            self.market = derive_market(config.market)
            self.refs = reference_prices(self.market)
        except MarketError as exc:
            raise ConfigError(str(exc), {"__all__": [str(exc)]}) from exc
        try:
            self.criteria = StoppingCriteria.from_reference(
                self.refs,
                hard_cap=int(getattr(settings, "DUOPOLY_HARD_CAP", 2000)),
                convergence_overrides=config.convergence,
                oscillation_overrides=config.oscillation,
            )
        except DetectorError as exc:
            raise ConfigError(str(exc), {"convergence": [str(exc)]}) from exc

        self.run_dir = Path(out_dir or settings.DUOPOLY_RUNS_ROOT) / config.run_id
        self.client = client if client is not None else (self._make_client() if config.uses_llm else None)
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.policies: dict[int, Policy] = {firm: self._build_policy(firm, seeds[firm - 1]) for firm in (1, 2)}

        self.round = 0
        self.histories: dict[int, list[RoundRecord]] = {1: [], 2: []}
        self.series: dict[int, list[float]] = {1: [], 2: []}
        self.strategies = {firm: StrategyLog(capacity=self.memory.strategy_capacity) for firm in (1, 2)}

    def _make_client(self) -> ChatCompletionClient:
        cassette = Cassette(self.config.cassette) if self.config.cassette else None
        return ChatCompletionClient(
            io_mode=self.config.io_mode,
            cassette=cassette,
            endpoint=self.config.model.endpoint,
            api_key_env=self.config.model.api_key_env,
        )

    def _build_policy(self, firm: int, seed: np.random.SeedSequence) -> Policy:
        names = self.config.firm_names
        model = self.config.model
        llm_config = LlmAgentConfig(
            firm_name=names[firm - 1],
            rival_firm_name=names[2 - firm],
            firm_cost=self.config.market.cost(firm),
            price_ceiling=self.config.market.a,
            persona=self.config.personas[firm - 1],
            model_id=model.model_id,
            temperature=model.temperature,
            max_tokens=model.max_tokens,
            parse_retries=model.parse_retries,
            word_budget=int(getattr(settings, "PROMPT_WORD_BUDGET", 6000)),
            max_bins=self.memory.max_bins,
        )
        try:
            return build_policy(
                self.config.policies[firm - 1],
                firm,
                self.market,
                seed=seed,
                llm_config=llm_config,
                client=self.client,
            )
        except ValueError as exc:
            raise ConfigError(f"policy{firm}: {exc}", {f"policy{firm}": [str(exc)]}) from exc

    @contextmanager
    def _locked(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        lock_path = self.run_dir / LOCK_FILE
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunDirectoryLocked(f"{self.run_dir} is in use by another run") from exc
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)

    # -- state -------------------------------------------------------------

    def _seed_round_zero(self) -> None:
        i1, i2 = self.config.initial_prices
        outcome = profit(self.market, i1, i2)
        self.histories = {
            1: [RoundRecord(round=0, price=i1, demand=outcome.q1, profit=outcome.pi1, rival_price=i2)],
            2: [RoundRecord(round=0, price=i2, demand=outcome.q2, profit=outcome.pi2, rival_price=i1)],
        }
        self.series = {1: [], 2: []}

    def _restore(self, checkpoint: Checkpoint) -> None:
        self.round = checkpoint.round
        for firm in (1, 2):
            records = [RoundRecord.from_dict(row) for row in checkpoint.histories[firm - 1]]
            self.histories[firm] = records
            self.series[firm] = [r.price for r in records if r.round >= 1]
            self.strategies[firm] = StrategyLog.from_list(
                checkpoint.strategies[firm - 1], capacity=self.memory.strategy_capacity
            )
            try:
                self.policies[firm].load_state(checkpoint.policy_states[firm - 1])
            except IncompatibleState as exc:
                raise VersionMismatch(str(exc)) from exc
        if self.client is not None and self.client.cassette is not None:
            self.client.cassette.position = checkpoint.cassette_position

    def checkpoint(self) -> Checkpoint:
        cassette = self.client.cassette if self.client is not None else None
        return Checkpoint(
            run_id=self.config.run_id,
            round=self.round,
            config=self.config.to_mapping(),
            config_digest=config_digest(self.config),
            histories=tuple([r.to_dict() for r in self.histories[firm]] for firm in (1, 2)),
            strategies=tuple(self.strategies[firm].to_list() for firm in (1, 2)),
            policy_states=tuple(self.policies[firm].state_dict() for firm in (1, 2)),
            cassette_position=cassette.position if cassette is not None else 0,
        )

    def _write_checkpoint(self) -> Path:
        return write_checkpoint(self.checkpoint(), self.run_dir / CHECKPOINT_FILE)

    def _cassette(self) -> Cassette | None:
        return self.client.cassette if self.client is not None else None

    def _mark(self) -> RoundMark:
        cassette = self._cassette()
        return RoundMark(
            round=self.round,
            lengths={firm: len(self.histories[firm]) for firm in (1, 2)},
            strategies=dict(self.strategies),
            policy_states={firm: self.policies[firm].state_dict() for firm in (1, 2)},
            cassette_position=cassette.position if cassette is not None else None,
        )

    def _rollback(self, mark: RoundMark) -> None:
        """Undo a partly played round so the checkpoint matches the log on disk."""
        self.round = mark.round
        for firm in (1, 2):
            del self.histories[firm][mark.lengths[firm] :]
            del self.series[firm][mark.round :]
            self.policies[firm].load_state(mark.policy_states[firm])
        self.strategies = dict(mark.strategies)
        cassette = self._cassette()
        if cassette is not None and mark.cassette_position is not None:
            cassette.position = mark.cassette_position
            if self.client.io_mode == IoMode.RECORD and len(cassette.entries) > mark.cassette_position:
                cassette.truncate(mark.cassette_position)

    # -- phases ------------------------------------------------------------

    def _observation(self, firm: int, round_index: int, transcript=(), communication=False, **extra) -> Observation:
        return Observation(
            round=round_index,
            firm=firm,
            own_cost=self.config.market.cost(firm),
            window=tuple(window_view(self.histories[firm], self.memory)),
            current_strategy=self.strategies[firm].latest,
            transcript=tuple(transcript),
            communication=communication,
            **extra,
        )

    def conversation_phase(self, round_index: int) -> tuple[TranscriptMessage, ...]:
        """Up to three message pairs; the opening firm alternates with round parity.

        Either firm ends the discussion by staying silent.
        """
        initiator = 1 if round_index % 2 == 1 else 2
        transcript: list[TranscriptMessage] = []
        inbound = None
        for exchange in range(1, MAX_EXCHANGES + 1):
            for speaker in (initiator, 3 - initiator):
                observation = self._observation(speaker, round_index, transcript, communication=True)
                message = self.policies[speaker].converse(observation, inbound)
                if not message:
                    return tuple(transcript)
                transcript.append(TranscriptMessage(round_index, exchange, speaker, message))
                inbound = message
        return tuple(transcript)

    def _decide(self, firm: int, observation: Observation) -> float:
        price = self.policies[firm].decide_price(observation)
        if price is None or not math.isfinite(price) or price < 0:
            raise PolicyFailure(f"firm {firm} returned an unusable price {price!r} in round {observation.round}")
        return float(price)

    def _reflect(self, round_index: int, communication: bool) -> dict[int, str | None]:
        digests: dict[int, str | None] = {1: None, 2: None}
        for firm in (1, 2):
            observation = self._observation(
                firm,
                round_index,
                communication=communication,
                bins=tuple(summarize_history(self.histories[firm], self.memory)),
                strategies=self.strategies[firm],
            )
            text = self.policies[firm].reflect(observation)
            if text and text.strip():
                self.strategies[firm] = record_strategy(self.strategies[firm], round_index, text)
                digests[firm] = strategy_digest(text)
                logger.info("[Engine] run=%s round=%s firm=%s revised its strategy", self.config.run_id, round_index, firm)
        return digests

    def _stopping_check(self, round_index: int) -> StoppingDecision:
        if round_index < min(self.criteria.min_window, self.criteria.hard_cap):
            return StoppingDecision(action=StopAction.CONTINUE)
        return stopping_check(self.series[1], self.series[2], self.criteria, round_index)

    def play_round(self, round_index: int) -> StoppingDecision:
        conversed = self.config.conversation.enabled_at(round_index)
        transcript = self.conversation_phase(round_index) if conversed else ()

        observations = {
            firm: self._observation(firm, round_index, transcript, communication=conversed) for firm in (1, 2)
        }
        prices = {}
        for firm in self.decision_order:
            prices[firm] = self._decide(firm, observations[firm])

        outcome = profit(self.market, prices[1], prices[2])
        for firm in (1, 2):
            record = RoundRecord(
                round=round_index,
                price=prices[firm],
                demand=outcome.quantities[firm - 1],
                profit=outcome.profits[firm - 1],
                rival_price=prices[3 - firm],
            )
            self.histories[firm].append(record)
            self.series[firm].append(prices[firm])
        self.round = round_index

        decision = self._stopping_check(round_index)
        reflected = (
            decision.action is StopAction.CONTINUE
            and self.config.planning.enabled_at(round_index)
            and reflection_due(round_index, self.memory)
        )
        digests = self._reflect(round_index, conversed) if reflected else {1: None, 2: None}

        lines = []
        for firm in (1, 2):
            record = self.histories[firm][-1]
            lines.append(
                RunLogLine(
                    run_id=self.config.run_id,
                    round=round_index,
                    firm=firm,
                    price=record.price,
                    demand=record.demand,
                    profit=record.profit,
                    rival_price=record.rival_price,
                    reflected=reflected,
                    conversed=conversed,
                    strategy_digest=digests[firm],
                ).to_dict()
            )
        append_jsonl(self.run_dir / ROUNDS_LOG, lines)
        if transcript:
            append_jsonl(
                self.run_dir / TRANSCRIPTS_LOG,
                [{"run_id": self.config.run_id, **message.to_dict()} for message in transcript],
            )

        every = self.config.checkpoint_every
        if every and round_index % every == 0:
            self._write_checkpoint()
        logger.debug(
            "[Engine] run=%s round=%s prices=(%s, %s) action=%s",
            self.config.run_id,
            round_index,
            prices[1],
            prices[2],
            decision.action.value,
        )
        return decision

    # -- entry points ------------------------------------------------------

    def _prepare_fresh(self) -> None:
        for name in (ROUNDS_LOG, TRANSCRIPTS_LOG):
            (self.run_dir / name).write_text("", encoding="utf-8")
        write_config(self.config, self.run_dir / CONFIG_SNAPSHOT)
        self.round = 0
        self._seed_round_zero()

    def _prepare_resume(self, checkpoint: Checkpoint) -> None:
        self._restore(checkpoint)
        for name in (ROUNDS_LOG, TRANSCRIPTS_LOG):
            truncate_jsonl(self.run_dir / name, checkpoint.round)
        write_config(self.config, self.run_dir / CONFIG_SNAPSHOT)

    def run(self) -> RunResult:
        with self._locked():
            self._prepare_fresh()
            logger.info("[Engine] run=%s starting, up to %s rounds", self.config.run_id, self.config.max_rounds)
            return self._loop()

    def resume(self, checkpoint: Checkpoint) -> RunResult:
        with self._locked():
            self._prepare_resume(checkpoint)
            logger.info(
                "[Engine] run=%s resuming after round %s, up to %s rounds",
                self.config.run_id,
                checkpoint.round,
                self.config.max_rounds,
            )
            return self._loop()

    def _loop(self) -> RunResult:
        outcome = "max_rounds"
        decision = None
        try:
            for round_index in range(self.round + 1, self.config.max_rounds + 1):
                mark = self._mark()
                decision = self.play_round(round_index)
                if decision.action is StopAction.STOP:
                    outcome = "stopped"
                    break
                if decision.action is StopAction.HARD_STOP:
                    outcome = "hard_stop"
                    break
        except PolicyFailure:
            self._rollback(mark)
            logger.exception("[Engine] run=%s aborted in round %s", self.config.run_id, self.round + 1)
            self._write_checkpoint()
            raise

        if decision is None or decision.action is StopAction.CONTINUE or not decision.verdicts:
            decision = stopping_check(self.series[1], self.series[2], self.criteria, self.round)
        collusion = None
        if self.refs.cartel is not None:
            collusion = detect_collusion_formation(self.series[1], self.series[2], self.refs)

        result = RunResult(
            run_id=self.config.run_id,
            rounds_executed=self.round,
            outcome=outcome,
            verdicts=decision.verdicts,
            collusion=collusion,
            run_dir=self.run_dir,
        )
        write_json(self.run_dir / SUMMARY_FILE, self.summary(result))
        self._write_checkpoint()
        logger.info(
            "[Engine] run=%s finished after %s rounds (%s)", self.config.run_id, self.round, outcome
        )
        return result

    def summary(self, result: RunResult) -> dict:
        return {
            "run_id": result.run_id,
            "rounds_executed": result.rounds_executed,
            "outcome": result.outcome,
            "verdicts": [v.to_dict() for v in result.verdicts],
            "collusion_formed_at": result.collusion.formed_at if result.collusion else None,
            "collusion_checked": result.collusion is not None,
            "market_mode": self.market.mode.value,
            "reference_prices": {
                "bertrand": list(self.refs.bertrand),
                "cartel": list(self.refs.cartel) if self.refs.cartel else None,
            },
            "config_digest": config_digest(self.config),
        }


def run(config: RunConfig, out_dir: str | Path | None = None, **options) -> RunResult:
    return Engine(config, out_dir, **options).run()


def resume(
    checkpoint_path: str | Path,
    overrides: dict | None = None,
    out_dir: str | Path | None = None,
    **options,
) -> RunResult:
    """Continue a checkpointed run; only schedules, rounds and io settings may change."""
    checkpoint_path = Path(checkpoint_path)
    checkpoint = read_checkpoint(checkpoint_path)
    config = from_mapping(checkpoint.config, default_run_id=checkpoint.run_id)
    if overrides:
        config = apply_overrides(config, overrides, resumable_only=True)
    if config_digest(config) != checkpoint.config_digest:
        raise ConfigError(
            "checkpoint was written for a different configuration",
            {"__all__": ["Configuration digest does not match the checkpoint."]},
        )
    if config.max_rounds < checkpoint.round:
        raise ConfigError(
            f"checkpoint is at round {checkpoint.round}; rounds cannot be lowered below it",
            {"rounds": [f"Must be at least {checkpoint.round}."]},
        )
    run_root = out_dir if out_dir is not None else checkpoint_path.parent.parent
    return Engine(config, run_root, **options).resume(checkpoint)
