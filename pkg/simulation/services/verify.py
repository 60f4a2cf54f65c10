"""Ex-post verification of a finished run directory.

Re-reads rounds.jsonl, recomputes demand and profit from the logged prices,
checks the log's shape and re-runs the detectors against summary.json.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings

from economics.services.detect import StoppingCriteria, detect_collusion_formation, stopping_check
from economics.services.market import derive_market, profit, reference_prices
from simulation.services.config import load_config
from simulation.services.runlog import (
    CONFIG_SNAPSHOT,
    ROUNDS_LOG,
    SUMMARY_FILE,
    RunLogError,
    RunLogLine,
    price_series,
    read_log,
    resolve_run_dir,
)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-9


@dataclass
class CheckResult:
    name: str
    failures: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def fail(self, message: str, **where) -> None:
        self.failures.append({"message": message, **where})

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "failures": self.failures}


@dataclass
class VerificationReport:
    run_dir: Path
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_dict(self) -> dict:
        return {
            "run_dir": str(self.run_dir),
            "passed": self.passed,
            "checks": [check.to_dict() for check in self.checks],
        }


def _close(logged: float, expected: float) -> bool:
    return math.isclose(logged, expected, rel_tol=TOLERANCE, abs_tol=TOLERANCE)


def _read_summary(run_dir: Path) -> dict:
    path = run_dir / SUMMARY_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise RunLogError(f"summary not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise RunLogError(f"{path} is not JSON: {exc}") from exc


def check_rounds(lines: list[RunLogLine]) -> CheckResult:
    """Rounds contiguous from 1 with exactly one line per firm per round."""
    check = CheckResult("rounds_contiguous")
    seen: dict[int, list[int]] = {}
    for line in lines:
        seen.setdefault(line.round, []).append(line.firm)
    expected = 1
    for round_index in sorted(seen):
        if round_index != expected:
            check.fail(f"expected round {expected}, found {round_index}", round=expected)
            expected = round_index
        if sorted(seen[round_index]) != [1, 2]:
            check.fail(f"round {round_index} has firms {sorted(seen[round_index])}", round=round_index)
        expected += 1
    return check


def check_rivals(lines: list[RunLogLine]) -> CheckResult:
    check = CheckResult("rival_prices")
    by_round: dict[int, dict[int, RunLogLine]] = {}
    for line in lines:
        by_round.setdefault(line.round, {})[line.firm] = line
    for round_index, firms in sorted(by_round.items()):
        for firm in (1, 2):
            own, rival = firms.get(firm), firms.get(3 - firm)
            if own is None or rival is None:
                continue
            if own.rival_price != rival.price:
                check.fail(
                    f"rival price {own.rival_price} differs from firm {3 - firm}'s price {rival.price}",
                    round=round_index,
                    firm=firm,
                )
    return check


def check_market(lines: list[RunLogLine], market) -> CheckResult:
    check = CheckResult("demand_and_profit")
    for line in lines:
        p1, p2 = (line.price, line.rival_price) if line.firm == 1 else (line.rival_price, line.price)
        outcome = profit(market, p1, p2)
        slot = line.firm - 1
        for name, logged, expected in (
            ("demand", line.demand, outcome.quantities[slot]),
            ("profit", line.profit, outcome.profits[slot]),
        ):
            if not _close(logged, expected):
                check.fail(
                    f"{name} {logged} does not match recomputed {expected}",
                    round=line.round,
                    firm=line.firm,
                    field=name,
                )
    return check


def check_detectors(lines: list[RunLogLine], config, market, summary: dict) -> CheckResult:
    check = CheckResult("detector_verdicts")
    refs = reference_prices(market)
    series1, series2 = price_series(lines)
    rounds = len(series1)
    if summary.get("rounds_executed") != rounds:
        check.fail(f"summary records {summary.get('rounds_executed')} rounds, log holds {rounds}")
        return check

    criteria = StoppingCriteria.from_reference(
        refs,
        hard_cap=int(getattr(settings, "DUOPOLY_HARD_CAP", 2000)),
        convergence_overrides=config.convergence,
        oscillation_overrides=config.oscillation,
    )
    decision = stopping_check(series1, series2, criteria, rounds)
    recomputed = [v.to_dict() for v in decision.verdicts]
    for firm, (ours, theirs) in enumerate(zip(recomputed, summary.get("verdicts", [])), start=1):
        if ours != theirs:
            check.fail(f"verdict {theirs} differs from recomputed {ours}", firm=firm)

    formed_at = None
    if refs.cartel is not None:
        formed_at = detect_collusion_formation(series1, series2, refs).formed_at
    if formed_at != summary.get("collusion_formed_at"):
        check.fail(
            f"collusion formed at {summary.get('collusion_formed_at')} in summary, recomputed {formed_at}"
        )
    return check


def verify_run(path: str | Path) -> VerificationReport:
    run_dir = resolve_run_dir(path)
    lines = read_log(run_dir / ROUNDS_LOG)
    if not lines:
        raise RunLogError(f"{run_dir / ROUNDS_LOG} holds no rounds")
    config = load_config(run_dir / CONFIG_SNAPSHOT)
    market = derive_market(config.market)
    summary = _read_summary(run_dir)

    checks = [check_rounds(lines), check_rivals(lines), check_market(lines, market)]
    if all(check.passed for check in checks):
        checks.append(check_detectors(lines, config, market, summary))
    report = VerificationReport(run_dir=run_dir, checks=checks)
    logger.info("[Verify] %s passed=%s", run_dir, report.passed)
    return report
