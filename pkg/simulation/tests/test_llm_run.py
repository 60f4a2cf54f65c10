import json
import os
from collections import defaultdict
from pathlib import Path
from unittest.mock import MagicMock, patch

from django.test import SimpleTestCase

from simulation.services.checkpoint import read_checkpoint
from simulation.services.engine import Engine, resume, run
from simulation.services.llm_client import CassetteMismatch
from simulation.services.policy import PolicyFailure
from simulation.services.runlog import read_jsonl, read_log
from simulation.services.verify import verify_run
from simulation.tests.factories import TempDirMixin, run_config

KEY_ENV = "DUOPOLY_TEST_API_KEY"
FIXTURES = Path(__file__).parent / "fixtures"
RESPONSES = json.loads((FIXTURES / "llm_responses.json").read_text(encoding="utf-8"))


def reply(text, status=200):
    response = MagicMock()
    response.status_code = status
    response.text = text
    response.json.return_value = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    return response


class ScriptedProvider:
    """Stands in for the chat-completions endpoint, cycling canned replies per prompt kind."""

    def __init__(self):
        self.calls = defaultdict(int)

    def kind(self, prompt):
        if prompt.startswith("Reflection after round"):
            return "strategies"
        if prompt.split("\n", 1)[0].endswith("Phase 1."):
            return "messages"
        return "prices"

    def __call__(self, url, **kwargs):
        body = json.loads(kwargs["data"])
        kind = self.kind(body["messages"][1]["content"])
        replies = RESPONSES[kind]
        text = replies[self.calls[kind] % len(replies)]
        self.calls[kind] += 1
        return reply(text)


def llm_config(cassette, io_mode, **overrides):
    return run_config(
        policy1="llm",
        policy2="llm",
        io_mode=io_mode,
        cassette=str(cassette),
        model={"api_key_env": KEY_ENV},
        **overrides,
    )


@patch.dict(os.environ, {KEY_ENV: "sk-test"})
class RecordReplayTests(TempDirMixin, SimpleTestCase):
    def record(self, **overrides):
        self.cassette = self.out_dir / "cassette.jsonl"
        provider = ScriptedProvider()
        with patch("requests.Session.post", side_effect=provider):
            result = run(llm_config(self.cassette, "record", **overrides), self.out_dir / "recorded")
        return result, provider

    def replay(self, name, **overrides):
        with patch("requests.Session.post") as post:
            result = run(llm_config(self.cassette, "replay", **overrides), self.out_dir / name)
        post.assert_not_called()
        return result

    def test_planning_run_replays_byte_identically(self):
        recorded, provider = self.record(rounds=45, planning=True)
        self.assertEqual(provider.calls["strategies"], 4)
        lines = read_log(recorded.log_path)
        self.assertEqual(sorted({line.round for line in lines if line.reflected}), [20, 40])
        # One reply in seven carries no price and is retried.
        self.assertGreater(provider.calls["prices"], 90)

        expected = recorded.log_path.read_bytes()
        for name in ("replay-a", "replay-b"):
            with self.subTest(replay=name):
                replayed = self.replay(name, rounds=45, planning=True)
                self.assertEqual(replayed.log_path.read_bytes(), expected)
                self.assertTrue(verify_run(replayed.run_dir).passed)

    def test_conversation_run_replays_transcripts(self):
        recorded, provider = self.record(rounds=6, conversation=True)
        messages = read_jsonl(recorded.run_dir / "transcripts.jsonl")
        self.assertTrue(messages)
        self.assertNotIn("PASS", {m["text"] for m in messages})
        self.assertGreater(provider.calls["messages"], 0)

        replayed = self.replay("replay", rounds=6, conversation=True)
        self.assertEqual(
            (replayed.run_dir / "transcripts.jsonl").read_bytes(),
            (recorded.run_dir / "transcripts.jsonl").read_bytes(),
        )
        self.assertEqual(replayed.log_path.read_bytes(), recorded.log_path.read_bytes())

    def test_replay_with_other_sampling_settings_fails(self):
        self.record(rounds=5)
        config = run_config(
            policy1="llm",
            policy2="llm",
            rounds=5,
            io_mode="replay",
            cassette=str(self.cassette),
            model={"api_key_env": KEY_ENV, "temperature": 0.2},
        )
        with self.assertRaises(PolicyFailure) as caught:
            run(config, self.out_dir / "altered")
        self.assertIsInstance(caught.exception.cause, CassetteMismatch)


@patch.dict(os.environ, {KEY_ENV: "sk-test"})
class RecordFailureTests(TempDirMixin, SimpleTestCase):
    def test_failed_round_is_dropped_from_checkpoint_and_cassette(self):
        cassette = self.out_dir / "split.jsonl"
        replies = [reply("7")] * 11 + [reply("bad request", status=400)]
        with patch("requests.Session.post", side_effect=replies):
            with self.assertRaises(PolicyFailure):
                run(llm_config(cassette, "record", rounds=8), self.out_dir / "split")

        checkpoint_path = self.out_dir / "split" / "test-run" / "checkpoint.json"
        checkpoint = read_checkpoint(checkpoint_path)
        self.assertEqual(checkpoint.round, 5)
        self.assertEqual(checkpoint.cassette_position, 10)
        self.assertEqual(len(cassette.read_text(encoding="utf-8").splitlines()), 10)
        self.assertEqual(read_log(self.out_dir / "split" / "test-run" / "rounds.jsonl")[-1].round, 5)

        with patch("requests.Session.post", side_effect=lambda url, **kwargs: reply("7")):
            resumed = resume(checkpoint_path)
            whole = run(llm_config(self.out_dir / "whole.jsonl", "record", rounds=8), self.out_dir / "whole")
        self.assertEqual(resumed.log_path.read_bytes(), whole.log_path.read_bytes())
        self.assertEqual(cassette.read_bytes(), (self.out_dir / "whole.jsonl").read_bytes())


def pinned_config(cassette, io_mode="replay", **overrides):
    return run_config(
        policy1="llm",
        policy2="llm",
        io_mode=io_mode,
        cassette=str(cassette),
        model={"model_id": "gpt-4-0314", "temperature": 0.7, "max_tokens": 128, "api_key_env": KEY_ENV},
        **overrides,
    )


def prices_by_round(lines):
    rounds = defaultdict(dict)
    for line in lines:
        rounds[line.round][line.firm] = line.price
    return [[rounds[r][1], rounds[r][2]] for r in sorted(rounds)]


class CommittedCassetteTests(TempDirMixin, SimpleTestCase):
    """Replays recordings kept under fixtures/ against their expected outcomes."""

    def expected(self, name):
        return json.loads((FIXTURES / f"{name}.expected.json").read_text(encoding="utf-8"))

    def replay(self, name, **overrides):
        engine = Engine(pinned_config(FIXTURES / f"{name}.jsonl", **overrides), self.out_dir)
        with patch("requests.Session.post") as post:
            with self.assertLogs("simulation.services.llm_agent", level="INFO") as logs:
                result = engine.run()
        post.assert_not_called()
        cassette = engine.client.cassette
        self.assertEqual(cassette.position, len(cassette.entries))
        self.assertTrue(verify_run(result.run_dir).passed)
        return engine, result, logs.output

    def test_planning_run(self):
        expected = self.expected("planning_45")
        engine, result, logs = self.replay("planning_45", rounds=45, planning=True)
        self.assertEqual(result.outcome, "max_rounds")
        self.assertEqual(engine.client.cassette.position, expected["calls"])

        lines = read_log(result.log_path)
        self.assertEqual(prices_by_round(lines), expected["prices"])
        self.assertFalse(any(line.conversed for line in lines))
        digests = {str(line.round): [] for line in lines if line.reflected}
        for line in lines:
            if line.reflected:
                digests[str(line.round)].append(line.strategy_digest)
        self.assertEqual(digests, expected["strategy_digests"])
        for firm in (1, 2):
            self.assertEqual([e.text for e in engine.strategies[firm].entries], expected["strategies"][str(firm)])

        # Three replies lacked a price and each was answered on a later attempt.
        retries = [message for message in logs if "reply without a price" in message]
        self.assertEqual(len(retries), 3)
        self.assertEqual(sum("Ed round=33" in message for message in retries), 2)

    def test_conversation_run(self):
        expected = self.expected("conversation_6")
        engine, result, logs = self.replay("conversation_6", rounds=6, conversation=True)
        self.assertEqual(engine.client.cassette.position, expected["calls"])

        lines = read_log(result.log_path)
        self.assertEqual(prices_by_round(lines), expected["prices"])
        self.assertTrue(all(line.conversed for line in lines))
        messages = read_jsonl(result.run_dir / "transcripts.jsonl")
        self.assertEqual({m.pop("run_id") for m in messages}, {"test-run"})
        self.assertEqual(messages, expected["transcripts"])
        self.assertEqual(len([message for message in logs if "reply without a price" in message]), 1)

    @patch.dict(os.environ, {KEY_ENV: "sk-test"})
    def test_recording_the_same_replies_reproduces_the_cassette(self):
        committed = FIXTURES / "planning_45.jsonl"
        replies = iter(json.loads(line)["response"] for line in committed.read_text(encoding="utf-8").splitlines())
        cassette = self.out_dir / "recorded.jsonl"
        with patch("requests.Session.post", side_effect=lambda url, **kwargs: reply(next(replies))):
            run(pinned_config(cassette, "record", rounds=45, planning=True), self.out_dir)
        self.assertEqual(cassette.read_bytes(), committed.read_bytes())
