import json

from django.test import SimpleTestCase

from simulation.services.checkpoint import ChecksumMismatch, VersionMismatch, read_checkpoint
from simulation.services.config import ConfigError, load_preset
from simulation.services.engine import resume, run
from simulation.services.runlog import read_jsonl, read_log
from simulation.tests.factories import TempDirMixin, run_config

SPLIT_POINTS = (1, 137, 300, 401, 599)

SCRIPTED = {"policy1": {"kind": "qlearning"}, "policy2": {"kind": "qlearning"}}
TALKERS = {"policy1": {"kind": "qlearning"}, "policy2": {"kind": "echo", "opening": "Shall we hold prices?"}}

COMM_SWITCH = [{"from": 1, "to": 400, "enabled": True}, {"from": 401, "to": 600, "enabled": False}]


class SplitRunTests(TempDirMixin, SimpleTestCase):
    def test_split_runs_are_byte_identical(self):
        config = run_config(rounds=600, planning=True, seed=5, **SCRIPTED)
        whole = run(config, self.out_dir / "whole")
        expected = whole.log_path.read_bytes()

        for split in SPLIT_POINTS:
            with self.subTest(split=split):
                first = run(run_config(rounds=split, planning=True, seed=5, **SCRIPTED), self.out_dir / str(split))
                self.assertEqual(first.rounds_executed, split)
                second = resume(first.run_dir / "checkpoint.json", overrides={"rounds": 600})
                self.assertEqual(second.rounds_executed, 600)
                self.assertEqual(second.log_path.read_bytes(), expected)

    def test_resume_discards_rounds_logged_after_the_checkpoint(self):
        config = run_config(rounds=60, planning=True, seed=2, **SCRIPTED)
        whole = run(config, self.out_dir / "whole")
        expected = whole.log_path.read_bytes()

        partial = run(run_config(rounds=50, planning=True, seed=2, **SCRIPTED), self.out_dir / "partial")
        stray = [
            line
            for line in expected.decode("utf-8").splitlines(keepends=True)
            if 50 < json.loads(line)["round"] <= 55
        ]
        with partial.log_path.open("a", encoding="utf-8") as handle:
            handle.writelines(stray)

        resumed = resume(partial.run_dir / "checkpoint.json", overrides={"rounds": 60})
        self.assertEqual(resumed.log_path.read_bytes(), expected)

    def test_periodic_checkpoints(self):
        result = run(run_config(rounds=60, checkpoint_every=25, **SCRIPTED), self.out_dir)
        self.assertEqual(read_checkpoint(result.run_dir / "checkpoint.json").round, 60)

    def test_seed_changes_prices(self):
        a = run(run_config(rounds=30, seed=1, **SCRIPTED), self.out_dir / "a")
        b = run(run_config(rounds=30, seed=2, **SCRIPTED), self.out_dir / "b")
        self.assertNotEqual(a.log_path.read_bytes(), b.log_path.read_bytes())


class CorruptCheckpointTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.result = run(run_config(rounds=30, **SCRIPTED), self.out_dir)
        self.path = self.result.run_dir / "checkpoint.json"

    def rewrite(self, mutate):
        document = json.loads(self.path.read_text(encoding="utf-8"))
        mutate(document)
        self.path.write_text(json.dumps(document), encoding="utf-8")

    def test_tampered_body(self):
        self.rewrite(lambda doc: doc["body"].update(round=29))
        with self.assertRaises(ChecksumMismatch):
            read_checkpoint(self.path)

    def test_truncated_file(self):
        self.path.write_text(self.path.read_text(encoding="utf-8")[:200], encoding="utf-8")
        with self.assertRaises(ChecksumMismatch):
            read_checkpoint(self.path)

    def test_format_version(self):
        self.rewrite(lambda doc: doc.update(format_version=99))
        with self.assertRaises(VersionMismatch):
            read_checkpoint(self.path)

    def test_changed_market_is_rejected(self):
        with self.assertRaises(ConfigError) as caught:
            resume(self.path, overrides={"rounds": 60, "cost2": 5})
        self.assertIn("cost2", caught.exception.errors)

    def test_rounds_below_checkpoint(self):
        with self.assertRaises(ConfigError):
            resume(self.path, overrides={"rounds": 20})

    def test_round_trip(self):
        checkpoint = read_checkpoint(self.path)
        self.assertEqual(checkpoint.round, 30)
        self.assertEqual(checkpoint.run_id, "test-run")
        self.assertEqual(len(checkpoint.histories[0]), 31)
        self.assertEqual(checkpoint.policy_states[0]["kind"], "qlearning")


class AblationProtocolTests(TempDirMixin, SimpleTestCase):
    def test_group7_conversation_switch(self):
        direct = run(load_preset("group7-comm-ablation", TALKERS), self.out_dir / "direct")
        self.assertEqual(direct.rounds_executed, 600)
        talked = {m["round"] for m in read_jsonl(direct.run_dir / "transcripts.jsonl")}
        # Firm 1 stays silent, so only the rounds firm 2 opens carry messages.
        self.assertEqual(talked, set(range(2, 401, 2)))
        conversed = {line.round: line.conversed for line in read_log(direct.log_path)}
        self.assertTrue(all(conversed[r] for r in range(1, 401)))
        self.assertFalse(any(conversed[r] for r in range(401, 601)))

        first = run(
            load_preset("group7-comm-ablation", {**TALKERS, "conversation": True, "rounds": 400}),
            self.out_dir / "split",
        )
        second = resume(first.run_dir / "checkpoint.json", overrides={"conversation": COMM_SWITCH, "rounds": 600})
        self.assertEqual(second.log_path.read_bytes(), direct.log_path.read_bytes())
        self.assertEqual(
            (second.run_dir / "transcripts.jsonl").read_bytes(),
            (direct.run_dir / "transcripts.jsonl").read_bytes(),
        )

    def test_group9_planning_switch(self):
        result = run(load_preset("group9-planning-ablation", SCRIPTED), self.out_dir)
        reflected = sorted({line.round for line in read_log(result.log_path) if line.reflected})
        self.assertEqual(reflected, list(range(120, 601, 20)))
