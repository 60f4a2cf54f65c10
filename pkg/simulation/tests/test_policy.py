import json
from unittest.mock import MagicMock

import numpy as np
from django.test import SimpleTestCase

from economics.services.market import MarketParams, derive_market, profit
from economics.services.memory import RoundRecord
from simulation.services.llm_agent import LlmAgent, LlmAgentConfig
from simulation.services.llm_client import CassetteExhausted
from simulation.services.observation import Observation
from simulation.services.policy import (
    Constant,
    Echo,
    GrimTrigger,
    IncompatibleState,
    Llm,
    MyopicBestResponse,
    PolicyFailure,
    PolicyKind,
    PolicySpec,
    QLearning,
    Undercut,
    build_policy,
    qlearning_grid,
)

BASE = MarketParams(a=14, beta=1 / 150, d=1 / 300, c1=2, c2=2)
HOMOGENEOUS = MarketParams(a=14, beta=1 / 300, d=1 / 300, c1=2, c2=2)


def observe(round_index, rival_price, own_price=7.0, firm=1, market=None):
    market = market or derive_market(BASE)
    p1, p2 = (own_price, rival_price) if firm == 1 else (rival_price, own_price)
    outcome = profit(market, p1, p2)
    record = RoundRecord(
        round=round_index - 1,
        price=own_price,
        demand=outcome.quantities[firm - 1],
        profit=outcome.profits[firm - 1],
        rival_price=rival_price,
    )
    return Observation(round=round_index, firm=firm, own_cost=2.0, window=(record,))


def make_qlearner(seed=7):
    market = derive_market(BASE)
    spec = PolicySpec.from_value({"kind": "qlearning"})
    return build_policy(spec, 1, market, seed=np.random.SeedSequence(seed))


class ScriptedPolicyTests(SimpleTestCase):
    def test_constant(self):
        policy = Constant(7.0)
        self.assertEqual(policy.decide_price(observe(5, 9.0)), 7.0)
        self.assertIsNone(policy.converse(observe(5, 9.0), "hello"))
        self.assertIsNone(policy.reflect(observe(20, 9.0)))

    def test_myopic_best_response(self):
        policy = MyopicBestResponse(derive_market(BASE), 1)
        self.assertAlmostEqual(policy.decide_price(observe(3, 8.0)), 6.5, places=12)

    def test_myopic_needs_differentiated_products(self):
        with self.assertRaises(ValueError):
            MyopicBestResponse(derive_market(HOMOGENEOUS), 1)

    def test_grim_trigger_punishes_defection(self):
        policy = GrimTrigger(8.0, 6.0, tolerance=0.2)
        self.assertEqual(policy.decide_price(observe(3, 7.0)), 6.0)

    def test_grim_trigger_holds_against_cooperation(self):
        policy = GrimTrigger(8.0, 6.0, tolerance=0.2)
        self.assertEqual(policy.decide_price(observe(3, 7.9)), 8.0)

    def test_grim_trigger_ignores_initial_prices(self):
        policy = GrimTrigger(8.0, 6.0)
        seed = RoundRecord(round=0, price=2.0, demand=1200.0, profit=0.0, rival_price=2.0)
        self.assertEqual(policy.decide_price(Observation(round=1, firm=1, own_cost=2.0, window=(seed,))), 8.0)

    def test_grim_trigger_against_constant(self):
        grim, constant = GrimTrigger(8.0, 6.0, punish_length=20), Constant(6.0)
        prices = []
        seed = RoundRecord(round=0, price=2.0, demand=1200.0, profit=0.0, rival_price=2.0)
        window = [seed]
        for round_index in range(1, 61):
            price = grim.decide_price(Observation(round=round_index, firm=1, own_cost=2.0, window=tuple(window[-20:])))
            rival = constant.decide_price(Observation(round=round_index, firm=2, own_cost=2.0))
            window.append(RoundRecord(round=round_index, price=price, demand=0.0, profit=0.0, rival_price=rival))
            prices.append(price)
        self.assertEqual(prices[0], 8.0)
        self.assertEqual(set(prices[1:]), {6.0})

    def test_grim_trigger_forgives_after_punishment(self):
        policy = GrimTrigger(8.0, 6.0, punish_length=3)
        self.assertEqual(policy.decide_price(observe(2, 7.0)), 6.0)
        self.assertEqual(policy.decide_price(observe(3, 8.0)), 6.0)
        self.assertEqual(policy.decide_price(observe(4, 8.0)), 6.0)
        self.assertEqual(policy.decide_price(observe(5, 8.0)), 8.0)

    def test_grim_trigger_state_round_trip(self):
        policy = GrimTrigger(8.0, 6.0)
        policy.decide_price(observe(4, 7.0))
        restored = GrimTrigger(8.0, 6.0)
        restored.load_state(json.loads(json.dumps(policy.state_dict())))
        self.assertEqual(restored.decide_price(observe(5, 8.0)), policy.decide_price(observe(5, 8.0)))
        self.assertEqual(restored.punish_until, policy.punish_until)

    def test_undercut_never_prices_below_cost(self):
        policy = Undercut(step=0.1)
        self.assertAlmostEqual(policy.decide_price(observe(2, 5.0, market=derive_market(HOMOGENEOUS))), 4.9)
        self.assertEqual(policy.decide_price(observe(2, 2.05, market=derive_market(HOMOGENEOUS))), 2.0)

    def test_echo(self):
        policy = Echo()
        self.assertEqual(policy.converse(observe(2, 7.0), "hello"), "hello")
        self.assertIsNone(policy.converse(observe(2, 7.0), None))
        self.assertEqual(Echo(opening="hi").converse(observe(2, 7.0), None), "hi")
        self.assertEqual(policy.decide_price(observe(2, 7.25)), 7.25)

    def test_state_of_another_kind_is_rejected(self):
        with self.assertRaises(IncompatibleState):
            GrimTrigger(8.0, 6.0).load_state(Constant(7.0).state_dict())
        with self.assertRaises(IncompatibleState):
            Constant(7.0).load_state({"version": 99, "kind": "constant"})


class QLearningTests(SimpleTestCase):
    def play(self, policy, rivals):
        prices = []
        own = 6.0
        for round_index, rival in enumerate(rivals, start=1):
            own = policy.decide_price(observe(round_index, rival, own_price=own))
            prices.append(own)
        return prices

    def test_default_grid(self):
        grid = qlearning_grid(derive_market(BASE), 1, PolicySpec.from_value("qlearning").params)
        self.assertEqual(len(grid), 15)
        self.assertAlmostEqual(grid[0], 5.5)
        self.assertAlmostEqual(grid[-1], 8.5)

    def test_same_seed_same_prices(self):
        rivals = [6.0 + 0.1 * (r % 20) for r in range(200)]
        self.assertEqual(self.play(make_qlearner(3), rivals), self.play(make_qlearner(3), rivals))
        self.assertNotEqual(self.play(make_qlearner(3), rivals), self.play(make_qlearner(4), rivals))

    def test_prices_stay_on_grid(self):
        policy = make_qlearner()
        prices = self.play(policy, [7.0] * 100)
        self.assertTrue(set(prices) <= set(policy.grid.tolist()))

    def test_reflect_lists_greedy_price_per_state(self):
        policy = make_qlearner()
        self.play(policy, [7.0] * 100)
        text = policy.reflect(observe(100, 7.0))
        self.assertTrue(text.startswith("Greedy price by rival's last price: "))
        self.assertEqual(text.count("->"), 15)

    def test_state_round_trip_continues_identically(self):
        rivals = [6.0 + 0.1 * (r % 20) for r in range(120)]
        original = make_qlearner(11)
        self.play(original, rivals[:60])

        restored = make_qlearner(999)
        restored.load_state(json.loads(json.dumps(original.state_dict())))
        tail = []
        for policy in (original, restored):
            own, prices = 6.0, []
            for round_index, rival in enumerate(rivals[60:], start=61):
                own = policy.decide_price(observe(round_index, rival, own_price=own))
                prices.append(own)
            tail.append(prices)
        self.assertEqual(tail[0], tail[1])
        np.testing.assert_array_equal(original.q, restored.q)

    def test_grid_size_mismatch(self):
        small = build_policy(
            PolicySpec.from_value({"kind": "qlearning", "grid_size": 5}), 1, derive_market(BASE), seed=1
        )
        with self.assertRaises(IncompatibleState):
            small.load_state(make_qlearner().state_dict())

    def test_rejects_non_increasing_grid(self):
        with self.assertRaises(ValueError):
            QLearning(np.array([7.0, 7.0, 8.0]), np.random.default_rng(0))


class PolicySpecTests(SimpleTestCase):
    def test_kind_string(self):
        spec = PolicySpec.from_value("myopic_best_response")
        self.assertEqual(spec.kind, PolicyKind.MYOPIC_BEST_RESPONSE)
        self.assertEqual(spec.to_value(), "myopic_best_response")

    def test_defaults_filled(self):
        spec = PolicySpec.from_value({"kind": "grim_trigger", "collusive": 8, "punish": 6})
        self.assertEqual(spec.params["tolerance"], 0.2)
        self.assertEqual(spec.params["punish_length"], 20)
        self.assertEqual(PolicySpec.from_value(spec.to_value()), spec)

    def test_invalid_specs(self):
        for value in (
            "teleport",
            {"kind": "constant"},
            {"kind": "constant", "price": -1},
            {"kind": "constant", "price": 7, "colour": "red"},
            {"kind": "grim_trigger", "collusive": 6, "punish": 8},
            {"kind": "grim_trigger", "collusive": 8, "punish": 6, "tolerance": 0},
            {"kind": "qlearning", "learning_rate": 0},
            {"kind": "qlearning", "discount": 1},
            {"kind": "qlearning", "grid_size": 2.5},
            {"kind": "qlearning", "seed": -1},
            {"kind": "undercut", "step": ""},
            42,
        ):
            with self.subTest(value=value), self.assertRaises(ValueError):
                PolicySpec.from_value(value)

    def test_build_llm_without_client(self):
        with self.assertRaises(ValueError):
            build_policy(PolicySpec.from_value("llm"), 1, derive_market(BASE))


class LlmPolicyTests(SimpleTestCase):
    def make_policy(self, side_effect):
        client = MagicMock()
        client.complete.side_effect = side_effect
        cfg = LlmAgentConfig(firm_name="Ed", rival_firm_name="Gill", firm_cost=2.0, price_ceiling=14.0)
        return Llm(LlmAgent(cfg, client)), client

    def test_parsed_price(self):
        policy, _ = self.make_policy(["I will charge $7.25."])
        self.assertEqual(policy.decide_price(observe(2, 7.0)), 7.25)

    def test_format_reminder_retry(self):
        policy, client = self.make_policy(["Hmm, let me think.", "7.1"])
        self.assertEqual(policy.decide_price(observe(2, 7.0)), 7.1)
        retry_messages = client.complete.call_args_list[1].args[0].messages
        self.assertEqual(len(retry_messages), 3)

    def test_parse_exhaustion_is_policy_failure(self):
        policy, client = self.make_policy(["no idea"] * 4)
        with self.assertRaises(PolicyFailure) as caught:
            policy.decide_price(observe(2, 7.0))
        self.assertEqual(type(caught.exception.cause).__name__, "ParseExhausted")
        self.assertEqual(client.complete.call_count, 4)

    def test_client_error_is_policy_failure(self):
        policy, _ = self.make_policy(CassetteExhausted("empty"))
        with self.assertRaises(PolicyFailure) as caught:
            policy.reflect(observe(20, 7.0))
        self.assertIsInstance(caught.exception.cause, CassetteExhausted)

    def test_pass_ends_conversation(self):
        policy, _ = self.make_policy(["PASS"])
        self.assertIsNone(policy.converse(observe(2, 7.0), "hello"))
