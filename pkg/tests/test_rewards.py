from __future__ import annotations

import logging

import pytest

from mentored.agents import TableEnvironment
from mentored.errors import EventMismatch
from mentored.mps_engine import MpsStatus, run_mps
from mentored.rewards import (
    RewardConfig,
    RolloutSeed,
    exec_equivalence,
    execution_checker,
    key_step_reward,
    make_rollout_seed,
)
from mentored.traj_model import (
    CorrectionEvent,
    HistoryView,
    Step,
    StepProposal,
)
from scenarios import geometry_scenario


CORRECTED = StepProposal(thought="fix it", action="print(2)")
ORIGINAL = StepProposal(thought="break it", action="print(1)")


def make_seed() -> RolloutSeed:
    return RolloutSeed(
        task_id="t",
        prefix=HistoryView(task_id="t"),
        step_index=1,
        original=ORIGINAL,
        corrected=CORRECTED,
        remaining_horizon=3,
        gold_answer="42",
    )


def equiv_table(*pairs: tuple[str, str]):
    """Equivalence checker that matches exact action pairs (symmetric)."""
    allowed = {frozenset(p) for p in pairs}

    def check(a: StepProposal, b: StepProposal) -> bool:
        return a.action == b.action or frozenset((a.action, b.action)) in allowed

    return check


def test_reward_config_ordering():
    RewardConfig()
    RewardConfig(r_final=3.0, r_key=2.0, r_avoid=0.0)
    with pytest.raises(ValueError):
        RewardConfig(r_final=0.5, r_key=0.5)
    with pytest.raises(ValueError):
        RewardConfig(r_key=0.05)  # not above r_avoid
    with pytest.raises(ValueError):
        RewardConfig(r_avoid=-0.1)


def test_reward_branch_table():
    seed = make_seed()
    cfg = RewardConfig()
    rolled_new = StepProposal(thought="another way", action="print(3)")

    # Task solved: the final reward wins no matter what the step was.
    assert key_step_reward(ORIGINAL, True, seed, cfg, equiv_table()) == cfg.r_final
    assert key_step_reward(rolled_new, True, seed, cfg, equiv_table()) == cfg.r_final

    # Not solved, but the step matches the teacher's correction.
    assert key_step_reward(CORRECTED, False, seed, cfg, equiv_table()) == cfg.r_key
    matches = equiv_table(("print(3)", "print(2)"))
    assert key_step_reward(rolled_new, False, seed, cfg, matches) == cfg.r_key

    # Not solved, not the correction, but at least not the old mistake.
    assert key_step_reward(rolled_new, False, seed, cfg, equiv_table()) == cfg.r_avoid

    # Repeating the original error earns nothing.
    assert key_step_reward(ORIGINAL, False, seed, cfg, equiv_table()) == 0.0
    repeat = equiv_table(("print(3)", "print(1)"))
    assert key_step_reward(rolled_new, False, seed, cfg, repeat) == 0.0


def test_reward_uses_configured_values():
    seed = make_seed()
    cfg = RewardConfig(r_final=10.0, r_key=4.0, r_avoid=1.0)
    assert key_step_reward(CORRECTED, False, seed, cfg, equiv_table()) == 4.0
    other = StepProposal(thought="else", action="print(9)")
    assert key_step_reward(other, False, seed, cfg, equiv_table()) == 1.0


def test_rollout_seed_validation():
    with pytest.raises(ValueError):
        RolloutSeed(
            task_id="t",
            prefix=HistoryView(task_id="t"),
            step_index=0,
            original=ORIGINAL,
            corrected=CORRECTED,
            remaining_horizon=1,
            gold_answer="g",
        )
    with pytest.raises(ValueError):
        RolloutSeed(
            task_id="t",
            prefix=HistoryView(task_id="t"),
            step_index=1,
            original=ORIGINAL,
            corrected=CORRECTED,
            remaining_horizon=0,
            gold_answer="g",
        )
    with pytest.raises(ValueError):
        RolloutSeed(
            task_id="t",
            prefix=HistoryView(task_id="t"),  # too short for step 2
            step_index=2,
            original=ORIGINAL,
            corrected=CORRECTED,
            remaining_horizon=1,
            gold_answer="g",
        )
    with pytest.raises(ValueError):
        RolloutSeed(
            task_id="t",
            prefix=HistoryView(task_id="other"),
            step_index=1,
            original=ORIGINAL,
            corrected=CORRECTED,
            remaining_horizon=1,
            gold_answer="g",
        )


def test_make_rollout_seed_rejects_foreign_events():
    task, student, teacher, judge, env = geometry_scenario()
    outcome = run_mps(task, student, teacher, judge, env)
    assert outcome.status is MpsStatus.SOLVED_WITH_CORRECTIONS
    foreign = CorrectionEvent(
        step_index=1,
        original=ORIGINAL,
        corrected=CORRECTED,
        analysis="not from this outcome",
    )
    with pytest.raises(EventMismatch):
        make_rollout_seed(outcome, foreign)


def test_make_rollout_seed_carries_context():
    task, student, teacher, judge, env = geometry_scenario()
    outcome = run_mps(task, student, teacher, judge, env)
    seed = make_rollout_seed(outcome, outcome.events[0])
    assert seed.task_id == "geo-1"
    assert seed.gold_answer == "45°"
    assert seed.prefix.first_thought == outcome.trajectory.first_thought


def test_exec_equivalence_short_circuits_on_text():
    class Exploding(TableEnvironment):
        def execute(self, action):
            raise AssertionError("must not execute")

    a = StepProposal(thought="x", action="print( 1 )")
    b = StepProposal(thought="y", action="print( 1 )")
    assert exec_equivalence(a, b, Exploding())


def test_exec_equivalence_compares_observations():
    env = TableEnvironment(
        {"print(1 + 1)": "2", "print(2)": "2", "print(3)": "3"}
    )
    check = execution_checker(env)
    assert check(
        StepProposal(thought="a", action="print(1 + 1)"),
        StepProposal(thought="b", action="print(2)"),
    )
    assert not check(
        StepProposal(thought="a", action="print(1 + 1)"),
        StepProposal(thought="b", action="print(3)"),
    )


def test_exec_equivalence_fails_closed(caplog):
    env = TableEnvironment({"print(1)": "1"})
    a = StepProposal(thought="a", action="print(1)")
    b = StepProposal(thought="b", action="mystery()")
    with caplog.at_level(logging.WARNING, logger="mentored.rewards"):
        assert not exec_equivalence(a, b, env)
    assert any("equivalence" in r.message for r in caplog.records)
