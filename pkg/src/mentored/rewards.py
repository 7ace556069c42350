"""Key-step reward and rollout-seed construction for the RL phase.

Each correction event can seed a short-horizon rollout: the policy
restarts from the verified prefix and only has to cover the remaining
steps. The reward at the corrected index is piecewise: full reward for
a correct final answer, a medium reward for reproducing the teacher's
fix, a small reward for at least avoiding the original mistake, and
nothing for repeating it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .agents import Environment
from .errors import EventMismatch, ExecutorUnavailable
from .mps_engine import MpsOutcome
from .traj_model import CorrectionEvent, HistoryView, StepProposal, normalize_text

logger = logging.getLogger(__name__)

EquivalenceChecker = Callable[[StepProposal, StepProposal], bool]


@dataclass(frozen=True)
class RewardConfig:
    """Reward levels; only the ordering is fixed, values are tunable."""

    r_final: float = 1.0
    r_key: float = 0.5
    r_avoid: float = 0.1

    def __post_init__(self) -> None:
        if not self.r_final > self.r_key > self.r_avoid >= 0.0:
            raise ValueError("rewards must satisfy r_final > r_key > r_avoid >= 0")


@dataclass(frozen=True)
class RolloutSeed:
    """Restart point for one short-horizon rollout.

    remaining_horizon counts the corrected step itself: a correction at
    the first step of an H-step run leaves the full H to cover.
    """

    task_id: str
    prefix: HistoryView
    step_index: int
    original: StepProposal
    corrected: StepProposal
    remaining_horizon: int
    gold_answer: str

    def __post_init__(self) -> None:
        if self.step_index < 1:
            raise ValueError("step_index must be >= 1")
        if self.remaining_horizon < 1:
            raise ValueError("remaining_horizon must be >= 1")
        if len(self.prefix.steps) != self.step_index - 1:
            raise ValueError("prefix must hold exactly the steps before step_index")
        if self.prefix.task_id != self.task_id:
            raise ValueError("prefix belongs to a different task")


def make_rollout_seed(outcome: MpsOutcome, event: CorrectionEvent) -> RolloutSeed:
    """Build the rollout seed for one of the outcome's own events."""
    if event not in outcome.events:
        raise EventMismatch(
            f"event at step {event.step_index} does not belong to task "
            f"{outcome.task_id!r}"
        )
    horizon = outcome.trajectory.horizon
    return RolloutSeed(
        task_id=outcome.task_id,
        prefix=HistoryView(
            task_id=outcome.task_id,
            first_thought=outcome.trajectory.first_thought,
            steps=event.prefix,
        ),
        step_index=event.step_index,
        original=event.original,
        corrected=event.corrected,
        remaining_horizon=horizon - (event.step_index - 1),
        gold_answer=outcome.gold_answer,
    )


def key_step_reward(
    rolled: StepProposal,
    final_correct: bool,
    seed: RolloutSeed,
    cfg: RewardConfig,
    equiv: EquivalenceChecker,
) -> float:
    """Reward for the step taken at the seed's corrected index.

    Branch order matters: task success dominates everything, then
    matching the teacher, then merely avoiding the original error.
    """
    if final_correct:
        return cfg.r_final
    if equiv(rolled, seed.corrected):
        return cfg.r_key
    if not equiv(rolled, seed.original):
        return cfg.r_avoid
    return 0.0


def exec_equivalence(a: StepProposal, b: StepProposal, env: Environment) -> bool:
    """Equivalent iff the actions match textually or produce equal output.

    An executor failure counts as non-equivalent; it is logged rather
    than raised so reward computation stays total.
    """
    if normalize_text(a.action) == normalize_text(b.action):
        return True
    try:
        return env.execute(a.action) == env.execute(b.action)
    except ExecutorUnavailable as exc:
        logger.warning("equivalence check fell back to False: %s", exc)
        return False


def execution_checker(env: Environment) -> EquivalenceChecker:
    """Bind an environment into an EquivalenceChecker."""

    def check(a: StepProposal, b: StepProposal) -> bool:
        return exec_equivalence(a, b, env)

    return check
