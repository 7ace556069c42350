"""Mentored problem-solving loop.

One task flows through a fixed state machine: the student writes a plan
and a full trajectory; the judge assesses it against the gold answer;
while the verdict is negative, the teacher replaces the earliest bad
step with a corrected one, the corrected action is executed, and the
student resumes from the endorsed prefix plus that step. Teacher
interventions are capped; a task still unsolved at the cap is flagged
hard-to-teach. Every intervention yields a correction event, and solved
outcomes convert their events into step-level preference pairs.

A companion routine generates teacher-authored trajectories with
rejection sampling (keep only judged-correct runs) for cold-start data.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, TypeVar

from .agents import Environment, Judge, Policy, Teacher, Verdict
from .errors import InvalidVerdict, MalformedOutput, StepLimitExceeded
from .traj_model import (
    CorrectionEvent,
    HistoryView,
    PolicyRole,
    PreferencePair,
    Task,
    TaskSpec,
    Trajectory,
    append_step,
    full_history,
    make_preference_pair,
    proposal_of,
    step_from_proposal,
    verified_prefix,
)

T = TypeVar("T")


@dataclass(frozen=True)
class MpsConfig:
    """Knobs for one correction loop.

    retry_on_malformed counts retries after the first attempt. The
    emit_hard_pairs flag lets hard-to-teach outcomes keep their
    preference pairs; by default only solved outcomes emit pairs,
    since solving is what vouches for the teacher's corrections.
    """

    max_steps: int = 8
    max_interventions: int = 5
    retry_on_malformed: int = 1
    emit_hard_pairs: bool = False

    def __post_init__(self) -> None:
        for name in ("max_steps", "max_interventions", "retry_on_malformed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise TypeError(f"{name} must be an int")
            if value < 1:
                raise ValueError(f"{name} must be >= 1")


class MpsStatus(Enum):
    SOLVED_UNAIDED = "solved_unaided"
    SOLVED_WITH_CORRECTIONS = "solved_with_corrections"
    HARD_TO_TEACH = "hard_to_teach"


@dataclass(frozen=True)
class MpsOutcome:
    """Everything one task produced: trajectory, events, pairs."""

    task_id: str
    gold_answer: str
    status: MpsStatus
    trajectory: Trajectory
    events: tuple[CorrectionEvent, ...] = ()
    pairs: tuple[PreferencePair, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.events, tuple):
            object.__setattr__(self, "events", tuple(self.events))
        if not isinstance(self.pairs, tuple):
            object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.trajectory.task_id != self.task_id:
            raise ValueError("trajectory belongs to a different task")
        indices = [event.step_index for event in self.events]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("correction indices must be strictly increasing")
        if self.status is MpsStatus.SOLVED_UNAIDED:
            if self.events or self.pairs:
                raise ValueError("an unaided solve carries no corrections")
        elif self.status is MpsStatus.SOLVED_WITH_CORRECTIONS:
            if not self.events:
                raise ValueError("a corrected solve needs at least one event")
            if len(self.pairs) != len(self.events):
                raise ValueError("solved outcomes pair every correction event")
        else:
            if not self.events:
                raise ValueError("a hard-to-teach outcome records its attempts")
            if len(self.pairs) not in (0, len(self.events)):
                raise ValueError("hard outcomes emit either no pairs or all")

    @property
    def corrections(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class Rejected:
    """A generated trajectory the judge refused, kept for diagnostics."""

    trajectory: Trajectory
    verdict: Verdict


@dataclass(frozen=True)
class OutcomePools:
    """Down-stream destinations for a batch of outcomes."""

    sft_pool: tuple[MpsOutcome, ...]
    rl_pool: tuple[MpsOutcome, ...]
    hard_pool: tuple[MpsOutcome, ...]


def _with_retry(call: Callable[[], T], retries: int) -> T:
    # Retries apply to malformed backend output only; other errors propagate.
    for attempt in range(retries + 1):
        try:
            return call()
        except MalformedOutput:
            if attempt == retries:
                raise
    raise AssertionError("unreachable")


def _extend(
    traj: Trajectory,
    task: Task,
    policy: Policy,
    env: Environment,
    config: MpsConfig,
) -> Trajectory:
    """Let a policy run until it submits an answer or hits the step cap."""
    while not traj.terminal:
        if len(traj.steps) >= config.max_steps:
            raise StepLimitExceeded(
                f"task {traj.task_id!r} reached {config.max_steps} steps "
                "without submitting an answer"
            )
        history = full_history(traj)
        proposal = _with_retry(
            lambda: policy.next_step(task, history), config.retry_on_malformed
        )
        observation = env.execute(proposal.action)
        step = step_from_proposal(
            len(traj.steps) + 1, proposal, observation, policy.role
        )
        traj = append_step(traj, step)
    return traj


def generate_initial_trajectory(
    task: TaskSpec,
    teacher: Teacher,
    env: Environment,
    judge: Judge,
    config: MpsConfig = MpsConfig(),
) -> Trajectory | Rejected:
    """Teacher-authored run, kept only if the judge accepts the answer."""
    plain = task.task
    plan = _with_retry(
        lambda: teacher.first_thought(plain), config.retry_on_malformed
    )
    traj = Trajectory(task_id=task.task_id, first_thought=plan)
    traj = _extend(traj, plain, teacher, env, config)
    verdict = _with_retry(
        lambda: judge.assess(plain, traj, task.gold_answer),
        config.retry_on_malformed,
    )
    if verdict.is_correct:
        return traj
    return Rejected(trajectory=traj, verdict=verdict)


def run_mps(
    task: TaskSpec,
    student: Policy,
    teacher: Teacher,
    judge: Judge,
    env: Environment,
    config: MpsConfig = MpsConfig(),
) -> MpsOutcome:
    """Run the full correction loop for one task."""
    plain = task.task
    plan = _with_retry(
        lambda: student.first_thought(plain), config.retry_on_malformed
    )
    traj = Trajectory(task_id=task.task_id, first_thought=plan)
    traj = _extend(traj, plain, student, env, config)

    events: list[CorrectionEvent] = []
    while True:
        verdict = _with_retry(
            lambda: judge.assess(plain, traj, task.gold_answer),
            config.retry_on_malformed,
        )
        if verdict.is_correct:
            if not events:
                return MpsOutcome(
                    task_id=task.task_id,
                    gold_answer=task.gold_answer,
                    status=MpsStatus.SOLVED_UNAIDED,
                    trajectory=traj,
                )
            return MpsOutcome(
                task_id=task.task_id,
                gold_answer=task.gold_answer,
                status=MpsStatus.SOLVED_WITH_CORRECTIONS,
                trajectory=traj,
                events=tuple(events),
                pairs=tuple(
                    make_preference_pair(event, task.task_id) for event in events
                ),
            )

        if len(events) >= config.max_interventions:
            pairs: tuple[PreferencePair, ...] = ()
            if config.emit_hard_pairs:
                pairs = tuple(
                    make_preference_pair(event, task.task_id) for event in events
                )
            return MpsOutcome(
                task_id=task.task_id,
                gold_answer=task.gold_answer,
                status=MpsStatus.HARD_TO_TEACH,
                trajectory=traj,
                events=tuple(events),
                pairs=pairs,
            )

        bad = verdict.correction_start_step
        assert bad is not None  # Verdict invariant for is_correct=False
        if bad > len(traj.steps):
            raise InvalidVerdict(
                f"verdict names step {bad} but the trajectory has "
                f"{len(traj.steps)} steps"
            )
        if events and bad <= events[-1].step_index:
            raise InvalidVerdict(
                f"verdict names step {bad} at or before the last "
                f"correction at step {events[-1].step_index}"
            )

        prefix = verified_prefix(traj, bad)
        error_step = traj.steps[bad - 1]
        analysis = verdict.error_analysis or f"Step {bad} was judged incorrect."
        # The teacher sees the whole failure history for this task, the
        # current analysis last.
        experience = "\n\n".join(
            [event.analysis for event in events] + [analysis]
        )
        prefix_view = HistoryView(
            task_id=task.task_id, first_thought=plan, steps=prefix
        )
        corrected = _with_retry(
            lambda: teacher.correct(plain, prefix_view, error_step, experience),
            config.retry_on_malformed,
        )
        events.append(
            CorrectionEvent(
                step_index=bad,
                original=proposal_of(error_step),
                corrected=corrected,
                analysis=analysis,
                prefix=prefix,
            )
        )
        observation = env.execute(corrected.action)
        replacement = step_from_proposal(
            bad, corrected, observation, PolicyRole.TEACHER
        )
        traj = append_step(
            Trajectory(task_id=task.task_id, steps=prefix, first_thought=plan),
            replacement,
        )
        if not traj.terminal:
            traj = _extend(traj, plain, student, env, config)


def partition_outcomes(
    outcomes: list[MpsOutcome],
    seed: int,
    hard_fraction: float = 0.5,
) -> OutcomePools:
    """Route solved outcomes 50/50 to SFT and RL; keep a slice of the hard ones.

    The split depends only on the set of outcomes and the seed, not on
    input order: outcomes are sorted by task id before the seeded
    shuffle. Both halves use floor rounding (SFT gets the floor).
    """
    if not 0.0 <= hard_fraction <= 1.0:
        raise ValueError("hard_fraction must lie in [0, 1]")
    solved = sorted(
        (o for o in outcomes if o.status is not MpsStatus.HARD_TO_TEACH),
        key=lambda o: o.task_id,
    )
    hard = sorted(
        (o for o in outcomes if o.status is MpsStatus.HARD_TO_TEACH),
        key=lambda o: o.task_id,
    )
    rng = random.Random(seed)
    rng.shuffle(solved)
    rng.shuffle(hard)
    cut = len(solved) // 2
    keep = math.floor(len(hard) * hard_fraction)
    return OutcomePools(
        sft_pool=tuple(solved[:cut]),
        rl_pool=tuple(solved[cut:]),
        hard_pool=tuple(hard[:keep]),
    )
