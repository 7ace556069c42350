"""Core data model for tool-use trajectories.

A trajectory is an ordered run of (thought, code action, observation)
steps produced while solving one task. Steps are 1-indexed. A run may
carry an optional planning thought written before the first step. The
run terminates when an action calls the final-answer tool; the
observation of that step is the submitted answer.

Types here are frozen and validate themselves on construction, so any
instance that exists is structurally sound. Mutation is expressed by
building new values (see append_step).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from enum import Enum

from .errors import DegeneratePair, IndexGap, OutOfRange, TerminalViolation

TERMINAL_MARKER = "final_answer_print("


def is_terminal_action(action: str) -> bool:
    """True when the code action submits a final answer."""
    return TERMINAL_MARKER in action


def normalize_text(text: str) -> str:
    """Collapse all whitespace runs to single spaces and trim the ends."""
    return " ".join(text.split())


class PolicyRole(Enum):
    """Which policy authored a piece of content."""

    STUDENT = "student"
    TEACHER = "teacher"


@dataclass(frozen=True)
class Task:
    """What a policy is allowed to see about a problem."""

    task_id: str
    question: str

    def __post_init__(self) -> None:
        if not self.task_id.strip():
            raise ValueError("task_id must be non-empty")
        if not self.question.strip():
            raise ValueError("question must be non-empty")


@dataclass(frozen=True)
class TaskSpec:
    """A task together with its gold answer.

    Only the driver and the judge ever hold one of these; policies get
    the stripped-down Task so the gold answer cannot leak into prompts.
    """

    task_id: str
    question: str
    gold_answer: str

    def __post_init__(self) -> None:
        if not self.task_id.strip():
            raise ValueError("task_id must be non-empty")
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        if not self.gold_answer.strip():
            raise ValueError("gold_answer must be non-empty")

    @property
    def task(self) -> Task:
        return Task(task_id=self.task_id, question=self.question)


@dataclass(frozen=True)
class Step:
    """One executed (or not-yet-executed) reasoning cycle."""

    index: int
    thought: str
    action: str
    observation: str | None = None
    origin: PolicyRole = PolicyRole.STUDENT

    def __post_init__(self) -> None:
        if not isinstance(self.index, int) or isinstance(self.index, bool):
            raise TypeError("index must be an int")
        if self.index < 1:
            raise ValueError("index must be >= 1")
        if not self.thought.strip():
            raise ValueError("thought must be non-empty")
        if not self.action.strip():
            raise ValueError("action must be non-empty")
        if self.observation is not None and not isinstance(self.observation, str):
            raise TypeError("observation must be a string or None")
        if not isinstance(self.origin, PolicyRole):
            raise TypeError("origin must be a PolicyRole")

    @property
    def terminal(self) -> bool:
        return is_terminal_action(self.action)

    @property
    def executed(self) -> bool:
        return self.observation is not None


@dataclass(frozen=True)
class StepProposal:
    """A thought/action pair as authored, before execution."""

    thought: str
    action: str

    def __post_init__(self) -> None:
        if not self.thought.strip():
            raise ValueError("thought must be non-empty")
        if not self.action.strip():
            raise ValueError("action must be non-empty")

    @property
    def terminal(self) -> bool:
        return is_terminal_action(self.action)


def step_from_proposal(
    index: int,
    proposal: StepProposal,
    observation: str,
    origin: PolicyRole = PolicyRole.STUDENT,
) -> Step:
    """Promote an executed proposal to a full step."""
    return Step(
        index=index,
        thought=proposal.thought,
        action=proposal.action,
        observation=observation,
        origin=origin,
    )


def proposal_of(step: Step) -> StepProposal:
    return StepProposal(thought=step.thought, action=step.action)


@dataclass(frozen=True)
class Trajectory:
    """An ordered run of steps for one task.

    final_answer is present exactly when the run terminated; it is the
    observation returned by the final-answer call.
    """

    task_id: str
    steps: tuple[Step, ...] = ()
    first_thought: str | None = None
    final_answer: str | None = None
    terminal: bool = False

    def __post_init__(self) -> None:
        if not self.task_id.strip():
            raise ValueError("task_id must be non-empty")
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))
        if self.first_thought is not None and not self.first_thought.strip():
            raise ValueError("first_thought, when present, must be non-empty")
        if self.terminal and self.final_answer is None:
            raise ValueError("terminal trajectory requires a final_answer")
        if not self.terminal and self.final_answer is not None:
            raise ValueError("final_answer only exists on terminal trajectories")
        if self.terminal and not self.steps:
            raise ValueError("terminal trajectory must contain at least one step")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def horizon(self) -> int:
        """Number of executed steps."""
        return len(self.steps)


@dataclass(frozen=True)
class HistoryView:
    """What a policy sees when asked for the next step."""

    task_id: str
    first_thought: str | None = None
    steps: tuple[Step, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))

    def content_key(self) -> str:
        """Digest of the executed steps, insensitive to whitespace.

        Covers (thought, action, observation) triples only; task_id and
        first_thought stay out so hand-written fixtures can key on step
        content alone.
        """
        digest = hashlib.sha256()
        for step in self.steps:
            for text in (step.thought, step.action, step.observation or ""):
                digest.update(normalize_text(text).encode("utf-8"))
                digest.update(b"\x1f")
            digest.update(b"\x1e")
        return digest.hexdigest()

    @property
    def next_index(self) -> int:
        return len(self.steps) + 1


def full_history(traj: Trajectory) -> HistoryView:
    return HistoryView(
        task_id=traj.task_id,
        first_thought=traj.first_thought,
        steps=traj.steps,
    )


@dataclass(frozen=True)
class CorrectionEvent:
    """One teacher intervention: what was replaced, where, and why."""

    step_index: int
    original: StepProposal
    corrected: StepProposal
    analysis: str
    prefix: tuple[Step, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.prefix, tuple):
            object.__setattr__(self, "prefix", tuple(self.prefix))
        if self.step_index < 1:
            raise ValueError("step_index must be >= 1")
        if len(self.prefix) != self.step_index - 1:
            raise ValueError("prefix must hold exactly the steps before step_index")
        if not self.analysis.strip():
            raise ValueError("analysis must be non-empty")
        same_thought = normalize_text(self.original.thought) == normalize_text(
            self.corrected.thought
        )
        same_action = normalize_text(self.original.action) == normalize_text(
            self.corrected.action
        )
        if same_thought and same_action:
            raise DegeneratePair("corrected step is identical to the original")


@dataclass(frozen=True)
class PreferencePair:
    """Shared prefix plus a preferred and a rejected continuation."""

    task_id: str
    prefix: tuple[Step, ...]
    preferred: StepProposal
    rejected: StepProposal

    def __post_init__(self) -> None:
        if not self.task_id.strip():
            raise ValueError("task_id must be non-empty")
        if not isinstance(self.prefix, tuple):
            object.__setattr__(self, "prefix", tuple(self.prefix))
        same_thought = normalize_text(self.preferred.thought) == normalize_text(
            self.rejected.thought
        )
        same_action = normalize_text(self.preferred.action) == normalize_text(
            self.rejected.action
        )
        if same_thought and same_action:
            raise DegeneratePair("preferred and rejected steps are identical")


def append_step(traj: Trajectory, step: Step) -> Trajectory:
    """Return a new trajectory with one executed step appended.

    Raises TerminalViolation if the trajectory already terminated and
    IndexGap unless the step's index is exactly len(steps) + 1.
    """
    if traj.terminal:
        raise TerminalViolation(
            f"trajectory for {traj.task_id!r} already terminated"
        )
    if step.index != len(traj.steps) + 1:
        raise IndexGap(
            f"expected step index {len(traj.steps) + 1}, got {step.index}"
        )
    if not step.executed:
        raise ValueError("only executed steps can be appended")
    if step.terminal:
        return replace(
            traj,
            steps=traj.steps + (step,),
            terminal=True,
            final_answer=step.observation,
        )
    return replace(traj, steps=traj.steps + (step,))


def verified_prefix(traj: Trajectory, step_index: int) -> tuple[Step, ...]:
    """Steps strictly before step_index, i.e. the part the judge endorsed."""
    if step_index < 1 or step_index > len(traj.steps):
        raise OutOfRange(
            f"step_index {step_index} outside 1..{len(traj.steps)}"
        )
    return traj.steps[: step_index - 1]


def make_preference_pair(event: CorrectionEvent, task_id: str) -> PreferencePair:
    """Turn a correction event into a step-level preference pair."""
    return PreferencePair(
        task_id=task_id,
        prefix=event.prefix,
        preferred=event.corrected,
        rejected=event.original,
    )


def validate_trajectory(traj: Trajectory) -> list[str]:
    """Collect structural violations; an empty list means well-formed.

    Construction already guarantees field-level coherence, so this
    checks the cross-step rules: contiguous 1-based indices, terminal
    marker only on the last step, the terminal flag matching that
    marker, and every step carrying an observation.
    """
    problems: list[str] = []
    for position, step in enumerate(traj.steps, start=1):
        if step.index != position:
            problems.append(
                f"step at position {position} carries index {step.index}"
            )
        if not step.executed:
            problems.append(f"step {position} was never executed")
        if step.terminal and position != len(traj.steps):
            problems.append(
                f"terminal action at step {position} before the end of the run"
            )
    if traj.steps:
        last = traj.steps[-1]
        if traj.terminal and not last.terminal:
            problems.append("terminal flag set but last action never submits")
        if not traj.terminal and last.terminal:
            problems.append("last action submits but terminal flag is unset")
        if traj.terminal and traj.final_answer != last.observation:
            problems.append("final_answer does not echo the last observation")
    return problems
