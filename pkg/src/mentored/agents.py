"""Actor contracts plus deterministic scripted implementations.

Four actors surround the correction loop: a student policy proposes
steps, a teacher policy proposes replacement steps, a judge assesses
finished runs against the gold answer, and an environment executes code
actions. The abstract classes here define those contracts; the Scripted*
and Table* classes implement them as pure table lookups so the whole
loop can run offline and deterministically in tests.

Gold answers flow to judges only. Policies receive a Task, which does
not carry the answer.
"""

from __future__ import annotations

import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass

from .errors import BackendUnavailable, ExecutorUnavailable
from .traj_model import (
    HistoryView,
    PolicyRole,
    Step,
    StepProposal,
    Task,
    Trajectory,
    full_history,
    is_terminal_action,
    normalize_text,
)

__all__ = [
    "Environment",
    "Judge",
    "Policy",
    "PolicyRole",
    "ScriptedJudge",
    "ScriptedPolicy",
    "ScriptedTeacher",
    "TableEnvironment",
    "Teacher",
    "Verdict",
    "answers_match",
]


@dataclass(frozen=True)
class Verdict:
    """A judge's assessment of one finished trajectory.

    A correct verdict carries nothing else. An incorrect verdict names
    the earliest bad step and, optionally, why and what to do instead.
    """

    is_correct: bool
    error_analysis: str | None = None
    correction_start_step: int | None = None
    correction_suggestion: str | None = None

    def __post_init__(self) -> None:
        if self.is_correct:
            if (
                self.error_analysis is not None
                or self.correction_start_step is not None
                or self.correction_suggestion is not None
            ):
                raise ValueError("a correct verdict carries no correction fields")
        else:
            if self.correction_start_step is None:
                raise ValueError("an incorrect verdict must name the first bad step")
            if self.correction_start_step < 1:
                raise ValueError("correction_start_step must be >= 1")


class Policy(ABC):
    """A step-proposing agent (student or teacher)."""

    role: PolicyRole

    @abstractmethod
    def first_thought(self, task: Task) -> str:
        """Produce the high-level plan written before step 1.

        Must return non-empty text; raises BackendUnavailable when the
        backend cannot serve the task.
        """

    @abstractmethod
    def next_step(self, task: Task, history: HistoryView) -> StepProposal:
        """Propose the next thought/action given the executed history."""


class Teacher(Policy):
    """A policy that can additionally repair a single bad step."""

    @abstractmethod
    def correct(
        self,
        task: Task,
        prefix: HistoryView,
        error_step: Step,
        analysis: str,
    ) -> StepProposal:
        """Replace error_step with one corrected step, not a full solution."""


class Judge(ABC):
    @abstractmethod
    def assess(self, task: Task, traj: Trajectory, gold_answer: str) -> Verdict:
        """Assess a terminal trajectory against the gold answer."""


class Environment(ABC):
    @abstractmethod
    def execute(self, action: str) -> str:
        """Run a code action and return its observation text."""


_NUMERIC_SUFFIXES = ("degrees", "degree", "°")


def _normalize_answer(text: str) -> str:
    out = normalize_text(text).lower()
    for suffix in _NUMERIC_SUFFIXES:
        if out.endswith(suffix):
            out = out[: -len(suffix)].strip()
    return out


def answers_match(candidate: str, gold: str) -> bool:
    """Whitespace/case-insensitive match, numeric-aware.

    "45.0" matches "45°": unit suffixes are stripped and both sides are
    compared as floats when both parse.
    """
    a, b = _normalize_answer(candidate), _normalize_answer(gold)
    if a == b:
        return True
    try:
        return math.isclose(float(a), float(b), rel_tol=1e-9, abs_tol=1e-12)
    except ValueError:
        return False


# Fixture tables key on (task_id, step index, history digest). A digest of
# None acts as a positional wildcard used when no exact-history entry exists.
StepKey = tuple[str, int, str | None]


class ScriptedPolicy(Policy):
    """Pure table-lookup policy for offline runs and tests."""

    def __init__(
        self,
        role: PolicyRole,
        first_thoughts: dict[str, str] | None = None,
        steps: dict[StepKey, StepProposal] | None = None,
    ) -> None:
        self.role = role
        self._first_thoughts = dict(first_thoughts or {})
        self._steps = dict(steps or {})

    def first_thought(self, task: Task) -> str:
        try:
            return self._first_thoughts[task.task_id]
        except KeyError:
            raise BackendUnavailable(
                f"no scripted plan for task {task.task_id!r}"
            ) from None

    def next_step(self, task: Task, history: HistoryView) -> StepProposal:
        index = history.next_index
        exact = (task.task_id, index, history.content_key())
        positional = (task.task_id, index, None)
        for key in (exact, positional):
            proposal = self._steps.get(key)
            if proposal is not None:
                return proposal
        raise BackendUnavailable(
            f"no scripted step for task {task.task_id!r} at index {index}"
        )


class ScriptedTeacher(ScriptedPolicy, Teacher):
    """Scripted policy with a correction table.

    Corrections key on (task_id, error step index, digest of the
    verified prefix), again with None as a positional wildcard.
    """

    def __init__(
        self,
        first_thoughts: dict[str, str] | None = None,
        steps: dict[StepKey, StepProposal] | None = None,
        corrections: dict[StepKey, StepProposal] | None = None,
    ) -> None:
        super().__init__(PolicyRole.TEACHER, first_thoughts, steps)
        self._corrections = dict(corrections or {})

    def correct(
        self,
        task: Task,
        prefix: HistoryView,
        error_step: Step,
        analysis: str,
    ) -> StepProposal:
        exact = (task.task_id, error_step.index, prefix.content_key())
        positional = (task.task_id, error_step.index, None)
        for key in (exact, positional):
            proposal = self._corrections.get(key)
            if proposal is not None:
                return proposal
        raise BackendUnavailable(
            f"no scripted correction for task {task.task_id!r} "
            f"at step {error_step.index}"
        )


class ScriptedJudge(Judge):
    """Judges by comparing the final answer, then the action path.

    A wrong answer is localized to the first step whose action departs
    from the task's reference action sequence. Verdict overrides keyed
    on (task_id, trajectory digest) let fixtures script arbitrary
    verdicts for specific runs.
    """

    def __init__(
        self,
        references: dict[str, list[str]] | None = None,
        overrides: dict[tuple[str, str], Verdict] | None = None,
    ) -> None:
        self._references = {
            task_id: [normalize_text(action) for action in actions]
            for task_id, actions in (references or {}).items()
        }
        self._overrides = dict(overrides or {})

    def assess(self, task: Task, traj: Trajectory, gold_answer: str) -> Verdict:
        if not traj.terminal:
            raise ValueError("judge requires a terminal trajectory")
        override = self._overrides.get((task.task_id, full_history(traj).content_key()))
        if override is not None:
            return override
        if traj.final_answer is not None and answers_match(
            traj.final_answer, gold_answer
        ):
            return Verdict(is_correct=True)
        return self._locate_error(task.task_id, traj)

    def _locate_error(self, task_id: str, traj: Trajectory) -> Verdict:
        reference = self._references.get(task_id, [])
        bad_index = len(traj.steps)  # default: blame the submitting step
        suggestion: str | None = None
        for position, step in enumerate(traj.steps, start=1):
            if position > len(reference):
                bad_index = position
                break
            if normalize_text(step.action) != reference[position - 1]:
                bad_index = position
                suggestion = reference[position - 1]
                break
        return Verdict(
            is_correct=False,
            error_analysis=(
                f"Step {bad_index} departs from the expected solution path."
            ),
            correction_start_step=bad_index,
            correction_suggestion=suggestion,
        )


_ANSWER_LITERAL = re.compile(
    r"final_answer_print\(\s*(['\"])(?P<text>.*?)\1\s*\)", re.DOTALL
)


class TableEnvironment(Environment):
    """Executes actions by exact (whitespace-normalized) table lookup.

    Terminal actions that pass a string literal are echoed even without
    a table entry, since their observation is the literal itself.
    """

    def __init__(self, entries: dict[str, str] | None = None) -> None:
        self._entries = {
            normalize_text(action): observation
            for action, observation in (entries or {}).items()
        }

    def execute(self, action: str) -> str:
        observation = self._entries.get(normalize_text(action))
        if observation is not None:
            return observation
        if is_terminal_action(action):
            literal = _ANSWER_LITERAL.search(action)
            if literal is not None:
                return literal.group("text")
        raise ExecutorUnavailable(f"no table entry for action {action!r}")
