from __future__ import annotations

import pytest

from mentored.agents import Judge, ScriptedTeacher, Teacher, Verdict
from mentored.errors import (
    DegeneratePair,
    InvalidVerdict,
    MalformedOutput,
    StepLimitExceeded,
)
from mentored.mps_engine import (
    MpsConfig,
    MpsOutcome,
    MpsStatus,
    Rejected,
    generate_initial_trajectory,
    partition_outcomes,
    run_mps,
)
from mentored.rewards import make_rollout_seed
from mentored.traj_model import (
    CorrectionEvent,
    PolicyRole,
    Step,
    StepProposal,
    Trajectory,
)
from scenarios import (
    GEOMETRY_FIXED_STEP_1,
    GEOMETRY_WRONG_STEP_1,
    MUSIC_SEARCHES,
    geometry_scenario,
    music_scenario,
    stubborn_scenario,
    unaided_scenario,
)


class SequenceJudge(Judge):
    """Replays a fixed verdict sequence, one per assessment."""

    def __init__(self, verdicts):
        self._verdicts = list(verdicts)

    def assess(self, task, traj, gold_answer):
        return self._verdicts.pop(0)


class RecordingTeacher(Teacher):
    """Forwards to an inner teacher while logging what it was told."""

    role = PolicyRole.TEACHER

    def __init__(self, inner):
        self._inner = inner
        self.analyses = []

    def first_thought(self, task):
        return self._inner.first_thought(task)

    def next_step(self, task, history):
        return self._inner.next_step(task, history)

    def correct(self, task, prefix, error_step, analysis):
        self.analyses.append(analysis)
        return self._inner.correct(task, prefix, error_step, analysis)


def test_unaided_solve():
    task, student, teacher, judge, env = unaided_scenario()
    outcome = run_mps(task, student, teacher, judge, env)
    assert outcome.status is MpsStatus.SOLVED_UNAIDED
    assert outcome.events == ()
    assert outcome.pairs == ()
    assert outcome.trajectory.final_answer == "42"
    assert outcome.corrections == 0
    assert all(s.origin is PolicyRole.STUDENT for s in outcome.trajectory.steps)


def test_earliest_step_correction():
    task, student, teacher, judge, env = geometry_scenario()
    outcome = run_mps(task, student, teacher, judge, env)
    assert outcome.status is MpsStatus.SOLVED_WITH_CORRECTIONS
    assert outcome.corrections == 1

    event = outcome.events[0]
    assert event.step_index == 1
    assert event.prefix == ()
    assert event.original.action == GEOMETRY_WRONG_STEP_1
    assert event.corrected.action == GEOMETRY_FIXED_STEP_1
    assert event.analysis == "Step 1 departs from the expected solution path."

    traj = outcome.trajectory
    assert traj.horizon == 2
    assert traj.final_answer == "45°"
    assert traj.steps[0].origin is PolicyRole.TEACHER
    assert traj.steps[1].origin is PolicyRole.STUDENT

    pair = outcome.pairs[0]
    assert pair.prefix == ()
    assert pair.preferred == event.corrected
    assert pair.rejected == event.original

    seed = make_rollout_seed(outcome, event)
    assert seed.remaining_horizon == 2
    assert seed.prefix.steps == ()


def test_late_step_correction_keeps_verified_prefix():
    task, student, teacher, judge, env = music_scenario()
    outcome = run_mps(task, student, teacher, judge, env)
    assert outcome.status is MpsStatus.SOLVED_WITH_CORRECTIONS
    event = outcome.events[0]
    assert event.step_index == 3
    assert len(event.prefix) == 2
    assert [s.action for s in event.prefix] == MUSIC_SEARCHES[:2]
    assert event.corrected.action == MUSIC_SEARCHES[2]

    traj = outcome.trajectory
    assert traj.horizon == 4
    assert traj.final_answer == "Rock and Roll Hall of Fame"
    # The verified prefix is untouched, the blamed step was replaced.
    assert [s.origin for s in traj.steps] == [
        PolicyRole.STUDENT,
        PolicyRole.STUDENT,
        PolicyRole.TEACHER,
        PolicyRole.STUDENT,
    ]
    seed = make_rollout_seed(outcome, event)
    assert seed.remaining_horizon == 2
    assert seed.step_index == 3


def test_hard_to_teach_after_intervention_cap():
    task, student, teacher, judge, env = stubborn_scenario()
    outcome = run_mps(task, student, teacher, judge, env)
    assert outcome.status is MpsStatus.HARD_TO_TEACH
    assert outcome.corrections == 5
    assert [e.step_index for e in outcome.events] == [1, 2, 3, 4, 5]
    assert outcome.pairs == ()
    # Every blamed step was repaired in place before the cap hit.
    assert [s.action for s in outcome.trajectory.steps[:5]] == [
        f"probe({i})" for i in range(1, 6)
    ]
    assert outcome.trajectory.final_answer == "nope"


def test_hard_pairs_emitted_when_enabled():
    task, student, teacher, judge, env = stubborn_scenario()
    config = MpsConfig(emit_hard_pairs=True)
    outcome = run_mps(task, student, teacher, judge, env, config)
    assert outcome.status is MpsStatus.HARD_TO_TEACH
    assert len(outcome.pairs) == 5
    assert [p.preferred.action for p in outcome.pairs] == [
        f"probe({i})" for i in range(1, 6)
    ]


def test_teacher_sees_accumulated_failure_history():
    task, student, teacher, judge, env = stubborn_scenario()
    recorder = RecordingTeacher(teacher)
    run_mps(task, student, recorder, judge, env)
    assert len(recorder.analyses) == 5
    assert recorder.analyses[0] == "Step 1 departs from the expected solution path."
    assert recorder.analyses[1] == (
        "Step 1 departs from the expected solution path."
        "\n\n"
        "Step 2 departs from the expected solution path."
    )
    assert recorder.analyses[4].count("\n\n") == 4


def test_missing_analysis_gets_a_synthesized_one():
    task, student, teacher, judge, env = geometry_scenario()
    blind_judge = SequenceJudge(
        [
            Verdict(is_correct=False, correction_start_step=1),
            Verdict(is_correct=True),
        ]
    )
    outcome = run_mps(task, student, teacher, blind_judge, env)
    assert outcome.events[0].analysis == "Step 1 was judged incorrect."


def test_verdict_beyond_trajectory_is_rejected():
    task, student, teacher, judge, env = geometry_scenario()
    bad_judge = SequenceJudge(
        [Verdict(is_correct=False, correction_start_step=99, error_analysis="x")]
    )
    with pytest.raises(InvalidVerdict):
        run_mps(task, student, teacher, bad_judge, env)


def test_verdict_must_move_forward():
    task, student, teacher, judge, env = geometry_scenario()
    stuck_judge = SequenceJudge(
        [
            Verdict(is_correct=False, correction_start_step=1, error_analysis="a"),
            Verdict(is_correct=False, correction_start_step=1, error_analysis="b"),
        ]
    )
    with pytest.raises(InvalidVerdict):
        run_mps(task, student, teacher, stuck_judge, env)


def test_echoed_correction_aborts():
    task, student, _, judge, env = geometry_scenario()
    echo_teacher = ScriptedTeacher(
        corrections={
            ("geo-1", 1, None): StepProposal(
                thought="AD = DC, so angles ADC and ACD are equal.",
                action=GEOMETRY_WRONG_STEP_1,
            )
        }
    )
    with pytest.raises(DegeneratePair):
        run_mps(task, student, echo_teacher, judge, env)


def test_step_cap_stops_runaway_students():
    task, student, teacher, judge, env = stubborn_scenario()
    # Five non-terminal guesses exceed a cap of 3 before any submission.
    with pytest.raises(StepLimitExceeded):
        run_mps(task, student, teacher, judge, env, MpsConfig(max_steps=3))


def test_malformed_output_is_retried_once():
    task, student, teacher, judge, env = unaided_scenario()
    flaky_calls = {"fails": 1, "total": 0}

    class FlakyStudent:
        role = PolicyRole.STUDENT

        def first_thought(self, t):
            return student.first_thought(t)

        def next_step(self, t, history):
            flaky_calls["total"] += 1
            if flaky_calls["fails"] > 0:
                flaky_calls["fails"] -= 1
                raise MalformedOutput("garbled")
            return student.next_step(t, history)

    outcome = run_mps(task, FlakyStudent(), teacher, judge, env)
    assert outcome.status is MpsStatus.SOLVED_UNAIDED
    assert flaky_calls["total"] == 3  # one failure, one retry, one clean step

    flaky_calls.update(fails=99, total=0)
    with pytest.raises(MalformedOutput):
        run_mps(task, FlakyStudent(), teacher, judge, env)
    assert flaky_calls["total"] == 2  # the default config retries once


def test_generate_initial_trajectory_paths():
    task, _, _, judge, env = unaided_scenario()
    scripted = ScriptedTeacher(
        first_thoughts={"sum-1": "Add and submit."},
        steps={
            ("sum-1", 1, None): StepProposal(
                thought="Submit directly.", action='final_answer_print("42")'
            )
        },
    )
    traj = generate_initial_trajectory(task, scripted, env, judge)
    assert isinstance(traj, Trajectory)
    assert traj.final_answer == "42"
    assert traj.steps[0].origin is PolicyRole.TEACHER

    wrong = ScriptedTeacher(
        first_thoughts={"sum-1": "Add and submit."},
        steps={
            ("sum-1", 1, None): StepProposal(
                thought="Submit directly.", action='final_answer_print("41")'
            )
        },
    )
    rejected = generate_initial_trajectory(task, wrong, env, judge)
    assert isinstance(rejected, Rejected)
    assert not rejected.verdict.is_correct


def _tiny_outcome(task_id: str, status: MpsStatus) -> MpsOutcome:
    submit = Step(
        index=1,
        thought="go",
        action='final_answer_print("x")',
        observation="x",
    )
    traj = Trajectory(
        task_id=task_id, steps=(submit,), terminal=True, final_answer="x"
    )
    if status is MpsStatus.SOLVED_UNAIDED:
        return MpsOutcome(
            task_id=task_id, gold_answer="x", status=status, trajectory=traj
        )
    event = CorrectionEvent(
        step_index=1,
        original=StepProposal(thought="bad", action="print(0)"),
        corrected=StepProposal(thought="go", action='final_answer_print("x")'),
        analysis="wrong start",
    )
    pairs = ()
    if status is MpsStatus.SOLVED_WITH_CORRECTIONS:
        from mentored.traj_model import make_preference_pair

        pairs = (make_preference_pair(event, task_id),)
    return MpsOutcome(
        task_id=task_id,
        gold_answer="x",
        status=status,
        trajectory=traj,
        events=(event,),
        pairs=pairs,
    )


def test_outcome_invariants():
    good = _tiny_outcome("t", MpsStatus.SOLVED_WITH_CORRECTIONS)
    assert good.corrections == 1
    with pytest.raises(ValueError):
        MpsOutcome(
            task_id="other",
            gold_answer="x",
            status=MpsStatus.SOLVED_UNAIDED,
            trajectory=good.trajectory,  # task_id mismatch
        )
    with pytest.raises(ValueError):
        MpsOutcome(
            task_id="t",
            gold_answer="x",
            status=MpsStatus.SOLVED_UNAIDED,
            trajectory=good.trajectory,
            events=good.events,  # unaided must not carry events
        )
    with pytest.raises(ValueError):
        MpsOutcome(
            task_id="t",
            gold_answer="x",
            status=MpsStatus.SOLVED_WITH_CORRECTIONS,
            trajectory=good.trajectory,
            events=good.events,
            pairs=(),  # corrected outcomes pair every event
        )
    with pytest.raises(ValueError):
        MpsOutcome(
            task_id="t",
            gold_answer="x",
            status=MpsStatus.HARD_TO_TEACH,
            trajectory=good.trajectory,  # hard outcomes need >= 1 event
        )


def test_partition_splits_solved_pool_in_half():
    outcomes = [
        _tiny_outcome(f"t{i:02d}", MpsStatus.SOLVED_UNAIDED) for i in range(10)
    ]
    pools = partition_outcomes(outcomes, seed=5)
    assert len(pools.sft_pool) == 5
    assert len(pools.rl_pool) == 5
    assert len(pools.hard_pool) == 0
    together = sorted(o.task_id for o in pools.sft_pool + pools.rl_pool)
    assert together == [f"t{i:02d}" for i in range(10)]


def test_partition_keeps_hard_fraction():
    hard = [_tiny_outcome(f"h{i}", MpsStatus.HARD_TO_TEACH) for i in range(4)]
    pools = partition_outcomes(hard, seed=1, hard_fraction=0.5)
    assert len(pools.hard_pool) == 2
    assert partition_outcomes(hard, seed=1, hard_fraction=0.0).hard_pool == ()
    assert len(partition_outcomes(hard, seed=1, hard_fraction=1.0).hard_pool) == 4
    with pytest.raises(ValueError):
        partition_outcomes(hard, seed=1, hard_fraction=1.5)


def test_partition_ignores_input_order():
    outcomes = [
        _tiny_outcome(f"t{i:02d}", MpsStatus.SOLVED_UNAIDED) for i in range(9)
    ]
    forward = partition_outcomes(list(outcomes), seed=7)
    backward = partition_outcomes(list(reversed(outcomes)), seed=7)
    assert [o.task_id for o in forward.sft_pool] == [
        o.task_id for o in backward.sft_pool
    ]
    assert [o.task_id for o in forward.rl_pool] == [
        o.task_id for o in backward.rl_pool
    ]
    different = partition_outcomes(list(outcomes), seed=8)
    assert [o.task_id for o in forward.sft_pool] != [
        o.task_id for o in different.sft_pool
    ]
