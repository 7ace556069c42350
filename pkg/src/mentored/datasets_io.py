"""Line-delimited JSON serialization for every pipeline artifact.

All records serialize through canonical_json (sorted keys, no spaces,
UTF-8), so equal values always produce equal bytes and every file is
reproducible. Top-level records carry a "schema" version field; nested
objects do not.

File formats:
  *.traj.jsonl  correction-loop outcomes (trajectory, events, pairs)
  *.sft.jsonl   segment streams with loss masks for supervised tuning
  *.pref.jsonl  step-level preference pairs (prefix, chosen, rejected)
  *.seed.jsonl  short-horizon rollout seeds

Loss masks are segment-level: text a trainer should learn (plan,
thoughts, actions) is flagged loss=true; text the environment produced
(observations, the echoed final answer) is flagged loss=false.
"""

from __future__ import annotations

import functools
import json
import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import SerializationFailure
from .mps_engine import MpsOutcome, MpsStatus
from .rewards import RolloutSeed
from .traj_model import (
    CorrectionEvent,
    HistoryView,
    PolicyRole,
    PreferencePair,
    Step,
    StepProposal,
    Trajectory,
)

SCHEMA_VERSION = 1


def canonical_json(obj: Any) -> str:
    """Deterministic single-line JSON: sorted keys, minimal separators."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> int:
    """Write one canonical JSON record per line; returns the record count."""
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(canonical_json(record))
            handle.write("\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    records: list[dict[str, Any]] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SerializationFailure(
                    f"{path}: line {line_no} is not valid JSON: {exc}"
                ) from exc
            if not isinstance(record, dict):
                raise SerializationFailure(
                    f"{path}: line {line_no} is not a JSON object"
                )
            records.append(record)
    return records


def _check_schema(record: Mapping[str, Any]) -> None:
    found = record.get("schema")
    if found != SCHEMA_VERSION:
        raise SerializationFailure(
            f"unsupported schema version {found!r}, expected {SCHEMA_VERSION}"
        )


def _decoding(what: str):
    """Convert structural decode errors into SerializationFailure."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(data: Mapping[str, Any]):
            try:
                return fn(data)
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise SerializationFailure(f"malformed {what}: {exc}") from exc

        return inner

    return wrap


# ---------------------------------------------------------------------------
# Nested object converters (no schema field).

def step_to_dict(step: Step) -> dict[str, Any]:
    return {
        "index": step.index,
        "thought": step.thought,
        "action": step.action,
        "observation": step.observation,
        "origin": step.origin.value,
    }


@_decoding("step")
def step_from_dict(data: Mapping[str, Any]) -> Step:
    return Step(
        index=data["index"],
        thought=data["thought"],
        action=data["action"],
        observation=data["observation"],
        origin=PolicyRole(data["origin"]),
    )


def proposal_to_dict(proposal: StepProposal) -> dict[str, Any]:
    return {"thought": proposal.thought, "action": proposal.action}


@_decoding("step proposal")
def proposal_from_dict(data: Mapping[str, Any]) -> StepProposal:
    return StepProposal(thought=data["thought"], action=data["action"])


def trajectory_to_dict(traj: Trajectory) -> dict[str, Any]:
    return {
        "task_id": traj.task_id,
        "first_thought": traj.first_thought,
        "final_answer": traj.final_answer,
        "terminal": traj.terminal,
        "steps": [step_to_dict(step) for step in traj.steps],
    }


@_decoding("trajectory")
def trajectory_from_dict(data: Mapping[str, Any]) -> Trajectory:
    return Trajectory(
        task_id=data["task_id"],
        steps=tuple(step_from_dict(item) for item in data["steps"]),
        first_thought=data["first_thought"],
        final_answer=data["final_answer"],
        terminal=data["terminal"],
    )


def history_to_dict(history: HistoryView) -> dict[str, Any]:
    return {
        "task_id": history.task_id,
        "first_thought": history.first_thought,
        "steps": [step_to_dict(step) for step in history.steps],
    }


@_decoding("history view")
def history_from_dict(data: Mapping[str, Any]) -> HistoryView:
    return HistoryView(
        task_id=data["task_id"],
        first_thought=data["first_thought"],
        steps=tuple(step_from_dict(item) for item in data["steps"]),
    )


def event_to_dict(event: CorrectionEvent) -> dict[str, Any]:
    return {
        "step_index": event.step_index,
        "analysis": event.analysis,
        "original": proposal_to_dict(event.original),
        "corrected": proposal_to_dict(event.corrected),
        "prefix": [step_to_dict(step) for step in event.prefix],
    }


@_decoding("correction event")
def event_from_dict(data: Mapping[str, Any]) -> CorrectionEvent:
    return CorrectionEvent(
        step_index=data["step_index"],
        original=proposal_from_dict(data["original"]),
        corrected=proposal_from_dict(data["corrected"]),
        analysis=data["analysis"],
        prefix=tuple(step_from_dict(item) for item in data["prefix"]),
    )


def pair_to_dict(pair: PreferencePair) -> dict[str, Any]:
    # Serialized field names follow the chosen/rejected convention.
    return {
        "task_id": pair.task_id,
        "prefix": [step_to_dict(step) for step in pair.prefix],
        "chosen": proposal_to_dict(pair.preferred),
        "rejected": proposal_to_dict(pair.rejected),
    }


@_decoding("preference pair")
def pair_from_dict(data: Mapping[str, Any]) -> PreferencePair:
    return PreferencePair(
        task_id=data["task_id"],
        prefix=tuple(step_from_dict(item) for item in data["prefix"]),
        preferred=proposal_from_dict(data["chosen"]),
        rejected=proposal_from_dict(data["rejected"]),
    )


# ---------------------------------------------------------------------------
# Top-level records (schema field included).

def outcome_to_record(outcome: MpsOutcome) -> dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "task_id": outcome.task_id,
        "gold_answer": outcome.gold_answer,
        "status": outcome.status.value,
        "trajectory": trajectory_to_dict(outcome.trajectory),
        "events": [event_to_dict(event) for event in outcome.events],
        "pairs": [pair_to_dict(pair) for pair in outcome.pairs],
    }


@_decoding("outcome record")
def _outcome_from_record_body(record: Mapping[str, Any]) -> MpsOutcome:
    return MpsOutcome(
        task_id=record["task_id"],
        gold_answer=record["gold_answer"],
        status=MpsStatus(record["status"]),
        trajectory=trajectory_from_dict(record["trajectory"]),
        events=tuple(event_from_dict(item) for item in record["events"]),
        pairs=tuple(pair_from_dict(item) for item in record["pairs"]),
    )


def outcome_from_record(record: Mapping[str, Any]) -> MpsOutcome:
    _check_schema(record)
    return _outcome_from_record_body(record)


def preference_to_record(pair: PreferencePair) -> dict[str, Any]:
    record = pair_to_dict(pair)
    record["schema"] = SCHEMA_VERSION
    return record


def preference_from_record(record: Mapping[str, Any]) -> PreferencePair:
    _check_schema(record)
    return pair_from_dict(record)


def seed_to_record(seed: RolloutSeed) -> dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "task_id": seed.task_id,
        "gold_answer": seed.gold_answer,
        "step_index": seed.step_index,
        "remaining_horizon": seed.remaining_horizon,
        "prefix": history_to_dict(seed.prefix),
        "original": proposal_to_dict(seed.original),
        "corrected": proposal_to_dict(seed.corrected),
    }


@_decoding("rollout seed record")
def _seed_from_record_body(record: Mapping[str, Any]) -> RolloutSeed:
    return RolloutSeed(
        task_id=record["task_id"],
        prefix=history_from_dict(record["prefix"]),
        step_index=record["step_index"],
        original=proposal_from_dict(record["original"]),
        corrected=proposal_from_dict(record["corrected"]),
        remaining_horizon=record["remaining_horizon"],
        gold_answer=record["gold_answer"],
    )


def seed_from_record(record: Mapping[str, Any]) -> RolloutSeed:
    _check_schema(record)
    return _seed_from_record_body(record)


# ---------------------------------------------------------------------------
# SFT records with loss masks.

class SegmentKind(Enum):
    FIRST_THOUGHT = "first_thought"
    THOUGHT = "thought"
    ACTION = "action"
    OBSERVATION = "observation"
    FINAL_ANSWER = "final_answer"


# Learn what the policy wrote; never learn what the environment echoed.
LOSS_BY_KIND: dict[SegmentKind, bool] = {
    SegmentKind.FIRST_THOUGHT: True,
    SegmentKind.THOUGHT: True,
    SegmentKind.ACTION: True,
    SegmentKind.OBSERVATION: False,
    SegmentKind.FINAL_ANSWER: False,
}


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    text: str
    loss: bool

    def __post_init__(self) -> None:
        if not isinstance(self.kind, SegmentKind):
            raise TypeError("kind must be a SegmentKind")
        if self.loss is not LOSS_BY_KIND[self.kind]:
            raise ValueError(
                f"{self.kind.value} segments must have loss={LOSS_BY_KIND[self.kind]}"
            )


def segment(kind: SegmentKind, text: str) -> Segment:
    """Build a segment with the loss flag its kind mandates."""
    return Segment(kind=kind, text=text, loss=LOSS_BY_KIND[kind])


@dataclass(frozen=True)
class SftRecord:
    task_id: str
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if not self.task_id.strip():
            raise ValueError("task_id must be non-empty")
        if not isinstance(self.segments, tuple):
            object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("an SFT record needs at least one segment")


def sft_record_from_trajectory(traj: Trajectory) -> SftRecord:
    """Flatten one finished run into an ordered segment stream."""
    if not traj.terminal or traj.final_answer is None:
        raise SerializationFailure(
            f"trajectory {traj.task_id!r} never terminated; nothing to emit"
        )
    segments: list[Segment] = []
    if traj.first_thought is not None:
        segments.append(segment(SegmentKind.FIRST_THOUGHT, traj.first_thought))
    for step in traj.steps:
        segments.append(segment(SegmentKind.THOUGHT, step.thought))
        segments.append(segment(SegmentKind.ACTION, step.action))
        segments.append(segment(SegmentKind.OBSERVATION, step.observation or ""))
    segments.append(segment(SegmentKind.FINAL_ANSWER, traj.final_answer))
    return SftRecord(task_id=traj.task_id, segments=tuple(segments))


def sft_to_record(record: SftRecord) -> dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "task_id": record.task_id,
        "segments": [
            {"kind": item.kind.value, "loss": item.loss, "text": item.text}
            for item in record.segments
        ],
    }


@_decoding("sft record")
def _sft_from_record_body(record: Mapping[str, Any]) -> SftRecord:
    return SftRecord(
        task_id=record["task_id"],
        segments=tuple(
            Segment(
                kind=SegmentKind(item["kind"]),
                text=item["text"],
                loss=item["loss"],
            )
            for item in record["segments"]
        ),
    )


def sft_from_record(record: Mapping[str, Any]) -> SftRecord:
    _check_schema(record)
    return _sft_from_record_body(record)


# ---------------------------------------------------------------------------
# Emission streams.

def emit_sft(trajs: Iterable[Trajectory]) -> Iterator[SftRecord]:
    for traj in trajs:
        yield sft_record_from_trajectory(traj)


def emit_preference(pairs: Iterable[PreferencePair]) -> Iterator[dict[str, Any]]:
    for pair in pairs:
        yield preference_to_record(pair)


def emit_seeds(seeds: Iterable[RolloutSeed]) -> Iterator[dict[str, Any]]:
    for seed in seeds:
        yield seed_to_record(seed)


# ---------------------------------------------------------------------------
# Corpus splitting.

@dataclass(frozen=True)
class SplitPlan:
    """Fractions for the corpus split; floor rounding at each cut."""

    seed: int
    bc_init_fraction: float = 0.20
    sft_fraction_of_mps: float = 0.5

    def __post_init__(self) -> None:
        for name in ("bc_init_fraction", "sft_fraction_of_mps"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class CorpusSplit:
    bc_init: tuple[str, ...]
    mps: tuple[str, ...]
    sft_half: tuple[str, ...]
    rl_half: tuple[str, ...]


def split_corpus(task_ids: Iterable[str], plan: SplitPlan) -> CorpusSplit:
    """Partition tasks: a slice for cold-start data, the rest for the
    correction loop, which is then halved into SFT and RL pools.

    The partition depends only on the id set and the seed: ids are
    sorted before the seeded shuffle, so input order is irrelevant.
    """
    ids = list(task_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("task ids must be unique")
    ordered = sorted(ids)
    random.Random(plan.seed).shuffle(ordered)
    bc_cut = math.floor(len(ordered) * plan.bc_init_fraction)
    bc_init = tuple(ordered[:bc_cut])
    mps = tuple(ordered[bc_cut:])
    sft_cut = math.floor(len(mps) * plan.sft_fraction_of_mps)
    return CorpusSplit(
        bc_init=bc_init,
        mps=mps,
        sft_half=mps[:sft_cut],
        rl_half=mps[sft_cut:],
    )
