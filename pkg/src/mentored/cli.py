"""Command-line interface.

Three command families:

  mps run        drive the correction loop over a task file and write
                 outcome, preference, and rollout-seed records
  emit …         re-derive training records from saved outcome records
  sim …          run the finite-horizon simulator studies and print CSV

Exit codes: 0 on success, 1 for runtime failures inside the pipeline
(backends down, malformed records), 2 for configuration and usage
errors (bad flags, missing files, out-of-range parameters).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .agents import (
    Environment,
    Judge,
    Policy,
    ScriptedJudge,
    ScriptedPolicy,
    ScriptedTeacher,
    StepKey,
    TableEnvironment,
    Teacher,
)
from .datasets_io import (
    SplitPlan,
    canonical_json,
    emit_preference,
    emit_seeds,
    emit_sft,
    outcome_from_record,
    outcome_to_record,
    preference_to_record,
    read_jsonl,
    seed_to_record,
    sft_to_record,
    split_corpus,
    write_jsonl,
)
from .errors import ConfigError, PipelineError, SerializationFailure
from .mps_engine import MpsConfig, MpsOutcome, MpsStatus, partition_outcomes, run_mps
from .rewards import RewardConfig, make_rollout_seed
from .service_client import (
    BackendEndpoint,
    RemoteExecutor,
    RemoteJudge,
    RemotePolicy,
    RemoteTeacher,
)
from .theory_sim import bounds_csv, bounds_grid, variance_csv, variance_study
from .traj_model import HistoryView, PolicyRole, Step, StepProposal, TaskSpec


@dataclass(frozen=True)
class Backends:
    """The four actors a run needs, plus a per-task environment factory."""

    student: Policy
    teacher: Teacher
    judge: Judge
    make_env: Callable[[str], Environment]


@dataclass(frozen=True)
class RunSettings:
    seed: int
    tasks_path: Path
    out_dir: Path
    backends: Backends
    mps: MpsConfig
    rewards: RewardConfig
    hard_fraction: float
    split: SplitPlan | None


def _load_json_object(path: Path, what: str) -> dict[str, Any]:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be a JSON object: {path}")
    return data


def _require_schema(data: Mapping[str, Any], what: str) -> None:
    if data.get("schema") != 1:
        raise ConfigError(f"{what} must declare \"schema\": 1")


def _reject_unknown(data: Mapping[str, Any], allowed: set[str], what: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")


def _history_digest(
    task_id: str, triples: Sequence[Sequence[str]] | None, what: str
) -> str | None:
    """Digest of a literal history so fixtures can pin exact-context entries."""
    if triples is None:
        return None
    steps = []
    for position, triple in enumerate(triples, start=1):
        if not isinstance(triple, (list, tuple)) or len(triple) != 3:
            raise ConfigError(
                f"{what}: history entries must be [thought, action, observation]"
            )
        thought, action, observation = triple
        try:
            steps.append(
                Step(
                    index=position,
                    thought=thought,
                    action=action,
                    observation=observation,
                )
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{what}: bad history entry {position}: {exc}") from exc
    return HistoryView(task_id=task_id, steps=tuple(steps)).content_key()


def _step_table(
    items: Sequence[Mapping[str, Any]], what: str, context_field: str
) -> dict[StepKey, StepProposal]:
    table: dict[StepKey, StepProposal] = {}
    for item in items:
        try:
            digest = _history_digest(
                item["task_id"], item.get(context_field), what
            )
            key: StepKey = (item["task_id"], item["index"], digest)
            proposal = StepProposal(
                thought=item["thought"], action=item["action"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{what}: bad entry {item!r}: {exc}") from exc
        if key in table:
            raise ConfigError(f"{what}: duplicate entry for {key!r}")
        table[key] = proposal
    return table


def load_fixture(path: Path) -> Backends:
    """Build scripted actors from a fixture file."""
    data = _load_json_object(path, "fixture")
    _require_schema(data, "fixture")
    _reject_unknown(
        data, {"schema", "student", "teacher", "judge", "environment"}, "fixture"
    )

    def section(name: str, allowed: set[str]) -> dict[str, Any]:
        block = data.get(name, {})
        if not isinstance(block, dict):
            raise ConfigError(f"fixture section {name!r} must be an object")
        _reject_unknown(block, allowed, f"fixture {name}")
        return block

    student_block = section("student", {"first_thoughts", "steps"})
    teacher_block = section("teacher", {"first_thoughts", "steps", "corrections"})
    judge_block = section("judge", {"references"})
    env_block = section("environment", {"entries"})

    student = ScriptedPolicy(
        PolicyRole.STUDENT,
        first_thoughts=student_block.get("first_thoughts", {}),
        steps=_step_table(
            student_block.get("steps", []), "fixture student.steps", "history"
        ),
    )
    teacher = ScriptedTeacher(
        first_thoughts=teacher_block.get("first_thoughts", {}),
        steps=_step_table(
            teacher_block.get("steps", []), "fixture teacher.steps", "history"
        ),
        corrections=_step_table(
            teacher_block.get("corrections", []),
            "fixture teacher.corrections",
            "prefix",
        ),
    )
    references = judge_block.get("references", {})
    if not isinstance(references, dict):
        raise ConfigError("fixture judge.references must be an object")
    judge = ScriptedJudge(references=references)

    entries: dict[str, str] = {}
    for entry in env_block.get("entries", []):
        try:
            action, observation = entry["action"], entry["observation"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"fixture environment entry {entry!r}: {exc}") from exc
        if action in entries:
            raise ConfigError(f"fixture environment: duplicate action {action!r}")
        entries[action] = observation
    env = TableEnvironment(entries)
    return Backends(
        student=student, teacher=teacher, judge=judge, make_env=lambda _: env
    )


def _remote_backends(block: Mapping[str, Any]) -> Backends:
    _reject_unknown(
        dict(block),
        {"kind", "base_url", "timeout", "max_retries", "auth_env", "rate_limit_per_s"},
        "backend",
    )
    try:
        endpoint = BackendEndpoint(
            base_url=block["base_url"],
            timeout=block.get("timeout", 30.0),
            max_retries=block.get("max_retries", 2),
            auth_env=block.get("auth_env"),
            rate_limit_per_s=block.get("rate_limit_per_s"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad remote backend: {exc}") from exc
    return Backends(
        student=RemotePolicy(endpoint, PolicyRole.STUDENT),
        teacher=RemoteTeacher(endpoint),
        judge=RemoteJudge(endpoint),
        make_env=lambda task_id: RemoteExecutor(endpoint, session_id=task_id),
    )


def _load_backends(spec: Any, base_dir: Path) -> Backends:
    if isinstance(spec, str):
        if not spec.startswith("scripted:"):
            raise ConfigError(
                "string backend must look like \"scripted:<fixture path>\""
            )
        return load_fixture(base_dir / spec[len("scripted:"):])
    if isinstance(spec, dict):
        if spec.get("kind", "remote") != "remote":
            raise ConfigError(f"unknown backend kind: {spec.get('kind')!r}")
        return _remote_backends(spec)
    raise ConfigError("backend must be a string or an object")


def _build(ctor: Callable[..., Any], block: Mapping[str, Any], what: str) -> Any:
    try:
        return ctor(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} settings: {exc}") from exc


def load_run_settings(
    config_path: Path,
    seed_override: int | None = None,
    out_override: str | None = None,
) -> RunSettings:
    data = _load_json_object(config_path, "config")
    _require_schema(data, "config")
    _reject_unknown(
        data,
        {
            "schema",
            "seed",
            "tasks",
            "out_dir",
            "backend",
            "mps",
            "rewards",
            "hard_fraction",
            "split",
        },
        "config",
    )
    for key in ("seed", "tasks", "out_dir", "backend"):
        if key not in data:
            raise ConfigError(f"config is missing {key!r}")
    base_dir = config_path.parent
    seed = seed_override if seed_override is not None else data["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")

    tasks_path = base_dir / data["tasks"]
    if not tasks_path.is_file():
        raise ConfigError(f"tasks file not found: {tasks_path}")

    hard_fraction = data.get("hard_fraction", 0.5)
    if not isinstance(hard_fraction, (int, float)) or isinstance(hard_fraction, bool):
        raise ConfigError("hard_fraction must be a number")
    if not 0.0 <= float(hard_fraction) <= 1.0:
        raise ConfigError("hard_fraction must lie in [0, 1]")

    split_plan: SplitPlan | None = None
    if "split" in data:
        split_block = dict(data["split"])
        _reject_unknown(
            split_block, {"bc_init_fraction", "sft_fraction_of_mps"}, "split"
        )
        split_plan = _build(
            lambda **kw: SplitPlan(seed=seed, **kw), split_block, "split"
        )

    return RunSettings(
        seed=seed,
        tasks_path=tasks_path,
        out_dir=Path(out_override) if out_override else base_dir / data["out_dir"],
        backends=_load_backends(data["backend"], base_dir),
        mps=_build(MpsConfig, data.get("mps", {}), "mps"),
        rewards=_build(RewardConfig, data.get("rewards", {}), "rewards"),
        hard_fraction=float(hard_fraction),
        split=split_plan,
    )


def load_tasks(path: Path) -> list[TaskSpec]:
    try:
        rows = read_jsonl(path)
    except SerializationFailure as exc:
        raise ConfigError(str(exc)) from exc
    tasks: list[TaskSpec] = []
    seen: set[str] = set()
    for row in rows:
        try:
            spec = TaskSpec(
                task_id=row["task_id"],
                question=row["question"],
                gold_answer=row["gold_answer"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad task record {row!r}: {exc}") from exc
        if spec.task_id in seen:
            raise ConfigError(f"duplicate task id {spec.task_id!r}")
        seen.add(spec.task_id)
        tasks.append(spec)
    if not tasks:
        raise ConfigError(f"tasks file is empty: {path}")
    return tasks


def _solve_all(
    tasks: Sequence[TaskSpec], settings: RunSettings, jobs: int
) -> list[MpsOutcome]:
    def solve(task: TaskSpec) -> MpsOutcome:
        return run_mps(
            task,
            settings.backends.student,
            settings.backends.teacher,
            settings.backends.judge,
            settings.backends.make_env(task.task_id),
            settings.mps,
        )

    # Results always land in task order, so parallelism never changes output.
    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(solve, tasks))
    return [solve(task) for task in tasks]


def _cmd_mps_run(args: argparse.Namespace) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    settings = load_run_settings(Path(args.config), args.seed, args.out)
    tasks = load_tasks(settings.tasks_path)
    outcomes = _solve_all(tasks, settings, args.jobs)

    out_dir = settings.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    n_outcomes = write_jsonl(
        out_dir / "run.traj.jsonl", (outcome_to_record(o) for o in outcomes)
    )
    pairs = [pair for outcome in outcomes for pair in outcome.pairs]
    n_pairs = write_jsonl(
        out_dir / "run.pref.jsonl", (preference_to_record(p) for p in pairs)
    )
    seeds = [
        make_rollout_seed(outcome, event)
        for outcome in outcomes
        if outcome.pairs
        for event in outcome.events
    ]
    n_seeds = write_jsonl(
        out_dir / "run.seed.jsonl", (seed_to_record(s) for s in seeds)
    )

    pools = partition_outcomes(outcomes, settings.seed, settings.hard_fraction)
    summary: dict[str, Any] = {
        "schema": 1,
        "seed": settings.seed,
        "tasks": len(tasks),
        "status_counts": {
            status.value: sum(1 for o in outcomes if o.status is status)
            for status in MpsStatus
        },
        "events": sum(len(o.events) for o in outcomes),
        "pairs": n_pairs,
        "seeds": n_seeds,
        "pools": {
            "sft": [o.task_id for o in pools.sft_pool],
            "rl": [o.task_id for o in pools.rl_pool],
            "hard": [o.task_id for o in pools.hard_pool],
        },
    }
    if settings.split is not None:
        split = split_corpus([task.task_id for task in tasks], settings.split)
        summary["corpus_split"] = {
            "bc_init": list(split.bc_init),
            "mps": list(split.mps),
            "sft_half": list(split.sft_half),
            "rl_half": list(split.rl_half),
        }
    (out_dir / "summary.json").write_text(
        canonical_json(summary) + "\n", encoding="utf-8"
    )
    print(
        f"{n_outcomes} outcomes, {n_pairs} preference pairs, "
        f"{n_seeds} rollout seeds -> {out_dir}"
    )
    return 0


def _read_outcomes(path: Path) -> list[MpsOutcome]:
    if not path.is_file():
        raise ConfigError(f"input not found: {path}")
    return [outcome_from_record(record) for record in read_jsonl(path)]


def _cmd_emit(args: argparse.Namespace) -> int:
    outcomes = _read_outcomes(Path(args.in_path))
    out_path = Path(args.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if args.emit_command == "sft":
        solved = (
            o.trajectory for o in outcomes if o.status is not MpsStatus.HARD_TO_TEACH
        )
        count = write_jsonl(
            out_path, (sft_to_record(r) for r in emit_sft(solved))
        )
    elif args.emit_command == "pref":
        count = write_jsonl(
            out_path, emit_preference(p for o in outcomes for p in o.pairs)
        )
    else:
        seeds = (
            make_rollout_seed(outcome, event)
            for outcome in outcomes
            if outcome.pairs
            for event in outcome.events
        )
        count = write_jsonl(out_path, emit_seeds(seeds))
    print(f"{count} records -> {out_path}")
    return 0


def _parse_int_list(text: str, flag: str) -> list[int]:
    parts = [part.strip() for part in text.split(",") if part.strip()]
    if not parts:
        raise ConfigError(f"{flag} must list at least one value")
    try:
        return [int(part) for part in parts]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated integers: {text!r}") from exc


def _parse_float_list(text: str, flag: str) -> list[float]:
    parts = [part.strip() for part in text.split(",") if part.strip()]
    if not parts:
        raise ConfigError(f"{flag} must list at least one value")
    try:
        return [float(part) for part in parts]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated numbers: {text!r}") from exc


def _emit_csv(lines: list[str], out: str | None) -> None:
    text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text, encoding="utf-8")


def _cmd_sim_bounds(args: argparse.Namespace) -> int:
    horizons = _parse_int_list(args.horizons, "--H")
    epsilons = _parse_float_list(args.epsilons, "--eps")
    if any(h < 1 for h in horizons):
        raise ConfigError("--H values must be >= 1")
    if any(not 0.0 <= e <= 1.0 for e in epsilons):
        raise ConfigError("--eps values must lie in [0, 1]")
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    rows = bounds_grid(horizons, epsilons, args.episodes, args.seed, jobs=args.jobs)
    _emit_csv(bounds_csv(rows), args.out)
    return 0


def _cmd_sim_variance(args: argparse.Namespace) -> int:
    if args.horizon < 1:
        raise ConfigError("--H must be >= 1")
    if not 0.0 < args.gamma < 1.0:
        raise ConfigError("--gamma must lie strictly inside (0, 1)")
    if args.samples < 2:
        raise ConfigError("--samples must be >= 2")
    if args.ks.strip() == "all":
        ks = list(range(1, args.horizon + 1))
    else:
        ks = _parse_int_list(args.ks, "--k")
        if any(not 1 <= k <= args.horizon for k in ks):
            raise ConfigError("--k values must lie in 1..H")
    rows = variance_study(args.horizon, args.gamma, ks, args.samples, args.seed)
    _emit_csv(variance_csv(rows), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mentored",
        description="Correction-loop data pipeline and horizon-cost simulator.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    mps = commands.add_parser("mps", help="correction-loop pipeline")
    mps_sub = mps.add_subparsers(dest="mps_command", required=True)
    run = mps_sub.add_parser("run", help="solve a task file and write records")
    run.add_argument("--config", required=True, help="run config JSON")
    run.add_argument("--jobs", type=int, default=1, help="parallel task workers")
    run.add_argument("--seed", type=int, default=None, help="override config seed")
    run.add_argument("--out", default=None, help="override config out_dir")
    run.set_defaults(handler=_cmd_mps_run)

    emit = commands.add_parser("emit", help="derive training records")
    emit_sub = emit.add_subparsers(dest="emit_command", required=True)
    for name, text in (
        ("sft", "masked supervised records from solved outcomes"),
        ("pref", "preference pairs from correction events"),
        ("seeds", "rollout seeds for key-step reward training"),
    ):
        sub = emit_sub.add_parser(name, help=text)
        sub.add_argument("--in", dest="in_path", required=True, help="*.traj.jsonl")
        sub.add_argument("--out", dest="out_path", required=True)
        sub.set_defaults(handler=_cmd_emit)

    sim = commands.add_parser("sim", help="simulator studies")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)

    bounds = sim_sub.add_parser("bounds", help="imitation cost vs horizon")
    bounds.add_argument("--H", dest="horizons", default="2,4,8,16,32")
    bounds.add_argument("--eps", dest="epsilons", default="0.005,0.02")
    bounds.add_argument("--episodes", type=int, default=100000)
    bounds.add_argument("--seed", type=int, default=0)
    bounds.add_argument("--jobs", type=int, default=1)
    bounds.add_argument("--out", default=None, help="CSV path (default: stdout)")
    bounds.set_defaults(handler=_cmd_sim_bounds)

    variance = sim_sub.add_parser(
        "variance", help="gradient variance vs resume point"
    )
    variance.add_argument("--H", dest="horizon", type=int, default=8)
    variance.add_argument("--gamma", type=float, default=0.9)
    variance.add_argument("--k", dest="ks", default="all")
    variance.add_argument("--samples", type=int, default=100000)
    variance.add_argument("--seed", type=int, default=0)
    variance.add_argument("--out", default=None, help="CSV path (default: stdout)")
    variance.set_defaults(handler=_cmd_sim_variance)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
