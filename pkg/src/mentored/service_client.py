"""Prompt tooling and the HTTP wire protocol for remote backends.

The two prompt templates drive the judge (find the earliest wrong step,
answer with a JSON verdict) and the teacher (write the one corrected
step). Rendering is single-pass: only declared placeholders are
substituted, any other braces in the body or the bindings pass through
literally.

Parsing goes the other way: parse_verdict pulls the LAST JSON object
out of free-form judge text, and parse_step recovers a thought/code
proposal from the Thought:/Code: layout that format_step emits.

Remote* classes implement the actor contracts over HTTP+JSON against a
configurable endpoint with retries, bearer-token auth from an
environment variable, and an optional request rate limit.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterator, Sequence

import requests

from .agents import Environment, Judge, Policy, Teacher, Verdict
from .datasets_io import step_to_dict, trajectory_to_dict
from .errors import (
    BackendUnavailable,
    ExecutorUnavailable,
    MalformedOutput,
    MissingBinding,
    PipelineError,
    Timeout,
)
from .traj_model import (
    HistoryView,
    PolicyRole,
    Step,
    StepProposal,
    Task,
    Trajectory,
    normalize_text,
    proposal_of,
)

logger = logging.getLogger(__name__)

POLICY_PATH = "policy"
JUDGE_PATH = "judge"
EXECUTOR_PATH = "execute"


class TemplateName(Enum):
    FIND_WRONG_STEP = "find_wrong_step"
    CORRECT = "correct"


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt body plus the set of placeholders render may substitute."""

    name: TemplateName
    body: str
    placeholders: frozenset[str]

    def __post_init__(self) -> None:
        if not isinstance(self.placeholders, frozenset):
            object.__setattr__(self, "placeholders", frozenset(self.placeholders))
        if not self.body:
            raise ValueError("template body must be non-empty")


_FIND_WRONG_STEP_BODY = r"""You are reviewing a student's step-by-step solution to find where it first goes wrong.

The student solves problems in cycles. Each cycle has a Thought (the student's reasoning), Code (a Python snippet the student ran), and an Observation (what the code printed). The student may also write a plan before the first cycle. The run ends when the student submits an answer with the final_answer_print tool. You are given the question, the correct answer, and the full transcript; the submitted answer is wrong or some step of the run is flawed.

Instructions:
1. Work through the transcript cycle by cycle and check each Thought and each piece of Code against the question.
2. Identify the EARLIEST cycle that is incorrect. Treat every later problem as a consequence of that one.
3. Briefly explain what is wrong in that cycle.
4. Suggest how to fix that one cycle only. Do not write out the rest of the solution.
5. Conclude your response with a single JSON object carrying exactly these keys: "is_correct", "error_analysis", "correction_start_step", "correction_suggestion". When the solution is fully correct, set "is_correct" to true and the other three to null.

Here is a worked example.

Question: What is 10 / 3, rounded to the nearest integer?
Correct Answer: 3
Thought and Code Cycles:
Plan: First compute the division, then round the result to the nearest integer.
Step 1:
Thought: I need to divide 10 by 3.
Code:
```python
result = 10 / 3
print(result)
```
Observation: 3.3333333333333335
Step 2:
Thought: Now I round the result to the nearest integer.
Code:
```python
import math
rounded = math.ceil(result)
print(rounded)
```
Observation: 4
Step 3:
Thought: I have the rounded value, so I can submit it.
Code:
```python
final_answer_print(rounded)
```
Observation: 4

Example response:
The division in step 1 matches the question. The calculation in step 1 was correct, but the rounding in step 2 was incorrect: math.ceil always rounds up, while 10 / 3 = 3.33... is closer to 3 and must round down. Step 3 only submits the value produced earlier, so the earliest wrong cycle is step 2.
{
    "is_correct": false,
    "error_analysis": "The calculation in step 1 was correct, but the rounding in step 2 was incorrect. math.ceil always rounds up, while 3.33 rounded to the nearest integer is 3.",
    "correction_start_step": 2,
    "correction_suggestion": "Use round(result) instead of math.ceil(result) to round to the nearest integer."
}

Now review the following solution.

Question: {original_query}
Correct Answer: {gold_answer}
Thought and Code Cycles:
{thought_code_cycle}

YOUR RESPONSE:
"""

_CORRECT_BODY = r"""You are an expert tutor. A student's step-by-step solution went wrong, and you will now supply the single corrected step the student should take instead.

The student solves problems in cycles of Thought (reasoning), Code (a Python snippet), and Observation (what the code printed). Below are the question, the verified context so far, the step where the solution went wrong, and an analysis of the failure.

Question: {original_query}

Previous Context: {previous_context}

Error Step: {error_step}

Failed Experience: {failed_experience}

Based on the above failure analysis, generate the next thought and code that correct the mistake. Provide only one step of thought and code, not the complete solution.

IMPORTANT:
1. Format your response as a "Thought:" line followed by a "Code:" block fenced with ```python and ```.
2. When the final answer is ready, submit it with the final_answer_print tool in the exact required format, for example final_answer_print("\boxed{42}").
3. Keep the code simple and short; do only what this one step needs.
4. Write the step as a natural continuation of the solution. Do not apologize or remark that a mistake is being fixed.

YOUR RESPONSE:
"""

FIND_WRONG_STEP = PromptTemplate(
    name=TemplateName.FIND_WRONG_STEP,
    body=_FIND_WRONG_STEP_BODY,
    placeholders=frozenset(
        {"original_query", "gold_answer", "thought_code_cycle"}
    ),
)

CORRECT = PromptTemplate(
    name=TemplateName.CORRECT,
    body=_CORRECT_BODY,
    placeholders=frozenset(
        {"original_query", "previous_context", "error_step", "failed_experience"}
    ),
)

TEMPLATES: dict[TemplateName, PromptTemplate] = {
    TemplateName.FIND_WRONG_STEP: FIND_WRONG_STEP,
    TemplateName.CORRECT: CORRECT,
}


def render(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Substitute declared placeholders in a single pass.

    Braces that do not spell a declared placeholder stay literal, and
    binding values are inserted verbatim (never re-expanded). Declared
    placeholders present in the body must all be bound.
    """
    if not template.placeholders:
        return template.body
    names = "|".join(re.escape(name) for name in sorted(template.placeholders))
    pattern = re.compile(r"\{(" + names + r")\}")
    used = {match.group(1) for match in pattern.finditer(template.body)}
    missing = sorted(used - set(bindings))
    if missing:
        raise MissingBinding(
            f"unbound placeholders in {template.name.value}: {', '.join(missing)}"
        )
    return pattern.sub(lambda match: str(bindings[match.group(1)]), template.body)


def format_step(proposal: StepProposal) -> str:
    """Canonical Thought:/Code: layout for one proposed step."""
    return f"Thought: {proposal.thought}\nCode:\n```python\n{proposal.action}\n```"


def format_cycles(steps: Sequence[Step], first_thought: str | None = None) -> str:
    """Render executed steps the way the review prompt expects them."""
    parts: list[str] = []
    if first_thought is not None:
        parts.append(f"Plan: {first_thought}")
    for step in steps:
        parts.append(f"Step {step.index}:")
        parts.append(format_step(proposal_of(step)))
        parts.append(f"Observation: {step.observation}")
    return "\n".join(parts)


_STEP_PATTERN = re.compile(
    r"Thought:[ \t]*(?P<thought>.*?)\s*Code:\s*```(?:python)?[ \t]*\n(?P<code>.*?)```",
    re.DOTALL,
)


def parse_step(raw_text: str) -> StepProposal:
    """Recover a proposal from Thought:/Code: formatted text.

    The last complete Thought/Code block wins, so instructions echoed
    earlier in a response do not shadow the actual answer.
    """
    matches = list(_STEP_PATTERN.finditer(raw_text))
    if not matches:
        raise MalformedOutput("no Thought:/Code: block found")
    match = matches[-1]
    code = match.group("code")
    if code.endswith("\n"):
        code = code[:-1]
    try:
        return StepProposal(thought=match.group("thought"), action=code)
    except ValueError as exc:
        raise MalformedOutput(f"unusable step content: {exc}") from exc


def _iter_json_objects(text: str) -> Iterator[dict[str, Any]]:
    decoder = json.JSONDecoder()
    position = 0
    while True:
        start = text.find("{", position)
        if start == -1:
            return
        try:
            obj, end = decoder.raw_decode(text, start)
        except ValueError:
            position = start + 1
            continue
        if isinstance(obj, dict):
            yield obj
        position = end


def parse_verdict(raw_text: str) -> Verdict:
    """Extract the concluding JSON verdict from free-form judge text.

    The LAST object containing an "is_correct" key wins; judges often
    restate the worked example before answering.
    """
    candidates = [
        obj for obj in _iter_json_objects(raw_text) if "is_correct" in obj
    ]
    if not candidates:
        raise MalformedOutput("no JSON verdict object in response")
    data = candidates[-1]
    flag = data["is_correct"]
    if not isinstance(flag, bool):
        raise MalformedOutput("is_correct must be a boolean")
    if flag:
        return Verdict(is_correct=True)
    start = data.get("correction_start_step")
    if isinstance(start, bool) or not isinstance(start, int):
        raise MalformedOutput("correction_start_step must be an integer")
    analysis = data.get("error_analysis")
    if analysis is not None and not isinstance(analysis, str):
        raise MalformedOutput("error_analysis must be a string or null")
    suggestion = data.get("correction_suggestion")
    if suggestion is not None and not isinstance(suggestion, str):
        raise MalformedOutput("correction_suggestion must be a string or null")
    try:
        return Verdict(
            is_correct=False,
            error_analysis=analysis,
            correction_start_step=start,
            correction_suggestion=suggestion,
        )
    except ValueError as exc:
        raise MalformedOutput(f"inconsistent verdict: {exc}") from exc


# ---------------------------------------------------------------------------
# HTTP plumbing.

@dataclass(frozen=True)
class BackendEndpoint:
    """Where a remote service lives and how patiently to talk to it.

    auth_env names an environment variable holding a bearer token; the
    variable is read per request so rotation needs no restart.
    """

    base_url: str
    timeout: float = 30.0
    max_retries: int = 2
    auth_env: str | None = None
    rate_limit_per_s: float | None = None

    def __post_init__(self) -> None:
        if not self.base_url.strip():
            raise ValueError("base_url must be non-empty")
        if self.timeout <= 0.0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.rate_limit_per_s is not None and self.rate_limit_per_s <= 0.0:
            raise ValueError("rate_limit_per_s must be > 0 when set")


class _Throttle:
    """Simple shared-interval rate limiter; no-op when rate is None."""

    def __init__(self, rate_per_s: float | None) -> None:
        self._interval = 1.0 / rate_per_s if rate_per_s else 0.0
        self._lock = threading.Lock()
        self._next_slot = 0.0

    def wait(self) -> None:
        if not self._interval:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + self._interval
        if delay > 0.0:
            time.sleep(delay)


def _request(
    endpoint: BackendEndpoint,
    path: str,
    payload: dict[str, Any],
    throttle: _Throttle | None = None,
) -> requests.Response:
    url = endpoint.base_url.rstrip("/") + "/" + path.lstrip("/")
    headers = {}
    if endpoint.auth_env:
        token = os.environ.get(endpoint.auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
    attempts = endpoint.max_retries + 1
    timeouts = 0
    last_error: Exception | str | None = None
    for _ in range(attempts):
        if throttle is not None:
            throttle.wait()
        try:
            response = requests.post(
                url, json=payload, timeout=endpoint.timeout, headers=headers
            )
        except requests.Timeout as exc:
            timeouts += 1
            last_error = exc
            continue
        except requests.ConnectionError as exc:
            last_error = exc
            continue
        except requests.RequestException as exc:
            # Protocol-level failure; retrying identical input is pointless.
            raise BackendUnavailable(f"{url}: {exc}") from exc
        if 500 <= response.status_code < 600:
            last_error = f"HTTP {response.status_code}"
            continue
        if response.status_code >= 400:
            raise BackendUnavailable(f"{url} answered HTTP {response.status_code}")
        return response
    if timeouts == attempts:
        raise Timeout(f"{url} timed out on all {attempts} attempts")
    raise BackendUnavailable(
        f"{url} unavailable after {attempts} attempts (last: {last_error})"
    )


def _post_json(
    endpoint: BackendEndpoint,
    path: str,
    payload: dict[str, Any],
    throttle: _Throttle | None = None,
) -> dict[str, Any]:
    response = _request(endpoint, path, payload, throttle)
    try:
        data = response.json()
    except ValueError as exc:
        raise MalformedOutput(f"{path}: response is not JSON") from exc
    if not isinstance(data, dict):
        raise MalformedOutput(f"{path}: response is not a JSON object")
    return data


def _post_text(
    endpoint: BackendEndpoint,
    path: str,
    payload: dict[str, Any],
    throttle: _Throttle | None = None,
) -> str:
    return _request(endpoint, path, payload, throttle).text


def _proposal_from_response(data: dict[str, Any]) -> StepProposal:
    thought = data.get("thought")
    action = data.get("action")
    if not isinstance(thought, str) or not isinstance(action, str):
        raise MalformedOutput("response must carry string 'thought' and 'action'")
    try:
        return StepProposal(thought=thought, action=action)
    except ValueError as exc:
        raise MalformedOutput(f"unusable step content: {exc}") from exc


# ---------------------------------------------------------------------------
# Remote actors.

class RemotePolicy(Policy):
    """Student or teacher policy served over HTTP."""

    def __init__(
        self, endpoint: BackendEndpoint, role: PolicyRole = PolicyRole.STUDENT
    ) -> None:
        self.role = role
        self._endpoint = endpoint
        self._throttle = _Throttle(endpoint.rate_limit_per_s)

    def _call(self, payload: dict[str, Any]) -> dict[str, Any]:
        return _post_json(self._endpoint, POLICY_PATH, payload, self._throttle)

    def first_thought(self, task: Task) -> str:
        data = self._call(
            {
                "role": self.role.value,
                "kind": "first_thought",
                "task": task.question,
                "history": [],
                "extra": {},
            }
        )
        text = data.get("first_thought")
        if not isinstance(text, str) or not text.strip():
            raise MalformedOutput("response must carry a non-empty 'first_thought'")
        return text

    def next_step(self, task: Task, history: HistoryView) -> StepProposal:
        extra: dict[str, Any] = {}
        if history.first_thought is not None:
            extra["first_thought"] = history.first_thought
        data = self._call(
            {
                "role": self.role.value,
                "kind": "next_step",
                "task": task.question,
                "history": [step_to_dict(step) for step in history.steps],
                "extra": extra,
            }
        )
        return _proposal_from_response(data)


class RemoteTeacher(RemotePolicy, Teacher):
    def __init__(self, endpoint: BackendEndpoint) -> None:
        super().__init__(endpoint, role=PolicyRole.TEACHER)

    def correct(
        self,
        task: Task,
        prefix: HistoryView,
        error_step: Step,
        analysis: str,
    ) -> StepProposal:
        extra: dict[str, Any] = {
            "analysis": analysis,
            "error_step": step_to_dict(error_step),
        }
        if prefix.first_thought is not None:
            extra["first_thought"] = prefix.first_thought
        data = self._call(
            {
                "role": self.role.value,
                "kind": "correct",
                "task": task.question,
                "history": [step_to_dict(step) for step in prefix.steps],
                "extra": extra,
            }
        )
        return _proposal_from_response(data)


class RemoteJudge(Judge):
    def __init__(self, endpoint: BackendEndpoint) -> None:
        self._endpoint = endpoint
        self._throttle = _Throttle(endpoint.rate_limit_per_s)

    def assess(self, task: Task, traj: Trajectory, gold_answer: str) -> Verdict:
        if not traj.terminal:
            raise ValueError("judge requires a terminal trajectory")
        text = _post_text(
            self._endpoint,
            JUDGE_PATH,
            {
                "task": task.question,
                "trajectory": trajectory_to_dict(traj),
                "gold_answer": gold_answer,
            },
            self._throttle,
        )
        return parse_verdict(text)


class RemoteExecutor(Environment):
    """Code execution served over HTTP; one session id per executor."""

    def __init__(self, endpoint: BackendEndpoint, session_id: str = "default") -> None:
        self._endpoint = endpoint
        self._session_id = session_id
        self._throttle = _Throttle(endpoint.rate_limit_per_s)

    def execute(self, action: str) -> str:
        try:
            data = _post_json(
                self._endpoint,
                EXECUTOR_PATH,
                {"action": action, "session_id": self._session_id},
                self._throttle,
            )
        except BackendUnavailable as exc:
            raise ExecutorUnavailable(str(exc)) from exc
        observation = data.get("observation")
        if not isinstance(observation, str):
            raise MalformedOutput("executor response must carry an 'observation'")
        return observation


def remote_equivalence_checker(
    endpoint: BackendEndpoint,
) -> Callable[[StepProposal, StepProposal], bool]:
    """Equivalence checking delegated to the remote judge endpoint.

    The two actions ride in the task text of a judge request and the
    verdict's is_correct flag is read as "equivalent". Any transport or
    parse failure degrades to non-equivalent with a warning, matching
    the local execution checker's behavior.
    """
    throttle = _Throttle(endpoint.rate_limit_per_s)

    def check(a: StepProposal, b: StepProposal) -> bool:
        if normalize_text(a.action) == normalize_text(b.action):
            return True
        payload = {
            "task": (
                "Decide whether these two code actions are interchangeable: "
                "would they produce the same observation in the same context? "
                "Answer with a verdict whose is_correct field is true when "
                "they are equivalent.\n"
                f"Action A:\n{a.action}\nAction B:\n{b.action}"
            ),
            "trajectory": {
                "task_id": "equivalence-check",
                "first_thought": None,
                "final_answer": None,
                "terminal": False,
                "steps": [],
            },
            "gold_answer": "equivalent",
        }
        try:
            verdict = parse_verdict(
                _post_text(endpoint, JUDGE_PATH, payload, throttle)
            )
        except PipelineError as exc:
            logger.warning(
                "remote equivalence check failed, treating as non-equivalent: %s",
                exc,
            )
            return False
        return verdict.is_correct

    return check
