"""Finite-horizon MDP simulators for the error-compounding analysis.

Three empirical claims are exercised here:

 1. A policy that matches the expert per step with error rate eps, on an
    adversarial MDP where any deviation falls off the expert's path for
    good, accumulates expected cost that grows quadratically in the
    horizon (but stays under c_expert + eps * H(H-1)/2).
 2. A policy whose per-state deviation rate is eps on its own visited
    states, on a recoverable MDP, pays exactly eps per step in
    expectation: linear growth, bounded by c_expert + eps * H.
 3. Truncating a policy-gradient estimator to start at a later step k
    shrinks its variance; the closed-form bound decreases monotonically
    in k and is met by a bounded-reward chain construction.

Everything is Monte Carlo with chunked, counter-based RNG streams:
episode chunk j of a run seeded with s draws from PCG64 seeded by
(s, j), and chunk results are reduced in chunk order, so sequential and
parallel executions produce bit-identical estimates.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateFit
from .traj_model import PolicyRole

logger = logging.getLogger(__name__)

ON_PATH = 0
OFF_PATH = 1
FOLLOW = 0
DEVIATE = 1

CHUNK_EPISODES = 65536
PROB_CLAMP = 1e-12


def derive_seed(base: int, *branch: int) -> int:
    """Stable well-mixed sub-seed for a branch of a seeded computation."""
    return int(np.random.SeedSequence((base, *branch)).generate_state(1)[0])


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, chunk))))


def _chunk_sizes(total: int) -> list[int]:
    sizes = [CHUNK_EPISODES] * (total // CHUNK_EPISODES)
    if total % CHUNK_EPISODES:
        sizes.append(total % CHUNK_EPISODES)
    return sizes


@dataclass(frozen=True)
class MdpSpec:
    """Two-state, two-action, finite-horizon MDP with per-(state, action)
    cost. Tables are indexed [state][action]."""

    horizon: int
    absorbing: bool
    transition: tuple[tuple[int, int], tuple[int, int]]
    cost: tuple[tuple[float, float], tuple[float, float]]
    initial_state: int = ON_PATH

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.initial_state not in (ON_PATH, OFF_PATH):
            raise ValueError("initial_state must be a valid state")
        for row in self.transition:
            for nxt in row:
                if nxt not in (ON_PATH, OFF_PATH):
                    raise ValueError("transition targets must be valid states")
        for row in self.cost:
            for value in row:
                if not 0.0 <= value <= 1.0:
                    raise ValueError("per-step costs must lie in [0, 1]")


def make_adversarial_mdp(horizon: int, with_absorbing: bool) -> MdpSpec:
    """Worst-case construction for the two cost-growth regimes.

    Absorbing: the expert path costs nothing, any deviation drops into
    an off-path trap that costs 1 per step occupied from the next step
    on. Recoverable: the state never changes, and a cost of 1 is charged
    on each deviating action itself.
    """
    if with_absorbing:
        return MdpSpec(
            horizon=horizon,
            absorbing=True,
            transition=((ON_PATH, OFF_PATH), (OFF_PATH, OFF_PATH)),
            cost=((0.0, 0.0), (1.0, 1.0)),
        )
    return MdpSpec(
        horizon=horizon,
        absorbing=False,
        transition=((ON_PATH, ON_PATH), (OFF_PATH, OFF_PATH)),
        cost=((0.0, 1.0), (0.0, 1.0)),
    )


class CostMode(Enum):
    """Whose state distribution the per-step error rate refers to."""

    BC_STUDENT = "bc_student"
    OWN_DIST_STUDENT = "own_dist_student"
    EXPERT = "expert"


@dataclass(frozen=True)
class TabularPolicy:
    """Constant per-step action distribution (1 - eps on FOLLOW)."""

    role: PolicyRole
    deviation_rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.deviation_rate <= 1.0:
            raise ValueError("deviation_rate must lie in [0, 1]")

    def action_probs(self, step: int, state: int) -> tuple[float, float]:
        return (1.0 - self.deviation_rate, self.deviation_rate)


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    ci95_halfwidth: float
    episodes: int

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.ci95_halfwidth < 0.0:
            raise ValueError("ci95_halfwidth must be >= 0")


def simulate_cost(
    policy_mode: CostMode,
    mdp: MdpSpec,
    eps: float,
    episodes: int,
    seed: int,
    jobs: int = 1,
) -> CostEstimate:
    """Monte Carlo mean episode cost with a normal-approximation 95% CI.

    The expert never deviates; both student modes deviate i.i.d. with
    probability eps at every step (the distinction between the two
    assumptions lives in the MDP construction, not the sampler).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    rate = 0.0 if policy_mode is CostMode.EXPERT else eps
    transition = np.asarray(mdp.transition, dtype=np.int64)
    cost = np.asarray(mdp.cost, dtype=np.float64)

    def run_chunk(args: tuple[int, int]) -> tuple[float, float]:
        chunk_idx, size = args
        rng = _chunk_rng(seed, chunk_idx)
        states = np.full(size, mdp.initial_state, dtype=np.int64)
        totals = np.zeros(size, dtype=np.float64)
        for _ in range(mdp.horizon):
            if rate == 0.0:
                actions = np.zeros(size, dtype=np.int64)
            else:
                actions = (rng.random(size) < rate).astype(np.int64)
            totals += cost[states, actions]
            states = transition[states, actions]
        return float(totals.sum()), float(np.square(totals).sum())

    work = list(enumerate(_chunk_sizes(episodes)))
    if jobs == 1 or len(work) == 1:
        partials = [run_chunk(item) for item in work]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(run_chunk, work))

    # Reduce in chunk order: identical bytes for any worker count.
    total = 0.0
    total_sq = 0.0
    for part_sum, part_sq in partials:
        total += part_sum
        total_sq += part_sq
    mean = total / episodes
    if episodes == 1:
        halfwidth = math.inf
    else:
        var = max((total_sq - episodes * mean * mean) / (episodes - 1), 0.0)
        halfwidth = 1.96 * math.sqrt(var / episodes)
    return CostEstimate(mean=mean, ci95_halfwidth=halfwidth, episodes=episodes)


def bc_bound(horizon: int, eps: float, c_expert: float) -> float:
    """Quadratic worst-case cost bound for expert-distribution matching."""
    return c_expert + horizon * (horizon - 1) / 2.0 * eps


def score_bound(horizon: int, eps: float, c_expert: float) -> float:
    """Linear worst-case cost bound for own-distribution matching."""
    return c_expert + horizon * eps


def fit_growth_exponent(points: Sequence[tuple[float, float]]) -> float:
    """Least-squares slope of log cost against log horizon."""
    if len(points) < 3:
        raise DegenerateFit("need at least 3 (horizon, cost) points")
    if any(h <= 0.0 or c <= 0.0 for h, c in points):
        raise DegenerateFit("log-log fit requires positive horizons and costs")
    xs = [math.log(h) for h, _ in points]
    ys = [math.log(c) for _, c in points]
    x_bar = sum(xs) / len(xs)
    y_bar = sum(ys) / len(ys)
    sxx = sum((x - x_bar) ** 2 for x in xs)
    if sxx == 0.0:
        raise DegenerateFit("all horizons are identical")
    sxy = sum((x - x_bar) * (y - y_bar) for x, y in zip(xs, ys))
    return sxy / sxx


# ---------------------------------------------------------------------------
# Policy-gradient variance study.

@dataclass(frozen=True)
class RewardChainMdp:
    """Bounded-reward chain for gradient-variance measurements.

    The state at step t is t itself (transitions ignore actions), with
    two actions. The reward mixes an action-driven sign with an
    independent environment coin:

        r_t = r_max * (w * action_sign_t + (1 - w) * coin_t)

    so |r_t| <= r_max always. Steps before zero_before pay zero reward,
    which makes truncated estimators exactly unbiased from that step on.
    """

    horizon: int
    r_max: float = 1.0
    action_weight: float = 0.5
    zero_before: int = 1

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.r_max <= 0.0:
            raise ValueError("r_max must be > 0")
        if not 0.0 <= self.action_weight <= 1.0:
            raise ValueError("action_weight must lie in [0, 1]")
        if not 1 <= self.zero_before <= self.horizon:
            raise ValueError("zero_before must lie in 1..horizon")


@dataclass(frozen=True)
class TabularSoftmaxPolicy:
    """Per-step softmax over two actions; parameters are the logits."""

    logits: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.logits:
            raise ValueError("at least one logit row is required")
        if not isinstance(self.logits, tuple):
            object.__setattr__(
                self, "logits", tuple(tuple(row) for row in self.logits)
            )

    @classmethod
    def uniform(cls, horizon: int) -> "TabularSoftmaxPolicy":
        return cls(logits=tuple((0.0, 0.0) for _ in range(horizon)))

    @property
    def horizon(self) -> int:
        return len(self.logits)

    def prob_matrix(self) -> np.ndarray:
        raw = np.asarray(self.logits, dtype=np.float64)
        shifted = raw - raw.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class GradientSample:
    """One truncated-gradient draw: the flattened score-weighted sum
    over steps k..H (two coordinates per step) plus per-step returns."""

    gradient: tuple[float, ...]
    returns: tuple[float, ...]


@dataclass(frozen=True)
class VarianceParams:
    """Closed-form bound inputs; c = g_max**2 * r_max**2."""

    gamma: float
    r_max: float
    g_max: float
    horizon: int
    k: int

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        if self.r_max <= 0.0 or self.g_max <= 0.0:
            raise ValueError("r_max and g_max must be > 0")
        if not 1 <= self.k <= self.horizon:
            raise ValueError("k must lie in 1..horizon")

    @property
    def c(self) -> float:
        return self.g_max ** 2 * self.r_max ** 2


def variance_bound(params: VarianceParams) -> float:
    """Worst-case variance scale of the truncated gradient estimator.

    With m = H - k + 1 remaining steps the bound is
    c * ((m - gamma * (1 - gamma**m) / (1 - gamma)) / (1 - gamma))**2,
    which collapses to exactly c at k = H and shrinks as k grows.
    """
    m = params.horizon - params.k + 1
    one_minus = 1.0 - params.gamma
    series = (1.0 - params.gamma ** m) / one_minus
    inner = (m - params.gamma * series) / one_minus
    return params.c * inner ** 2


def _pg_chunk(
    mdp: RewardChainMdp,
    probs: np.ndarray,
    k: int,
    gamma: float,
    size: int,
    seed: int,
    chunk_idx: int,
) -> tuple[np.ndarray, np.ndarray]:
    rng = _chunk_rng(seed, chunk_idx)
    horizon = mdp.horizon
    weight = mdp.action_weight
    actions = np.empty((size, horizon), dtype=np.int64)
    rewards = np.zeros((size, horizon), dtype=np.float64)
    for t in range(1, horizon + 1):
        act = (rng.random(size) < probs[t - 1, 1]).astype(np.int64)
        coin = np.where(rng.random(size) < 0.5, -1.0, 1.0)
        actions[:, t - 1] = act
        if t >= mdp.zero_before:
            sign = 2.0 * act - 1.0
            rewards[:, t - 1] = mdp.r_max * (weight * sign + (1.0 - weight) * coin)
    returns = np.zeros((size, horizon), dtype=np.float64)
    acc = np.zeros(size, dtype=np.float64)
    for t in range(horizon, 0, -1):
        acc = rewards[:, t - 1] + gamma * acc
        returns[:, t - 1] = acc
    grads = np.zeros((size, 2 * horizon), dtype=np.float64)
    for t in range(k, horizon + 1):
        act = actions[:, t - 1]
        g_t = returns[:, t - 1]
        grads[:, 2 * (t - 1)] = ((act == 0) - probs[t - 1, 0]) * g_t
        grads[:, 2 * (t - 1) + 1] = ((act == 1) - probs[t - 1, 1]) * g_t
    return grads, returns


def _pg_matrix(
    mdp: RewardChainMdp,
    policy: TabularSoftmaxPolicy,
    k: int,
    gamma: float,
    samples: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """All samples at once: (gradients, returns) matrices."""
    if policy.horizon != mdp.horizon:
        raise ValueError("policy and MDP horizons differ")
    if not 1 <= k <= mdp.horizon:
        raise ValueError("k must lie in 1..horizon")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly inside (0, 1)")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    probs = policy.prob_matrix()
    chunks = [
        _pg_chunk(mdp, probs, k, gamma, size, seed, idx)
        for idx, size in enumerate(_chunk_sizes(samples))
    ]
    if len(chunks) == 1:
        return chunks[0]
    grads = np.concatenate([grad for grad, _ in chunks], axis=0)
    returns = np.concatenate([ret for _, ret in chunks], axis=0)
    return grads, returns


def pg_samples(
    mdp: RewardChainMdp,
    policy: TabularSoftmaxPolicy,
    k: int,
    gamma: float,
    samples: int,
    seed: int,
) -> list[GradientSample]:
    """Independent draws of the gradient estimator truncated to start at k."""
    grads, returns = _pg_matrix(mdp, policy, k, gamma, samples, seed)
    return [
        GradientSample(gradient=tuple(g), returns=tuple(r))
        for g, r in zip(grads.tolist(), returns.tolist())
    ]


@dataclass(frozen=True)
class VarianceEstimate:
    """Trace of the coordinate covariance plus the raw second moment."""

    var_trace: float
    ci95_halfwidth: float
    var_norm2: float
    samples: int


def estimate_gradient_variance(
    mdp: RewardChainMdp,
    policy: TabularSoftmaxPolicy,
    k: int,
    gamma: float,
    samples: int,
    seed: int,
) -> VarianceEstimate:
    """Monte Carlo trace-variance of the truncated gradient.

    The CI half-width is for the mean of the per-sample squared
    deviations q_i = ||g_i - g_bar||**2, whose (n/(n-1))-scaled mean is
    the trace estimate.
    """
    if samples < 2:
        raise ValueError("variance estimation needs at least 2 samples")
    grads, _ = _pg_matrix(mdp, policy, k, gamma, samples, seed)
    center = grads.mean(axis=0)
    sq_dev = np.square(grads - center).sum(axis=1)
    var_trace = float(sq_dev.sum() / (samples - 1))
    halfwidth = float(1.96 * sq_dev.std(ddof=1) / math.sqrt(samples))
    var_norm2 = float(np.square(grads).sum(axis=1).mean())
    return VarianceEstimate(
        var_trace=var_trace,
        ci95_halfwidth=halfwidth,
        var_norm2=var_norm2,
        samples=samples,
    )


def bc_nll(
    dataset: Sequence[tuple[tuple[int, int], int]],
    policy: TabularPolicy,
) -> float:
    """Mean negative log-likelihood of (state, action) pairs.

    Items are ((step, state), action). Zero probabilities are clamped
    to a tiny floor with a warning instead of producing infinities.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    clamped = 0
    total = 0.0
    for (step, state), action in dataset:
        if action not in (FOLLOW, DEVIATE):
            raise ValueError(f"unknown action {action!r}")
        prob = policy.action_probs(step, state)[action]
        if prob < PROB_CLAMP:
            prob = PROB_CLAMP
            clamped += 1
        total -= math.log(prob)
    if clamped:
        logger.warning(
            "clamped %d zero-probability actions to %g", clamped, PROB_CLAMP
        )
    return total / len(dataset)


# ---------------------------------------------------------------------------
# Grid runners backing the CLI's CSV outputs.

@dataclass(frozen=True)
class BoundsRow:
    horizon: int
    eps: float
    mode: CostMode
    mean: float
    ci95: float
    bound: float


def bounds_grid(
    horizons: Iterable[int],
    epsilons: Iterable[float],
    episodes: int,
    seed: int,
    jobs: int = 1,
) -> list[BoundsRow]:
    """One row per (horizon, eps, mode): expert-distribution matching on
    the absorbing MDP, own-distribution matching on the recoverable one."""
    rows: list[BoundsRow] = []
    index = 0
    for horizon in horizons:
        for eps in epsilons:
            for mode in (CostMode.BC_STUDENT, CostMode.OWN_DIST_STUDENT):
                absorbing = mode is CostMode.BC_STUDENT
                mdp = make_adversarial_mdp(horizon, with_absorbing=absorbing)
                estimate = simulate_cost(
                    mode, mdp, eps, episodes, derive_seed(seed, index), jobs=jobs
                )
                if absorbing:
                    limit = bc_bound(horizon, eps, 0.0)
                else:
                    limit = score_bound(horizon, eps, 0.0)
                rows.append(
                    BoundsRow(
                        horizon=horizon,
                        eps=eps,
                        mode=mode,
                        mean=estimate.mean,
                        ci95=estimate.ci95_halfwidth,
                        bound=limit,
                    )
                )
                index += 1
    return rows


def bounds_csv(rows: Iterable[BoundsRow]) -> list[str]:
    lines = ["H,eps,mode,mean,ci95,bound"]
    for row in rows:
        lines.append(
            f"{row.horizon},{row.eps!r},{row.mode.value},"
            f"{row.mean!r},{row.ci95!r},{row.bound!r}"
        )
    return lines


@dataclass(frozen=True)
class VarianceRow:
    horizon: int
    k: int
    gamma: float
    var_trace: float
    ci95: float
    var_norm2: float
    bound: float


# The per-step score of a two-action softmax has norm at most sqrt(2)
# whatever the logits; that constant backs the closed-form bound.
SOFTMAX_SCORE_BOUND = math.sqrt(2.0)


def variance_study(
    horizon: int,
    gamma: float,
    ks: Iterable[int],
    samples: int,
    seed: int,
    r_max: float = 1.0,
) -> list[VarianceRow]:
    """Empirical variance vs closed-form bound for each truncation point."""
    mdp = RewardChainMdp(horizon=horizon, r_max=r_max)
    policy = TabularSoftmaxPolicy.uniform(horizon)
    rows: list[VarianceRow] = []
    for k in ks:
        estimate = estimate_gradient_variance(
            mdp, policy, k, gamma, samples, derive_seed(seed, k)
        )
        params = VarianceParams(
            gamma=gamma,
            r_max=r_max,
            g_max=SOFTMAX_SCORE_BOUND,
            horizon=horizon,
            k=k,
        )
        rows.append(
            VarianceRow(
                horizon=horizon,
                k=k,
                gamma=gamma,
                var_trace=estimate.var_trace,
                ci95=estimate.ci95_halfwidth,
                var_norm2=estimate.var_norm2,
                bound=variance_bound(params),
            )
        )
    return rows


def variance_csv(rows: Iterable[VarianceRow]) -> list[str]:
    lines = ["H,k,gamma,var_trace,var_norm2,bound"]
    for row in rows:
        lines.append(
            f"{row.horizon},{row.k},{row.gamma!r},"
            f"{row.var_trace!r},{row.var_norm2!r},{row.bound!r}"
        )
    return lines
