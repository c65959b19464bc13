"""Enumerable tabular environments for checking policy-gradient machinery.

A :class:`TabularPolicyEnv` is a T-step decision problem with N actions per
step, an independent softmax policy per step and a reward for every complete
action sequence. With ``N ** T`` small, the expected reward and its exact
gradient are computed by enumeration and serve as references for the Monte
Carlo estimators and for the self-critical training code.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from .engine import RolloutPair, scst_loss
from .tracker import ActionDistribution, Trajectory, action_distribution, select_action

MAX_SEQUENCES = 100_000
ESTIMATORS = ("reinforce", "scst")


class OracleSizeError(ValueError):
    pass


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TabularPolicyEnv:
    """``logits`` is ``(T, N)`` or a shared ``(N,)`` row; ``reward_table`` has
    shape ``(N,) * T`` with entries in [0, 1]."""

    logits: np.ndarray
    reward_table: np.ndarray
    T: int = field(init=False)
    N: int = field(init=False)

    def __post_init__(self):
        self.reward_table = np.asarray(self.reward_table, dtype=np.float64)
        self.T = self.reward_table.ndim
        self.N = self.reward_table.shape[0] if self.T else 0
        if self.T < 1 or any(s != self.N for s in self.reward_table.shape):
            raise ValueError("reward_table must have shape (N,) * T with T >= 1")
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape not in ((self.N,), (self.T, self.N)):
            raise ValueError(f"logits must have shape ({self.N},) or ({self.T}, {self.N})")

    @property
    def shared(self) -> bool:
        return self.logits.ndim == 1

    @property
    def num_sequences(self) -> int:
        return self.N**self.T

    def step_logits(self) -> np.ndarray:
        return np.broadcast_to(self.logits, (self.T, self.N))

    def probs(self) -> np.ndarray:
        return _softmax(self.step_logits())

    def reward(self, seq) -> float:
        return float(self.reward_table[tuple(int(a) for a in seq)])

    def rewards(self, seqs: np.ndarray) -> np.ndarray:
        seqs = np.asarray(seqs)
        return self.reward_table[tuple(seqs[:, t] for t in range(self.T))]

    def greedy_sequence(self) -> np.ndarray:
        return np.argmax(self.probs(), axis=1)

    def with_logits(self, logits) -> "TabularPolicyEnv":
        return TabularPolicyEnv(np.asarray(logits, dtype=np.float64), self.reward_table)

    def with_rewards(self, table) -> "TabularPolicyEnv":
        return TabularPolicyEnv(self.logits, np.asarray(table, dtype=np.float64))


def random_env(N: int, T: int, rng: np.random.Generator, logit_scale: float = 1.0) -> TabularPolicyEnv:
    """Random ``(T, N)`` logits and rewards drawn uniformly from [0, 1]."""
    return TabularPolicyEnv(rng.normal(0.0, logit_scale, size=(T, N)), rng.random((N,) * T))


def _guard(env: TabularPolicyEnv) -> None:
    if env.num_sequences > MAX_SEQUENCES:
        raise OracleSizeError(f"N**T = {env.num_sequences} exceeds the enumeration limit {MAX_SEQUENCES}")


def sequence_probabilities(env: TabularPolicyEnv) -> np.ndarray:
    """Probability of every action sequence, shape ``(N,) * T``."""
    _guard(env)
    p = env.probs()
    out = p[0]
    for t in range(1, env.T):
        out = np.multiply.outer(out, p[t])
    return out


def enumerate_expected_reward(env: TabularPolicyEnv) -> float:
    """Exact expected reward of the policy, summed over all sequences."""
    return float(np.sum(sequence_probabilities(env) * env.reward_table))


def exact_policy_gradient(env: TabularPolicyEnv) -> np.ndarray:
    """Gradient of ``-E[r]`` with respect to the logits, by enumeration.

    For a softmax step ``d log p_t(a) / d theta_{t,j} = [a = j] - p_t(j)``,
    so ``dE/d theta_{t,j} = sum_l P(l) r(l) [l_t = j] - p_t(j) E[r]``.
    """
    P = sequence_probabilities(env)
    weighted = P * env.reward_table
    expected = weighted.sum()
    p = env.probs()
    grad = np.empty((env.T, env.N))
    axes = tuple(range(env.T))
    for t in range(env.T):
        marginal = weighted.sum(axis=tuple(a for a in axes if a != t))
        grad[t] = marginal - p[t] * expected
    grad = -grad
    return grad.sum(axis=0) if env.shared else grad


def finite_difference_gradient(env: TabularPolicyEnv, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``-enumerate_expected_reward`` in the logits."""
    base = env.logits
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        up, down = base.copy(), base.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = -(enumerate_expected_reward(env.with_logits(up)) - enumerate_expected_reward(env.with_logits(down))) / (2 * h)
    return grad


def sample_sequences(env: TabularPolicyEnv, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """``(num_samples, T)`` action sequences drawn from the policy."""
    p = env.probs()
    cdf = np.cumsum(p, axis=1)
    u = rng.random((num_samples, env.T)) * cdf[:, -1]
    seqs = np.empty((num_samples, env.T), dtype=np.int64)
    for t in range(env.T):
        seqs[:, t] = np.minimum(np.searchsorted(cdf[t], u[:, t], side="right"), env.N - 1)
    return seqs


def per_sample_gradients(env: TabularPolicyEnv, estimator: str, seqs: np.ndarray) -> np.ndarray:
    """Single-sample loss gradients ``-(r(l) - b) * d log p(l) / d theta``,
    with ``b = 0`` for REINFORCE and ``b = r(greedy)`` for SCST.

    Returns ``(S, T, N)`` (or ``(S, N)`` for shared logits).
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    seqs = np.asarray(seqs)
    r = env.rewards(seqs)
    if estimator == "scst":
        r = r - env.reward(env.greedy_sequence())
    p = env.probs()
    onehot = np.zeros((len(seqs), env.T, env.N))
    np.put_along_axis(onehot, seqs[:, :, None], 1.0, axis=2)
    g = -r[:, None, None] * (onehot - p[None])
    return g.sum(axis=1) if env.shared else g


@dataclass
class GradientEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    variance: np.ndarray
    num_samples: int


def estimate_gradient(env: TabularPolicyEnv, estimator: str, num_samples: int, rng: np.random.Generator, chunk: int = 50_000) -> GradientEstimate:
    """Monte Carlo policy gradient with per-component standard errors."""
    if num_samples < 2:
        raise ValueError("need at least two samples for a standard error")
    total = None
    total_sq = None
    done = 0
    while done < num_samples:
        n = min(chunk, num_samples - done)
        g = per_sample_gradients(env, estimator, sample_sequences(env, n, rng))
        s, s2 = g.sum(axis=0), (g * g).sum(axis=0)
        total = s if total is None else total + s
        total_sq = s2 if total_sq is None else total_sq + s2
        done += n
    mean = total / num_samples
    var = np.maximum(total_sq / num_samples - mean**2, 0.0) * num_samples / (num_samples - 1)
    return GradientEstimate(mean, np.sqrt(var / num_samples), var, num_samples)


# ---------------------------------------------------------------------------
# a tabular policy driven by the same self-critical loss as the tracker


class TabularPolicy(torch.nn.Module):
    """Independent softmax per step; rollouts produce :class:`Trajectory`
    records whose log-probabilities stay on the autograd graph."""

    def __init__(self, env: TabularPolicyEnv):
        super().__init__()
        self.reward_table = env.reward_table
        self.logits = torch.nn.Parameter(torch.tensor(np.array(env.step_logits()), dtype=torch.float64))

    def env(self) -> TabularPolicyEnv:
        return TabularPolicyEnv(self.logits.detach().numpy().copy(), self.reward_table)

    def rollout(self, mode: str, rng: np.random.Generator | None = None) -> Trajectory:
        dist = action_distribution(self.logits, "softmax")
        idx, lps = [], []
        for t in range(self.logits.shape[0]):
            i, lp = select_action(ActionDistribution(dist.logprobs[t], dist.mode_tag), mode, rng)
            idx.append(i)
            lps.append(lp)
        indices = np.array(idx, dtype=np.int64)
        return Trajectory(
            indices=indices,
            logprobs=torch.stack(lps),
            boxes=np.zeros((len(idx), 4)),
            reward=float(self.reward_table[tuple(idx)]),
            mode=mode,
        )

    def rollout_pair(self, rng: np.random.Generator) -> RolloutPair:
        return RolloutPair(self.rollout("sample", rng), self.rollout("argmax"))


def tabular_scst_step(policy: TabularPolicy, optimizer: torch.optim.Optimizer, rngs) -> float:
    """One update from ``len(rngs)`` self-critical rollout pairs."""
    optimizer.zero_grad(set_to_none=True)
    pairs = [policy.rollout_pair(r) for r in rngs]
    loss = torch.stack([scst_loss(p) for p in pairs]).mean()
    loss.backward()
    optimizer.step()
    return float(np.mean([p.advantage for p in pairs]))


def train_tabular_scst(env: TabularPolicyEnv, steps: int = 500, k: int = 8, lr: float = 0.1, seed: int = 0) -> list[float]:
    """Self-critical training on a tabular env; returns the exact expected
    reward before the first step and after every step."""
    policy = TabularPolicy(env)
    optimizer = torch.optim.Adam(policy.parameters(), lr=lr)
    history = [enumerate_expected_reward(policy.env())]
    for step in range(steps):
        rngs = [np.random.default_rng([seed, step, j]) for j in range(k)]
        tabular_scst_step(policy, optimizer, rngs)
        history.append(enumerate_expected_reward(policy.env()))
    return history


# ---------------------------------------------------------------------------
# the oracle suite behind `grad-check`


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def check_exact_vs_fd(env: TabularPolicyEnv, tol: float = 1e-8) -> CheckResult:
    exact = exact_policy_gradient(env)
    fd = finite_difference_gradient(env)
    err = float(np.max(np.abs(exact - fd)))
    return CheckResult("exact gradient vs finite differences", err <= tol, f"max abs diff {err:.3e} (tol {tol:g})")


def check_estimator(env: TabularPolicyEnv, estimator: str, num_samples: int, rng, sigmas: float = 3.0) -> CheckResult:
    exact = exact_policy_gradient(env)
    est = estimate_gradient(env, estimator, num_samples, rng)
    z = np.abs(est.mean - exact) / np.where(est.stderr > 0, est.stderr, np.inf)
    exact_match = np.where(est.stderr > 0, True, np.abs(est.mean - exact) <= 1e-12)
    worst = float(np.max(z))
    ok = bool(np.all(z <= sigmas) and np.all(exact_match))
    return CheckResult(f"{estimator} mean within {sigmas:g} standard errors", ok, f"max |z| = {worst:.2f} over {exact.size} components, {num_samples} samples")


def check_reward_shift(env: TabularPolicyEnv, rng, shift: float = 0.37, num_samples: int = 10_000) -> CheckResult:
    seqs = sample_sequences(env, num_samples, rng)
    a = per_sample_gradients(env, "scst", seqs)
    b = per_sample_gradients(env.with_rewards(env.reward_table + shift), "scst", seqs)
    diff = float(np.max(np.abs(a - b)))
    return CheckResult("scst invariant to constant reward shifts", diff <= 1e-12, f"max per-sample diff {diff:.3e}")


def check_deterministic_scst(N: int = 3, T: int = 3, num_samples: int = 1000, rng=None) -> CheckResult:
    rng = rng if rng is not None else np.random.default_rng(0)
    logits = np.full((T, N), -np.inf)
    logits[np.arange(T), rng.integers(0, N, size=T)] = 0.0
    env = TabularPolicyEnv(logits, rng.random((N,) * T))
    g = per_sample_gradients(env, "scst", sample_sequences(env, num_samples, rng))
    return CheckResult("scst estimate zero under a deterministic policy", bool(np.all(g == 0)), f"max |g| = {float(np.max(np.abs(g))):.3e}")


def run_oracle_suite(seed: int = 0, N: int = 3, T: int = 3, num_samples: int = 100_000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    env = random_env(N, T, rng)
    results = [
        check_exact_vs_fd(env),
        check_estimator(env, "reinforce", num_samples, rng),
        check_estimator(env, "scst", num_samples, rng),
        check_reward_shift(env, rng),
        check_deterministic_scst(N, T, rng=rng),
    ]
    shared = TabularPolicyEnv(rng.normal(size=N), rng.random((N,) * T))
    results.append(CheckResult("shared-logit " + results[0].name, *_shared_fd(shared)))
    return results


def _shared_fd(env: TabularPolicyEnv) -> tuple[bool, str]:
    err = float(np.max(np.abs(exact_policy_gradient(env) - finite_difference_gradient(env))))
    return err <= 1e-8, f"max abs diff {err:.3e}"


def enumerate_sequences(N: int, T: int):
    return itertools.product(range(N), repeat=T)


def optimum(env: TabularPolicyEnv) -> float:
    """Best achievable expected reward: the largest table entry (a product
    policy can put all its mass on any single sequence)."""
    return float(env.reward_table.max())


def log_sequence_probability(env: TabularPolicyEnv, seq) -> float:
    lp = np.log(env.probs())
    return float(sum(lp[t, a] for t, a in enumerate(seq)))

