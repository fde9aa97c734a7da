"""Brute-force ground truth on miniature instances.

Exact expected reward and policy gradient by enumerating all V**T responses,
central finite differences, and a Monte-Carlo bias check for sampled
gradient estimators against the enumerated gradient.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import policy as pol
from .advantage import entropy_bonus
from .env import Prompt, TaskSuite
from .errors import UsageError

MAX_OUTCOMES = 10 ** 5
BIAS_ALGOS = ("reinforce", "leaky_baseline", "mssr")


@dataclass
class EnumerationReport:
    expected_reward: float
    gradient: np.ndarray
    outcome_count: int
    probabilities: np.ndarray
    rewards: np.ndarray


def all_sequences(T: int, V: int) -> np.ndarray:
    if V ** T > MAX_OUTCOMES:
        raise UsageError(
            f"{V}**{T} = {V ** T} outcomes exceeds the enumeration limit of {MAX_OUTCOMES}; "
            "use a smaller vocabulary or sequence length (e.g. V=3, T=2)"
        )
    return np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)


def _check_dims(params: pol.PolicyParams, T: int, V: int) -> None:
    if (params.dims.max_len, params.dims.vocab_size) != (T, V):
        raise UsageError(f"policy has (T, V) = {(params.dims.max_len, params.dims.vocab_size)}, asked for {(T, V)}")


def enumerate_outcomes(params: pol.PolicyParams, prompt: Prompt, T: int, V: int, baseline: float = 0.0):
    _check_dims(params, T, V)
    seqs = all_sequences(T, V)
    n = seqs.shape[0]
    ctx = np.repeat(np.asarray([prompt.context], dtype=np.float64), n, axis=0)
    qids = np.full(n, prompt.question_id)
    logq = pol.forward(params, ctx, qids, seqs)
    seq_logp = np.take_along_axis(logq, seqs[..., None], -1)[..., 0].sum(1)
    probs = np.exp(seq_logp)
    rewards = (seqs[:, -1] == prompt.answer).astype(np.float64)
    return seqs, ctx, qids, probs, rewards


def enumerate_expected_reward(params: pol.PolicyParams, prompt: Prompt, T: int, V: int) -> float:
    _, _, _, probs, rewards = enumerate_outcomes(params, prompt, T, V)
    return float(np.dot(probs, rewards))


def enumerate_policy_gradient(params: pol.PolicyParams, prompt: Prompt, T: int, V: int,
                              baseline: float = 0.0) -> EnumerationReport:
    """Exact grad J = sum_o pi(o) (r(o) - b) grad log pi(o)."""
    seqs, ctx, qids, probs, rewards = enumerate_outcomes(params, prompt, T, V)
    weights = np.repeat((probs * (rewards - baseline))[:, None], T, axis=1)
    _, grad = pol.weighted_logprob_grad(params, ctx, qids, seqs, weights)
    return EnumerationReport(float(np.dot(probs, rewards)), grad, seqs.shape[0], probs, rewards)


def finite_diff_grad(fn, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise UsageError("step size must be > 0")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(|a_i| + |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def suite_policy_gradient(params: pol.PolicyParams, suite: TaskSuite, baseline: float = 0.0):
    """Mean over prompts of the exact gradient, and the mean expected reward."""
    T, V = suite.max_len, suite.vocab_size
    reports = [enumerate_policy_gradient(params, p, T, V, baseline) for p in suite.prompts]
    grad = np.mean([r.gradient for r in reports], axis=0)
    return float(np.mean([r.expected_reward for r in reports])), grad


@dataclass
class BiasReport:
    algo: str
    samples: int
    max_abs_z: float
    passed: bool
    z_threshold: float
    expected_false_alarm: float
    mean_estimate: list
    exact_gradient: list
    z_scores: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def estimator_bias_check(algo: str, params: pol.PolicyParams, suite: TaskSuite, samples: int,
                         seed: int, baseline: float = 0.5, gamma: float = 0.4, lam: float = 2.0,
                         z_threshold: float = 3.0, chunk: int = 4096) -> BiasReport:
    """Compare the mean of sampled single-rollout gradients with the enumerated gradient.

    ``reinforce`` uses a fixed baseline (unbiased); ``leaky_baseline`` lets the
    baseline absorb half of the current reward (biased by construction);
    ``mssr`` adds the entropy bonus, which is not expected to be unbiased.
    Sample ``i`` uses prompt ``i % len(suite)``. Passes iff every |z| < threshold;
    the false-alarm rate for an unbiased estimator is about 1 - 0.9973**P.
    """
    if samples < 2:
        raise UsageError("need at least 2 samples")
    if algo not in BIAS_ALGOS:
        raise UsageError(f"algo must be one of {BIAS_ALGOS}")
    T = suite.max_len
    _, exact = suite_policy_gradient(params, suite)
    P = params.dims.size
    total = np.zeros(P)
    total_sq = np.zeros(P)
    rng = np.random.default_rng([seed, 401])
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        idx = (start + np.arange(n)) % len(suite)
        ctx, qids, answers = suite.contexts[idx], suite.question_ids[idx], suite.answers[idx]
        tokens, _, ents = pol.sample_batch(params, ctx, qids, rng.random((n, T)))
        r = (tokens[:, -1] == answers).astype(np.float64)
        if algo == "reinforce":
            a = r - baseline
        elif algo == "leaky_baseline":
            a = r - (0.5 * r + 0.5 * baseline)
        else:
            a = r - baseline
        weights = np.repeat(a[:, None], T, axis=1)
        if algo == "mssr":
            weights = weights + entropy_bonus(weights, ents, gamma, lam)
        _, g = pol.weighted_logprob_grad(params, ctx, qids, tokens, weights, per_sample=True)
        total += g.sum(0)
        total_sq += (g * g).sum(0)
    mean = total / samples
    var = np.maximum(total_sq / samples - mean * mean, 0.0) * samples / (samples - 1)
    se = np.sqrt(var / samples)
    diff = mean - exact
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(np.abs(diff) < 1e-12, 0.0, np.inf))
    max_z = float(np.max(np.abs(z)))
    return BiasReport(
        algo=algo,
        samples=samples,
        max_abs_z=max_z,
        passed=bool(max_z < z_threshold),
        z_threshold=z_threshold,
        expected_false_alarm=float(1.0 - 0.9973 ** P),
        mean_estimate=mean.tolist(),
        exact_gradient=exact.tolist(),
        z_scores=z.tolist(),
    )
