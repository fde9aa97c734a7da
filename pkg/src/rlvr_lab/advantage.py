"""Advantage estimators and entropy-based advantage shaping.

Pipeline for the single-rollout methods: sequence advantage
``r - baseline_prev`` -> normalize across the batch -> broadcast to every
token -> add the entropy bonus ``min(|A_t| / gamma, lam * H_t)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, UsageError

EPS_STD = 1e-6


def _as_1d(values, name: str, min_len: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape[0] < min_len:
        raise UsageError(f"{name} needs at least {min_len} values, got {arr.shape[0]}")
    return arr


def grpo_advantages(rewards, eps_std: float = EPS_STD) -> np.ndarray:
    """Group-normalized advantages (population std, floored at ``eps_std``)."""
    r = _as_1d(rewards, "grpo_advantages", 2)
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / max(r.std(), eps_std)


def rloo_advantages(rewards) -> np.ndarray:
    """Leave-one-out: each reward minus the mean of the other G-1 rewards."""
    r = _as_1d(rewards, "rloo_advantages", 2)
    G = r.shape[0]
    return r - (r.sum() - r) / (G - 1)


def batch_normalize(values, eps_std: float = EPS_STD) -> np.ndarray:
    v = _as_1d(values, "batch_normalize", 2)
    if np.all(v == v[0]):
        return np.zeros_like(v)
    return (v - v.mean()) / max(v.std(), eps_std)


def single_rollout_advantage(reward, baseline_prev) -> float:
    return float(reward) - float(baseline_prev)


def entropy_bonus(adv, entropy, gamma: float, lam: float, guarded: bool = False) -> np.ndarray:
    """psi_t = min(|A_t| / gamma, lam * H_t); ``guarded`` additionally caps psi_t at |A_t|.

    ``entropy`` is a constant here: no gradient ever flows through it.
    """
    if not gamma > 0.0:
        raise ConfigError("must be > 0", "gamma")
    if lam < 0.0:
        raise ConfigError("must be >= 0", "lambda")
    adv = np.asarray(adv, dtype=np.float64)
    H = np.asarray(entropy, dtype=np.float64)
    if adv.shape != H.shape:
        raise UsageError(f"advantage shape {adv.shape} != entropy shape {H.shape}")
    if np.any(H < 0):
        raise UsageError("entropies must be >= 0")
    psi = np.minimum(np.abs(adv) / gamma, lam * H)
    if guarded:
        psi = np.minimum(psi, np.abs(adv))
    return psi


def entropy_shape(adv, entropy, gamma: float, lam: float, guarded: bool = False) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return adv + entropy_bonus(adv, entropy, gamma, lam, guarded)


def broadcast_tokens(seq_adv, length: int) -> np.ndarray:
    seq_adv = np.asarray(seq_adv, dtype=np.float64).reshape(-1, 1)
    return np.repeat(seq_adv, length, axis=1)


def grouped(fn, rewards, group_size: int, **kwargs) -> np.ndarray:
    """Apply a group estimator to consecutive groups of ``group_size`` rewards."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.shape[0] % group_size:
        raise UsageError(f"{r.shape[0]} rewards do not split into groups of {group_size}")
    return np.concatenate([fn(g, **kwargs) for g in r.reshape(-1, group_size)])
