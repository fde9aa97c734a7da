"""Per-prompt Beta baseline for Bernoulli rewards with discounted updates."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError, UsageError


class BetaTracker:
    """Discounted Beta(alpha, beta) counts per prompt id.

    Only the mean is ever consumed, so degenerate states with ``alpha == 0`` or
    ``beta == 0`` are allowed as long as ``alpha + beta > 0``.
    """

    def __init__(self):
        self.alpha: dict[int, float] = {}
        self.beta: dict[int, float] = {}
        self.prev_mean: dict[int, float] = {}

    @classmethod
    def from_initial_rewards(cls, initial_rewards: dict[int, float], eta_min: float) -> "BetaTracker":
        """Seed each prompt from its pre-training success estimate v0.

        alpha0 = v0 / (1 - eta_min), beta0 = (1 - v0) / (1 - eta_min), which is
        the stationary total count of a stream discounted at ``eta_min``.
        """
        if not 0.0 < eta_min < 1.0:
            raise ConfigError("must lie in (0, 1)", "eta_min")
        tracker = cls()
        scale = 1.0 / (1.0 - eta_min)
        for pid, v0 in initial_rewards.items():
            v0 = float(v0)
            if not 0.0 <= v0 <= 1.0:
                raise UsageError(f"initial reward for prompt {pid} outside [0, 1]: {v0}")
            tracker.alpha[pid] = v0 * scale
            tracker.beta[pid] = (1.0 - v0) * scale
            tracker.prev_mean[pid] = v0
        return tracker

    def _check(self, pid: int) -> None:
        if pid not in self.alpha:
            raise UsageError(f"prompt {pid} has no baseline state")

    def mean(self, pid: int) -> float:
        self._check(pid)
        a, b = self.alpha[pid], self.beta[pid]
        return a / (a + b)

    def previous_mean(self, pid: int) -> float:
        self._check(pid)
        return self.prev_mean[pid]

    def update(self, pid: int, reward: int, eta: float) -> None:
        self._check(pid)
        if reward not in (0, 1):
            raise UsageError(f"reward must be 0 or 1, got {reward!r}")
        if not 0.0 < eta <= 1.0:
            raise UsageError(f"discount factor must lie in (0, 1], got {eta}")
        self.prev_mean[pid] = self.mean(pid)
        self.alpha[pid] = eta * self.alpha[pid] + reward
        self.beta[pid] = eta * self.beta[pid] + (1 - reward)

    def __contains__(self, pid) -> bool:
        return pid in self.alpha

    def __len__(self) -> int:
        return len(self.alpha)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BetaTracker):
            return NotImplemented
        return (self.alpha, self.beta, self.prev_mean) == (other.alpha, other.beta, other.prev_mean)

    def to_text(self) -> str:
        lines = [
            f"{pid} {self.alpha[pid].hex()} {self.beta[pid].hex()} {self.prev_mean[pid].hex()}"
            for pid in sorted(self.alpha)
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BetaTracker":
        tracker = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            pid, a, b, m = line.split()
            pid = int(pid)
            tracker.alpha[pid] = float.fromhex(a)
            tracker.beta[pid] = float.fromhex(b)
            tracker.prev_mean[pid] = float.fromhex(m)
        return tracker

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "BetaTracker":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def init_tracker(initial_rewards: dict[int, float], eta_min: float) -> BetaTracker:
    return BetaTracker.from_initial_rewards(initial_rewards, eta_min)
