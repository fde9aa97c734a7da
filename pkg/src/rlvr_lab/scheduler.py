"""Adaptive discount factor driven by a sliding window of policy-change KL."""

from __future__ import annotations

from collections import deque

from .errors import ConfigError, UsageError


class DiscountScheduler:
    """Linear decay/growth of the Beta discount factor around a KL target.

    With window mean ``k`` and target ``k*``:

    * ``k > k*``:  tau = min(k / k*, 1),  eta = eta_max - tau * (eta_max - eta_min)
    * ``k <= k*``: tau = k / k*,          eta = eta_min + tau * (eta_max - eta_min)

    Before the first KL is recorded, eta is the midpoint of the range.
    """

    def __init__(self, eta_min: float, eta_max: float, window: int, kl_target: float):
        if not 0.0 < eta_min <= eta_max <= 1.0:
            raise ConfigError("need 0 < eta_min <= eta_max <= 1", "eta_min/eta_max")
        if window < 1:
            raise ConfigError("must be >= 1", "window")
        if not kl_target > 0.0:
            raise ConfigError("must be > 0", "kl_target")
        self.eta_min = float(eta_min)
        self.eta_max = float(eta_max)
        self.window_size = int(window)
        self.kl_target = float(kl_target)
        self.window: deque[float] = deque(maxlen=self.window_size)
        self.eta = 0.5 * (self.eta_min + self.eta_max)

    @property
    def eta0(self) -> float:
        return 0.5 * (self.eta_min + self.eta_max)

    def window_mean(self) -> float | None:
        if not self.window:
            return None
        return sum(self.window) / len(self.window)

    def eta_for(self, kl_mean: float) -> float:
        span = self.eta_max - self.eta_min
        if kl_mean > self.kl_target:
            tau = min(kl_mean / self.kl_target, 1.0)
            eta = self.eta_max - tau * span
        else:
            tau = kl_mean / self.kl_target
            eta = self.eta_min + tau * span
        return min(max(eta, self.eta_min), self.eta_max)

    def current_eta(self) -> float:
        mean = self.window_mean()
        return self.eta0 if mean is None else self.eta_for(mean)

    def record_kl(self, kl: float) -> float:
        kl = float(kl)
        if not kl >= 0.0 or kl == float("inf"):
            raise UsageError(f"KL must be finite and >= 0, got {kl}")
        self.window.append(kl)
        self.eta = self.current_eta()
        return self.eta

    def state_dict(self) -> dict:
        return {
            "eta_min": self.eta_min,
            "eta_max": self.eta_max,
            "window_size": self.window_size,
            "kl_target": self.kl_target,
            "window": list(self.window),
            "eta": self.eta,
        }

    @classmethod
    def from_state(cls, state: dict) -> "DiscountScheduler":
        sched = cls(state["eta_min"], state["eta_max"], state["window_size"], state["kl_target"])
        sched.window.extend(state["window"])
        sched.eta = state["eta"]
        return sched
