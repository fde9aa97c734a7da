"""Training loop for group-based and group-free RLVR estimators.

One ``Trainer`` owns the policy, the frozen reference policy, the optimizer,
the per-prompt Beta baseline and the discount scheduler. Rollout collection
may fan out over threads; everything after it runs serially. All random
draws come from streams keyed by (seed, purpose, step, prompt, rollout) so a
run is a pure function of its config.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import advantage as adv
from . import policy as pol
from .baseline import BetaTracker
from .env import TaskConfig, TaskSuite, make_task_suite, split
from .errors import ConfigError, NumericalAbort
from .scheduler import DiscountScheduler

log = logging.getLogger(__name__)

GROUP_ALGOS = ("grpo", "rloo")
SINGLE_ALGOS = ("reinforce_pp", "mvsr", "mssr")
ALGOS = GROUP_ALGOS + SINGLE_ALGOS
BETA_ALGOS = ("mvsr", "mssr")

METRIC_FIELDS = (
    "step", "train_acc", "val_acc", "mean_entropy", "mean_kl_step", "eta",
    "mean_abs_advantage", "mean_bonus", "loss", "clip_fraction",
)

# stream tags
_BATCH_TAG = 301
_ROLLOUT_TAG = 302
_INIT_TAG = 303
_EVAL_TAG = 304


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "mssr"
    prompts_per_step: int = 256
    rollouts_per_prompt: int = 1
    steps: int = 300
    epochs_per_batch: int = 1
    clip_eps: float = 0.2
    kl_ref_coef: float = 0.01
    entropy_loss_coef: float = 0.0
    crossmodal_coef: float = 0.0
    gamma: float = 0.4
    lam: float = 2.0
    guarded_bonus: bool = False
    normalize_advantages: bool = True
    eta_min: float = 0.875
    eta_max: float = 0.96
    window: int = 20
    kl_target: float = 0.01
    init_rollouts: int = 4
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    eps_std: float = adv.EPS_STD
    seed: int = 7
    eval_every: int = 1
    val_fraction: float = 0.2
    d_emb: int = 8
    d_hid: int = 16
    init_scale: float = 0.1
    workers: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)

    @property
    def rollouts_per_step(self) -> int:
        return self.prompts_per_step * self.rollouts_per_prompt

    def task_for_run(self) -> TaskConfig:
        return self.task if self.task.seed is not None else dataclasses.replace(self.task, seed=self.seed)

    def dims(self) -> pol.PolicyDims:
        t = self.task
        return pol.PolicyDims(t.vocab_size, t.max_len, t.d_ctx, t.n_questions, self.d_emb, self.d_hid)

    def validate(self, prefix: str = "") -> None:
        def key(name):
            return f"{prefix}{name}"

        if self.algo not in ALGOS:
            raise ConfigError(f"must be one of {ALGOS}", key("algo"))
        if self.algo in GROUP_ALGOS and self.rollouts_per_prompt < 2:
            raise ConfigError("group methods need rollouts_per_prompt >= 2", key("rollouts_per_prompt"))
        if self.algo in SINGLE_ALGOS and self.rollouts_per_prompt != 1:
            raise ConfigError("group-free methods use exactly one rollout per prompt", key("rollouts_per_prompt"))
        positive_ints = ("prompts_per_step", "steps", "epochs_per_batch", "window",
                         "init_rollouts", "eval_every", "d_emb", "d_hid", "workers")
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", key(name))
        if self.algo in ("reinforce_pp", "mvsr", "mssr") and self.prompts_per_step < 2:
            raise ConfigError("batch normalization needs >= 2 prompts per step", key("prompts_per_step"))
        if not self.gamma > 0:
            raise ConfigError("must be > 0", key("gamma"))
        for name in ("lam", "kl_ref_coef", "entropy_loss_coef", "crossmodal_coef",
                     "weight_decay", "init_scale", "eps_std"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", key(name))
        if not 0 < self.clip_eps < 1:
            raise ConfigError("must lie in (0, 1)", key("clip_eps"))
        if not 0 < self.eta_min < 1:
            raise ConfigError("must lie in (0, 1)", key("eta_min"))
        if not self.eta_min <= self.eta_max <= 1:
            raise ConfigError("must lie in [eta_min, 1]", key("eta_max"))
        if not self.kl_target > 0:
            raise ConfigError("must be > 0", key("kl_target"))
        if not self.lr > 0:
            raise ConfigError("must be > 0", key("lr"))
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError("must lie in [0, 1)", key(name))
        if not 0 < self.val_fraction < 1:
            raise ConfigError("must lie in (0, 1)", key("val_fraction"))
        self.task.validate(key("task"))
        n_train = self.task.count - max(1, round(self.task.count * self.val_fraction))
        if self.prompts_per_step > n_train:
            raise ConfigError(f"exceeds the {n_train} training prompts", key("prompts_per_step"))


@dataclass
class MetricsRecord:
    step: int
    train_acc: float
    val_acc: float
    mean_entropy: float
    mean_kl_step: float
    eta: float
    mean_abs_advantage: float
    mean_bonus: float
    loss: float
    clip_fraction: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS[1:]]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adamw_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> np.ndarray:
    """One AdamW step; decoupled decay is applied before the moment update.

    Mutates ``state`` and returns the new parameter vector.
    """
    if params.shape != grad.shape or state.m.shape != grad.shape:
        raise ConfigError("optimizer shape mismatch")
    state.t += 1
    new = params * (1.0 - lr * weight_decay)
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return new - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# batch objective


@dataclass
class StepBatch:
    """Everything the loss needs about one step's rollouts, as arrays."""

    prompt_ids: np.ndarray     # (B,)
    contexts: np.ndarray       # (B, d_ctx)
    qids: np.ndarray           # (B,)
    tokens: np.ndarray         # (B, T)
    logprobs_old: np.ndarray   # (B, T)
    entropies_old: np.ndarray  # (B, T)
    rewards: np.ndarray        # (B,)
    token_adv: np.ndarray | None = None  # (B, T), shaped advantages


def _active_mask(ratio: np.ndarray, token_adv: np.ndarray, clip_eps: float) -> np.ndarray:
    """Tokens whose unclipped branch carries the gradient of min(rA, clip(r)A)."""
    clipped = ((ratio > 1.0 + clip_eps) & (token_adv > 0)) | ((ratio < 1.0 - clip_eps) & (token_adv < 0))
    return ~clipped


def surrogate_terms(ratio, token_adv, clip_eps):
    """Per-token min(rA, clip(r, 1-eps, 1+eps) A) and the active-gradient mask."""
    unclipped = ratio * token_adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * token_adv
    return np.minimum(unclipped, clipped), _active_mask(ratio, token_adv, clip_eps)


def loss_and_grad(params: pol.PolicyParams, batch: StepBatch, cfg: TrainConfig,
                  ref_params: pol.PolicyParams | None = None,
                  anchor_params: pol.PolicyParams | None = None):
    """Scalar loss to minimize and its exact gradient.

    loss = -mean_b mean_t min(rA, clip(r)A)
           + kl_ref_coef * mean_b KL(pi || pi_ref)             (unless cross-modal is on)
           + crossmodal_coef * mean_b KL(pi(.|x) || sg pi(.|masked x))
           - entropy_loss_coef * mean_b H

    ``anchor_params`` is the stop-gradient copy used for the masked branch;
    it defaults to ``params``.
    """
    B, T = batch.tokens.shape
    scale = 1.0 / (B * T)
    logq = pol.forward(params, batch.contexts, batch.qids, batch.tokens)
    lp_new = np.take_along_axis(logq, batch.tokens[..., None], -1)[..., 0]
    ratio = np.exp(lp_new - batch.logprobs_old)
    surr, active = surrogate_terms(ratio, batch.token_adv, cfg.clip_eps)
    loss = -surr.sum() * scale
    weights = -scale * batch.token_adv * ratio * active
    _, grad = pol.weighted_logprob_grad(params, batch.contexts, batch.qids, batch.tokens, weights)
    info = {"clip_fraction": float(1.0 - active.mean()), "surrogate": float(surr.sum() * scale)}

    if cfg.crossmodal_coef > 0:
        anchor = params if anchor_params is None else anchor_params
        masked = np.zeros_like(batch.contexts)
        kl, g = pol.kl_grad(params, anchor, batch.contexts, batch.qids, batch.tokens, masked)
        loss += cfg.crossmodal_coef * kl.mean()
        grad = grad + (cfg.crossmodal_coef / B) * g
        info["kl_crossmodal"] = float(kl.mean())
    elif cfg.kl_ref_coef > 0 and ref_params is not None:
        kl, g = pol.kl_grad(params, ref_params, batch.contexts, batch.qids, batch.tokens)
        loss += cfg.kl_ref_coef * kl.mean()
        grad = grad + (cfg.kl_ref_coef / B) * g
        info["kl_ref"] = float(kl.mean())
    if cfg.entropy_loss_coef > 0:
        H, g = pol.entropy_grad(params, batch.contexts, batch.qids, batch.tokens)
        loss -= cfg.entropy_loss_coef * H.mean()
        grad = grad - (cfg.entropy_loss_coef / B) * g
    return float(loss), grad, info


def measure_step_kl(old_params, new_params, contexts, qids, tokens) -> float:
    """Mean exact KL(pi_old || pi_new) over every visited (prompt, prefix) pair."""
    return float(pol.kl_value(old_params, new_params, contexts, qids, tokens).mean())


def greedy_decode(params: pol.PolicyParams, contexts, qids) -> np.ndarray:
    """Argmax decoding; ties go to the lowest token index."""
    contexts = np.asarray(contexts, dtype=np.float64)
    qids = np.asarray(qids, dtype=np.int64)
    B, T = contexts.shape[0], params.dims.max_len
    views = params.views
    tokens = np.zeros((B, T), dtype=np.int64)
    for s in range(0, B, pol.BLOCK):
        sl = slice(s, s + pol.BLOCK)
        ctx_term = contexts[sl] @ views["ctx_proj"] + views["b_hid"]
        q_term = views["q_emb"][qids[sl]]
        prefix_sum = np.zeros_like(q_term)
        for t in range(T):
            _, _, logq = pol._position(views, ctx_term, q_term, prefix_sum, t)
            tok = np.argmax(logq, axis=-1)
            tokens[sl, t] = tok
            prefix_sum = prefix_sum + views["tok_emb"][tok]
    return tokens


def evaluate(params: pol.PolicyParams, suite: TaskSuite, greedy: bool = True, seed: int = 0) -> float:
    """Validation accuracy: mean exact-match reward over the suite."""
    if len(suite) == 0:
        raise ConfigError("validation suite is empty")
    if greedy:
        tokens = greedy_decode(params, suite.contexts, suite.question_ids)
    else:
        u = np.random.default_rng([seed, _EVAL_TAG]).random((len(suite), params.dims.max_len))
        tokens, _, _ = pol.sample_batch(params, suite.contexts, suite.question_ids, u)
    return float(np.mean(tokens[:, -1] == suite.answers))


# ---------------------------------------------------------------------------
# trainer


def rollout_uniforms(seed: int, tag: int, step: int, prompt_ids, group: int, T: int) -> np.ndarray:
    """Per-rollout uniforms from independent (seed, tag, step, prompt, k) streams."""
    rows = [
        np.random.default_rng([seed, tag, step, int(pid), k]).random(T)
        for pid in prompt_ids for k in range(group)
    ]
    return np.array(rows).reshape(-1, T)


class Trainer:
    def __init__(self, cfg: TrainConfig, train: TaskSuite | None = None, val: TaskSuite | None = None):
        cfg.validate()
        self.cfg = cfg
        if train is None or val is None:
            suite = make_task_suite(cfg.task_for_run())
            train, val = split(suite, cfg.val_fraction, cfg.task_for_run().seed)
        self.train_suite = train
        self.val_suite = val
        self.dims = cfg.dims()
        self.params = pol.init_params(self.dims, cfg.seed, cfg.init_scale)
        self.ref_params = self.params
        self.opt = AdamState.zeros(self.dims.size)
        self.scheduler = DiscountScheduler(cfg.eta_min, cfg.eta_max, cfg.window, cfg.kl_target)
        self.tracker: BetaTracker | None = None
        self.step = 0
        self.last_val = float("nan")
        if cfg.algo in BETA_ALGOS:
            self.tracker = BetaTracker.from_initial_rewards(self.initial_success(), cfg.eta_min)

    # -- rollouts ---------------------------------------------------------

    def initial_success(self) -> dict[int, float]:
        """Success rate of the initial policy per train prompt over ``init_rollouts`` samples."""
        suite, k = self.train_suite, self.cfg.init_rollouts
        ids = np.arange(len(suite))
        u = rollout_uniforms(self.cfg.seed, _INIT_TAG, 0, ids, k, self.dims.max_len)
        ctx = np.repeat(suite.contexts, k, axis=0)
        qids = np.repeat(suite.question_ids, k)
        tokens, _, _ = pol.sample_batch(self.params, ctx, qids, u)
        hits = (tokens[:, -1] == np.repeat(suite.answers, k)).reshape(-1, k)
        return {int(i): float(h.mean()) for i, h in zip(ids, hits)}

    def batch_prompt_ids(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, _BATCH_TAG, step])
        ids = rng.choice(len(self.train_suite), size=self.cfg.prompts_per_step, replace=False)
        return np.sort(ids)

    def collect(self, step: int, prompt_ids: np.ndarray) -> StepBatch:
        G = self.cfg.rollouts_per_prompt
        suite = self.train_suite
        rep_ids = np.repeat(prompt_ids, G)
        ctx = suite.contexts[rep_ids]
        qids = suite.question_ids[rep_ids]
        u = rollout_uniforms(self.cfg.seed, _ROLLOUT_TAG, step, prompt_ids, G, self.dims.max_len)
        B = rep_ids.shape[0]
        workers = self.cfg.workers
        if workers == 1:
            tokens, lps, ents = pol.sample_batch(self.params, ctx, qids, u)
        else:
            # chunk edges on BLOCK multiples so the arithmetic matches the serial path
            n_blocks = -(-B // pol.BLOCK)
            per = -(-n_blocks // workers) * pol.BLOCK
            chunks = [slice(s, s + per) for s in range(0, B, per)]
            with ThreadPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(lambda sl: pol.sample_batch(self.params, ctx[sl], qids[sl], u[sl]), chunks))
            tokens = np.concatenate([p[0] for p in parts])
            lps = np.concatenate([p[1] for p in parts])
            ents = np.concatenate([p[2] for p in parts])
        rewards = (tokens[:, -1] == suite.answers[rep_ids]).astype(np.int64)
        return StepBatch(rep_ids, ctx, qids, tokens, lps, ents, rewards)

    # -- advantages -------------------------------------------------------

    def advantages(self, batch: StepBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (sequence advantages, token advantages, bonus)."""
        cfg = self.cfg
        r = batch.rewards.astype(np.float64)
        T = batch.tokens.shape[1]
        if cfg.algo == "grpo":
            seq = adv.grouped(adv.grpo_advantages, r, cfg.rollouts_per_prompt, eps_std=cfg.eps_std)
        elif cfg.algo == "rloo":
            seq = adv.grouped(adv.rloo_advantages, r, cfg.rollouts_per_prompt)
        elif cfg.algo == "reinforce_pp":
            seq = adv.batch_normalize(r, cfg.eps_std) if cfg.normalize_advantages else r - r.mean()
        else:
            raw = np.array([
                adv.single_rollout_advantage(ri, self.tracker.mean(int(pid)))
                for ri, pid in zip(batch.rewards, batch.prompt_ids)
            ])
            seq = adv.batch_normalize(raw, cfg.eps_std) if cfg.normalize_advantages else raw
        token_adv = adv.broadcast_tokens(seq, T)
        bonus = np.zeros_like(token_adv)
        if cfg.algo == "mssr":
            bonus = adv.entropy_bonus(token_adv, batch.entropies_old, cfg.gamma, cfg.lam, cfg.guarded_bonus)
            token_adv = token_adv + bonus
        return seq, token_adv, bonus

    # -- one step ---------------------------------------------------------

    def train_step(self, prompt_ids: np.ndarray | None = None) -> MetricsRecord:
        cfg = self.cfg
        step = self.step
        if prompt_ids is None:
            prompt_ids = self.batch_prompt_ids(step)
        old = self.params
        batch = self.collect(step, prompt_ids)
        seq_adv, token_adv, bonus = self.advantages(batch)
        batch.token_adv = token_adv

        params = old
        first_loss = None
        clip_fracs = []
        for _ in range(cfg.epochs_per_batch):
            loss, grad, info = loss_and_grad(params, batch, cfg, self.ref_params, anchor_params=params)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NumericalAbort(
                    f"non-finite loss/gradient at step {step}",
                    dump={"step": step, "loss": loss, "prompt_ids": prompt_ids.tolist(),
                          "tokens": batch.tokens.tolist(), "rewards": batch.rewards.tolist(),
                          "token_adv": token_adv.tolist()},
                )
            if first_loss is None:
                first_loss = loss
            clip_fracs.append(info["clip_fraction"])
            params = params.replace(adamw_step(self.opt, params.vector, grad, cfg.lr, cfg.beta1,
                                               cfg.beta2, cfg.adam_eps, cfg.weight_decay))
        self.params = params

        step_kl = measure_step_kl(old, params, batch.contexts, batch.qids, batch.tokens)
        eta = self.scheduler.current_eta()
        if self.tracker is not None:
            for pid, r in zip(batch.prompt_ids, batch.rewards):
                self.tracker.update(int(pid), int(r), eta)
        self.scheduler.record_kl(step_kl)

        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            self.last_val = evaluate(params, self.val_suite)
        self.step += 1
        return MetricsRecord(
            step=step,
            train_acc=float(batch.rewards.mean()),
            val_acc=self.last_val,
            mean_entropy=float(batch.entropies_old.mean()),
            mean_kl_step=step_kl,
            eta=eta,
            mean_abs_advantage=float(np.abs(seq_adv).mean()),
            mean_bonus=float(bonus.mean()),
            loss=float(first_loss),
            clip_fraction=float(np.mean(clip_fracs)),
        )

    def run(self, steps: int | None = None, callback=None) -> list[MetricsRecord]:
        end = self.cfg.steps if steps is None else steps
        records = []
        while self.step < end:
            rec = self.train_step()
            records.append(rec)
            if callback is not None:
                callback(rec)
        return records

    # -- checkpoints ------------------------------------------------------

    def save_checkpoint(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        pol.save_params(self.params, d / "params.txt")
        pol.save_params(self.ref_params, d / "ref_params.txt")
        if self.tracker is not None:
            self.tracker.save(d / "tracker.txt")
        state = {
            "step": self.step,
            "last_val": self.last_val,
            "scheduler": self.scheduler.state_dict(),
            "adam": {"t": self.opt.t, "m": [x.hex() for x in self.opt.m.tolist()],
                     "v": [x.hex() for x in self.opt.v.tolist()]},
        }
        (d / "state.json").write_text(json.dumps(state, indent=1), encoding="utf-8")

    @classmethod
    def from_checkpoint(cls, cfg: TrainConfig, directory) -> "Trainer":
        d = Path(directory)
        trainer = cls.__new__(cls)
        cfg.validate()
        trainer.cfg = cfg
        suite = make_task_suite(cfg.task_for_run())
        trainer.train_suite, trainer.val_suite = split(suite, cfg.val_fraction, cfg.task_for_run().seed)
        trainer.dims = cfg.dims()
        trainer.params = pol.load_params(d / "params.txt")
        trainer.ref_params = pol.load_params(d / "ref_params.txt")
        state = json.loads((d / "state.json").read_text(encoding="utf-8"))
        trainer.step = state["step"]
        trainer.last_val = state["last_val"]
        trainer.scheduler = DiscountScheduler.from_state(state["scheduler"])
        a = state["adam"]
        trainer.opt = AdamState(np.array([float.fromhex(x) for x in a["m"]]),
                                np.array([float.fromhex(x) for x in a["v"]]), a["t"])
        trainer.tracker = BetaTracker.load(d / "tracker.txt") if (d / "tracker.txt").exists() else None
        return trainer


def run(cfg: TrainConfig, train: TaskSuite | None = None, val: TaskSuite | None = None):
    """Train from scratch; returns (metrics records, trainer)."""
    trainer = Trainer(cfg, train, val)
    records = trainer.run()
    return records, trainer
