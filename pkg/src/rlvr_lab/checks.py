"""Self-checks behind ``rlvr-lab check``: exact formula values, gradient
agreement with finite differences, enumeration oracles, scheduler bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import advantage as adv
from . import oracle
from . import policy as pol
from .baseline import BetaTracker
from .env import TaskConfig, make_task_suite
from .scheduler import DiscountScheduler
from .trainer import TrainConfig, Trainer, loss_and_grad

FD_STEP = 1e-5
FD_TOL = 1e-4
EXACT_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _close(a, b, tol=EXACT_TOL) -> bool:
    return bool(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))) <= tol)


def formula_checks() -> list[CheckResult]:
    out = []
    t = BetaTracker.from_initial_rewards({0: 0.5}, 0.875)
    out.append(CheckResult("beta init", _close([t.alpha[0], t.beta[0]], [4.0, 4.0]),
                           f"alpha0={t.alpha[0]}, beta0={t.beta[0]}"))
    t = BetaTracker()
    t.alpha[0], t.beta[0], t.prev_mean[0] = 2.0, 3.0, 0.4
    t.update(0, 1, 0.9)
    out.append(CheckResult("beta update", _close([t.alpha[0], t.beta[0]], [2.8, 2.7]),
                           f"alpha={t.alpha[0]}, beta={t.beta[0]}"))
    s = DiscountScheduler(0.875, 0.96, 20, 0.01)
    vals = [s.eta0, s.eta_for(0.02), s.eta_for(0.005)]
    out.append(CheckResult("scheduler eta", _close(vals, [0.9175, 0.875, 0.9175]),
                           f"eta0={vals[0]}, eta(0.02)={vals[1]}, eta(0.005)={vals[2]}"))
    shaped = adv.entropy_shape(np.array([0.5, -0.2]), np.array([2.0, 0.1]), 0.4, 2.0)
    out.append(CheckResult("entropy shaping", _close(shaped, [1.75, 0.0]), f"shaped={shaped.tolist()}"))
    g = adv.grpo_advantages([1, 1, 0, 0])
    g0 = adv.grpo_advantages([1, 1, 1, 1])
    out.append(CheckResult("grpo advantages",
                           _close(g, [1, 1, -1, -1]) and _close(g0, [0, 0, 0, 0]),
                           f"{g.tolist()}, all-equal -> {g0.tolist()}"))
    r = adv.rloo_advantages([1, 0, 0, 0])
    out.append(CheckResult("rloo advantages", _close(r, [1, -1 / 3, -1 / 3, -1 / 3]), f"{r.tolist()}"))
    return out


def miniature_trainer(seed: int, **overrides) -> Trainer:
    """V=3, T=2, four prompts per step."""
    task = TaskConfig(vocab_size=3, max_len=2, d_ctx=3, n_questions=2, count=6, difficulty="easy")
    cfg = TrainConfig(
        algo=overrides.pop("algo", "mssr"), prompts_per_step=4, rollouts_per_prompt=1, steps=2,
        d_emb=3, d_hid=4, init_scale=0.8, seed=seed, task=task, init_rollouts=1, **overrides,
    )
    return Trainer(cfg)


def full_loss_fd_error(seed: int, **overrides) -> float:
    """Relative error of the train-step gradient vs central differences at the snapshot."""
    trainer = miniature_trainer(seed, **overrides)
    ref = pol.init_params(trainer.dims, seed + 1000, 0.8)  # distinct from the snapshot so KL is non-trivial
    trainer.ref_params = ref
    batch = trainer.collect(0, trainer.batch_prompt_ids(0))
    _, batch.token_adv, _ = trainer.advantages(batch)
    snap = trainer.params
    _, grad, _ = loss_and_grad(snap, batch, trainer.cfg, ref, anchor_params=snap)

    def scalar(x):
        return loss_and_grad(snap.replace(x), batch, trainer.cfg, ref, anchor_params=snap)[0]

    numeric = oracle.finite_diff_grad(scalar, snap.vector, FD_STEP)
    return oracle.relative_error(grad, numeric)


def gradient_checks(seeds=range(5)) -> list[CheckResult]:
    dims = pol.PolicyDims(vocab_size=3, max_len=2, d_ctx=3, n_questions=2, d_emb=3, d_hid=4)
    worst = {"weighted logprob": 0.0, "kl": 0.0, "entropy": 0.0,
             "train-step loss (ref KL + entropy)": 0.0, "train-step loss (cross-modal)": 0.0}
    for seed in seeds:
        rng = np.random.default_rng([seed, 9])
        p = pol.init_params(dims, seed, 0.8)
        q = pol.init_params(dims, seed + 100, 0.8)
        ctx = rng.standard_normal((4, dims.d_ctx))
        qids = rng.integers(0, dims.n_questions, 4)
        tokens = rng.integers(0, dims.vocab_size, (4, dims.max_len))
        w = rng.standard_normal((4, dims.max_len))

        def fd(fn):
            return oracle.finite_diff_grad(lambda x: fn(p.replace(x)).sum(), p.vector, FD_STEP)

        g = pol.weighted_logprob_grad(p, ctx, qids, tokens, w)[1]
        n = fd(lambda pp: pol.weighted_logprob_grad(pp, ctx, qids, tokens, w)[0])
        worst["weighted logprob"] = max(worst["weighted logprob"], oracle.relative_error(g, n))
        g = pol.kl_grad(p, q, ctx, qids, tokens)[1]
        n = fd(lambda pp: pol.kl_grad(pp, q, ctx, qids, tokens)[0])
        worst["kl"] = max(worst["kl"], oracle.relative_error(g, n))
        g = pol.entropy_grad(p, ctx, qids, tokens)[1]
        n = fd(lambda pp: pol.entropy_grad(pp, ctx, qids, tokens)[0])
        worst["entropy"] = max(worst["entropy"], oracle.relative_error(g, n))
        worst["train-step loss (ref KL + entropy)"] = max(
            worst["train-step loss (ref KL + entropy)"],
            full_loss_fd_error(seed, kl_ref_coef=0.05, entropy_loss_coef=0.03))
        worst["train-step loss (cross-modal)"] = max(
            worst["train-step loss (cross-modal)"],
            full_loss_fd_error(seed, crossmodal_coef=0.05, entropy_loss_coef=0.03))
    return [CheckResult(f"fd gradient: {k}", v < FD_TOL, f"max rel err {v:.2e} (< {FD_TOL:g})")
            for k, v in worst.items()]


def oracle_suite(seed: int = 0, count: int = 3):
    task = TaskConfig(vocab_size=3, max_len=2, d_ctx=3, n_questions=2, count=count, difficulty="easy", seed=seed)
    suite = make_task_suite(task)
    dims = pol.PolicyDims(3, 2, 3, 2, d_emb=2, d_hid=3)
    return suite, pol.init_params(dims, seed, 0.8)


def oracle_checks(samples: int = 50_000, seed: int = 0) -> list[CheckResult]:
    suite, params = oracle_suite(seed)
    out = []
    worst = 0.0
    for prompt in suite.prompts:
        rep = oracle.enumerate_policy_gradient(params, prompt, 2, 3)
        numeric = oracle.finite_diff_grad(
            lambda x: oracle.enumerate_expected_reward(params.replace(x), prompt, 2, 3), params.vector, FD_STEP)
        worst = max(worst, oracle.relative_error(rep.gradient, numeric))
    out.append(CheckResult("enumerated grad J vs finite differences", worst < FD_TOL, f"max rel err {worst:.2e}"))
    report = oracle.estimator_bias_check("reinforce", params, suite, samples, seed, baseline=0.5)
    out.append(CheckResult("REINFORCE fixed-baseline unbiasedness", report.passed,
                           f"max |z| = {report.max_abs_z:.2f} over {params.dims.size} coords, {samples} samples"))
    grads = [oracle.suite_policy_gradient(params, suite, b)[1] for b in (0.0, 0.5, 1.0)]
    spread = max(float(np.max(np.abs(g - grads[0]))) for g in grads)
    out.append(CheckResult("baseline invariance b in {0, 0.5, 1}", spread < 1e-12, f"max diff {spread:.1e}"))
    return out


def scheduler_checks(streams: int = 10_000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 77])
    lo, hi, target = 0.875, 0.96, 0.01
    in_bounds = True
    above_ok = True
    for _ in range(streams):
        s = DiscountScheduler(lo, hi, int(rng.integers(1, 41)), target)
        scale = 10 ** rng.uniform(-4, -1)
        for kl in rng.exponential(scale, size=int(rng.integers(1, 30))):
            eta = s.record_kl(kl)
            in_bounds &= lo <= eta <= hi
            if s.window_mean() > target:
                above_ok &= eta == lo
    grid = np.linspace(0.0, target, 1001)
    etas = np.array([DiscountScheduler(lo, hi, 20, target).eta_for(k) for k in grid])
    monotone = bool(np.all(np.diff(etas) >= 0))
    return [
        CheckResult("eta within [eta_min, eta_max]", bool(in_bounds), f"{streams} random KL streams"),
        CheckResult("eta = eta_min above target", bool(above_ok), "every window mean > KL_target"),
        CheckResult("eta nondecreasing on [0, KL_target]", monotone, "1001-point grid"),
    ]


def run_all(samples: int = 50_000) -> list[CheckResult]:
    return formula_checks() + gradient_checks() + oracle_checks(samples) + scheduler_checks()
