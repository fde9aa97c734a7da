import dataclasses
import math

import numpy as np
import pytest

from conftest import small_config
from rlvr_lab import policy as pol
from rlvr_lab import trainer as tr
from rlvr_lab.env import Prompt, TaskConfig, TaskSuite
from rlvr_lab.errors import ConfigError, NumericalAbort
from rlvr_lab.trainer import AdamState, Trainer, adamw_step, evaluate, loss_and_grad


# -- optimizer ---------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_identity():
    x = np.array([0.5, -1.0, 2.0])
    out = adamw_step(AdamState.zeros(3), x, np.zeros(3), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(out, x)


def test_adamw_first_step_hand_trace():
    # after bias correction m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
    x = np.array([1.0, -2.0])
    g = np.array([0.5, -0.25])
    out = adamw_step(AdamState.zeros(2), x, g, lr=0.01, eps=1e-8, weight_decay=0.0)
    np.testing.assert_allclose(out, x - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adamw_decay_only():
    x = np.array([1.0, -3.0])
    out = adamw_step(AdamState.zeros(2), x, np.zeros(2), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(out, x * 0.95, atol=1e-15)


def test_adamw_shape_mismatch():
    with pytest.raises(ConfigError):
        adamw_step(AdamState.zeros(3), np.zeros(3), np.zeros(2), lr=0.1)


# -- surrogate ---------------------------------------------------------------

def test_surrogate_clipping_cases():
    ratio = np.array([1.5, 1.5, 0.5, 0.5, 1.0])
    a = np.array([1.0, -1.0, -1.0, 1.0, 2.0])
    surr, active = tr.surrogate_terms(ratio, a, 0.2)
    np.testing.assert_allclose(surr, [1.2, -1.5, -0.8, 0.5, 2.0])
    assert active.tolist() == [False, True, False, True, True]


def _batch(trainer, step=0):
    batch = trainer.collect(step, trainer.batch_prompt_ids(step))
    _, batch.token_adv, _ = trainer.advantages(batch)
    return batch


def test_first_epoch_ratio_is_one():
    trainer = Trainer(small_config())
    batch = _batch(trainer)
    logq = pol.forward(trainer.params, batch.contexts, batch.qids, batch.tokens)
    lp = np.take_along_axis(logq, batch.tokens[..., None], -1)[..., 0]
    np.testing.assert_array_equal(lp, batch.logprobs_old)
    _, _, info = loss_and_grad(trainer.params, batch, trainer.cfg, trainer.ref_params)
    assert info["clip_fraction"] == 0.0


def test_clipped_tokens_contribute_no_policy_gradient():
    cfg = small_config(kl_ref_coef=0.0)
    trainer = Trainer(cfg)
    batch = _batch(trainer)
    # push every ratio to 1.5 with positive advantages: all tokens clipped
    batch.logprobs_old = batch.logprobs_old - math.log(1.5)
    batch.token_adv = np.abs(batch.token_adv) + 0.1
    _, grad, info = loss_and_grad(trainer.params, batch, cfg)
    assert info["clip_fraction"] == 1.0
    assert np.all(grad == 0)


def test_loss_gradient_matches_finite_differences():
    from rlvr_lab.checks import full_loss_fd_error
    assert full_loss_fd_error(0, kl_ref_coef=0.05, entropy_loss_coef=0.03) < 1e-4
    assert full_loss_fd_error(1, crossmodal_coef=0.05) < 1e-4


def test_all_equal_group_rewards_leave_only_kl():
    cfg = small_config(algo="grpo", prompts_per_step=4, rollouts_per_prompt=8)
    trainer = Trainer(cfg)
    trainer.ref_params = pol.init_params(trainer.dims, 99, 0.3)
    batch = trainer.collect(0, trainer.batch_prompt_ids(0))
    batch.rewards = np.ones_like(batch.rewards)
    seq, batch.token_adv, _ = trainer.advantages(batch)
    assert np.all(seq == 0) and np.all(batch.token_adv == 0)
    _, grad, _ = loss_and_grad(trainer.params, batch, cfg, trainer.ref_params)
    _, kl_g = pol.kl_grad(trainer.params, trainer.ref_params, batch.contexts, batch.qids, batch.tokens)
    np.testing.assert_allclose(grad, cfg.kl_ref_coef / len(batch.rewards) * kl_g, atol=1e-15)


# -- advantage pipeline ------------------------------------------------------

def test_mssr_zero_lambda_matches_mvsr_advantages():
    a = Trainer(small_config(algo="mvsr"))
    b = Trainer(small_config(algo="mssr", lam=0.0))
    ba, bb = _batch(a), _batch(b)
    np.testing.assert_array_equal(ba.token_adv, bb.token_adv)


def test_normalization_changes_advantages_but_zero_lambda_does_not():
    on = Trainer(small_config(algo="mssr", lam=0.0))
    off = Trainer(small_config(algo="mssr", lam=0.0, normalize_advantages=False))
    s_on, t_on, _ = on.advantages(on.collect(0, on.batch_prompt_ids(0)))
    s_off, _, _ = off.advantages(off.collect(0, off.batch_prompt_ids(0)))
    assert not np.allclose(s_on, s_off)
    assert abs(s_on.mean()) < 1e-12 and abs(s_on.std() - 1) < 1e-9
    np.testing.assert_array_equal(t_on, np.repeat(s_on[:, None], t_on.shape[1], axis=1))


def test_mvsr_advantage_uses_tracker_mean_before_update():
    trainer = Trainer(small_config(algo="mvsr", normalize_advantages=False))
    batch = trainer.collect(0, trainer.batch_prompt_ids(0))
    expected = batch.rewards - np.array([trainer.tracker.mean(int(p)) for p in batch.prompt_ids])
    seq, _, _ = trainer.advantages(batch)
    np.testing.assert_allclose(seq, expected, atol=1e-15)


def test_bonus_uses_sampling_entropies():
    trainer = Trainer(small_config(algo="mssr"))
    batch = trainer.collect(0, trainer.batch_prompt_ids(0))
    seq, token_adv, bonus = trainer.advantages(batch)
    ref = np.minimum(np.abs(seq)[:, None] / 0.4, 2.0 * batch.entropies_old)
    np.testing.assert_allclose(bonus, ref, atol=1e-15)
    np.testing.assert_allclose(token_adv, seq[:, None] + ref, atol=1e-15)


# -- step mechanics ----------------------------------------------------------

def test_step_updates_tracker_with_pre_step_eta():
    trainer = Trainer(small_config(algo="mvsr"))
    ids = trainer.batch_prompt_ids(0)
    pid = int(ids[0])
    a0, b0 = trainer.tracker.alpha[pid], trainer.tracker.beta[pid]
    eta0 = trainer.scheduler.current_eta()
    rec = trainer.train_step()
    assert rec.eta == eta0
    total = trainer.tracker.alpha[pid] + trainer.tracker.beta[pid]
    assert total == pytest.approx(eta0 * (a0 + b0) + 1)
    assert list(trainer.scheduler.window) == [rec.mean_kl_step]


def test_untouched_prompts_keep_tracker_state():
    trainer = Trainer(small_config(algo="mvsr"))
    ids = set(trainer.batch_prompt_ids(0).tolist())
    others = [p for p in range(len(trainer.train_suite)) if p not in ids]
    before = {p: (trainer.tracker.alpha[p], trainer.tracker.beta[p]) for p in others}
    trainer.train_step()
    assert before == {p: (trainer.tracker.alpha[p], trainer.tracker.beta[p]) for p in others}


def test_step_kl_zero_for_identical_params():
    trainer = Trainer(small_config())
    b = _batch(trainer)
    assert tr.measure_step_kl(trainer.params, trainer.params, b.contexts, b.qids, b.tokens) == 0.0


def test_small_kl_gradient_steps_reduce_kl():
    cfg = small_config(kl_ref_coef=1.0, lr=1e-3, weight_decay=0.0)
    trainer = Trainer(cfg)
    ref = pol.init_params(trainer.dims, 42, 0.5)
    b = _batch(trainer)
    b.token_adv = np.zeros_like(b.token_adv)
    params, opt = trainer.params, AdamState.zeros(trainer.dims.size)
    kl0 = loss_and_grad(params, b, cfg, ref)[0]
    for _ in range(20):
        _, g, _ = loss_and_grad(params, b, cfg, ref)
        params = params.replace(adamw_step(opt, params.vector, g, cfg.lr, weight_decay=0.0))
    assert loss_and_grad(params, b, cfg, ref)[0] < kl0


def test_run_records_and_budget():
    records, trainer = tr.run(small_config(steps=4))
    assert [r.step for r in records] == [0, 1, 2, 3]
    for r in records:
        assert 0 <= r.train_acc <= 1 and 0 <= r.val_acc <= 1
        assert 0.875 <= r.eta <= 0.96
        assert r.mean_kl_step >= 0 and 0 <= r.clip_fraction <= 1
        assert all(math.isfinite(getattr(r, f)) for f in tr.METRIC_FIELDS)
    assert trainer.step == 4


def test_val_acc_carried_between_evals():
    # evals at steps 0, 3 and the final step 5
    records, _ = tr.run(small_config(steps=6, eval_every=3))
    assert records[1].val_acc == records[0].val_acc == records[2].val_acc
    assert records[4].val_acc == records[3].val_acc


def test_budget_parity_between_group_and_single():
    g = small_config(algo="grpo", prompts_per_step=4, rollouts_per_prompt=8)
    s = small_config(algo="mssr", prompts_per_step=32)
    assert g.rollouts_per_step == s.rollouts_per_step == 32
    assert Trainer(g).collect(0, Trainer(g).batch_prompt_ids(0)).tokens.shape[0] == 32


@pytest.mark.parametrize("algo", tr.ALGOS)
def test_every_algorithm_runs(algo):
    if algo in tr.GROUP_ALGOS:
        cfg = small_config(algo=algo, prompts_per_step=4, rollouts_per_prompt=8, steps=2)
    else:
        cfg = small_config(algo=algo, steps=2)
    records, _ = tr.run(cfg)
    assert len(records) == 2


@pytest.mark.parametrize("overrides", [
    {"algo": "grpo"},                                # group size 1
    {"algo": "mssr", "rollouts_per_prompt": 4},
    {"gamma": -1.0},
    {"lam": -0.5},
    {"algo": "ppo"},
    {"prompts_per_step": 10_000},
    {"eta_min": 0.97},
])
def test_config_validation(overrides):
    with pytest.raises(ConfigError):
        small_config(**overrides).validate()


def test_evaluate_greedy_tie_break_and_perfect_policy():
    dims = pol.PolicyDims(vocab_size=4, max_len=2, d_ctx=2, n_questions=1, d_emb=2, d_hid=2)
    uniform = pol.init_params(dims, 0, scale=0.0)
    prompts = tuple(Prompt(i, (0.1 * i, -0.2), 0, a) for i, a in enumerate([0, 0, 1, 3]))
    suite = TaskSuite(prompts, 4, 2, 2, 1, "easy")
    assert evaluate(uniform, suite) == 0.5  # argmax ties resolve to token 0
    vec = uniform.vector.copy()
    offset = sum(int(np.prod(s)) for n, s in dims.shapes().items() if n != "b_out")
    vec[offset + 3] = 50.0
    sure = uniform.replace(vec)
    suite3 = TaskSuite(tuple(dataclasses.replace(p, answer=3) for p in prompts), 4, 2, 2, 1, "easy")
    assert evaluate(sure, suite3) == 1.0
    assert evaluate(sure, suite3, greedy=False, seed=1) == 1.0


def test_nonfinite_gradient_aborts_with_dump(monkeypatch):
    trainer = Trainer(small_config())

    def broken(params, batch, cfg, ref=None, anchor_params=None):
        return float("nan"), np.zeros(params.dims.size), {"clip_fraction": 0.0}

    monkeypatch.setattr(tr, "loss_and_grad", broken)
    with pytest.raises(NumericalAbort) as exc:
        trainer.train_step()
    assert exc.value.dump["step"] == 0 and "tokens" in exc.value.dump


# -- determinism -------------------------------------------------------------

def _rows(records):
    return [r.row() for r in records]


def test_rerun_is_bit_identical():
    a, ta = tr.run(small_config(steps=3))
    b, tb = tr.run(small_config(steps=3))
    assert _rows(a) == _rows(b)
    assert ta.params == tb.params and ta.tracker == tb.tracker


def test_worker_count_does_not_change_results():
    cfg = small_config(steps=3, prompts_per_step=96, task=TaskConfig(count=200))
    a, _ = tr.run(cfg)
    b, _ = tr.run(dataclasses.replace(cfg, workers=3))
    assert _rows(a) == _rows(b)


def test_checkpoint_resume_is_exact(tmp_path):
    cfg = small_config(steps=6)
    full, _ = tr.run(cfg)
    first = Trainer(cfg)
    head = first.run(3)
    first.save_checkpoint(tmp_path)
    resumed = Trainer.from_checkpoint(cfg, tmp_path)
    tail = resumed.run()
    assert _rows(head + tail) == _rows(full)
