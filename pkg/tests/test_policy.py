import math

import numpy as np
import pytest

from rlvr_lab import policy as pol
from rlvr_lab.env import Prompt
from rlvr_lab.errors import UsageError
from rlvr_lab.oracle import finite_diff_grad, relative_error

SMALL = pol.PolicyDims(vocab_size=3, max_len=2, d_ctx=3, n_questions=2, d_emb=3, d_hid=4)


def zero_params(dims, **views):
    p = pol.PolicyParams(dims, np.zeros(dims.size))
    vec = p.vector.copy()
    offset = 0
    for name, shape in dims.shapes().items():
        n = int(np.prod(shape))
        if name in views:
            vec[offset:offset + n] = np.asarray(views[name], dtype=float).reshape(-1)
        offset += n
    return p.replace(vec)


def random_batch(dims, seed, B=4):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((B, dims.d_ctx)), rng.integers(0, dims.n_questions, B),
            rng.integers(0, dims.vocab_size, (B, dims.max_len)))


def test_init_deterministic_and_value_semantics():
    a = pol.init_params(SMALL, 3)
    b = pol.init_params(SMALL, 3)
    assert a == b
    assert a != pol.init_params(SMALL, 4)
    with pytest.raises(ValueError):
        a.vector[0] = 1.0
    c = a.replace(a.vector + 1.0)
    assert a == b and c != a


def test_zero_init_is_uniform():
    dims = pol.PolicyDims()
    p = pol.init_params(dims, 0, scale=0.0)
    prompt = Prompt(0, tuple(np.linspace(-1, 1, dims.d_ctx)), 1, 0)
    q = pol.next_token_dist(p, prompt, [2, 5])
    np.testing.assert_allclose(q, np.full(dims.vocab_size, 1 / dims.vocab_size), atol=1e-15)


def test_default_init_near_uniform_entropy():
    dims = pol.PolicyDims(vocab_size=8)
    p = pol.init_params(dims, 0)
    rng = np.random.default_rng(1)
    ctx = rng.standard_normal((200, dims.d_ctx))
    qids = rng.integers(0, dims.n_questions, 200)
    tokens = rng.integers(0, 8, (200, dims.max_len))
    H = pol.entropy_from_logq(pol.forward(p, ctx, qids, tokens))
    assert H.mean() >= 0.9 * math.log(8)  # 1.871


def test_hand_softmax():
    dims = pol.PolicyDims(vocab_size=3, max_len=2, d_ctx=1, n_questions=1, d_emb=1, d_hid=1)
    p = zero_params(dims, b_out=[0.0, 0.0, math.log(2)])
    q = pol.next_token_dist(p, Prompt(0, (0.0,), 0, 0), [])
    np.testing.assert_allclose(q, [0.25, 0.25, 0.5], atol=1e-15)
    assert abs(q.sum() - 1) < 1e-12


def test_distributions_normalize():
    p = pol.init_params(pol.PolicyDims(), 5, scale=1.5)
    ctx, qids, tokens = random_batch(p.dims, 0, B=50)
    q = np.exp(pol.forward(p, ctx, qids, tokens))
    assert np.all(q > 0)
    assert np.max(np.abs(q.sum(-1) - 1)) < 1e-12


def test_prefix_too_long():
    p = pol.init_params(SMALL, 0)
    with pytest.raises(UsageError):
        pol.next_token_dist(p, Prompt(0, (0.0, 0.0, 0.0), 0, 0), [0, 1])


def test_degenerate_categorical_sampling():
    dims = pol.PolicyDims(vocab_size=4, max_len=3, d_ctx=1, n_questions=1, d_emb=1, d_hid=1)
    p = zero_params(dims, b_out=[0.0, 0.0, 1000.0, 0.0])
    r = pol.sample_rollout(p, Prompt(0, (0.0,), 0, 2), np.random.default_rng(0))
    assert r.tokens.tolist() == [2, 2, 2]
    assert np.all(r.logprobs_old == 0.0)
    assert np.all(r.entropies_old == 0.0)


def test_uniform_rollout_entropy():
    dims = pol.PolicyDims(vocab_size=4, max_len=3, d_ctx=2, n_questions=1, d_emb=2, d_hid=2)
    p = pol.init_params(dims, 0, scale=0.0)
    r = pol.sample_rollout(p, Prompt(0, (0.1, 0.2), 0, 1), np.random.default_rng(3))
    np.testing.assert_allclose(r.entropies_old, math.log(4), atol=1e-15)


def test_recorded_logprobs_match_recompute():
    p = pol.init_params(pol.PolicyDims(), 2, scale=1.0)
    prompt = Prompt(0, tuple(np.random.default_rng(0).standard_normal(16)), 1, 3)
    r = pol.sample_rollout(p, prompt, np.random.default_rng(11))
    lp, H = pol.logprobs_and_entropy(p, prompt, r.tokens)
    np.testing.assert_array_equal(lp, r.logprobs_old)
    np.testing.assert_array_equal(H, r.entropies_old)
    assert np.all(r.logprobs_old <= 0) and np.all(r.entropies_old >= 0)
    assert np.all(r.entropies_old <= math.log(p.dims.vocab_size) + 1e-12)


def test_sampling_reproducible():
    p = pol.init_params(pol.PolicyDims(), 2, scale=1.0)
    prompt = Prompt(0, tuple(np.linspace(-1, 1, 16)), 0, 0)
    a = pol.sample_rollout(p, prompt, np.random.default_rng([7, 1]))
    b = pol.sample_rollout(p, prompt, np.random.default_rng([7, 1]))
    np.testing.assert_array_equal(a.tokens, b.tokens)


def test_sampling_matches_distribution():
    dims = pol.PolicyDims(vocab_size=3, max_len=1, d_ctx=1, n_questions=1, d_emb=1, d_hid=1)
    p = zero_params(dims, b_out=[0.0, 0.0, math.log(2)])
    u = np.random.default_rng(0).random((40_000, 1))
    tokens, _, _ = pol.sample_batch(p, np.zeros((40_000, 1)), np.zeros(40_000, int), u)
    freq = np.bincount(tokens[:, 0], minlength=3) / 40_000
    np.testing.assert_allclose(freq, [0.25, 0.25, 0.5], atol=0.01)


def test_entropy_hand_values():
    dims = pol.PolicyDims(vocab_size=3, max_len=1, d_ctx=1, n_questions=1, d_emb=1, d_hid=1)
    p = zero_params(dims, b_out=[0.0, 0.0, math.log(2)])
    _, H = pol.logprobs_and_entropy(p, Prompt(0, (0.0,), 0, 0), [1])
    assert abs(H[0] - (-(0.5 * math.log(0.25) + 0.5 * math.log(0.5)))) < 1e-12
    assert abs(H[0] - 1.0397207708399179) < 1e-12
    onehot = zero_params(dims, b_out=[0.0, 800.0, 0.0])
    assert pol.logprobs_and_entropy(onehot, Prompt(0, (0.0,), 0, 0), [1])[1][0] == 0.0


def test_token_out_of_vocab():
    p = pol.init_params(SMALL, 0)
    with pytest.raises(UsageError):
        pol.logprobs_and_entropy(p, Prompt(0, (0.0,) * 3, 0, 0), [0, 3])


@pytest.mark.parametrize("seed", range(5))
def test_weighted_logprob_grad_fd(seed):
    p = pol.init_params(SMALL, seed, scale=0.8)
    ctx, qids, tokens = random_batch(SMALL, seed)
    w = np.random.default_rng(seed + 50).standard_normal(tokens.shape)
    _, g = pol.weighted_logprob_grad(p, ctx, qids, tokens, w)
    num = finite_diff_grad(lambda x: pol.weighted_logprob_grad(p.replace(x), ctx, qids, tokens, w)[0].sum(),
                           p.vector, 1e-5)
    assert relative_error(g, num) < 1e-4


def test_weighted_logprob_zero_and_linear():
    p = pol.init_params(SMALL, 1, scale=0.8)
    prompt = Prompt(0, (0.2, -0.4, 1.0), 1, 0)
    tokens = [2, 1]
    assert np.all(pol.backprop_weighted_logprob(p, prompt, tokens, [0.0, 0.0]) == 0)
    w1, w2 = np.array([0.3, -1.1]), np.array([2.0, 0.7])
    lhs = pol.backprop_weighted_logprob(p, prompt, tokens, w1) + pol.backprop_weighted_logprob(p, prompt, tokens, w2)
    rhs = pol.backprop_weighted_logprob(p, prompt, tokens, w1 + w2)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_weighted_logprob_shape_mismatch():
    p = pol.init_params(SMALL, 1)
    with pytest.raises(UsageError):
        pol.backprop_weighted_logprob(p, Prompt(0, (0.0,) * 3, 0, 0), [0, 1], [1.0, 2.0, 3.0])


def test_per_sample_grads_sum_to_total():
    p = pol.init_params(SMALL, 2, scale=0.8)
    ctx, qids, tokens = random_batch(SMALL, 3, B=7)
    w = np.random.default_rng(0).standard_normal(tokens.shape)
    _, total = pol.weighted_logprob_grad(p, ctx, qids, tokens, w)
    _, each = pol.weighted_logprob_grad(p, ctx, qids, tokens, w, per_sample=True)
    assert each.shape == (7, SMALL.size)
    np.testing.assert_allclose(each.sum(0), total, atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_kl_grad_fd(seed):
    p = pol.init_params(SMALL, seed, scale=0.8)
    q = pol.init_params(SMALL, seed + 10, scale=0.8)
    ctx, qids, tokens = random_batch(SMALL, seed)
    vals, g = pol.kl_grad(p, q, ctx, qids, tokens)
    assert np.all(vals >= 0)
    num = finite_diff_grad(lambda x: pol.kl_grad(p.replace(x), q, ctx, qids, tokens)[0].sum(), p.vector, 1e-5)
    assert relative_error(g, num) < 1e-4


def test_kl_identical_is_zero():
    p = pol.init_params(SMALL, 0, scale=0.8)
    value, g = pol.backprop_kl(p, p, Prompt(0, (0.1, 0.2, 0.3), 0, 0), [1, 2])
    assert value == 0.0
    assert np.max(np.abs(g)) < 1e-15


def test_kl_hand_value():
    dims = pol.PolicyDims(vocab_size=2, max_len=1, d_ctx=1, n_questions=1, d_emb=1, d_hid=1)
    p = zero_params(dims)
    q = zero_params(dims, b_out=[0.0, math.log(3)])  # (0.25, 0.75)
    value, _ = pol.backprop_kl(p, q, Prompt(0, (0.0,), 0, 0), [0])
    assert abs(value - (0.5 * math.log(2) + 0.5 * math.log(2 / 3))) < 1e-12
    assert abs(value - 0.14384103622589045) < 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(UsageError):
        pol.backprop_kl(pol.init_params(SMALL, 0), pol.init_params(pol.PolicyDims(), 0),
                        Prompt(0, (0.0,) * 3, 0, 0), [0, 0])


@pytest.mark.parametrize("seed", range(5))
def test_entropy_grad_fd(seed):
    p = pol.init_params(SMALL, seed, scale=0.8)
    ctx, qids, tokens = random_batch(SMALL, seed)
    vals, g = pol.entropy_grad(p, ctx, qids, tokens)
    assert np.all((vals >= 0) & (vals <= math.log(3)))
    num = finite_diff_grad(lambda x: pol.entropy_grad(p.replace(x), ctx, qids, tokens)[0].sum(), p.vector, 1e-5)
    assert relative_error(g, num) < 1e-4


def test_entropy_grad_zero_at_uniform():
    p = pol.init_params(SMALL, 0, scale=0.0)
    value, g = pol.backprop_entropy(p, Prompt(0, (0.5, 0.1, -0.3), 1, 0), [0, 2])
    assert abs(value - math.log(3)) < 1e-15
    assert np.max(np.abs(g)) < 1e-15


def test_batch_results_independent_of_batch_size():
    p = pol.init_params(pol.PolicyDims(), 4, scale=0.7)
    ctx, qids, tokens = random_batch(p.dims, 0, B=200)
    full = pol.forward(p, ctx, qids, tokens)
    np.testing.assert_array_equal(full[:64], pol.forward(p, ctx[:64], qids[:64], tokens[:64]))


def test_params_roundtrip(tmp_path):
    p = pol.init_params(pol.PolicyDims(), 9)
    pol.save_params(p, tmp_path / "p.txt")
    assert pol.load_params(tmp_path / "p.txt") == p
