"""Small autoregressive softmax policy with hand-written gradients.

The state at generation step ``t`` is

    e_t = mean(E_tok[o_0..o_{t-1}]) + E_pos[t] + E_q[question]
    h_t = tanh(e_t @ W_h + context @ W_c + b_h)
    logits_t = h_t @ W_o + b_o

All heavy functions work on a batch of rollouts (contexts, question ids,
token matrix). Gradients are returned as flat vectors in the same layout as
``PolicyParams.vector``; per-rollout gradients are summed, never averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
import json

import numpy as np

from .env import Prompt
from .errors import UsageError

BLOCK = 64  # rollouts per forward block; fixed so results never depend on batch size


@dataclass(frozen=True)
class PolicyDims:
    vocab_size: int = 8
    max_len: int = 4
    d_ctx: int = 16
    n_questions: int = 2
    d_emb: int = 8
    d_hid: int = 16

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "tok_emb": (self.vocab_size, self.d_emb),
            "pos_emb": (self.max_len, self.d_emb),
            "q_emb": (self.n_questions, self.d_emb),
            "ctx_proj": (self.d_ctx, self.d_hid),
            "w_hid": (self.d_emb, self.d_hid),
            "b_hid": (self.d_hid,),
            "w_out": (self.d_hid, self.vocab_size),
            "b_out": (self.vocab_size,),
        }

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


class PolicyParams:
    """Immutable flat parameter vector plus its shape descriptor."""

    __slots__ = ("dims", "vector", "_views")

    def __init__(self, dims: PolicyDims, vector):
        vec = np.array(vector, dtype=np.float64, copy=True).reshape(-1)
        if vec.shape[0] != dims.size:
            raise UsageError(f"parameter vector has length {vec.shape[0]}, dims need {dims.size}")
        vec.flags.writeable = False
        self.dims = dims
        self.vector = vec
        self._views = None

    @property
    def views(self) -> dict[str, np.ndarray]:
        if self._views is None:
            out, offset = {}, 0
            for name, shape in self.dims.shapes().items():
                n = int(np.prod(shape))
                out[name] = self.vector[offset:offset + n].reshape(shape)
                offset += n
            self._views = out
        return self._views

    def replace(self, vector) -> "PolicyParams":
        return PolicyParams(self.dims, vector)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.dims == other.dims and self.vector.tobytes() == other.vector.tobytes()

    def __hash__(self):
        return hash((self.dims, self.vector.tobytes()))

    def __repr__(self) -> str:
        return f"PolicyParams({self.dims}, size={self.dims.size})"


@dataclass
class Rollout:
    prompt_id: int
    tokens: np.ndarray
    logprobs_old: np.ndarray
    entropies_old: np.ndarray
    reward: int = 0


def init_params(dims: PolicyDims, seed: int, scale: float = 0.1) -> PolicyParams:
    """Gaussian init with std ``scale``; ``scale=0`` gives exactly uniform outputs."""
    for name, value in asdict(dims).items():
        if value < 1:
            raise UsageError(f"{name} must be >= 1")
    rng = np.random.default_rng([seed, 201])
    vec = scale * rng.standard_normal(dims.size)
    return PolicyParams(dims, vec)


def flat_gradient(dims: PolicyDims, parts: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([parts[name].reshape(-1) for name in dims.shapes()])


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def entropy_from_logq(logq: np.ndarray) -> np.ndarray:
    return -np.sum(np.exp(logq) * logq, axis=-1)


# ---------------------------------------------------------------------------
# batched forward / backward


def _position(views, ctx_term, q_term, prefix_sum, t):
    """Hidden activations and log-probs at step ``t`` for a block of rollouts."""
    e = q_term + views["pos_emb"][t]
    if t > 0:
        e = e + prefix_sum / t
    h = np.tanh(e @ views["w_hid"] + ctx_term)
    logq = log_softmax(h @ views["w_out"] + views["b_out"])
    return e, h, logq


def _check_tokens(params: PolicyParams, tokens: np.ndarray) -> None:
    dims = params.dims
    if tokens.ndim != 2 or tokens.shape[1] != dims.max_len:
        raise UsageError(f"tokens must have shape (B, {dims.max_len}), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= dims.vocab_size):
        raise UsageError("token outside vocabulary")


def _forward_block(views, contexts, qids, tokens):
    T = tokens.shape[1]
    ctx_term = contexts @ views["ctx_proj"] + views["b_hid"]
    q_term = views["q_emb"][qids]
    prefix_sum = np.zeros_like(q_term)
    es, hs, logqs = [], [], []
    for t in range(T):
        e, h, logq = _position(views, ctx_term, q_term, prefix_sum, t)
        es.append(e)
        hs.append(h)
        logqs.append(logq)
        prefix_sum = prefix_sum + views["tok_emb"][tokens[:, t]]
    return np.stack(es, 1), np.stack(hs, 1), np.stack(logqs, 1)


def forward(params: PolicyParams, contexts, qids, tokens):
    """Per-position log-probabilities for a batch: returns (B, T, V)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(params, tokens)
    contexts = np.asarray(contexts, dtype=np.float64)
    qids = np.asarray(qids, dtype=np.int64)
    out = []
    for s in range(0, tokens.shape[0], BLOCK):
        sl = slice(s, s + BLOCK)
        out.append(_forward_block(params.views, contexts[sl], qids[sl], tokens[sl])[2])
    if not out:
        return np.zeros((0, params.dims.max_len, params.dims.vocab_size))
    return np.concatenate(out, 0)


def _backward_block(views, dims, contexts, qids, tokens, es, hs, dlogits, per_sample):
    """Reverse pass given d(objective)/d(logits) of shape (B, T, V)."""
    B, T, _ = dlogits.shape
    ax = "b" if per_sample else ""
    g = {}
    g["w_out"] = np.einsum(f"btk,btv->{ax}kv", hs, dlogits)
    g["b_out"] = np.einsum(f"btv->{ax}v", dlogits)
    dpre = (dlogits @ views["w_out"].T) * (1.0 - hs * hs)
    g["w_hid"] = np.einsum(f"bte,bth->{ax}eh", es, dpre)
    g["b_hid"] = np.einsum(f"bth->{ax}h", dpre)
    dpre_sum = dpre.sum(1)
    g["ctx_proj"] = np.einsum(f"bc,bh->{ax}ch", contexts, dpre_sum)
    de = dpre @ views["w_hid"].T  # (B, T, d_emb)
    g["pos_emb"] = de if per_sample else de.sum(0)
    de_sum = de.sum(1)
    lead = (B,) if per_sample else ()
    q_grad = np.zeros(lead + (dims.n_questions, dims.d_emb))
    tok_grad = np.zeros(lead + (dims.vocab_size, dims.d_emb))
    rows = np.arange(B)
    if per_sample:
        q_grad[rows, qids] += de_sum
    else:
        np.add.at(q_grad, qids, de_sum)
    # token j feeds the prefix mean of every later step t with weight 1/t
    tail = np.zeros((B, dims.d_emb))
    for j in range(T - 2, -1, -1):
        tail = tail + de[:, j + 1] / (j + 1)
        if per_sample:
            np.add.at(tok_grad, (rows, tokens[:, j]), tail)
        else:
            np.add.at(tok_grad, tokens[:, j], tail)
    g["q_emb"] = q_grad
    g["tok_emb"] = tok_grad
    if per_sample:
        return np.concatenate([g[name].reshape(B, -1) for name in dims.shapes()], axis=1)
    return flat_gradient(dims, g)


def _run_objective(params, contexts, qids, tokens, dlogits_fn, per_sample=False):
    """Blocked forward + backward; ``dlogits_fn(sl, logq)`` gives (value, dlogits)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(params, tokens)
    contexts = np.asarray(contexts, dtype=np.float64)
    qids = np.asarray(qids, dtype=np.int64)
    views, dims = params.views, params.dims
    values, grads = [], []
    total = None
    for s in range(0, tokens.shape[0], BLOCK):
        sl = slice(s, s + BLOCK)
        es, hs, logq = _forward_block(views, contexts[sl], qids[sl], tokens[sl])
        value, dlogits = dlogits_fn(sl, logq)
        values.append(value)
        grad = _backward_block(views, dims, contexts[sl], qids[sl], tokens[sl], es, hs, dlogits, per_sample)
        if per_sample:
            grads.append(grad)
        else:
            total = grad if total is None else total + grad
    value = np.concatenate(values) if values else np.zeros(0)
    if per_sample:
        return value, (np.concatenate(grads, 0) if grads else np.zeros((0, dims.size)))
    return value, (total if total is not None else np.zeros(dims.size))


def _onehot(tokens, V):
    return np.eye(V)[tokens]


def weighted_logprob_grad(params, contexts, qids, tokens, weights, per_sample=False):
    """Gradient of sum_b sum_t w[b,t] * log pi(o[b,t] | prefix).

    Returns (per-rollout objective values, gradient). ``weights`` are constants.
    """
    weights = np.asarray(weights, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if weights.shape != tokens.shape:
        raise UsageError(f"weights shape {weights.shape} != tokens shape {tokens.shape}")
    if not np.all(np.isfinite(weights)):
        raise UsageError("weights must be finite")
    V = params.dims.vocab_size

    def fn(sl, logq):
        oh = _onehot(tokens[sl], V)
        w = weights[sl][..., None]
        value = np.sum(weights[sl] * np.sum(oh * logq, -1), axis=1)
        return value, w * (oh - np.exp(logq))

    return _run_objective(params, contexts, qids, tokens, fn, per_sample)


def entropy_grad(params, contexts, qids, tokens):
    """Per-rollout mean token entropy and gradient of its sum over rollouts."""
    T = params.dims.max_len

    def fn(sl, logq):
        q = np.exp(logq)
        H = -np.sum(q * logq, -1, keepdims=True)
        return H[..., 0].mean(1), -q * (logq + H) / T

    return _run_objective(params, contexts, qids, tokens, fn)


def kl_grad(params_p, params_q, contexts_p, qids, tokens, contexts_q=None):
    """Per-rollout mean KL(p_t || q_t) over visited prefixes, gradient w.r.t. ``params_p``.

    ``contexts_q`` lets the second distribution see different inputs (the
    masked view for the cross-modal term); it is treated as a constant.
    """
    if params_p.dims != params_q.dims:
        raise UsageError("KL between policies of different shapes")
    T = params_p.dims.max_len
    contexts_q = contexts_p if contexts_q is None else contexts_q
    logq_ref = forward(params_q, contexts_q, qids, tokens)

    def fn(sl, logp):
        p = np.exp(logp)
        diff = logp - logq_ref[sl]
        kl = np.sum(p * diff, -1, keepdims=True)
        return kl[..., 0].mean(1), p * (diff - kl) / T

    return _run_objective(params_p, contexts_p, qids, tokens, fn)


def kl_value(params_p, params_q, contexts, qids, tokens, contexts_q=None) -> np.ndarray:
    """Per-rollout mean KL(p_t || q_t); no gradient."""
    contexts_q = contexts if contexts_q is None else contexts_q
    logp = forward(params_p, contexts, qids, tokens)
    logq = forward(params_q, contexts_q, qids, tokens)
    return np.sum(np.exp(logp) * (logp - logq), -1).mean(1)


def sample_batch(params: PolicyParams, contexts, qids, uniforms):
    """Sample one sequence per row by inverse-CDF against per-row uniforms (B, T).

    Returns tokens, sampling-time log-probs of the chosen tokens and entropies.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    qids = np.asarray(qids, dtype=np.int64)
    uniforms = np.asarray(uniforms, dtype=np.float64)
    B, T = uniforms.shape
    V = params.dims.vocab_size
    views = params.views
    tokens = np.zeros((B, T), dtype=np.int64)
    logps = np.zeros((B, T))
    ents = np.zeros((B, T))
    for s in range(0, B, BLOCK):
        sl = slice(s, s + BLOCK)
        ctx_term = contexts[sl] @ views["ctx_proj"] + views["b_hid"]
        q_term = views["q_emb"][qids[sl]]
        prefix_sum = np.zeros_like(q_term)
        rows = np.arange(q_term.shape[0])
        for t in range(T):
            _, _, logq = _position(views, ctx_term, q_term, prefix_sum, t)
            q = np.exp(logq)
            cdf = np.cumsum(q, axis=-1)
            tok = np.sum(cdf <= uniforms[sl, t:t + 1], axis=-1)
            # u beyond a rounded-down cdf total: take the last token with mass
            over = tok >= V
            if over.any():
                last = V - 1 - np.argmax((q[over] > 0)[:, ::-1], axis=-1)
                tok[over] = last
            tokens[sl, t] = tok
            logps[sl, t] = logq[rows, tok]
            ents[sl, t] = entropy_from_logq(logq)
            prefix_sum = prefix_sum + views["tok_emb"][tok]
    return tokens, logps, ents


# ---------------------------------------------------------------------------
# single-prompt conveniences


def _prompt_arrays(prompt: Prompt):
    return np.asarray([prompt.context], dtype=np.float64), np.asarray([prompt.question_id])


def _prefix_tokens(params: PolicyParams, prefix) -> np.ndarray:
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if prefix.shape[0] >= params.dims.max_len:
        raise UsageError(f"prefix length {prefix.shape[0]} must be < {params.dims.max_len}")
    padded = np.zeros((1, params.dims.max_len), dtype=np.int64)
    padded[0, :prefix.shape[0]] = prefix
    return padded, prefix.shape[0]


def next_token_dist(params: PolicyParams, prompt: Prompt, prefix=()) -> np.ndarray:
    padded, t = _prefix_tokens(params, prefix)
    _check_tokens(params, padded)
    ctx, q = _prompt_arrays(prompt)
    return np.exp(forward(params, ctx, q, padded)[0, t])


def sample_rollout(params: PolicyParams, prompt: Prompt, rng: np.random.Generator) -> Rollout:
    ctx, q = _prompt_arrays(prompt)
    u = rng.random((1, params.dims.max_len))
    tokens, logps, ents = sample_batch(params, ctx, q, u)
    return Rollout(prompt.id, tokens[0], logps[0], ents[0])


def logprobs_and_entropy(params: PolicyParams, prompt: Prompt, tokens):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    ctx, q = _prompt_arrays(prompt)
    logq = forward(params, ctx, q, tokens)[0]
    T = tokens.shape[1]
    return logq[np.arange(T), tokens[0]], entropy_from_logq(logq)


def backprop_weighted_logprob(params: PolicyParams, prompt: Prompt, tokens, weights) -> np.ndarray:
    ctx, q = _prompt_arrays(prompt)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    weights = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    return weighted_logprob_grad(params, ctx, q, tokens, weights)[1]


def backprop_kl(params_p: PolicyParams, params_q: PolicyParams, prompt: Prompt, tokens):
    ctx, q = _prompt_arrays(prompt)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    value, grad = kl_grad(params_p, params_q, ctx, q, tokens)
    return float(value[0]), grad


def backprop_entropy(params: PolicyParams, prompt: Prompt, tokens):
    ctx, q = _prompt_arrays(prompt)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    value, grad = entropy_grad(params, ctx, q, tokens)
    return float(value[0]), grad


# ---------------------------------------------------------------------------
# serialization


def save_params(params: PolicyParams, path) -> None:
    header = json.dumps(asdict(params.dims), sort_keys=True)
    body = "\n".join(v.hex() for v in params.vector.tolist())
    Path(path).write_text(f"# {header}\n{body}\n", encoding="utf-8", newline="\n")


def load_params(path) -> PolicyParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    dims = PolicyDims(**json.loads(lines[0].lstrip("# ")))
    vec = [float.fromhex(v) for v in lines[1:] if v.strip()]
    return PolicyParams(dims, vec)
