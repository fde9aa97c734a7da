"""Synthetic verifiable-reward tasks.

Each prompt carries a real feature vector (the stand-in for an image), a
question id, and a ground-truth answer token derived from both by a fixed
rule. A response is a fixed-length token sequence whose last token is the
answer; earlier tokens are free and never affect the reward.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError

DIFFICULTIES = ("easy", "collapse")

# Seed-sequence tags keep the task streams disjoint from the training streams.
_SUITE_TAG = 101
_SPLIT_TAG = 102

degenerate_responses = 0


@dataclass(frozen=True)
class Prompt:
    id: int
    context: tuple[float, ...]
    question_id: int
    answer: int


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 8
    max_len: int = 4
    d_ctx: int = 16
    n_questions: int = 2
    count: int = 640
    difficulty: str = "collapse"
    seed: int | None = None

    def validate(self, prefix: str = "task") -> None:
        if self.vocab_size < 2:
            raise ConfigError("must be >= 2", f"{prefix}.vocab_size")
        if self.max_len < 1:
            raise ConfigError("must be >= 1", f"{prefix}.max_len")
        if self.d_ctx < 1:
            raise ConfigError("must be >= 1", f"{prefix}.d_ctx")
        if self.n_questions < 1:
            raise ConfigError("must be >= 1", f"{prefix}.n_questions")
        if self.count < 1:
            raise ConfigError("must be >= 1", f"{prefix}.count")
        if self.difficulty not in DIFFICULTIES:
            raise ConfigError(f"must be one of {DIFFICULTIES}", f"{prefix}.difficulty")
        if self.difficulty == "easy" and self.d_ctx < self.vocab_size:
            raise ConfigError("easy rule needs d_ctx >= vocab_size", f"{prefix}.d_ctx")


@dataclass(frozen=True)
class TaskSuite:
    prompts: tuple[Prompt, ...]
    vocab_size: int
    max_len: int
    d_ctx: int
    n_questions: int = 1
    difficulty: str = "easy"

    def __post_init__(self):
        for i, p in enumerate(self.prompts):
            if p.id != i:
                raise ConfigError(f"prompt ids must be contiguous from 0, got {p.id} at {i}")
            if not 0 <= p.answer < self.vocab_size:
                raise ConfigError(f"prompt {p.id} answer {p.answer} outside vocabulary")

    def __len__(self) -> int:
        return len(self.prompts)

    # Array views for batched policy evaluation; excluded from equality.
    @cached_property
    def contexts(self) -> np.ndarray:
        arr = np.array([p.context for p in self.prompts], dtype=np.float64).reshape(len(self), self.d_ctx)
        arr.flags.writeable = False
        return arr

    @cached_property
    def question_ids(self) -> np.ndarray:
        arr = np.array([p.question_id for p in self.prompts], dtype=np.int64)
        arr.flags.writeable = False
        return arr

    @cached_property
    def answers(self) -> np.ndarray:
        arr = np.array([p.answer for p in self.prompts], dtype=np.int64)
        arr.flags.writeable = False
        return arr


def answer_for(context, question_id: int, vocab_size: int, difficulty: str) -> int:
    """Ground-truth label for one (context, question) pair.

    ``easy``: argmax over a question-selected slice of ``vocab_size`` features.
    ``collapse``: binary code of the signs of a question-selected group of
    features, reduced mod ``vocab_size``.
    """
    x = np.asarray(context, dtype=np.float64)
    d = x.shape[0]
    if difficulty == "easy":
        idx = (question_id * vocab_size + np.arange(vocab_size)) % d
        return int(np.argmax(x[idx]))
    if difficulty == "collapse":
        n_bits = max(1, math.ceil(math.log2(vocab_size)))
        idx = (question_id * n_bits + np.arange(n_bits)) % d
        bits = (x[idx] > 0).astype(np.int64)
        return int(np.dot(bits, 1 << np.arange(n_bits))) % vocab_size
    raise ConfigError(f"unknown difficulty {difficulty!r}")


def make_task_suite(cfg: TaskConfig) -> TaskSuite:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed or 0, _SUITE_TAG])
    contexts = rng.standard_normal((cfg.count, cfg.d_ctx))
    qids = rng.integers(0, cfg.n_questions, size=cfg.count)
    prompts = tuple(
        Prompt(
            id=i,
            context=tuple(float(v) for v in contexts[i]),
            question_id=int(qids[i]),
            answer=answer_for(contexts[i], int(qids[i]), cfg.vocab_size, cfg.difficulty),
        )
        for i in range(cfg.count)
    )
    return TaskSuite(prompts, cfg.vocab_size, cfg.max_len, cfg.d_ctx, cfg.n_questions, cfg.difficulty)


def verify(prompt: Prompt, response) -> int:
    """Binary reward: 1 iff the last token of ``response`` is the answer."""
    global degenerate_responses
    if len(response) == 0:
        degenerate_responses += 1
        return 0
    return int(int(response[-1]) == prompt.answer)


def split(suite: TaskSuite, val_fraction: float, seed: int) -> tuple[TaskSuite, TaskSuite]:
    """Partition into train/validation suites; ids are renumbered from 0 in each."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("must lie in (0, 1)", "val_fraction")
    if len(suite) == 0:
        raise ConfigError("cannot split an empty suite")
    n = len(suite)
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1) if n > 1 else 0
    order = np.random.default_rng([seed, _SPLIT_TAG]).permutation(n)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())

    def subset(indices):
        prompts = tuple(
            dataclasses.replace(suite.prompts[j], id=k) for k, j in enumerate(indices)
        )
        return TaskSuite(prompts, suite.vocab_size, suite.max_len, suite.d_ctx,
                         suite.n_questions, suite.difficulty)

    return subset(train_idx), subset(val_idx)


def mask_image(prompt: Prompt) -> Prompt:
    """Text-only view: the context vector is zeroed, everything else kept."""
    return dataclasses.replace(prompt, context=tuple(0.0 for _ in prompt.context))


def save_suite(suite: TaskSuite, path) -> None:
    lines = [
        f"# vocab_size={suite.vocab_size} max_len={suite.max_len} d_ctx={suite.d_ctx} "
        f"n_questions={suite.n_questions} difficulty={suite.difficulty}"
    ]
    for p in suite.prompts:
        ctx = " ".join(repr(v) for v in p.context)
        lines.append(f"{p.id} {p.question_id} {p.answer} {ctx}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_suite(path) -> TaskSuite:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header = dict(item.split("=", 1) for item in text[0].lstrip("# ").split())
    prompts = []
    for line in text[1:]:
        if not line.strip():
            continue
        parts = line.split()
        prompts.append(Prompt(
            id=int(parts[0]),
            question_id=int(parts[1]),
            answer=int(parts[2]),
            context=tuple(float(v) for v in parts[3:]),
        ))
    return TaskSuite(
        tuple(prompts),
        vocab_size=int(header["vocab_size"]),
        max_len=int(header["max_len"]),
        d_ctx=int(header["d_ctx"]),
        n_questions=int(header["n_questions"]),
        difficulty=header["difficulty"],
    )
