"""Lightweight student decoder trained to mimic teacher tokens with a cosine loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention import MhaParams, self_attention
from .modules import LayerNorm, Linear, Module
from .numerics import NonFiniteError, Parameter, Tensor, as_array, as_tensor, gelu, normalize_rows, tsum


class TrainingAborted(RuntimeError):
    """Raised when the loss or a parameter update stops being finite."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class StudentDecoderConfig:
    layers: int = 4
    heads: int = 8
    width: int = 512
    ffn_ratio: int = 4
    input_dim: int = 1024
    output_dim: int = 1024

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("student needs at least one layer")
        if self.heads < 1 or self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")

    def closed_form_params(self) -> int:
        w, f = self.width, self.width * self.ffn_ratio
        per_block = (4 * w * w + 4 * w) + (w * f + f) + (f * w + w) + 2 * (2 * w)
        return (self.layers * per_block
                + self.input_dim * w + w
                + w * self.output_dim + self.output_dim)


@dataclass
class DistillRunConfig:
    base_lr: float = 2e-5
    warmup_ratio: float = 0.03
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


class Block(Module):
    def __init__(self, width: int, heads: int, ffn_ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(width)
        self.attn = MhaParams(width, heads, seed=int(rng.integers(2**31)))
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, width * ffn_ratio, rng)
        self.fc2 = Linear(width * ffn_ratio, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self_attention(self.ln1(x), self.attn)
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))


class StudentDecoder(Module):
    def __init__(self, cfg: StudentDecoderConfig, seed: int = 0, zero_output: bool = False):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.inp = Linear(cfg.input_dim, cfg.width, rng)
        self.blocks = [Block(cfg.width, cfg.heads, cfg.ffn_ratio, rng) for _ in range(cfg.layers)]
        self.out = Linear(cfg.width, cfg.output_dim, rng, zero=zero_output)

    def __call__(self, base_tokens) -> Tensor:
        return student_forward(base_tokens, self)


def student_forward(base_tokens, student: StudentDecoder) -> Tensor:
    x = as_tensor(base_tokens)
    if x.shape[-2] < 1:
        raise ValueError("student needs at least one token")
    h = student.inp(x)
    for blk in student.blocks:
        h = blk(h)
    return student.out(h)


def cosine_distill_loss(student, teacher) -> Tensor:
    """Mean over tokens of 1 - cos(student_i, teacher_i).

    Student rows with zero norm are clamped at norm 1e-12; zero-norm teacher rows raise.
    """
    s = as_tensor(student)
    t = as_array(teacher)
    if s.shape != t.shape:
        raise ValueError(f"student shape {s.shape} != teacher shape {t.shape}")
    tn = np.linalg.norm(t, axis=-1, keepdims=True)
    if np.any(tn == 0):
        raise ValueError("teacher has a zero-norm token; cosine undefined")
    cos = tsum(normalize_rows(s) * (t / tn), axis=-1)
    n = int(np.prod(cos.shape))
    return tsum(1.0 - cos) * (1.0 / n)


def mean_cosine(a, b) -> float:
    a, b = as_array(a), as_array(b)
    num = (a * b).sum(-1)
    den = np.maximum(np.linalg.norm(a, axis=-1), 1e-12) * np.maximum(np.linalg.norm(b, axis=-1), 1e-12)
    return float((num / den).mean())


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to ``base_lr`` at step ``round(warmup_ratio * total)``, then cosine decay to 0.

    Steps count from 1.
    """
    warm = int(round(warmup_ratio * total_steps))
    if warm > 0 and step <= warm:
        return base_lr * step / warm
    if total_steps <= warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam; decay skips 1-d parameters (biases, norm gains)."""

    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd and p.ndim > 1:
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class DistillResult:
    student: StudentDecoder
    history: list[tuple[int, float, float]] = field(default_factory=list)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


def distill_train(teacher_fn, data: np.ndarray,
                  cfg: DistillRunConfig, student_cfg: StudentDecoderConfig,
                  on_step: Callable[[int, float, float], None] | None = None) -> DistillResult:
    """Train a student on ``data`` (n, L, d_c) to match the teacher under the cosine loss.

    ``teacher_fn`` is either a callable applied to each input batch or an array
    of precomputed targets aligned with ``data``. History rows are
    (step, lr, loss); the same seeds give bit-identical histories.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError(f"expected non-empty (n, L, d_c) inputs, got shape {data.shape}")
    if data.shape[-1] != student_cfg.input_dim:
        raise ValueError(f"inputs have width {data.shape[-1]}, student expects {student_cfg.input_dim}")
    if callable(teacher_fn):
        targets_of = teacher_fn
    else:
        targets = np.asarray(teacher_fn, dtype=np.float64)
        if targets.shape[0] != data.shape[0]:
            raise ValueError(f"{targets.shape[0]} teacher targets for {data.shape[0]} inputs")
        targets_of = None
    rng = np.random.default_rng(cfg.seed)
    student = StudentDecoder(student_cfg, seed=int(rng.integers(2**31)))
    params = student.parameters()
    opt = AdamW(params, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    steps_per_epoch = math.ceil(data.shape[0] / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(data.shape[0], cfg.batch_size, rng):
            step += 1
            x = data[idx]
            lr = lr_at(step, total, cfg.base_lr, cfg.warmup_ratio)
            try:
                target = targets_of(x) if targets_of is not None else targets[idx]
                loss = cosine_distill_loss(student_forward(x, student), target)
                opt.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingAborted(step, str(exc)) from exc
            opt.step(lr)
            if not all(np.isfinite(p.data).all() for p in params):
                raise TrainingAborted(step, "non-finite parameter after update")
            history.append((step, lr, loss.item()))
            if on_step is not None:
                on_step(step, lr, loss.item())
    return DistillResult(student, history)


def history_csv(history) -> str:
    lines = ["step,lr,loss"]
    lines += [f"{s},{lr:.10g},{loss:.17g}" for s, lr, loss in history]
    return "\n".join(lines) + "\n"
