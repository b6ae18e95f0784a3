"""Seeded finite-difference suites comparing reverse-mode gradients with central differences.

Each scope builds small random instances (all weights drawn non-zero so no
branch is trivially dead), checks every parameter and every differentiable
input, and reports the maximum relative error per parameter group.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .accounting import DimConfig
from .attention import MhaParams, multi_head_attention
from .distill import StudentDecoder, StudentDecoderConfig, cosine_distill_loss, student_forward
from .fusion import FusionParams, FusionStrategy, fuse
from .numerics import Parameter, cross_entropy, finite_diff_grad, relative_error, reverse_mode_grad, tsum
from .pipeline import Batch, ToyModel, ToyModelConfig, forward
from .synthetic import CLASSES, QUESTION_LEN, VOCAB

SCOPES = ("attention", "fusion", "distill", "pipeline")
TOLERANCE = 1e-4


@dataclass
class ScopeReport:
    scope: str
    seeds: int
    group_errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> list[str]:
        return sorted(g for g, e in self.group_errors.items() if not e < self.tolerance)

    def lines(self) -> list[str]:
        out = [f"{self.scope}.{g} max_rel_err={e:.3e} {'ok' if e < self.tolerance else 'FAIL'}"
               for g, e in sorted(self.group_errors.items())]
        out.append(f"{self.scope}: {'PASS' if self.passed else 'FAIL'} seeds={self.seeds} "
                   f"max_rel_err={self.max_error:.3e} tol={self.tolerance:g}")
        return out


def _randomize(params, rng, scale=0.4):
    for p in params:
        p.data[...] = rng.standard_normal(p.shape) * scale


def _group(name: str) -> str:
    # "attn.2.W_q" and "attn.0.W_q" share one group
    return re.sub(r"\.\d+\.", ".", name)


def _check(objective, params, corrupt: str | None, eps: float) -> dict[str, float]:
    analytic = reverse_mode_grad(objective, params)
    if corrupt:
        for k in analytic:
            if corrupt in k:
                analytic[k] = analytic[k] * 1.5 + 1e-3
    numeric = finite_diff_grad(objective, params, eps)
    return {k: relative_error(analytic[k], numeric[k]) for k in analytic}


# ---- per-scope instance builders: each returns (objective, params)

def _attention_case(seed: int):
    rng = np.random.default_rng(seed)
    p = MhaParams(4, 2, seed=seed)
    params = p.parameters()
    _randomize(params, rng)
    q = Parameter(rng.standard_normal((3, 4)), "input.query")
    kv = Parameter(rng.standard_normal((4, 4)), "input.kv")
    R = rng.standard_normal((3, 4))
    return (lambda: tsum(multi_head_attention(q, kv, p) * R)), params + [q, kv]


def _fusion_case(seed: int, strategy: FusionStrategy):
    rng = np.random.default_rng(seed)
    fp = FusionParams(strategy, 4, 2, seed=seed, zero_output=False)
    params = fp.parameters()
    _randomize(params, rng)
    P, A, S, Q = (Parameter(rng.standard_normal((n, 4)), f"input.{nm}")
                  for n, nm in ((2, "P"), (2, "A"), (1, "S"), (1, "Q")))
    rows = 6 if strategy is FusionStrategy.CONCAT else 2
    R = rng.standard_normal((rows, 4))
    return (lambda: tsum(fuse(P, A, S, Q, fp) * R)), params + [P, A, S, Q]


def _distill_case(seed: int):
    rng = np.random.default_rng(seed)
    cfg = StudentDecoderConfig(layers=2, heads=2, width=4, ffn_ratio=2, input_dim=3, output_dim=5)
    student = StudentDecoder(cfg, seed=seed)
    params = student.parameters()
    _randomize(params, rng)
    x = Parameter(rng.standard_normal((3, 3)), "input.base_tokens")
    teacher = rng.standard_normal((3, 5))
    return (lambda: cosine_distill_loss(student_forward(x, student), teacher)), params + [x]


def _pipeline_case(seed: int, fusion: str = "joint"):
    rng = np.random.default_rng(seed)
    dims = DimConfig(d=4, d_aff=3, d_sem=2, d_text=4, L=4, N=2, M=2, K=QUESTION_LEN, heads=2)
    cfg = ToyModelConfig(dims=dims, fusion=fusion, semantic_k=2, adapter_width=4, answer_classes=5)
    model = ToyModel(cfg, seed=seed)
    params = model.parameters()
    _randomize(params, rng)
    b = 2
    batch = Batch(P=rng.standard_normal((b, 4, 4)), affinity=rng.standard_normal((b, 2, 3)),
                  sem_queries=rng.standard_normal((b, 2, 2)), sem_labels=rng.integers(0, len(CLASSES), (b, 2)),
                  question_ids=rng.integers(0, len(VOCAB), (b, QUESTION_LEN)), answers=rng.integers(0, 5, b))
    return (lambda: cross_entropy(forward(model, batch), batch.answers)), params


def scope_cases(scope: str, seeds: int):
    """Yield (label, objective, params) for every instance of ``scope``."""
    if scope == "attention":
        for s in range(seeds):
            yield (f"seed{s}", *_attention_case(s))
    elif scope == "fusion":
        for strategy in FusionStrategy:
            for s in range(seeds):
                yield (f"{strategy.value}.seed{s}", *_fusion_case(s, strategy))
    elif scope == "distill":
        for s in range(seeds):
            yield (f"seed{s}", *_distill_case(s))
    elif scope == "pipeline":
        for s in range(seeds):
            yield (f"seed{s}", *_pipeline_case(s, ("joint", "sequential")[s % 2]))
    else:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


def run_scope(scope: str, seeds: int = 20, eps: float = 1e-5, corrupt: str | None = None) -> ScopeReport:
    if seeds < 1:
        raise ValueError("need at least one seed")
    report = ScopeReport(scope, seeds)
    for label, objective, params in scope_cases(scope, seeds):
        prefix = label.split(".seed")[0] + "." if scope == "fusion" else ""
        for name, err in _check(objective, params, corrupt, eps).items():
            g = prefix + _group(name)
            report.group_errors[g] = max(report.group_errors.get(g, 0.0), err)
    return report
