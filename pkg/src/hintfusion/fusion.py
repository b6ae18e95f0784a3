"""Hint fusion strategies: merge hint tokens into the visual tokens P.

Residuals are explicit. For every attention-based strategy the fused output is
``P + (attention branch)``; with zero-initialised output projections that
branch is exactly zero, so fusion starts as the identity.

Stage wiring lives in :func:`wiring` and is shared by :func:`fuse`,
:func:`fused_kv_assembly` and the cost model in :mod:`hintfusion.accounting`.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .attention import EmptyKeyError, MhaParams, multi_head_attention
from .modules import Module
from .numerics import Tensor, as_tensor, concat

FUSION_HEADS = 8


class FusionStrategy(Enum):
    CONCAT = "concat"
    SELF_CROSS = "self-cross"
    JOINT = "joint"
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"

    @classmethod
    def parse(cls, name: "str | FusionStrategy") -> "FusionStrategy":
        if isinstance(name, FusionStrategy):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for s in cls:
            if s.value == key:
                return s
        raise ValueError(f"unknown fusion strategy {name!r}; expected one of {[s.value for s in cls]}")

    def __str__(self) -> str:
        return self.value


ATTENTION_LAYERS = {
    FusionStrategy.CONCAT: 0,
    FusionStrategy.SELF_CROSS: 2,
    FusionStrategy.JOINT: 1,
    FusionStrategy.SEQUENTIAL: 3,
    FusionStrategy.PARALLEL: 3,
}


@dataclass(frozen=True)
class Stage:
    """One attention call: ``query`` names "P" or an earlier stage ("s0", "s1"); ``kv`` lists sources."""
    query: str
    kv: tuple[str, ...]


def wiring(strategy: FusionStrategy, stage_self_kv: bool = True) -> list[Stage]:
    """Symbolic per-stage (query, key-value) wiring.

    With ``stage_self_kv`` the per-hint stages of Sequential/Parallel also
    attend over their own query tokens, i.e. CA(X, [X, H]) rather than CA(X, H).
    """
    strategy = FusionStrategy.parse(strategy)
    if strategy is FusionStrategy.CONCAT:
        return []
    if strategy is FusionStrategy.JOINT:
        return [Stage("P", ("P", "A", "S", "Q"))]
    if strategy is FusionStrategy.SELF_CROSS:
        return [Stage("P", ("P",)), Stage("s0", ("A", "S", "Q"))]
    queries = ["P", "s0", "s1"] if strategy is FusionStrategy.SEQUENTIAL else ["P", "P", "P"]
    return [Stage(q, ((q,) if stage_self_kv else ()) + (h,)) for q, h in zip(queries, "ASQ")]


class FusionParams(Module):
    def __init__(self, strategy, model_dim: int, heads: int = FUSION_HEADS, seed: int = 0,
                 zero_output: bool = True, stage_self_kv: bool = True, zero_all: bool = False):
        self.strategy = FusionStrategy.parse(strategy)
        self.model_dim = model_dim
        self.stage_self_kv = stage_self_kv
        n = ATTENTION_LAYERS[self.strategy]
        self.attn = [MhaParams(model_dim, heads, seed=seed * 7919 + i, zero_output=zero_output, zero_all=zero_all)
                     for i in range(n)]


def _sources(P, H_A, H_S, H_Q) -> dict[str, Tensor]:
    return {"P": P, "A": H_A, "S": H_S, "Q": H_Q}


def _kv(stage: Stage, env: dict[str, Tensor]) -> Tensor:
    parts = [env[name] for name in stage.kv]
    return parts[0] if len(parts) == 1 else concat(parts, axis=-2)


def _check_inputs(P, H_A, H_S, H_Q) -> None:
    d = P.shape[-1]
    if P.shape[-2] < 1:
        raise ValueError("fusion needs at least one visual token")
    for name, h in (("H_A", H_A), ("H_S", H_S), ("H_Q", H_Q)):
        if h.shape[-1] != d:
            raise ValueError(f"{name} width {h.shape[-1]} != visual width {d}; project hints first")
        if h.shape[:-2] != P.shape[:-2]:
            raise ValueError(f"{name} batch shape {h.shape[:-2]} != visual batch shape {P.shape[:-2]}")


def _empty(t: Tensor) -> bool:
    return t.shape[-2] == 0


def fused_kv_assembly(P, H_A, H_S, H_Q, strategy, params: FusionParams | None = None) -> list[tuple[Tensor, Tensor]]:
    """Materialise the (query, key-value) pair of every attention call.

    Stages whose query is an earlier stage's output (Sequential, Self-Cross)
    need ``params`` to run that earlier stage.
    """
    pairs, _ = _run(P, H_A, H_S, H_Q, FusionStrategy.parse(strategy), params, collect=True)
    return pairs


def _run(P, H_A, H_S, H_Q, strategy, params, collect=False):
    P, H_A, H_S, H_Q = (as_tensor(t) for t in (P, H_A, H_S, H_Q))
    _check_inputs(P, H_A, H_S, H_Q)
    self_kv = params.stage_self_kv if params is not None else True
    env = _sources(P, H_A, H_S, H_Q)
    per_hint = strategy in (FusionStrategy.SEQUENTIAL, FusionStrategy.PARALLEL)
    if strategy is not FusionStrategy.JOINT and all(_empty(h) for h in (H_A, H_S, H_Q)):
        raise EmptyKeyError(f"{strategy.value} fusion needs at least one non-empty hint")
    pairs, outs = [], []
    for i, st in enumerate(wiring(strategy, self_kv)):
        if st.query not in env:
            raise RuntimeError(f"stage {i} of {strategy.value} needs fusion params to compute its query")
        query, kv = env[st.query], _kv(st, env)
        if collect:
            pairs.append((query, kv))
        if params is None:
            continue
        if per_hint and _empty(env[st.kv[-1]]):
            # nothing to inject: Sequential passes its query through, Parallel adds no branch
            out = query if strategy is FusionStrategy.SEQUENTIAL else None
        else:
            out = multi_head_attention(query, kv, params.attn[i])
        outs.append(out)
        env[f"s{i}"] = out
    return pairs, outs


def fuse(P, H_A, H_S, H_Q, params: FusionParams) -> Tensor:
    """Fused visual tokens. Concatenation returns L+N+M+K rows, every other strategy L rows."""
    strategy = params.strategy
    P, H_A, H_S, H_Q = (as_tensor(t) for t in (P, H_A, H_S, H_Q))
    if strategy is FusionStrategy.CONCAT:
        _check_inputs(P, H_A, H_S, H_Q)
        return concat([P, H_A, H_S, H_Q], axis=-2)
    _, outs = _run(P, H_A, H_S, H_Q, strategy, params)
    if strategy is FusionStrategy.PARALLEL:
        out = P
        for branch in outs:
            if branch is not None:
                out = out + branch
        return out
    last = outs[-1]
    if last is P:
        return P
    return P + last
