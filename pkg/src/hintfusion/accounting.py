"""Closed-form parameter and FLOP counts for the fusion strategies.

Default dimensions are an assumption set chosen so the counts line up with
published reference numbers: model width 1024, affinity tokens already at
model width (no projection), 256-d semantic queries and 4096-d question
embeddings projected to 1024, 576 visual and affinity tokens, 32 semantic
tokens and 40 question tokens.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .attention import MhaParams
from .fusion import ATTENTION_LAYERS, FUSION_HEADS, FusionParams, FusionStrategy, wiring
from .hints import HintProjections

FLOP_CONVENTIONS = ("full", "projection-macs")


@dataclass(frozen=True)
class DimConfig:
    d: int = 1024
    d_aff: int = 1024
    d_sem: int = 256
    d_text: int = 4096
    L: int = 576
    N: int = 576
    M: int = 32
    K: int = 40
    heads: int = FUSION_HEADS

    def __post_init__(self):
        for name in ("d", "d_aff", "d_sem", "d_text", "L", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"DimConfig.{name} must be positive, got {getattr(self, name)}")
        for name in ("N", "M", "K"):
            if getattr(self, name) < 0:
                raise ValueError(f"DimConfig.{name} must be non-negative, got {getattr(self, name)}")

    def with_overrides(self, **kw) -> "DimConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostReport:
    strategy: FusionStrategy
    params: int
    flops: int
    convention: str = "full"

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def projection_params(dims: DimConfig) -> int:
    total = 0
    for src in (dims.d_aff, dims.d_sem, dims.d_text):
        if src != dims.d:
            total += src * dims.d + dims.d
    return total


def count_fusion_params(strategy, dims: DimConfig = DimConfig()) -> int:
    strategy = FusionStrategy.parse(strategy)
    return ATTENTION_LAYERS[strategy] * MhaParams.count(dims.d) + projection_params(dims)


def walk_fusion_params(strategy, dims: DimConfig = DimConfig()) -> int:
    """Instantiate fusion + projection modules (zero weights) and count every parameter entry."""
    fusion = FusionParams(strategy, dims.d, dims.heads if dims.d % dims.heads == 0 else 1, zero_all=True)
    proj = HintProjections(dims.d, dims.d_aff, dims.d_sem, dims.d_text)
    return fusion.num_parameters() + proj.num_parameters()


def _token_counts(dims: DimConfig) -> dict[str, int]:
    return {"P": dims.L, "A": dims.N, "S": dims.M, "Q": dims.K, "s0": dims.L, "s1": dims.L}


def attention_macs(lq: int, lk: int, d: int, convention: str = "full") -> int:
    """Multiply-adds of one attention call with ``lq`` queries over ``lk`` keys."""
    proj = (lq + 2 * lk + lq) * d * d
    if convention == "projection-macs":
        return proj
    return proj + 2 * lq * lk * d


def estimate_fusion_flops(strategy, dims: DimConfig = DimConfig(), convention: str = "full",
                          stage_self_kv: bool = True) -> int:
    """Cost of one fusion forward pass.

    ``full`` is 2 x multiply-adds over hint projections, Q/K/V/O projections and
    the score and weighted-sum contractions; softmax is ignored.
    ``projection-macs`` counts only Q/K/V/O projection multiply-adds (no factor 2).
    """
    if convention not in FLOP_CONVENTIONS:
        raise ValueError(f"unknown FLOP convention {convention!r}; expected one of {FLOP_CONVENTIONS}")
    strategy = FusionStrategy.parse(strategy)
    n = _token_counts(dims)
    per_hint = strategy in (FusionStrategy.SEQUENTIAL, FusionStrategy.PARALLEL)
    macs = 0
    for st in wiring(strategy, stage_self_kv):
        if per_hint and n[st.kv[-1]] == 0:
            continue
        lk = sum(n[src] for src in st.kv)
        macs += attention_macs(n[st.query], lk, dims.d, convention)
    if convention == "projection-macs":
        return macs
    hint_proj = 0
    for tokens, src in ((dims.N, dims.d_aff), (dims.M, dims.d_sem), (dims.K, dims.d_text)):
        if src != dims.d:
            hint_proj += tokens * src * dims.d
    return 2 * (macs + hint_proj)


def cost_report(strategy, dims: DimConfig = DimConfig(), convention: str = "full") -> CostReport:
    strategy = FusionStrategy.parse(strategy)
    return CostReport(strategy, count_fusion_params(strategy, dims), estimate_fusion_flops(strategy, dims, convention),
                      convention)


def cost_table(dims: DimConfig = DimConfig()) -> list[dict]:
    rows = []
    for s in FusionStrategy:
        full = estimate_fusion_flops(s, dims, "full")
        proj = estimate_fusion_flops(s, dims, "projection-macs")
        params = count_fusion_params(s, dims)
        rows.append({
            "strategy": s.value,
            "attention_layers": ATTENTION_LAYERS[s],
            "params": params,
            "params_M": f"{params / 1e6:.2f}",
            "gflops": f"{full / 1e9:.3f}",
            "gflops_projection_macs": f"{proj / 1e9:.3f}",
        })
    return rows
