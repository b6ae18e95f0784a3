"""Multi-head scaled dot-product attention (no residual, no mask, no dropout)."""
from __future__ import annotations

import math

import numpy as np

from .modules import Module
from .numerics import Parameter, ShapeError, Tensor, as_tensor, matmul, reshape, softmax, swapaxes, trunc_normal


class EmptyKeyError(ValueError):
    """Attention was asked to attend over zero keys."""


class MhaParams(Module):
    """Weights for one attention layer; projections are ``x @ W + b`` with W of shape (d, d)."""

    def __init__(self, model_dim: int, heads: int, seed: int | None = 0, zero_output: bool = False,
                 zero_all: bool = False):
        if heads < 1 or model_dim % heads:
            raise ValueError(f"model_dim={model_dim} must be a positive multiple of heads={heads}")
        self.model_dim = model_dim
        self.heads = heads
        rng = np.random.default_rng(seed)
        d = model_dim

        def w():
            # zero_all skips sampling; used for cheap shape-only instantiation
            return np.zeros((d, d)) if zero_all else trunc_normal(rng, (d, d))

        self.W_q, self.W_k, self.W_v = Parameter(w(), "W_q"), Parameter(w(), "W_k"), Parameter(w(), "W_v")
        self.W_o = Parameter(np.zeros((d, d)) if zero_output else w(), "W_o")
        self.b_q = Parameter(np.zeros(d), "b_q")
        self.b_k = Parameter(np.zeros(d), "b_k")
        self.b_v = Parameter(np.zeros(d), "b_v")
        self.b_o = Parameter(np.zeros(d), "b_o")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @staticmethod
    def count(model_dim: int) -> int:
        return 4 * model_dim * model_dim + 4 * model_dim


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return swapaxes(reshape(x, (*lead, n, heads, d // heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, n, h * dh))


def multi_head_attention(query_in, kv_in, p: MhaParams) -> Tensor:
    """Attend from ``query_in[..., Lq, d]`` over ``kv_in[..., Lkv, d]``; returns ``[..., Lq, d]``."""
    query_in, kv_in = as_tensor(query_in), as_tensor(kv_in)
    d = p.model_dim
    if query_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise ShapeError(f"attention expects width {d}, got query {query_in.shape} and kv {kv_in.shape}")
    if query_in.shape[-2] < 1:
        raise ShapeError("attention needs at least one query row")
    if kv_in.shape[-2] == 0:
        raise EmptyKeyError("attention over an empty key/value set")
    q = _split_heads(query_in @ p.W_q + p.b_q, p.heads)
    k = _split_heads(kv_in @ p.W_k + p.b_k, p.heads)
    v = _split_heads(kv_in @ p.W_v + p.b_v, p.heads)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(p.head_dim))
    weights = softmax(scores, axis=-1)
    return _merge_heads(matmul(weights, v)) @ p.W_o + p.b_o


def self_attention(x, p: MhaParams) -> Tensor:
    return multi_head_attention(x, x, p)
