"""Building the affinity, semantic and question hint token sets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .modules import Linear, Module
from .numerics import Tensor, as_array, as_tensor, pca_project, take_rows

AFFINITY_SOURCES = ("raw-teacher", "similarity-matrix", "student")
DEFAULT_GRID = (24, 24)


@dataclass
class VisualTokens:
    tokens: Tensor
    grid: tuple[int, int] = DEFAULT_GRID

    def __post_init__(self):
        rows, cols = self.grid
        if rows * cols != self.tokens.shape[0]:
            raise ValueError(f"grid {self.grid} does not hold {self.tokens.shape[0]} tokens")


@dataclass
class AffinityHint:
    tokens: Tensor
    source: str = "raw-teacher"

    def __post_init__(self):
        if self.source not in AFFINITY_SOURCES:
            raise ValueError(f"unknown affinity source {self.source!r}")


@dataclass
class SemanticHint:
    tokens: Tensor
    labels: np.ndarray
    confidences: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class QuestionHint:
    tokens: Tensor
    token_ids: np.ndarray


@dataclass
class HintSet:
    affinity: Tensor
    semantic: Tensor
    question: Tensor
    meta: dict = field(default_factory=dict)


def downsample_grid(feature_map, target: tuple[int, int] = DEFAULT_GRID) -> np.ndarray:
    """Average-pool a (g, g, d) map over non-overlapping windows and flatten row-major."""
    fm = as_array(feature_map)
    if fm.ndim != 3:
        raise ValueError(f"expected a (rows, cols, d) feature map, got shape {fm.shape}")
    g_r, g_c, d = fm.shape
    t_r, t_c = target
    if g_r < t_r or g_c < t_c or g_r % t_r or g_c % t_c:
        raise ValueError(f"cannot pool a {g_r}x{g_c} map onto {t_r}x{t_c} without fractional windows")
    w_r, w_c = g_r // t_r, g_c // t_c
    pooled = fm.reshape(t_r, w_r, t_c, w_c, d).mean(axis=(1, 3))
    return pooled.reshape(t_r * t_c, d)


def pool_tokens(tokens, grid: tuple[int, int], target: tuple[int, int]) -> np.ndarray:
    """Same as :func:`downsample_grid` for tokens already flattened row-major over ``grid``."""
    t = as_array(tokens)
    return downsample_grid(t.reshape(grid[0], grid[1], -1), target)


def similarity_matrix(tokens) -> np.ndarray:
    """Pairwise cosine similarity of token rows."""
    t = as_array(tokens)
    norms = np.linalg.norm(t, axis=-1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms.reshape(-1) == 0)[0])
        raise ValueError(f"token row {bad} has zero norm; cosine similarity undefined")
    unit = t / norms
    return unit @ np.swapaxes(unit, -1, -2)


def similarity_hint_tokens(teacher_tokens, proj: Linear) -> AffinityHint:
    """Hint token i is row i of the teacher's cosine-similarity matrix passed through ``proj``."""
    t = as_array(teacher_tokens)
    if proj.in_dim != t.shape[0]:
        raise ValueError(f"projection expects rows of length {proj.in_dim}, teacher has {t.shape[0]} tokens")
    sim = similarity_matrix(t)
    return AffinityHint(proj(Tensor(sim)), source="similarity-matrix")


def select_semantic_queries(queries, confidences, labels, k: int, label_embed) -> SemanticHint:
    """Keep the ``k`` most confident queries (ties: lower index first) and add their label embedding."""
    q = as_tensor(queries)
    conf = np.asarray(confidences, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    table = as_tensor(label_embed)
    n = q.shape[0]
    if conf.shape != (n,) or labels.shape != (n,):
        raise ValueError("queries, confidences and labels must have matching length")
    if k < 0 or k > n:
        raise ValueError(f"k={k} outside [0, {n}]")
    if n and (labels.min() < 0 or labels.max() >= table.shape[0]):
        raise ValueError(f"label index out of range for {table.shape[0]} classes")
    order = top_k_indices(conf, k)
    tokens = take_rows(q, order) + take_rows(table, labels[order])
    return SemanticHint(tokens, labels[order], conf[order], order)


def top_k_indices(confidences: np.ndarray, k: int) -> np.ndarray:
    # lexsort's last key is primary: descending confidence, then ascending index
    idx = np.arange(len(confidences))
    return np.lexsort((idx, -np.asarray(confidences)))[:k].astype(np.int64)


def question_hint_tokens(token_ids, embed_table) -> QuestionHint:
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    table = as_tensor(embed_table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"token id out of vocabulary of size {table.shape[0]}")
    return QuestionHint(take_rows(table, ids), ids.copy())


class HintProjections(Module):
    """Per-hint linear maps into the model width; absent when the hint already has that width."""

    def __init__(self, d: int, d_aff: int, d_sem: int, d_text: int, rng: np.random.Generator | None = None):
        self.d = d
        self.affinity = Linear(d_aff, d, rng) if d_aff != d else None
        self.semantic = Linear(d_sem, d, rng) if d_sem != d else None
        self.question = Linear(d_text, d, rng) if d_text != d else None


def _apply(name: str, x: Tensor, layer: Linear | None, d: int) -> Tensor:
    x = as_tensor(x)
    if layer is None:
        if x.shape[-1] != d:
            raise ValueError(f"{name} hint has width {x.shape[-1]} but no projection to {d}")
        return x
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"{name} projection expects width {layer.in_dim}, got {x.shape[-1]}")
    return layer(x)


def project_hints(hints: HintSet, proj: HintProjections) -> HintSet:
    return HintSet(
        _apply("affinity", hints.affinity, proj.affinity, proj.d),
        _apply("semantic", hints.semantic, proj.semantic, proj.d),
        _apply("question", hints.question, proj.question, proj.d),
        dict(hints.meta),
    )


def pca_color_map(tokens) -> np.ndarray:
    """RGB in [0, 1] per token from the top-3 principal components.

    Each channel is min-max normalised independently; a channel with no spread
    is set to 0.5.
    """
    t = as_array(tokens)
    if t.shape[0] < 3:
        raise ValueError("pca_color_map needs at least 3 tokens")
    _, proj = pca_project(t, 3)
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = hi - lo
    scale = max(1.0, float(np.abs(proj).max(initial=0.0)))
    flat = span <= 1e-12 * scale
    rgb = (proj - lo) / np.where(flat, 1.0, span)
    rgb[:, flat] = 0.5
    return np.clip(rgb, 0.0, 1.0)


def color_separation(rgb, instance_map) -> tuple[float, float]:
    """Mean RGB distance over same-instance and over cross-instance cell pairs.

    ``instance_map`` holds an instance id per token, negative for background;
    background tokens are ignored.
    """
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    ids = np.asarray(instance_map).reshape(-1)
    if ids.shape[0] != rgb.shape[0]:
        raise ValueError(f"{rgb.shape[0]} colors for {ids.shape[0]} instance labels")
    keep = ids >= 0
    rgb, ids = rgb[keep], ids[keep]
    if len(np.unique(ids)) < 2:
        raise ValueError("need at least two instances to compare")
    dist = np.linalg.norm(rgb[:, None, :] - rgb[None, :, :], axis=-1)
    same = ids[:, None] == ids[None, :]
    off_diag = ~np.eye(len(ids), dtype=bool)
    within = dist[same & off_diag]
    return float(within.mean()) if within.size else 0.0, float(dist[~same].mean())
