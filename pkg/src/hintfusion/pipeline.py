"""Toy VQA model on synthetic scenes: hint fusion -> mean pool -> MLP answer head.

Per-scene features are pooled from the 24x24 cell grid onto a coarser token
grid (6x6 by default) so a full training run fits in a few minutes on one core.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .accounting import DimConfig
from .distill import AdamW, StudentDecoder, TrainingAborted, lr_at, student_forward
from .fusion import FusionParams, FusionStrategy, fuse
from .hints import HintProjections, HintSet, pool_tokens, project_hints, similarity_matrix
from .modules import Linear, Module
from .numerics import NonFiniteError, Parameter, Tensor, concat, cross_entropy, gelu, mean, take_rows, trunc_normal
from .synthetic import (ANSWERS, CLASSES, DEFAULT_DEGRADE, KINDS, QUESTION_LEN, VOCAB, Degrade, Record, World,
                        encode_base_tokens, render_answer, teacher_affinity_tokens, teacher_semantic_queries)

HINTS = ("A", "S", "Q")
AFFINITY_SOURCES = ("raw-teacher", "similarity-matrix", "student")
QUESTION_SOURCES = ("llm-embed", "alt-text-encoder")


def desk_dims(grid: tuple[int, int] = (6, 6)) -> DimConfig:
    n = grid[0] * grid[1]
    return DimConfig(d=64, d_aff=64, d_sem=16, d_text=64, L=n, N=n, M=32, K=QUESTION_LEN, heads=8)


@dataclass
class ToyModelConfig:
    dims: DimConfig = field(default_factory=desk_dims)
    fusion: str = "joint"
    hints_enabled: tuple[str, ...] = HINTS
    semantic_k: int = 32
    affinity_source: str = "raw-teacher"
    question_source: str = "llm-embed"
    adapter_width: int = 128
    answer_classes: int = len(ANSWERS)
    stage_self_kv: bool = True

    def __post_init__(self):
        self.fusion = FusionStrategy.parse(self.fusion).value
        self.hints_enabled = tuple(h for h in HINTS if h in set(self.hints_enabled))
        if self.affinity_source not in AFFINITY_SOURCES:
            raise ValueError(f"unknown affinity_source {self.affinity_source!r}; expected one of {AFFINITY_SOURCES}")
        if self.question_source not in QUESTION_SOURCES:
            raise ValueError(f"unknown question_source {self.question_source!r}; expected one of {QUESTION_SOURCES}")
        if self.semantic_k < 0:
            raise ValueError("semantic_k must be non-negative")
        if self.adapter_width < 1 or self.answer_classes < 2:
            raise ValueError("adapter_width must be positive and answer_classes at least 2")

    def label(self) -> str:
        hints = "".join(self.hints_enabled) or "-"
        return (f"hints={hints} fusion={self.fusion} k={self.semantic_k} "
                f"aff={self.affinity_source} q={self.question_source}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["hints_enabled"] = list(self.hints_enabled)
        return d


@dataclass
class TrainConfig:
    lr: float = 1e-2
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


# ---------------------------------------------------------------- features

class FeatureStore:
    """Lazily computed, cached per-record features pooled onto the token grid."""

    def __init__(self, records: list[Record], world: World | None = None, degrade: Degrade = DEFAULT_DEGRADE,
                 grid: tuple[int, int] = (6, 6), num_queries: int = 64):
        self.records = records
        self.world = world or World()
        self.degrade = degrade
        self.grid = grid
        self.num_queries = num_queries
        self._cache: dict[str, np.ndarray] = {}
        self.question_ids = np.asarray([r.qa.question_ids for r in records], dtype=np.int64).reshape(-1, QUESTION_LEN)
        self.answers = np.asarray([r.qa.answer for r in records], dtype=np.int64)
        self.kinds = np.asarray([r.qa.kind for r in records])
        self.splits = np.asarray([r.split for r in records])

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.splits == name)

    def _pool(self, tokens: np.ndarray) -> np.ndarray:
        g = self.records[0].scene.grid if self.records else 24
        return pool_tokens(tokens, (g, g), self.grid)

    def get(self, name: str) -> np.ndarray:
        if name not in self._cache:
            self._cache[name] = self._compute(name)
        return self._cache[name]

    def _compute(self, name: str) -> np.ndarray:
        w = self.world
        if name == "P":
            return np.stack([self._pool(encode_base_tokens(r.scene, w, self.degrade)) for r in self.records])
        if name == "backbone":
            return np.stack([self._pool(encode_base_tokens(r.scene, w, Degrade())) for r in self.records])
        if name == "teacher":
            return np.stack([self._pool(teacher_affinity_tokens(r.scene, w)) for r in self.records])
        if name == "similarity":
            return np.stack([self._pool_similarity(teacher_affinity_tokens(r.scene, w)) for r in self.records])
        if name in ("sem_queries", "sem_labels"):
            self._semantic()
            return self._cache[name]
        if name == "student":
            raise KeyError("student features are missing; call attach_student first")
        raise KeyError(f"unknown feature {name!r}")

    def _pool_similarity(self, teacher: np.ndarray) -> np.ndarray:
        g = self.records[0].scene.grid
        r, c = self.grid
        sim = similarity_matrix(teacher)
        sim = sim.reshape(r, g // r, c, g // c, r, g // r, c, g // c)
        return sim.mean(axis=(1, 3, 5, 7)).reshape(r * c, r * c)

    def _semantic(self) -> None:
        qs, ls = [], []
        for r in self.records:
            q, conf, lab = teacher_semantic_queries(r.scene, self.world, self.num_queries)
            order = np.lexsort((np.arange(len(conf)), -conf))[:self.num_queries]
            qs.append(q[order])
            ls.append(lab[order])
        self._cache["sem_queries"] = np.stack(qs)
        self._cache["sem_labels"] = np.stack(ls)

    def attach_student(self, student: StudentDecoder, batch: int = 256) -> None:
        back = self.get("backbone")
        outs = [student_forward(back[i:i + batch], student).data for i in range(0, len(back), batch)]
        self._cache["student"] = np.concatenate(outs, axis=0)

    def affinity(self, source: str) -> np.ndarray:
        return self.get({"raw-teacher": "teacher", "similarity-matrix": "similarity", "student": "student"}[source])


# ---------------------------------------------------------------- model

class ToyModel(Module):
    def __init__(self, cfg: ToyModelConfig, seed: int = 0, affinity_dim: int | None = None):
        rng = np.random.default_rng(seed)
        d = cfg.dims
        self.cfg = cfg
        d_aff = affinity_dim if affinity_dim is not None else d.d_aff
        self.proj = HintProjections(d.d, d_aff, d.d_sem, d.d_text, rng)
        self.label_embed = Parameter(trunc_normal(rng, (len(CLASSES), d.d_sem)), "label_embed")
        table = trunc_normal(rng, (len(VOCAB), d.d_text), std=1.0)
        if cfg.question_source == "llm-embed":
            self.question_embed = Parameter(table, "question_embed")
        else:
            # frozen, independently drawn table standing in for a separate text encoder
            self.alt_table = np.random.default_rng(seed + 104729).standard_normal((len(VOCAB), d.d_text))
        self.fusion = FusionParams(cfg.fusion, d.d, d.heads, seed=int(rng.integers(2**31)), zero_output=True,
                                   stage_self_kv=cfg.stage_self_kv)
        self.fc1 = Linear(d.d + d.d_text, cfg.adapter_width, rng)
        self.fc2 = Linear(cfg.adapter_width, cfg.answer_classes, rng)

    def question_table(self):
        return self.question_embed if self.cfg.question_source == "llm-embed" else Tensor(self.alt_table)


@dataclass
class Batch:
    P: np.ndarray
    affinity: np.ndarray
    sem_queries: np.ndarray
    sem_labels: np.ndarray
    question_ids: np.ndarray
    answers: np.ndarray | None = None


def make_batch(store: FeatureStore, cfg: ToyModelConfig, idx: np.ndarray) -> Batch:
    P = store.get("P")[idx]
    b = len(idx)
    hints = set(cfg.hints_enabled)
    aff_dim = affinity_width(store, cfg)
    aff = store.affinity(cfg.affinity_source)[idx] if "A" in hints else np.zeros((b, 0, aff_dim))
    if "S" in hints and cfg.semantic_k > 0:
        k = cfg.semantic_k
        if k > store.num_queries:
            raise ValueError(f"semantic_k={k} exceeds the {store.num_queries} stored queries")
        sq, sl = store.get("sem_queries")[idx, :k], store.get("sem_labels")[idx, :k]
    else:
        sq, sl = np.zeros((b, 0, cfg.dims.d_sem)), np.zeros((b, 0), dtype=np.int64)
    return Batch(P, aff, sq, sl, store.question_ids[idx], store.answers[idx])


def affinity_width(store: FeatureStore, cfg: ToyModelConfig) -> int:
    if cfg.affinity_source == "similarity-matrix":
        return store.grid[0] * store.grid[1]
    return cfg.dims.d_aff


def forward(model: ToyModel, batch: Batch) -> Tensor:
    """Answer logits [B, C]: project hints, fuse, mean-pool, concat pooled question embedding, MLP."""
    cfg = model.cfg
    table = model.question_table()
    q_tok = take_rows(table, batch.question_ids)
    sem = Tensor(batch.sem_queries) + take_rows(model.label_embed, batch.sem_labels)
    if "Q" in cfg.hints_enabled:
        h_q = q_tok
    else:
        h_q = Tensor(np.zeros(batch.question_ids.shape[:1] + (0, cfg.dims.d_text)))
    hints = project_hints(HintSet(Tensor(batch.affinity), sem, h_q), model.proj)
    fused = fuse(Tensor(batch.P), hints.affinity, hints.semantic, hints.question, model.fusion)
    pooled = concat([mean(fused, axis=-2), mean(q_tok, axis=-2)], axis=-1)
    return model.fc2(gelu(model.fc1(pooled)))


# ---------------------------------------------------------------- metrics

def bleu4(candidate, references, max_n: int = 4) -> float:
    """Sentence BLEU with uniform weights up to 4-grams and a brevity penalty.

    A zero n-gram match count is smoothed to (0 + 1) / (count + 1). An empty
    candidate scores 0.
    """
    refs = [list(r) for r in references]
    if not refs:
        raise ValueError("bleu4 needs at least one reference")
    cand = list(candidate)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        grams = Counter(tuple(cand[i:i + n]) for i in range(len(cand) - n + 1))
        best: Counter = Counter()
        for r in refs:
            for g, c in Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1)).items():
                best[g] = max(best[g], c)
        total = sum(grams.values())
        match = sum(min(c, best[g]) for g, c in grams.items())
        p = (match + 1) / (total + 1) if match == 0 else match / total
        log_p += math.log(p) / max_n
    c = len(cand)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    accuracy: float
    per_kind: dict
    bleu4: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def score_predictions(records: list[Record], preds: np.ndarray, step: int = 0, epoch: int = 0,
                      loss: float = float("nan")) -> MetricsRecord:
    if len(records) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = np.asarray(preds, dtype=np.int64)
    gold = np.asarray([r.qa.answer for r in records])
    kinds = np.asarray([r.qa.kind for r in records])
    correct = preds == gold
    per_kind = {k: float(correct[kinds == k].mean()) for k in KINDS if np.any(kinds == k)}
    bleu = float(np.mean([bleu4(render_answer(r.qa, int(p)), [render_answer(r.qa, r.qa.answer)])
                          for r, p in zip(records, preds)]))
    return MetricsRecord(step, epoch, loss, float(correct.mean()), per_kind, bleu, len(records))


def predict(model: ToyModel, store: FeatureStore, idx: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(idx), batch_size):
        logits = forward(model, make_batch(store, model.cfg, idx[i:i + batch_size]))
        out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: ToyModel, store: FeatureStore, idx: np.ndarray | None = None, step: int = 0,
             epoch: int = 0) -> MetricsRecord:
    idx = store.split("test") if idx is None else np.asarray(idx)
    if len(idx) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(model, store, idx)
    return score_predictions([store.records[i] for i in idx], preds, step, epoch)


def question_prior_accuracy(store: FeatureStore, train_idx=None, test_idx=None) -> dict:
    """Accuracy of answering each exact question with its most frequent training answer, per kind."""
    train_idx = store.split("train") if train_idx is None else train_idx
    test_idx = store.split("test") if test_idx is None else test_idx
    table: dict[tuple, Counter] = {}
    for i in train_idx:
        table.setdefault(tuple(store.question_ids[i]), Counter())[int(store.answers[i])] += 1
    overall = Counter(int(a) for a in store.answers[train_idx])
    fallback = min(overall, key=lambda a: (-overall[a], a))
    hits: dict[str, list[bool]] = {}
    for i in test_idx:
        c = table.get(tuple(store.question_ids[i]))
        guess = min(c, key=lambda a: (-c[a], a)) if c else fallback
        hits.setdefault(str(store.kinds[i]), []).append(guess == store.answers[i])
    out = {k: float(np.mean(v)) for k, v in hits.items()}
    out["overall"] = float(np.mean([h for v in hits.values() for h in v]))
    return out


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: ToyModel
    history: list[MetricsRecord]
    final: MetricsRecord | None = None


def build_model(cfg: ToyModelConfig, store: FeatureStore, seed: int) -> ToyModel:
    return ToyModel(cfg, seed=seed, affinity_dim=affinity_width(store, cfg))


def train(cfg: ToyModelConfig, store: FeatureStore, run: TrainConfig = TrainConfig(),
          train_idx: np.ndarray | None = None, log=None) -> TrainResult:
    """Cross-entropy training with AdamW, linear warmup and cosine decay; one history row per epoch."""
    train_idx = store.split("train") if train_idx is None else np.asarray(train_idx)
    if len(train_idx) == 0:
        raise ValueError("no training records")
    rng = np.random.default_rng(run.seed)
    model = build_model(cfg, store, int(rng.integers(2**31)))
    params = model.parameters()
    opt = AdamW(params, weight_decay=run.weight_decay)
    per_epoch = math.ceil(len(train_idx) / run.batch_size)
    total = per_epoch * run.epochs
    history = []
    step = 0
    for epoch in range(1, run.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        loss_sum, hits, seen = 0.0, 0, 0
        for i in range(0, len(order), run.batch_size):
            step += 1
            batch = make_batch(store, cfg, order[i:i + run.batch_size])
            lr = lr_at(step, total, run.lr, run.warmup_ratio)
            try:
                logits = forward(model, batch)
                loss = cross_entropy(logits, batch.answers)
                opt.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingAborted(step, str(exc)) from exc
            opt.step(lr)
            n = len(batch.answers)
            loss_sum += loss.item() * n
            hits += int((np.argmax(logits.data, -1) == batch.answers).sum())
            seen += n
        rec = MetricsRecord(step, epoch, loss_sum / seen, hits / seen, {}, float("nan"), seen)
        history.append(rec)
        if log is not None:
            log(rec)
    return TrainResult(model, history)


def train_and_evaluate(cfg: ToyModelConfig, store: FeatureStore, run: TrainConfig = TrainConfig(),
                       log=None) -> TrainResult:
    res = train(cfg, store, run, log=log)
    last = res.history[-1]
    res.final = evaluate(res.model, store, step=last.step, epoch=last.epoch)
    return res


def hint_subsets() -> list[tuple[str, ...]]:
    """All 8 subsets of {A, S, Q}, ordered by size then name (empty set first)."""
    subs = []
    for r in range(len(HINTS) + 1):
        subs.extend(itertools.combinations(HINTS, r))
    return subs


AXES = ("hints", "semantic_k", "affinity_source", "question_source", "fusion")


def expand_axes(base: ToyModelConfig, axes: dict) -> list[ToyModelConfig]:
    unknown = sorted(set(axes) - set(AXES))
    if unknown:
        raise ValueError(f"unknown ablation axes {unknown}; expected a subset of {AXES}")
    names = [a for a in AXES if a in axes]
    field_of = {"hints": "hints_enabled"}
    cfgs = []
    for combo in itertools.product(*(axes[a] for a in names)):
        cfgs.append(replace(base, **{field_of.get(a, a): v for a, v in zip(names, combo)}))
    return cfgs


def ablate(base: ToyModelConfig, store: FeatureStore, axes: dict, run: TrainConfig = TrainConfig(),
           log=None) -> list[dict]:
    """Train and evaluate every configuration in the cross-product of ``axes`` with shared seeds.

    Rows come back ranked by test accuracy (ties keep enumeration order).
    """
    rows = []
    for i, cfg in enumerate(expand_axes(base, axes)):
        res = train_and_evaluate(cfg, store, run)
        row = {"order": i, "config": cfg.label(), "hints": "".join(cfg.hints_enabled) or "-",
               "fusion": cfg.fusion, "semantic_k": cfg.semantic_k, "affinity_source": cfg.affinity_source,
               "question_source": cfg.question_source, "accuracy": res.final.accuracy,
               "bleu4": res.final.bleu4}
        for k in KINDS:
            row[f"acc_{k}"] = res.final.per_kind.get(k, float("nan"))
        rows.append(row)
        if log is not None:
            log(row)
    rows.sort(key=lambda r: (-r["accuracy"], r["order"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows
