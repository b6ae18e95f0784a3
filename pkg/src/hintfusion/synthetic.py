"""Seeded grid-world driving scenes with teacher signals and templated questions.

A scene is a 24x24 grid holding axis-aligned rectangular instances. Each
class has a fixed footprint, so a class's covered area is proportional to
its instance count. Encoders are fixed random codebooks shared by every
scene (the ``World``); per-scene noise is drawn from the scene seed.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorio

CLASSES = ("car", "cyclist", "pedestrian", "sign", "lane")
BACKGROUND = len(CLASSES)  # class index used for background cells
FOOTPRINT = {"car": (4, 4), "cyclist": (3, 3), "pedestrian": (3, 2), "sign": (2, 2), "lane": (2, 6)}
ATTRIBUTES = ("moving", "stopped")
WEATHER = ("clear", "rain", "fog", "snow")
LIGHTING = ("day", "night")
KINDS = ("presence", "count", "relation", "global")
REQUIRED_HINTS = {"presence": ("S",), "count": ("A", "S"), "relation": ("A", "S"), "global": ()}
MAX_COUNT = 8

VOCAB = ("<pad>", "how", "many", "are", "there", "is", "a", "near", "what", "the", "weather",
         "lighting", "objects", "?") + CLASSES
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
QUESTION_LEN = 8
ANSWERS = ("no", "yes") + tuple(str(i) for i in range(MAX_COUNT + 1)) + WEATHER + LIGHTING
ANSWER_ID = {a: i for i, a in enumerate(ANSWERS)}


@dataclass
class Instance:
    id: int
    cls: int
    attribute: int
    r0: int
    c0: int
    h: int
    w: int

    def cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.r0, self.r0 + self.h) for c in range(self.c0, self.c0 + self.w)]


@dataclass
class Scene:
    seed: int
    instances: list[Instance]
    weather: int
    lighting: int
    grid: int = 24

    def instance_map(self) -> np.ndarray:
        m = np.full((self.grid, self.grid), -1, dtype=np.int64)
        for inst in self.instances:
            m[inst.r0:inst.r0 + inst.h, inst.c0:inst.c0 + inst.w] = inst.id
        return m

    def class_map(self) -> np.ndarray:
        m = np.full((self.grid, self.grid), BACKGROUND, dtype=np.int64)
        for inst in self.instances:
            m[inst.r0:inst.r0 + inst.h, inst.c0:inst.c0 + inst.w] = inst.cls
        return m

    def counts(self) -> np.ndarray:
        return np.bincount([i.cls for i in self.instances], minlength=len(CLASSES))

    def to_tensors(self) -> dict[str, np.ndarray]:
        rows = [[i.id, i.cls, i.attribute, i.r0, i.c0, i.h, i.w] for i in self.instances]
        return {
            "instances": np.asarray(rows, dtype=np.float64).reshape(len(rows), 7),
            "meta": np.asarray([self.seed, self.weather, self.lighting, self.grid], dtype=np.float64),
        }

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "Scene":
        seed, weather, lighting, grid = (int(v) for v in t["meta"])
        insts = [Instance(*(int(v) for v in row)) for row in t["instances"]]
        return cls(seed, insts, weather, lighting, grid)


@dataclass
class SceneConfig:
    grid: int = 24
    max_instances: int = 6
    class_weights: tuple[float, ...] = (0.3, 0.15, 0.25, 0.15, 0.15)
    near_prob: float = 0.7
    near_gap: int = 2

    def __post_init__(self):
        if not 0 <= self.max_instances <= MAX_COUNT:
            raise ValueError(f"max_instances must lie in [0, {MAX_COUNT}], got {self.max_instances}")
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (len(CLASSES),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"class_weights must be {len(CLASSES)} non-negative numbers with positive sum")
        if self.grid < 8:
            raise ValueError("grid must be at least 8 cells wide")


def _fits(occ: np.ndarray, r0: int, c0: int, h: int, w: int) -> bool:
    # one empty cell of margin around every instance keeps instances separable
    g = occ.shape[0]
    if r0 < 0 or c0 < 0 or r0 + h > g or c0 + w > g:
        return False
    return not occ[max(r0 - 1, 0):r0 + h + 1, max(c0 - 1, 0):c0 + w + 1].any()


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    rng = np.random.default_rng(seed)
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    n = int(rng.integers(0, cfg.max_instances + 1))
    weather = int(rng.integers(len(WEATHER)))
    lighting = int(rng.integers(len(LIGHTING)))
    occ = np.zeros((cfg.grid, cfg.grid), dtype=bool)
    instances: list[Instance] = []
    for _ in range(n):
        cls = int(rng.choice(len(CLASSES), p=weights))
        attr = int(rng.integers(len(ATTRIBUTES)))
        h, w = FOOTPRINT[CLASSES[cls]]
        near = bool(instances) and rng.random() < cfg.near_prob
        pos = _place(rng, occ, h, w, instances, near, cfg.near_gap)
        if pos is None:
            continue
        r0, c0 = pos
        occ[r0:r0 + h, c0:c0 + w] = True
        instances.append(Instance(len(instances), cls, attr, r0, c0, h, w))
    return Scene(int(seed), instances, weather, lighting, cfg.grid)


def _place(rng, occ, h, w, instances, near, gap):
    g = occ.shape[0]
    if near:
        anchor = instances[int(rng.integers(len(instances)))]
        for _ in range(30):
            r0 = int(rng.integers(anchor.r0 - h - gap, anchor.r0 + anchor.h + gap + 1))
            c0 = int(rng.integers(anchor.c0 - w - gap, anchor.c0 + anchor.w + gap + 1))
            if _fits(occ, r0, c0, h, w):
                return r0, c0
    for _ in range(30):
        r0, c0 = int(rng.integers(0, g - h + 1)), int(rng.integers(0, g - w + 1))
        if _fits(occ, r0, c0, h, w):
            return r0, c0
    valid = [(r, c) for r in range(g - h + 1) for c in range(g - w + 1) if _fits(occ, r, c, h, w)]
    if not valid:
        return None
    return valid[int(rng.integers(len(valid)))]


def chebyshev_gap(a: Instance, b: Instance) -> int:
    """Smallest Chebyshev distance between a cell of ``a`` and a cell of ``b``."""
    dr = max(a.r0 - (b.r0 + b.h - 1), b.r0 - (a.r0 + a.h - 1), 0)
    dc = max(a.c0 - (b.c0 + b.w - 1), b.c0 - (a.c0 + a.w - 1), 0)
    return max(dr, dc)


NEAR_DISTANCE = 3


def near(a: Instance, b: Instance) -> bool:
    return chebyshev_gap(a, b) <= NEAR_DISTANCE


def classes_near(scene: Scene, ca: int, cb: int) -> bool:
    return any(near(a, b) for a in scene.instances for b in scene.instances
               if a.id != b.id and a.cls == ca and b.cls == cb)


# ---------------------------------------------------------------- encoders

@dataclass(frozen=True)
class Degrade:
    affinity_scramble: bool = False
    semantic_dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.semantic_dropout <= 1.0:
            raise ValueError(f"semantic_dropout must lie in [0, 1], got {self.semantic_dropout}")


DEFAULT_DEGRADE = Degrade(affinity_scramble=True, semantic_dropout=1.0)


@dataclass
class WorldConfig:
    d_base: int = 64
    d_aff: int = 64
    d_sem: int = 16
    slots: int = 16
    seed: int = 1234
    base_noise: float = 0.05
    teacher_noise: float = 0.02
    sem_noise: float = 0.05
    distractor_noise: float = 0.05
    alpha: float = 0.6  # class share of a teacher token
    beta: float = 0.8   # instance share of a teacher token


def _orthonormal(rng, dim: int, count: int) -> np.ndarray:
    if count > dim:
        raise ValueError(f"cannot fit {count} orthonormal directions in {dim} dims")
    q, r = np.linalg.qr(rng.standard_normal((dim, count)))
    return (q * np.sign(np.diag(r))).T


class World:
    """Fixed codebooks: every scene is encoded with the same directions."""

    def __init__(self, cfg: WorldConfig = WorldConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        nc = len(CLASSES) + 1
        base = _orthonormal(rng, cfg.d_base, nc + cfg.slots + len(WEATHER) + len(LIGHTING))
        self.base_class = base[:nc]
        self.base_slot = base[nc:nc + cfg.slots]
        self.base_weather = base[nc + cfg.slots:nc + cfg.slots + len(WEATHER)]
        self.base_lighting = base[nc + cfg.slots + len(WEATHER):]
        teach = _orthonormal(rng, cfg.d_aff, nc + cfg.slots)
        self.teacher_class = teach[:nc]
        self.teacher_slot = teach[nc:]
        sem = _orthonormal(rng, cfg.d_sem, len(CLASSES) + 4)
        self.sem_class = sem[:len(CLASSES)]
        self.sem_pos = sem[len(CLASSES):]

    def check_scene(self, scene: Scene) -> None:
        if len(scene.instances) > self.cfg.slots:
            raise ValueError(f"scene has {len(scene.instances)} instances but the world has {self.cfg.slots} slots")


def _scene_rng(scene: Scene, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([scene.seed, stream]))


def encode_base_tokens(scene: Scene, world: World, degrade: Degrade = Degrade()) -> np.ndarray:
    """Per-cell backbone tokens (grid*grid, d_base): global context + class + instance identity + noise.

    The random draws do not depend on ``degrade``, so degraded and clean encodings
    of a scene share their noise.
    """
    world.check_scene(scene)
    cfg = world.cfg
    rng = _scene_rng(scene, 1)
    n = scene.grid * scene.grid
    noise = cfg.base_noise * rng.standard_normal((n, cfg.d_base))
    scramble = rng.standard_normal((n, cfg.d_base))
    scramble /= np.linalg.norm(scramble, axis=1, keepdims=True)
    drop = rng.random(n) < degrade.semantic_dropout
    cls = scene.class_map().reshape(-1)
    ids = scene.instance_map().reshape(-1)
    glob = world.base_weather[scene.weather] + world.base_lighting[scene.lighting]
    class_part = world.base_class[cls] * (~drop)[:, None]
    inst = ids >= 0
    ident = np.zeros((n, cfg.d_base))
    if degrade.affinity_scramble:
        ident[inst] = scramble[inst]
    else:
        ident[inst] = world.base_slot[ids[inst]]
    return glob[None, :] + class_part + ident + noise


def teacher_affinity_tokens(scene: Scene, world: World) -> np.ndarray:
    """Instance cells share normalize(alpha*class + beta*slot); background cells share one direction."""
    world.check_scene(scene)
    cfg = world.cfg
    rng = _scene_rng(scene, 2)
    n = scene.grid * scene.grid
    cls = scene.class_map().reshape(-1)
    ids = scene.instance_map().reshape(-1)
    clean = np.repeat(world.teacher_class[BACKGROUND][None, :], n, axis=0)
    inst = ids >= 0
    mix = cfg.alpha * world.teacher_class[cls[inst]] + cfg.beta * world.teacher_slot[ids[inst]]
    clean[inst] = mix / np.linalg.norm(mix, axis=1, keepdims=True)
    return clean + cfg.teacher_noise * rng.standard_normal((n, cfg.d_aff))


def position_code(r: float, c: float, grid: int) -> np.ndarray:
    a, b = np.pi * r / grid, np.pi * c / grid
    return np.array([np.sin(a), np.cos(a), np.sin(b), np.cos(b)])


def teacher_semantic_queries(scene: Scene, world: World, num_distractors: int = 64):
    """Detector-style queries: one confident query per instance plus low-confidence distractors.

    Returns (queries [Q, d_sem], confidences [Q], labels [Q]) in a scene-seeded shuffled order.
    """
    cfg = world.cfg
    rng = _scene_rng(scene, 3)
    rows, conf, labels = [], [], []
    for inst in scene.instances:
        centre = position_code(inst.r0 + inst.h / 2, inst.c0 + inst.w / 2, scene.grid)
        q = world.sem_class[inst.cls] + 0.5 * centre @ world.sem_pos
        rows.append(q + cfg.sem_noise * rng.standard_normal(cfg.d_sem))
        conf.append(rng.uniform(0.7, 1.0))
        labels.append(inst.cls)
    for _ in range(num_distractors):
        rows.append(cfg.distractor_noise * rng.standard_normal(cfg.d_sem))
        conf.append(rng.uniform(0.0, 0.3))
        labels.append(int(rng.integers(len(CLASSES))))
    order = rng.permutation(len(rows))
    queries = np.asarray(rows, dtype=np.float64).reshape(len(rows), cfg.d_sem)[order]
    return queries, np.asarray(conf)[order], np.asarray(labels, dtype=np.int64)[order]


# ---------------------------------------------------------------- questions

@dataclass
class QAItem:
    question_ids: list[int]
    answer: int
    kind: str
    required_hints: tuple[str, ...]
    template: str
    subject: list[int] = field(default_factory=list)

    @property
    def question_text(self) -> str:
        return " ".join(VOCAB[i] for i in self.question_ids if i != 0)

    @property
    def answer_text(self) -> str:
        return ANSWERS[self.answer]

    def to_json(self) -> dict:
        d = asdict(self)
        d["required_hints"] = list(self.required_hints)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "QAItem":
        return cls(list(d["question_ids"]), int(d["answer"]), d["kind"], tuple(d["required_hints"]),
                   d["template"], list(d.get("subject", [])))


def encode_question(words: list[str]) -> list[int]:
    ids = [TOKEN_ID[w] for w in words]
    if len(ids) > QUESTION_LEN:
        raise ValueError(f"question longer than {QUESTION_LEN} tokens: {words}")
    return ids + [0] * (QUESTION_LEN - len(ids))


def make_qa(scene: Scene, kind: str, seed: int) -> QAItem:
    """Template a question of ``kind`` and resolve its answer from the scene."""
    if kind not in KINDS:
        raise ValueError(f"unknown question kind {kind!r}")
    rng = np.random.default_rng(seed)
    counts = scene.counts()
    present = [c for c in range(len(CLASSES)) if counts[c] > 0]
    absent = [c for c in range(len(CLASSES)) if counts[c] == 0]
    req = REQUIRED_HINTS[kind]
    if kind == "count":
        if rng.random() < 0.5:
            q = encode_question(["how", "many", "objects", "are", "there", "?"])
            return QAItem(q, ANSWER_ID[str(len(scene.instances))], kind, req, "count-any")
        if present and rng.random() < 0.6:
            c = present[int(rng.integers(len(present)))]
        else:
            c = int(rng.integers(len(CLASSES)))
        q = encode_question(["how", "many", CLASSES[c], "are", "there", "?"])
        return QAItem(q, ANSWER_ID[str(int(counts[c]))], kind, req, "count-class", [c])
    if kind == "presence":
        want_yes = rng.random() < 0.5
        pool = present if (want_yes and present) or not absent else absent
        c = pool[int(rng.integers(len(pool)))]
        q = encode_question(["is", "there", "a", CLASSES[c], "?"])
        return QAItem(q, ANSWER_ID["yes" if counts[c] > 0 else "no"], kind, req, "presence", [c])
    if kind == "relation":
        return _relation_qa(scene, rng, present, req)
    if rng.random() < 0.5:
        q = encode_question(["what", "is", "the", "weather", "?"])
        return QAItem(q, ANSWER_ID[WEATHER[scene.weather]], kind, req, "weather")
    q = encode_question(["what", "is", "the", "lighting", "?"])
    return QAItem(q, ANSWER_ID[LIGHTING[scene.lighting]], kind, req, "lighting")


def _relation_qa(scene: Scene, rng, present, req) -> QAItem:
    nc = len(CLASSES)
    pairs = [(a, b) for a in range(nc) for b in range(nc) if a != b]
    near_pairs = [p for p in pairs if classes_near(scene, *p)]
    far_present = [p for p in pairs if p[0] in present and p[1] in present and p not in near_pairs]
    absent_pairs = [p for p in pairs if p[0] not in present or p[1] not in present]
    # "yes" is drawn more often because scenes with fewer than two classes cannot produce it
    want_yes = rng.random() < 0.8
    # fall through to the next candidate pool when the scene cannot answer the drawn template
    if want_yes and near_pairs:
        pool = near_pairs
    elif far_present and (rng.random() < 0.5 or not absent_pairs):
        pool = far_present
    else:
        pool = absent_pairs
    a, b = pool[int(rng.integers(len(pool)))]
    q = encode_question(["is", "a", CLASSES[a], "near", "a", CLASSES[b], "?"])
    ans = "yes" if classes_near(scene, a, b) else "no"
    return QAItem(q, ANSWER_ID[ans], "relation", req, "relation", [a, b])


def render_answer(qa: QAItem, answer: int) -> list[str]:
    """Template a short sentence for ``answer`` in the context of ``qa`` (used for BLEU)."""
    a = ANSWERS[answer]
    subj = [CLASSES[c] for c in qa.subject]
    if qa.template == "count-any" and a.isdigit():
        return f"i can see {a} objects in the scene".split()
    if qa.template == "count-class" and a.isdigit():
        return f"i can see {a} {subj[0]} instances in the scene".split()
    if qa.template == "presence" and a in ("yes", "no"):
        return (f"yes there is a {subj[0]} in the scene" if a == "yes"
                else f"no there is no {subj[0]} in the scene").split()
    if qa.template == "relation" and a in ("yes", "no"):
        return (f"yes the {subj[0]} is near the {subj[1]}" if a == "yes"
                else f"no the {subj[0]} is not near the {subj[1]}").split()
    if qa.template == "weather" and a in WEATHER:
        return f"the weather is {a} right now".split()
    if qa.template == "lighting" and a in LIGHTING:
        return f"the scene is lit for {a} time".split()
    return f"the answer is {a}".split()


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetConfig:
    master_seed: int = 0
    n_train: int = 20000
    n_test: int = 2000
    kind_weights: tuple[float, ...] = (0.2, 0.4, 0.2, 0.2)  # presence, count, relation, global
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("dataset sizes must be non-negative")
        w = np.asarray(self.kind_weights, dtype=np.float64)
        if w.shape != (len(KINDS),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"kind_weights must be {len(KINDS)} non-negative numbers with positive sum")


@dataclass
class Record:
    index: int
    split: str
    scene: Scene
    qa: QAItem


def item_seeds(master_seed: int, index: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence([master_seed, index])
    a, b, c = ss.generate_state(3, dtype=np.uint32)
    return int(a), int(b), int(c)


def make_record(cfg: DatasetConfig, index: int) -> Record:
    scene_seed, kind_seed, qa_seed = item_seeds(cfg.master_seed, index)
    scene = generate_scene(scene_seed, cfg.scene)
    w = np.asarray(cfg.kind_weights, dtype=np.float64)
    kind = KINDS[int(np.random.default_rng(kind_seed).choice(len(KINDS), p=w / w.sum()))]
    split = "train" if index < cfg.n_train else "test"
    return Record(index, split, scene, make_qa(scene, kind, qa_seed))


def generate_dataset(cfg: DatasetConfig) -> list[Record]:
    return [make_record(cfg, i) for i in range(cfg.n_train + cfg.n_test)]


DATASET_FORMAT = "hintfusion-synthetic-qa"
DATASET_VERSION = 1


def record_to_line(rec: Record) -> str:
    payload = base64.b64encode(tensorio.dumps(rec.scene.to_tensors())).decode("ascii")
    return json.dumps({"index": rec.index, "split": rec.split, "scene": payload, "qa": rec.qa.to_json()},
                      sort_keys=True, separators=(",", ":"))


def record_from_line(line: str) -> Record:
    d = json.loads(line)
    scene = Scene.from_tensors(tensorio.loads(base64.b64decode(d["scene"])))
    return Record(int(d["index"]), d["split"], scene, QAItem.from_json(d["qa"]))


def write_dataset(path, records: list[Record], cfg: DatasetConfig) -> None:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "config": _cfg_json(cfg),
              "records": len(records)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(record_to_line(rec) + "\n")


def _cfg_json(cfg: DatasetConfig) -> dict:
    d = asdict(cfg)
    d["kind_weights"] = list(cfg.kind_weights)
    d["scene"]["class_weights"] = list(cfg.scene.class_weights)
    return d


def read_dataset(path) -> tuple[dict, list[Record]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    records = [record_from_line(ln) for ln in lines[1:]]
    if len(records) != header.get("records"):
        raise ValueError(f"{path}: header promises {header.get('records')} records, found {len(records)}")
    return header, records


# ---------------------------------------------------------------- probes

def ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float = 1e-2) -> np.ndarray:
    """Ridge regression with an unpenalised bias column appended to X."""
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    reg = lam * np.eye(Xb.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(Xb.T @ Xb + reg, Xb.T @ Y)


def ridge_predict(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))]) @ W


def probe_classify(Xtr, ytr, Xte, yte, lam: float = 1e-2) -> float:
    """One-vs-rest ridge classifier accuracy."""
    classes = np.unique(ytr)
    Y = (ytr[:, None] == classes[None, :]).astype(np.float64)
    pred = classes[np.argmax(ridge_predict(ridge_fit(Xtr, Y, lam), Xte), axis=1)]
    return float(np.mean(pred == yte))


def probe_count(Xtr, ytr, Xte, yte, lam: float = 1e-2) -> float:
    """Ridge regression onto the count, rounded and clipped to the training range."""
    W = ridge_fit(Xtr, ytr.astype(np.float64)[:, None], lam)
    pred = np.clip(np.rint(ridge_predict(W, Xte)[:, 0]), ytr.min(), ytr.max())
    return float(np.mean(pred == yte))


def majority_accuracy(ytr, yte) -> float:
    vals, cnt = np.unique(ytr, return_counts=True)
    return float(np.mean(yte == vals[np.argmax(cnt)]))
