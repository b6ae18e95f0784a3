"""Plain-text run configuration.

Format: ``[section]`` headers followed by ``key = value`` lines; ``#`` starts a
comment. Lists are comma-separated. Every key has a default, so an empty file
is a valid configuration. Unknown sections or keys and unparsable values raise
:class:`ConfigError` naming the offending ``section.key``.

Sections and keys are listed in :data:`SCHEMA`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import DimConfig
from .distill import DistillRunConfig, StudentDecoderConfig
from .pipeline import ToyModelConfig, TrainConfig
from .synthetic import DatasetConfig, Degrade, SceneConfig, WorldConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _words(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _hints(s: str) -> tuple[str, ...]:
    v = s.strip()
    if v in ("", "-", "none"):
        return ()
    out = tuple(ch for ch in v.upper() if ch not in ", ")
    bad = sorted(set(out) - {"A", "S", "Q"})
    if bad:
        raise ValueError(f"unknown hints {bad}; use letters from A, S, Q or '-'")
    return out


def _hint_list(s: str) -> tuple[tuple[str, ...], ...]:
    v = s.strip().lower()
    if not v:
        return ()
    if v == "all":
        from .pipeline import hint_subsets
        return tuple(hint_subsets())
    return tuple(_hints(x) for x in s.split(","))


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "master_seed": (int, 0),
        "n_train": (int, 20000),
        "n_test": (int, 2000),
        "kind_weights": (_floats, (0.2, 0.4, 0.2, 0.2)),
        "grid": (int, 24),
        "max_instances": (int, 6),
        "class_weights": (_floats, (0.3, 0.15, 0.25, 0.15, 0.15)),
        "near_prob": (float, 0.7),
        "near_gap": (int, 2),
    },
    "world": {
        "seed": (int, 1234),
        "d_base": (int, 64),
        "d_aff": (int, 64),
        "d_sem": (int, 16),
        "slots": (int, 16),
        "base_noise": (float, 0.05),
        "teacher_noise": (float, 0.02),
        "sem_noise": (float, 0.05),
        "distractor_noise": (float, 0.05),
        "alpha": (float, 0.6),
        "beta": (float, 0.8),
        "affinity_scramble": (_bool, True),
        "semantic_dropout": (float, 1.0),
        "token_grid": (int, 6),
        "num_queries": (int, 64),
    },
    "model": {
        "fusion": (str, "joint"),
        "hints": (_hints, ("A", "S", "Q")),
        "semantic_k": (int, 32),
        "affinity_source": (str, "raw-teacher"),
        "question_source": (str, "llm-embed"),
        "adapter_width": (int, 128),
        "d_text": (int, 64),
        "heads": (int, 8),
        "stage_self_kv": (_bool, True),
    },
    "train": {
        "lr": (float, 1e-2),
        "warmup_ratio": (float, 0.03),
        "weight_decay": (float, 0.01),
        "epochs": (int, 3),
        "batch_size": (int, 32),
        "seed": (int, 0),
    },
    "distill": {
        "base_lr": (float, 3e-3),
        "warmup_ratio": (float, 0.03),
        "weight_decay": (float, 0.01),
        "epochs": (int, 5),
        "batch_size": (int, 32),
        "seed": (int, 0),
        "samples": (int, 3000),
        "layers": (int, 1),
        "heads": (int, 4),
        "width": (int, 64),
        "ffn_ratio": (int, 2),
    },
    "ablate": {
        "hints": (_hint_list, ()),
        "semantic_k": (_ints, ()),
        "affinity_source": (_words, ()),
        "question_source": (_words, ()),
        "fusion": (_words, ()),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                  for s, keys in SCHEMA.items()})

    def __getitem__(self, dotted: str):
        section, key = _split_key(dotted)
        return self.values[section][key]

    def set(self, dotted: str, raw: str) -> None:
        section, key = _split_key(dotted)
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(dotted, f"cannot parse {raw!r}: {exc}") from None

    def snapshot(self) -> dict:
        """JSON-ready copy of every resolved value."""
        return json.loads(json.dumps(self.values))

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for k, v in keys.items():
                lines.append(f"{k} = {_format(section, k, v)}")
            lines.append("")
        return "\n".join(lines)

    # ---- typed views, each validated by its dataclass

    def _build(self, key: str, fn):
        try:
            return fn()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(key, str(exc)) from None

    def dataset(self) -> DatasetConfig:
        v = self.values["data"]
        scene = self._build("data.grid", lambda: SceneConfig(v["grid"], v["max_instances"], v["class_weights"],
                                                               v["near_prob"], v["near_gap"]))
        return self._build("data.kind_weights", lambda: DatasetConfig(v["master_seed"], v["n_train"], v["n_test"],
                                                                        v["kind_weights"], scene))

    def world(self) -> WorldConfig:
        v = self.values["world"]
        return WorldConfig(v["d_base"], v["d_aff"], v["d_sem"], v["slots"], v["seed"], v["base_noise"],
                           v["teacher_noise"], v["sem_noise"], v["distractor_noise"], v["alpha"], v["beta"])

    def degrade(self) -> Degrade:
        v = self.values["world"]
        return self._build("world.semantic_dropout", lambda: Degrade(v["affinity_scramble"], v["semantic_dropout"]))

    def token_grid(self) -> tuple[int, int]:
        g = self.values["world"]["token_grid"]
        if g < 1 or self.values["data"]["grid"] % g:
            raise ConfigError("world.token_grid", f"{g} must divide data.grid={self.values['data']['grid']}")
        return (g, g)

    def model(self) -> ToyModelConfig:
        w, m = self.values["world"], self.values["model"]
        n = self.token_grid()[0] ** 2
        dims = self._build("model.heads", lambda: DimConfig(d=w["d_base"], d_aff=w["d_aff"], d_sem=w["d_sem"],
                                                             d_text=m["d_text"], L=n, N=n, M=max(m["semantic_k"], 1),
                                                             K=8, heads=m["heads"]))
        if m["heads"] < 1 or w["d_base"] % m["heads"]:
            raise ConfigError("model.heads", f"{m['heads']} must divide world.d_base={w['d_base']}")
        if m["semantic_k"] > w["num_queries"]:
            raise ConfigError("model.semantic_k", f"{m['semantic_k']} exceeds world.num_queries={w['num_queries']}")
        return self._build("model.fusion", lambda: ToyModelConfig(
            dims=dims, fusion=m["fusion"], hints_enabled=m["hints"], semantic_k=m["semantic_k"],
            affinity_source=m["affinity_source"], question_source=m["question_source"],
            adapter_width=m["adapter_width"], stage_self_kv=m["stage_self_kv"]))

    def train(self) -> TrainConfig:
        v = self.values["train"]
        return self._build("train.lr", lambda: TrainConfig(v["lr"], v["warmup_ratio"], v["weight_decay"],
                                                           v["epochs"], v["batch_size"], v["seed"]))

    def distill(self) -> DistillRunConfig:
        v = self.values["distill"]
        return self._build("distill.base_lr", lambda: DistillRunConfig(
            base_lr=v["base_lr"], warmup_ratio=v["warmup_ratio"], weight_decay=v["weight_decay"],
            epochs=v["epochs"], batch_size=v["batch_size"], seed=v["seed"]))

    def student(self) -> StudentDecoderConfig:
        v, w = self.values["distill"], self.values["world"]
        return self._build("distill.width", lambda: StudentDecoderConfig(
            v["layers"], v["heads"], v["width"], v["ffn_ratio"], input_dim=w["d_base"], output_dim=w["d_aff"]))

    def axes(self) -> dict:
        return {k: list(v) for k, v in self.values["ablate"].items() if v}


def _split_key(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.partition(".")
    if section not in SCHEMA:
        raise ConfigError(dotted, f"unknown section {section!r}; expected one of {sorted(SCHEMA)}")
    if key not in SCHEMA[section]:
        raise ConfigError(dotted, f"unknown key; section [{section}] accepts {sorted(SCHEMA[section])}")
    return section, key


def _format(section: str, key: str, v) -> str:
    if key == "hints" and section == "model":
        return "".join(v) or "-"
    if section == "ablate" and key == "hints":
        return ",".join("".join(h) or "-" for h in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Parse config text, then apply ``section.key=value`` overrides in order."""
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(section, f"line {lineno}: unknown section; expected one of {sorted(SCHEMA)}")
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        dotted = key if "." in key else f"{section}.{key}" if section else key
        cfg.set(dotted, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


def load_config(path: str | Path | None, overrides=()) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides)
