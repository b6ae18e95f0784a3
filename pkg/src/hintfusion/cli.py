"""Command-line entry point: ``hintfusion <command> [options]``.

Every command resolves its configuration, writes ``manifest.json`` into the
output directory before doing any work, then writes its artifacts next to it.
``hintfusion replay <manifest>`` re-runs a command from a manifest.

Exit codes: 0 success, 1 runtime failure (bad data, failed check, aborted
training), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, tensorio
from .accounting import DimConfig, cost_table
from .config import ConfigError, RunConfig, parse_config
from .distill import StudentDecoder, TrainingAborted, distill_train, history_csv, mean_cosine, student_forward
from .gradcheck import SCOPES, run_scope
from .hints import color_separation, similarity_matrix
from .pipeline import FeatureStore, ablate, build_model, evaluate, hint_subsets, train_and_evaluate
from .synthetic import (KINDS, Degrade, World, encode_base_tokens, generate_dataset, read_dataset,
                        teacher_affinity_tokens, write_dataset)
from .viz import affinity_image, encode_ppm

OUT_ENV = "HINTFUSION_OUT"
VIZ_SOURCES = ("base", "teacher", "similarity", "student")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _csv(rows: list[dict], columns: list[str], header_lines: tuple[str, ...] = ()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows)


def _abs(p) -> str | None:
    return str(Path(p).resolve()) if p else None


def _load_records(path):
    if not path:
        raise CommandError("--data is required")
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"data file not found: {p}")
    _, records = read_dataset(p)
    if not records:
        raise CommandError(f"data file {p} holds no records")
    return records


def _store(cfg: RunConfig, records) -> FeatureStore:
    world = World(cfg.world())
    return FeatureStore(records, world, cfg.degrade(), cfg.token_grid(), cfg["world.num_queries"])


def _load_student(cfg: RunConfig, path) -> StudentDecoder:
    if not path:
        raise CommandError("affinity source 'student' needs --student CHECKPOINT (from the distill command)")
    student = StudentDecoder(cfg.student())
    student.load_state_dict(tensorio.load(path))
    return student


def _needs_student(cfg: RunConfig) -> bool:
    return cfg["model.affinity_source"] == "student" or "student" in cfg["ablate.affinity_source"]


def _metrics_row(rec, split: str) -> dict:
    row = {"step": rec.step, "epoch": rec.epoch, "split": split, "loss": rec.loss, "accuracy": rec.accuracy,
           "bleu4": rec.bleu4, "n": rec.n}
    for k in KINDS:
        row[f"acc_{k}"] = rec.per_kind.get(k, float("nan"))
    return row


METRIC_COLUMNS = ["step", "epoch", "split", "loss", "accuracy"] + [f"acc_{k}" for k in KINDS] + ["bleu4", "n"]


# ---------------------------------------------------------------- commands
# Each command gets (args, cfg, out) and returns the list of artifact file names it wrote.

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> list[str]:
    dcfg = cfg.dataset()
    records = generate_dataset(dcfg)
    path = out / "dataset.jsonl"
    write_dataset(path, records, dcfg)
    print(f"wrote {len(records)} records ({dcfg.n_train} train, {dcfg.n_test} test) to {path}")
    print(f"sha256 {_sha256(path)}")
    return ["dataset.jsonl"]


def cmd_train(args, cfg: RunConfig, out: Path) -> list[str]:
    records = _load_records(args.data)
    store = _store(cfg, records)
    if cfg["model.affinity_source"] == "student":
        store.attach_student(_load_student(cfg, args.student))
    rows = []
    res = train_and_evaluate(cfg.model(), store, cfg.train(), log=lambda r: rows.append(_metrics_row(r, "train")))
    rows.append(_metrics_row(res.final, "test"))
    tensorio.save(out / "model.hft", res.model.state_dict())
    _write_text(out / "metrics.jsonl", _jsonl(rows))
    _write_text(out / "metrics.csv", _csv(rows, METRIC_COLUMNS))
    f = res.final
    print(f"test accuracy {f.accuracy:.4f} bleu4 {f.bleu4:.4f} "
          + " ".join(f"{k}={v:.4f}" for k, v in f.per_kind.items()))
    return ["model.hft", "metrics.jsonl", "metrics.csv"]


def cmd_eval(args, cfg: RunConfig, out: Path) -> list[str]:
    records = _load_records(args.data)
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise CommandError(f"checkpoint not found: {args.checkpoint}")
    store = _store(cfg, records)
    if cfg["model.affinity_source"] == "student":
        store.attach_student(_load_student(cfg, args.student))
    model = build_model(cfg.model(), store, 0)
    model.load_state_dict(tensorio.load(args.checkpoint))
    idx = np.arange(len(store)) if args.split == "all" else store.split(args.split)
    if len(idx) == 0:
        raise CommandError(f"no records in split {args.split!r}")
    rec = evaluate(model, store, idx)
    rows = [_metrics_row(rec, args.split)]
    _write_text(out / "eval.jsonl", _jsonl(rows))
    _write_text(out / "eval.csv", _csv(rows, METRIC_COLUMNS))
    print(f"{args.split} accuracy {rec.accuracy:.4f} bleu4 {rec.bleu4:.4f} "
          + " ".join(f"{k}={v:.4f}" for k, v in rec.per_kind.items()))
    return ["eval.jsonl", "eval.csv"]


ABLATE_COLUMNS = ["rank", "order", "hints", "fusion", "semantic_k", "affinity_source", "question_source",
                  "accuracy"] + [f"acc_{k}" for k in KINDS] + ["bleu4"]


def cmd_ablate(args, cfg: RunConfig, out: Path) -> list[str]:
    records = _load_records(args.data)
    store = _store(cfg, records)
    if _needs_student(cfg):
        store.attach_student(_load_student(cfg, args.student))
    axes = cfg.axes() or {"hints": hint_subsets()}
    log_rows = []

    def log(row):
        log_rows.append(row)
        print(f"[{len(log_rows)}] {row['config']} accuracy {row['accuracy']:.4f}", flush=True)

    rows = ablate(cfg.model(), store, axes, cfg.train(), log=log)
    _write_text(out / "ablation.jsonl", _jsonl(rows))
    _write_text(out / "ablation.csv", _csv(rows, ABLATE_COLUMNS))
    for r in rows:
        print(f"#{r['rank']} hints={r['hints']} fusion={r['fusion']} k={r['semantic_k']} "
              f"aff={r['affinity_source']} q={r['question_source']} accuracy={r['accuracy']:.4f}")
    return ["ablation.jsonl", "ablation.csv"]


COST_COLUMNS = ["strategy", "attention_layers", "params", "params_M", "gflops", "gflops_projection_macs"]
DIM_FLAGS = ("d", "d_aff", "d_sem", "d_text", "L", "N", "M", "K", "heads")


def cmd_bench_cost(args, cfg: RunConfig, out: Path) -> list[str]:
    overrides = {k: getattr(args, k) for k in DIM_FLAGS if getattr(args, k) is not None}
    try:
        dims = DimConfig().with_overrides(**overrides)
    except ValueError as exc:
        raise ConfigError(",".join(sorted(overrides)) or "dims", str(exc)) from None
    rows = cost_table(dims)
    header = (
        "dims " + " ".join(f"{k}={v}" for k, v in dims.as_dict().items()),
        "params: exact integers; 4d^2+4d per attention layer plus hint projections "
        "(affinity passes through unprojected when d_aff == d)",
        "concat: no attention layers, so params are hint projections only",
        "gflops: 2 x multiply-accumulates over projections, attention contractions and hint projections",
        "gflops_projection_macs: multiply-accumulates of attention-layer linear projections only",
    )
    text = _csv(rows, COST_COLUMNS, header)
    _write_text(out / "cost.csv", text)
    sys.stdout.write(text)
    return ["cost.csv"]


def cmd_grad_check(args, cfg: RunConfig, out: Path) -> list[str]:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    lines, failed = [], []
    for s in scopes:
        report = run_scope(s, seeds=args.seeds, eps=args.eps, corrupt=args.corrupt_grad)
        lines.extend(report.lines())
        if not report.passed:
            failed.extend(f"{s}.{g}" for g in report.failures())
    lines.append("RESULT " + ("PASS" if not failed else "FAIL " + " ".join(failed)))
    text = "\n".join(lines) + "\n"
    _write_text(out / "gradcheck.txt", text)
    sys.stdout.write(text)
    if failed:
        raise CommandError(f"gradient check failed for {', '.join(failed)}")
    return ["gradcheck.txt"]


def viz_tokens(cfg: RunConfig, scene, source: str, student=None) -> np.ndarray:
    world = World(cfg.world())
    if source == "base":
        return encode_base_tokens(scene, world, cfg.degrade())
    if source == "teacher":
        return teacher_affinity_tokens(scene, world)
    if source == "similarity":
        return similarity_matrix(teacher_affinity_tokens(scene, world))
    if source == "student":
        return student_forward(encode_base_tokens(scene, world, Degrade()), student).data
    raise CommandError(f"unknown source {source!r}; expected one of {VIZ_SOURCES}")


def cmd_viz_affinity(args, cfg: RunConfig, out: Path) -> list[str]:
    records = _load_records(args.data)
    if not 0 <= args.index < len(records):
        raise CommandError(f"scene index {args.index} out of range [0, {len(records)})")
    scene = records[args.index].scene
    student = _load_student(cfg, args.student) if args.source == "student" else None
    tokens = viz_tokens(cfg, scene, args.source, student)
    pixels = affinity_image(tokens, (scene.grid, scene.grid))
    name = args.image or f"affinity_{args.source}_{args.index}.ppm"
    (out / name).write_bytes(encode_ppm(pixels))
    within, cross = color_separation(pixels.reshape(-1, 3) / 255.0, scene.instance_map())
    ratio = within / cross if cross > 0 else float("inf")
    summary = {"source": args.source, "index": args.index, "within": within, "cross": cross, "ratio": ratio}
    _write_text(out / "viz_summary.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"{name}: within-instance {within:.4f} cross-instance {cross:.4f} ratio {ratio:.4f}")
    return [name, "viz_summary.json"]


def cmd_distill(args, cfg: RunConfig, out: Path) -> list[str]:
    records = _load_records(args.data)
    store = _store(cfg, records)
    train_idx, test_idx = store.split("train"), store.split("test")
    n = min(cfg["distill.samples"], len(train_idx))
    if n == 0:
        raise CommandError("no training records to distill on")
    back, teach = store.get("backbone"), store.get("teacher")
    res = distill_train(teach[train_idx[:n]], back[train_idx[:n]], cfg.distill(), cfg.student())
    eval_idx = test_idx if len(test_idx) else train_idx[:n]
    cos = mean_cosine(student_forward(back[eval_idx], res.student).data, teach[eval_idx])
    tensorio.save(out / "student.hft", res.student.state_dict())
    _write_text(out / "distill_loss.csv", history_csv(res.history))
    summary = {"samples": n, "eval_records": int(len(eval_idx)), "mean_cosine": cos,
               "final_loss": res.history[-1][2], "steps": len(res.history)}
    _write_text(out / "distill_summary.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"student mean cosine similarity {cos:.4f} over {len(eval_idx)} held-out scenes")
    return ["student.hft", "distill_loss.csv", "distill_summary.json"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench-cost": cmd_bench_cost,
    "grad-check": cmd_grad_check,
    "viz-affinity": cmd_viz_affinity,
    "distill": cmd_distill,
}

# command -> config key that --seed overrides
SEED_KEY = {"gen-data": "data.master_seed", "train": "train.seed", "ablate": "train.seed",
            "distill": "distill.seed", "eval": "train.seed", "viz-affinity": "world.seed",
            "bench-cost": "train.seed", "grad-check": "train.seed"}

# argument names recorded in manifests (paths are stored absolute)
RECORDED_ARGS = ("data", "student", "checkpoint", "split", "index", "source", "image", "scope", "seeds", "eps",
                 "corrupt_grad") + DIM_FLAGS
PATH_ARGS = ("data", "student", "checkpoint")


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hintfusion",
        description="Hint-token fusion toolkit: synthetic data, toy training, ablations, cost tables, "
                    "gradient checks, distillation and affinity visualization.",
        epilog=f"Output defaults to ${OUT_ENV}/<command> (or ./runs/<command> when unset).")
    ap.add_argument("--version", action="version", version=f"hintfusion {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="key=value config file ([section] headers, '#' comments)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="override the command's seed (see README for which key)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if data:
            p.add_argument("--data", help="dataset file written by gen-data")

    common(sub.add_parser("gen-data", help="generate a synthetic scene/question dataset"))
    for name, text in (("train", "train the toy model and evaluate it on the test split"),
                       ("ablate", "train/evaluate the cross-product of [ablate] axes (default: all 8 hint subsets)")):
        p = sub.add_parser(name, help=text)
        common(p, data=True)
        p.add_argument("--student", help="student checkpoint, needed for affinity_source=student")
    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    common(p, data=True)
    p.add_argument("--checkpoint", help="model.hft written by train")
    p.add_argument("--student", help="student checkpoint, needed for affinity_source=student")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")

    p = sub.add_parser("bench-cost", help="parameter and FLOP table for all fusion strategies")
    common(p)
    for k in DIM_FLAGS:
        p.add_argument(f"--{k.replace('_', '-')}" if k not in ("L", "N", "M", "K") else f"--{k}",
                       dest=k, type=int, help=f"override DimConfig.{k}")

    p = sub.add_parser("grad-check", help="finite-difference gradient suites")
    common(p)
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corrupt-grad", metavar="NAME", help=argparse.SUPPRESS)

    p = sub.add_parser("viz-affinity", help="write a P6 image of a scene's token color map")
    common(p, data=True)
    p.add_argument("--index", type=int, default=0, help="scene index in the data file")
    p.add_argument("--source", choices=VIZ_SOURCES, default="teacher")
    p.add_argument("--student", help="student checkpoint for --source student")
    p.add_argument("--image", help="image file name inside --out")

    p = sub.add_parser("distill", help="distill the affinity teacher into a small student decoder")
    common(p, data=True)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's own directory)")
    return ap


# ---------------------------------------------------------------- execution

def _resolve_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"{SEED_KEY[args.command]}={args.seed}")
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    return parse_config(text, overrides)


def _manifest(args, cfg: RunConfig, out: Path) -> dict:
    recorded = {}
    for k in RECORDED_ARGS:
        if hasattr(args, k):
            v = getattr(args, k)
            recorded[k] = _abs(v) if k in PATH_ARGS else v
    seed_key = SEED_KEY[args.command]
    return {"tool": "hintfusion", "version": __version__, "command": args.command, "args": recorded,
            "config": cfg.snapshot(), "config_text": cfg.to_text(), "master_seed": cfg["data.master_seed"],
            "seed_key": seed_key, "seed": cfg[seed_key], "out": str(out.resolve()), "artifacts": []}


def execute(args, cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(args, cfg, out)
    path = out / "manifest.json"
    _write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    artifacts = COMMANDS[args.command](args, cfg, out)
    manifest["artifacts"] = artifacts
    manifest["sha256"] = {a: _sha256(out / a) for a in artifacts}
    _write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def replay(manifest_path, out=None) -> int:
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if manifest.get("tool") != "hintfusion" or manifest.get("command") not in COMMANDS:
        raise CommandError(f"{manifest_path} is not a hintfusion run manifest")
    cfg = parse_config(manifest["config_text"])
    args = argparse.Namespace(command=manifest["command"], **manifest["args"])
    target = Path(out) if out else Path(manifest_path).resolve().parent
    return execute(args, cfg, target)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out)
        cfg = _resolve_config(args)
        return execute(args, cfg, _out_dir(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, TrainingAborted, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
