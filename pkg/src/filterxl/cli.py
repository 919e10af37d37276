"""Command-line front end: generate, train, eval, grid, softlabels, inspect.

Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

from . import corpus
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .encoder import EncoderConfig
from .errors import CompatibilityError, ConfigError, DataError, NumericError
from .evaluation import PRIMARY_METRIC, SOURCE, TARGET, evaluate, write_report
from .model import CLASSIFICATION, SPAN, TAGGING, FilterConfig, TaskKind, validate_config
from .trainer import (
    TrainConfig,
    default_lambda,
    generate_soft_labels,
    read_soft_labels,
    train_student,
    train_teacher,
    write_log,
    write_soft_labels,
)

MODES = ("translate-train-baseline", "concat-baseline", "filter", "filter+self-teaching")
TASKS = (CLASSIFICATION, TAGGING, SPAN)
DEFAULT_MK = {CLASSIFICATION: (1, 1), TAGGING: (2, 1), SPAN: (1, 4)}
N_LABELS = {CLASSIFICATION: corpus.N_CLASSES, TAGGING: corpus.N_TAGS, SPAN: 0}


@dataclass
class RunConfig:
    """Every key of the JSON config file, with its default."""

    task: str = CLASSIFICATION
    mode: str = "filter+self-teaching"
    n_layers: int = 6
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    max_positions: int = 64
    m_local: int | None = None  # None: task default
    k_fuse: int | None = None
    max_answer_len: int = 8
    lambda_weight: float | None = None  # None: task default
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    n_examples: int = 3000
    noise: float = 0.0
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_path: str = "report.json"
    language: str = "all"
    source_pairing: str = "paired"
    eval_split: str = "test"
    grid_k: list = field(default_factory=lambda: [1, 2, 4, 6])
    grid_m: list = field(default_factory=lambda: [0, 1, 2, 4])
    grid_seeds: list | None = None  # None: [seed]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def check(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.language not in ("source", "target", "all"):
            raise ConfigError(f"unknown language {self.language!r}")
        if self.source_pairing not in ("paired", "unpaired"):
            raise ConfigError(f"unknown source_pairing {self.source_pairing!r}")

    def stage_sizes(self):
        """(m, k) after applying mode overrides and task defaults."""
        L = self.n_layers
        if self.mode == "translate-train-baseline":
            return L, 0
        if self.mode == "concat-baseline":
            return 0, L
        m0, k0 = DEFAULT_MK[self.task]
        return (m0 if self.m_local is None else self.m_local), (k0 if self.k_fuse is None else self.k_fuse)

    def model_config(self, vocab_size, m=None, k=None):
        dm, dk = self.stage_sizes()
        enc = EncoderConfig(vocab_size, self.d_model, self.n_heads, self.d_ff, self.max_positions, self.n_layers)
        task = TaskKind(self.task, N_LABELS[self.task])
        cfg = FilterConfig(enc, dm if m is None else m, dk if k is None else k, task, self.max_answer_len)
        validate_config(cfg)
        return cfg

    def train_config(self, seed=None):
        lam = default_lambda(self.task) if self.lambda_weight is None else self.lambda_weight
        return TrainConfig(lam, self.learning_rate, self.batch_size, self.epochs, self.seed if seed is None else seed)

    def languages(self):
        return (SOURCE, TARGET) if self.language == "all" else (self.language,)


def _load_data(data_dir, task, split):
    manifest = corpus.read_manifest(data_dir)
    if manifest["task"] != task:
        raise DataError(f"{data_dir} holds {manifest['task']!r} data, config asks for {task!r}")
    return manifest, corpus.read_split(os.path.join(data_dir, f"{split}.jsonl"))


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------ commands


def cmd_generate(task, n, seed, out_dir, noise=0.0):
    dataset = corpus.generate(task, n, seed, noise)
    counts = corpus.write_dataset(dataset, out_dir)
    print(f"{task}: train={counts['train']} dev={counts['dev']} test={counts['test']} regenerated={dataset.regenerated} -> {out_dir}")
    return counts


def cmd_train(cfg, out_dir):
    """Teacher, then (self-teaching mode) soft labels and student; returns written paths."""
    manifest, train = _load_data(cfg.data_dir, cfg.task, "train")
    model_cfg = cfg.model_config(manifest["vocab_size"])
    train_cfg = cfg.train_config()
    os.makedirs(out_dir, exist_ok=True)
    meta = {"seed": cfg.seed, "mode": cfg.mode, "data_seed": manifest["seed"]}
    _dump_json(os.path.join(out_dir, "run.json"), {"seed": cfg.seed, "config": dataclasses.asdict(cfg)})

    teacher, log = train_teacher(train, model_cfg, train_cfg)
    paths = {"teacher": os.path.join(out_dir, "teacher.ckpt")}
    save_checkpoint(paths["teacher"], teacher, {**meta, "phase": "teacher"})
    if cfg.mode == "filter+self-teaching":
        soft = generate_soft_labels(teacher, train)
        paths["softlabels"] = os.path.join(out_dir, "softlabels.jsonl")
        write_soft_labels(paths["softlabels"], soft, {"seed": cfg.seed})
        student, student_log = train_student(train, soft, model_cfg, train_cfg)
        log = log + student_log
        paths["student"] = os.path.join(out_dir, "student.ckpt")
        save_checkpoint(paths["student"], student, {**meta, "phase": "student"})
    paths["log"] = os.path.join(out_dir, "train_log.csv")
    write_log(paths["log"], log)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return paths


def cmd_softlabels(checkpoint, data_dir, out_path):
    teacher, meta = load_checkpoint(checkpoint)
    _, train = _load_data(data_dir, teacher.cfg.task.kind, "train")
    soft = generate_soft_labels(teacher, train)
    write_soft_labels(out_path, soft, {"seed": meta.get("seed")})
    print(f"{len(soft)} soft labels -> {out_path}")
    return out_path


def cmd_eval(cfg, checkpoint, report_path, check_stages=True):
    model, meta = load_checkpoint(checkpoint)
    if check_stages:
        m, k = cfg.stage_sizes()
        if (model.cfg.m_local, model.cfg.k_fuse) != (m, k):
            raise CompatibilityError(
                f"checkpoint was trained with m={model.cfg.m_local}, k={model.cfg.k_fuse}; config asks for m={m}, k={k}"
            )
    if model.cfg.task.kind != cfg.task:
        raise CompatibilityError(f"checkpoint task {model.cfg.task.kind!r} differs from config task {cfg.task!r}")
    _, examples = _load_data(cfg.data_dir, cfg.task, cfg.eval_split)
    report = evaluate(
        model, examples, cfg.languages(), cfg.source_pairing,
        meta={"seed": meta.get("seed"), "checkpoint": os.path.basename(checkpoint), "split": cfg.eval_split},
    )
    if os.path.dirname(report_path):
        os.makedirs(os.path.dirname(report_path), exist_ok=True)
    write_report(report_path, report)
    print(report.table())
    return report


def grid_cells(m_values, k_values, n_layers):
    """``(m, k, feasible)`` in fixed m-major order."""
    return [(m, k, m + k <= n_layers) for m in m_values for k in k_values]


def run_cell(cfg, train, dev, vocab_size, m, k, seed):
    """Train a teacher at (m, k) and return its dev score on the primary metric."""
    model_cfg = cfg.model_config(vocab_size, m, k)
    model, _ = train_teacher(train, model_cfg, cfg.train_config(seed))
    report = evaluate(model, dev, cfg.languages(), cfg.source_pairing)
    return report.scores


def cmd_grid(cfg, out_dir, k_values=None, m_values=None):
    k_values = list(cfg.grid_k if k_values is None else k_values)
    m_values = list(cfg.grid_m if m_values is None else m_values)
    seeds = cfg.grid_seeds or [cfg.seed]
    manifest, train = _load_data(cfg.data_dir, cfg.task, "train")
    _, dev = _load_data(cfg.data_dir, cfg.task, "dev")
    metric = PRIMARY_METRIC[cfg.task]
    cells = []
    for m, k, feasible in grid_cells(m_values, k_values, cfg.n_layers):
        cell = {"m": m, "k": k}
        if not feasible:
            cell["status"] = "skipped"
            cells.append(cell)
            print(f"m={m} k={k}: skipped (m + k > {cfg.n_layers})")
            continue
        try:
            runs = [run_cell(cfg, train, dev, manifest["vocab_size"], m, k, s) for s in seeds]
        except (ConfigError, DataError, NumericError) as e:
            cell.update(status="error", error=str(e))
        else:
            values = {lang: [r[lang][metric] for r in runs] for lang in runs[0]}
            cell.update(
                status="ok",
                seeds=seeds,
                scores=values,
                mean={lang: sum(v) / len(v) for lang, v in values.items()},
            )
        cells.append(cell)
        print(f"m={m} k={k}: {cell['status']} {cell.get('mean', '')}")
    report = {
        "task": cfg.task,
        "metric": metric,
        "n_layers": cfg.n_layers,
        "k_values": k_values,
        "m_values": m_values,
        "seed": cfg.seed,
        "cells": cells,
        "trained": sum(c["status"] == "ok" for c in cells),
        "skipped": sum(c["status"] == "skipped" for c in cells),
    }
    os.makedirs(out_dir, exist_ok=True)
    _dump_json(os.path.join(out_dir, "grid.json"), report)
    with open(os.path.join(out_dir, "grid.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(grid_matrix(report) + "\n")
    print(grid_matrix(report))
    return report


def grid_matrix(report):
    lang = "target"
    lines = [f"{report['metric']} ({lang}, mean over seeds); rows m, columns k"]
    lines.append("m\\k " + "".join(f"{k:>9}" for k in report["k_values"]))
    by = {(c["m"], c["k"]): c for c in report["cells"]}
    for m in report["m_values"]:
        row = f"{m:<4}"
        for k in report["k_values"]:
            c = by[(m, k)]
            if c["status"] == "ok":
                v = c["mean"].get(lang, next(iter(c["mean"].values())))
                row += f"{v:>9.4f}"
            else:
                row += f"{c['status']:>9}"
        lines.append(row)
    return "\n".join(lines)


def cmd_inspect(checkpoint):
    header, _ = read_header(checkpoint)
    n_params = sum(e["rows"] * e["cols"] for e in header["params"])
    cfg = header["config"]
    print(f"task: {cfg['task']['kind']}  m={cfg['m_local']} k={cfg['k_fuse']} L={cfg['encoder']['n_layers']}")
    print(f"encoder: {json.dumps(cfg['encoder'], sort_keys=True)}")
    print(f"meta: {json.dumps(header['meta'], sort_keys=True)}")
    print(f"parameters: {len(header['params'])} tensors, {n_params} values")
    return header


# ---------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="filterxl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", metavar="DIR")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--n", type=int, default=3000)
    g.add_argument("--noise", type=float, default=0.0)

    t = sub.add_parser("train", help="train teacher (and student)")
    common(t)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--data", metavar="DIR")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", metavar="DIR")
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--language", choices=("source", "target", "all"))
    e.add_argument("--split", choices=("train", "dev", "test"))

    gr = sub.add_parser("grid", help="(m, k) ablation grid")
    common(gr)
    gr.add_argument("--data", metavar="DIR")
    gr.add_argument("--mode", choices=MODES)
    gr.add_argument("--k", help="comma-separated k values")
    gr.add_argument("--m", help="comma-separated m values")
    gr.add_argument("--language", choices=("source", "target", "all"))

    s = sub.add_parser("softlabels", help="regenerate soft labels from a teacher checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", metavar="DIR", required=True)

    i = sub.add_parser("inspect", help="print checkpoint metadata")
    i.add_argument("checkpoint")
    return p


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _run(args):
    if args.verb == "inspect":
        cmd_inspect(args.checkpoint)
        return
    if args.verb == "generate":
        cmd_generate(args.task, args.n, 0 if args.seed is None else args.seed, args.out or "data", args.noise)
        return
    if args.verb == "softlabels":
        cmd_softlabels(args.checkpoint, args.data, args.out or "softlabels.jsonl")
        return
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "language", None):
        cfg.language = args.language
    if getattr(args, "split", None):
        cfg.eval_split = args.split
    if args.verb == "train":
        cmd_train(cfg, args.out or cfg.checkpoint_dir)
    elif args.verb == "eval":
        path = os.path.join(args.out, "report.json") if args.out else cfg.report_path
        cmd_eval(cfg, args.checkpoint, path)
    elif args.verb == "grid":
        cmd_grid(cfg, args.out or "grid", _ints(args.k) if args.k else None, _ints(args.m) if args.m else None)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, OSError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
