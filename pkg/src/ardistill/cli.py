"""``dd <command> --config <path> [--seed u64] [--out <dir>] [--dry-run]``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .config import ConfigError, RunConfig, load_config
from .core import Codebook, StructureError, TokenSeq, line_codebook, random_codebook
from .evaluation import CSV_COLUMNS, SizeGuardError, evaluate_run, read_csv, write_csv
from .flowmatch import SolverConfig, SolverError
from .nn.optim import NonFiniteGradient
from .sampler import PathError, draw_noise, sample_batch, sample_hybrid_batch
from .student import DistillError, StudentModel, StudentTrainConfig, TimestepSchedule, train_student
from .teacher import (TeacherTrainConfig, TrainingError, fit_tabular, load_teacher, markov_teacher,
                      train_neural_teacher)
from .trajgen import FingerprintMismatch, PairGenerationError, PairStore, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_FINGERPRINT = 5
EXIT_NUMERICAL = 6
EXIT_CORRUPT = 7
EXIT_INCOMPATIBLE = 8

log = logging.getLogger("ardistill")


class MissingInput(FileNotFoundError):
    pass


# structured logging ----------------------------------------------------------------------

class JsonLineFormatter(logging.Formatter):
    """One JSON object per line: time, level, command, event, message, data."""

    def __init__(self, command):
        super().__init__()
        self.command = command

    def format(self, record):
        data = getattr(record, "data", None)
        rec = {"time": round(record.created, 3), "level": record.levelname.lower(), "command": self.command,
               "event": getattr(record, "event", "message"), "message": record.getMessage(),
               "data": data if data is not None else {}}
        return json.dumps(rec, sort_keys=True, default=str)


def event(name, message="", **data):
    log.info(message or name, extra={"event": name, "data": data})


# run context -----------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Context:
    command: str
    cfg: RunConfig
    config_path: Path
    out: Path
    dry_run: bool = False
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def artifact(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def user_file(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.config_path.parent / p

    def need(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"required input {path} does not exist")
        self.inputs[self.label(path)] = sha256_file(path)
        return path

    def label(self, path) -> str:
        """Manifest key: relative to the output directory when inside it, so manifests are relocatable."""
        try:
            return str(Path(path).resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(path)

    def wrote(self, path):
        key = self.label(path)
        self.outputs[key] = sha256_file(path)
        event("artifact", f"wrote {key}", path=key, sha256=self.outputs[key])

    def write_manifest(self):
        manifest = {"command": self.command, "config_sha256": self.cfg.digest(), "seed": self.cfg.seed,
                    "inputs": dict(sorted(self.inputs.items())), "outputs": dict(sorted(self.outputs.items()))}
        path = self.out / f"manifest-{self.command}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def worker_cap(requested: int) -> int:
    env = os.environ.get("DD_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"DD_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ConfigError("DD_THREADS must be >= 1")
        return max(1, min(requested, cap))
    return max(1, requested)


def solver_config(cfg: RunConfig) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(scheme=s.scheme, steps=s.steps, t_end=s.t_end, grid=s.grid)


def build_codebook(ctx: Context) -> Codebook:
    d = ctx.cfg.domain
    if d.codebook == "line":
        if d.C != 1:
            raise ConfigError("domain.codebook = line needs domain.C = 1")
        return line_codebook(d.V, d.spacing)
    if d.codebook == "random":
        return random_codebook(d.V, d.C, np.random.default_rng(d.codebook_seed))
    cb = Codebook.load(ctx.need(ctx.user_file(d.codebook)))
    if (cb.V, cb.C) != (d.V, d.C):
        raise ConfigError(f"codebook file holds V={cb.V}, C={cb.C} but the domain says V={d.V}, C={d.C}")
    return cb


def read_tokens(path):
    """Token file: one sequence per line, whitespace-separated ids; ``c|ids`` sets a class label."""
    seqs = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cond = None
        if "|" in line:
            c, line = line.split("|", 1)
            cond = int(c)
        seqs.append(TokenSeq(tuple(int(x) for x in line.split()), cond))
    return seqs


def load_teacher_checked(ctx: Context):
    teacher = load_teacher(ctx.need(ctx.artifact(ctx.cfg.teacher.path)))
    d = ctx.cfg.domain
    if (teacher.n, teacher.V) != (d.n, d.V):
        raise ConfigError(f"teacher has n={teacher.n}, V={teacher.V}; config says n={d.n}, V={d.V}")
    return teacher


# commands --------------------------------------------------------------------------------

def cmd_train_teacher(ctx: Context):
    cfg = ctx.cfg
    tc = cfg.teacher
    cb = build_codebook(ctx)
    if tc.kind == "markov":
        teacher = markov_teacher(cfg.domain.n, cb, tc.stay)
    else:
        data = read_tokens(ctx.need(ctx.user_file(tc.data)))
        if any(s.n != cfg.domain.n for s in data):
            raise ConfigError(f"teacher.data sequences must have length domain.n = {cfg.domain.n}")
        if tc.kind == "tabular":
            teacher = fit_tabular(data, tc.alpha, cb)
        else:
            classes = 1 + max((s.condition or 0) for s in data)
            tcfg = TeacherTrainConfig(d_model=tc.d_model, n_layers=tc.n_layers, n_heads=tc.n_heads, d_ff=tc.d_ff,
                                      steps=tc.steps, batch=tc.batch, lr=tc.lr, num_classes=classes, seed=cfg.seed)
            teacher, history = train_neural_teacher(data, cb, tcfg)
            for step, train, held in history:
                event("teacher_eval", step=step, train_loss=train, heldout_loss=held)
    out = ctx.artifact(tc.path)
    teacher.save(out)
    ctx.wrote(out)


def cmd_gen_data(ctx: Context):
    cfg = ctx.cfg
    teacher = load_teacher_checked(ctx)
    workers = worker_cap(cfg.dataset.workers)
    t0 = time.perf_counter()
    store = generate_dataset(teacher, cfg.dataset.N, cfg.base_seed, solver_config(cfg), workers=workers)
    event("pairs", N=store.N, workers=workers, seconds=round(time.perf_counter() - t0, 3))
    out = ctx.artifact(cfg.dataset.path)
    store.save(out)
    ctx.wrote(out)


def cmd_distill(ctx: Context):
    cfg = ctx.cfg
    tr = cfg.training
    teacher = load_teacher_checked(ctx)
    store = PairStore.load(ctx.need(ctx.artifact(cfg.dataset.path)), teacher)
    weights = tr.weights or (1.0,) * len(tr.schedule)
    schedule = TimestepSchedule(tr.schedule, weights)
    steps = tr.epochs * math.ceil(store.N / tr.batch) if tr.epochs > 0 else tr.steps
    scfg = StudentTrainConfig(d_model=tr.d_model, n_layers=tr.n_layers, n_heads=tr.n_heads, d_ff=tr.d_ff,
                              num_classes=int(store.conditions.max()) + 1, steps=steps, batch=tr.batch, lr=tr.lr,
                              lr_rule=tr.lr_rule, ema_decay=tr.ema_decay, ema_warmup=tr.ema_warmup,
                              w_emb=tr.w_emb, w_logit=tr.w_logit, split_point=tr.split_point,
                              head_init=tr.head_init, seed=cfg.seed)
    model, history = train_student(store, teacher, schedule, scfg)
    for step, loss in history["epoch_loss"]:
        event("distill_epoch", step=step, loss=loss)
    out = ctx.artifact(tr.path)
    model.save(out)
    ctx.wrote(out)


def cmd_sample(ctx: Context):
    cfg = ctx.cfg
    s = cfg.sampling
    model = StudentModel.load(ctx.need(ctx.artifact(cfg.training.path)))
    model.decode = s.decode
    rng = np.random.default_rng(cfg.seed)
    noise = draw_noise(rng, s.count, model.n, model.C)
    conds = np.zeros(s.count, dtype=np.int64)
    if s.t_s is not None:
        teacher = load_teacher_checked(ctx)
        tokens, report = sample_hybrid_batch(model, teacher, s.path, s.t_s, noise, conds, s.variant,
                                             solver_config(cfg), rng)
    else:
        tokens, report = sample_batch(model, s.path, noise, conds, rng)
    lines = [json.dumps({"index": i, "tokens": [int(x) for x in row], **report.as_dict()}, sort_keys=True)
             for i, row in enumerate(tokens)]
    out = ctx.artifact(s.output)
    out.write_text("\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")
    ctx.wrote(out)


def cmd_eval(ctx: Context):
    cfg = ctx.cfg
    e = cfg.eval
    teacher = load_teacher_checked(ctx)
    paths, hybrid = cfg.eval_paths(), cfg.eval_hybrid()
    student = None
    if paths or hybrid:
        student = StudentModel.load(ctx.need(ctx.artifact(cfg.training.path)))
    run_cfg = {"paths": paths, "hybrid": hybrid, "skip": list(e.skip), "solver": solver_config(cfg),
               "variant": cfg.sampling.variant}
    reports = evaluate_run(teacher, student, e.M, run_cfg, rng=np.random.default_rng(cfg.seed))
    if "mi" not in cfg.eval_metrics():
        for r in reports:
            r.mi_gap = float("nan")
    for r in reports:
        event("report", r.system, **r.csv_row(), mi_gap=r.mi_gap, student_steps=r.student_steps,
              teacher_steps=r.teacher_steps, speedup=r.speedup, half_width=r.half_width)
    report_path = ctx.artifact(e.report)
    report_path.write_text("\n".join(r.to_kv() for r in reports))
    csv_path = ctx.artifact(e.results)
    csv_path.write_text(write_csv(reports))
    ctx.wrote(report_path)
    ctx.wrote(csv_path)


def cmd_plot(ctx: Context):
    from .plotting import plot_tv_vs_steps

    p = ctx.cfg.plot
    sources = [s.strip() for s in p.inputs.split(",") if s.strip()] or [ctx.cfg.eval.results]
    rows = []
    for src in sources:
        rows.extend(read_csv(ctx.need(ctx.artifact(src))))
    csv_path = ctx.artifact(p.csv)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in CSV_COLUMNS})
    fig = plot_tv_vs_steps(rows, ctx.artifact(p.figure))
    ctx.wrote(csv_path)
    ctx.wrote(fig)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate (noise, data) pairs from a teacher"),
    "train-teacher": (cmd_train_teacher, "build or fit the AR teacher"),
    "distill": (cmd_distill, "train a student on a pair store"),
    "sample": (cmd_sample, "draw sequences with a trained student"),
    "eval": (cmd_eval, "score student paths and baselines against the exact joint"),
    "plot": (cmd_plot, "write plot CSV and a TV-vs-steps figure"),
}


def planned_io(ctx: Context):
    cfg = ctx.cfg
    a = ctx.artifact
    teacher, pairs, student = a(cfg.teacher.path), a(cfg.dataset.path), a(cfg.training.path)
    plan = {
        "train-teacher": ([ctx.user_file(cfg.teacher.data)] if cfg.teacher.kind != "markov" else [], [teacher]),
        "gen-data": ([teacher], [pairs]),
        "distill": ([teacher, pairs], [student]),
        "sample": ([student] + ([teacher] if cfg.sampling.t_s is not None else []), [a(cfg.sampling.output)]),
        "eval": ([teacher, student], [a(cfg.eval.report), a(cfg.eval.results)]),
        "plot": ([a(s.strip()) for s in cfg.plot.inputs.split(",") if s.strip()] or [a(cfg.eval.results)],
                 [a(cfg.plot.csv), a(cfg.plot.figure)]),
    }
    return plan[ctx.command]


def build_parser():
    parser = argparse.ArgumentParser(prog="dd", description="Distilled decoding for AR token models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed (u64)")
        p.add_argument("--out", type=Path, default=Path("."), help="artifact directory")
        p.add_argument("--dry-run", action="store_true", help="validate the config and print the plan")
    return parser


def _setup_logging(command, logfile=None):
    log.setLevel(logging.INFO)
    log.propagate = False
    fmt = JsonLineFormatter(command)
    handlers = [logging.StreamHandler(sys.stderr)]
    if logfile is not None:
        handlers.append(logging.FileHandler(logfile, mode="a"))
    for h in handlers:
        h.setFormatter(fmt)
        log.addHandler(h)
    return handlers


def run(args) -> int:
    if not args.config.exists():
        print(f"dd: config file {args.config} not found", file=sys.stderr)
        return EXIT_MISSING_INPUT
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    cfg.validate()
    ctx = Context(args.command, cfg, args.config, args.out, args.dry_run)
    if args.dry_run:
        inputs, outputs = planned_io(ctx)
        plan = {"command": args.command, "valid": True, "config_sha256": cfg.digest(), "config": cfg.to_dict(),
                "inputs": [str(p) for p in inputs], "missing_inputs": [str(p) for p in inputs if not p.exists()],
                "outputs": [str(p) for p in outputs]}
        sys.stdout.write(json.dumps(plan, indent=2, sort_keys=True, default=str) + "\n")
        return EXIT_OK
    args.out.mkdir(parents=True, exist_ok=True)
    handlers = _setup_logging(args.command, args.out / "log.jsonl")
    try:
        event("config", "resolved config", config_sha256=cfg.digest(), **cfg.to_dict())
        threads = worker_cap(1 << 30) if os.environ.get("DD_THREADS") else None
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                COMMANDS[args.command][0](ctx)
        else:
            COMMANDS[args.command][0](ctx)
        ctx.write_manifest()
        event("done", status="ok")
    finally:
        for h in handlers:
            log.removeHandler(h)
            h.close()
    return EXIT_OK


ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (MissingInput, EXIT_MISSING_INPUT),
    (FingerprintMismatch, EXIT_FINGERPRINT),
    ((SolverError, PairGenerationError, DistillError, TrainingError, NonFiniteGradient), EXIT_NUMERICAL),
    ((StructureError, container.ContainerError), EXIT_CORRUPT),
    ((PathError, SizeGuardError), EXIT_INCOMPATIBLE),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except Exception as exc:
        for types, code in ERROR_CODES:
            if isinstance(exc, types):
                print(f"dd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
