"""Run configuration: plain ``section.key = value`` files with typed, validated fields."""
from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class DomainConfig:
    n: int = 4
    V: int = 4
    C: int = 1
    codebook: str = "line"  # line | random | path to a .ddcb file
    spacing: float = 2.0
    codebook_seed: int = 0


@dataclass
class TeacherConfig:
    kind: str = "markov"  # markov | tabular | neural
    stay: float = 0.6
    alpha: float = 0.0
    data: str = ""  # token file for tabular/neural fits, one sequence per line
    path: str = "teacher.ddtc"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    steps: int = 2000
    batch: int = 128
    lr: float = 3e-3


@dataclass
class SolverSection:
    scheme: str = "heun"
    steps: int = 64
    t_end: float = 1.0 - 1e-4
    grid: str = "warped"  # warped | uniform


@dataclass
class DatasetConfig:
    N: int = 50_000
    base_seed: Optional[int] = None  # falls back to the run seed
    path: str = "pairs.ddpr"
    workers: int = 1


@dataclass
class TrainingConfig:
    schedule: tuple = (1, 3)
    weights: tuple = ()
    lr: float = 1e-3
    lr_rule: str = "fixed"
    batch: int = 256
    steps: int = 2000
    epochs: int = 0  # when > 0 overrides steps
    ema_decay: float = 0.999
    ema_warmup: bool = True
    split_point: Optional[int] = None
    w_emb: float = 1.0
    w_logit: float = 0.1
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    head_init: str = "normal"
    path: str = "student.ddtc"


@dataclass
class SamplingConfig:
    path: tuple = (1,)
    t_s: Optional[int] = None
    variant: str = "deterministic"
    count: int = 16
    decode: str = "argmax"
    output: str = "samples.jsonl"


@dataclass
class EvalConfig:
    M: int = 50_000
    paths: str = "1;1,3"  # semicolon-separated sampling paths
    hybrid: str = ""  # semicolon-separated ``t1,tk2@ts`` entries
    skip: tuple = (1, 2)
    metrics: str = "tv,mi"
    report: str = "report.txt"
    results: str = "results.csv"


@dataclass
class PlotConfig:
    inputs: str = ""  # comma-separated CSV files; default is the eval results file
    csv: str = "plot.csv"
    figure: str = "tv_vs_steps.svg"


@dataclass
class RunConfig:
    seed: int = 0
    domain: DomainConfig = field(default_factory=DomainConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    solver: SolverSection = field(default_factory=SolverSection)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    plot: PlotConfig = field(default_factory=PlotConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """Canonical file form; parsing it back yields an equal config."""
        lines = [f"seed = {self.seed}"]
        for f in fields(self):
            if f.name == "seed":
                continue
            for sub in fields(getattr(self, f.name)):
                lines.append(f"{f.name}.{sub.name} = {_render(getattr(getattr(self, f.name), sub.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def base_seed(self) -> int:
        return self.seed if self.dataset.base_seed is None else self.dataset.base_seed

    def validate(self):
        d = self.domain
        if d.n < 1 or d.V < 1 or d.C < 1:
            raise ConfigError("domain.n, domain.V and domain.C must be positive")
        if self.teacher.kind not in ("markov", "tabular", "neural"):
            raise ConfigError(f"teacher.kind: unknown kind {self.teacher.kind!r}")
        if self.teacher.kind == "markov" and d.V < 2:
            raise ConfigError("teacher.kind = markov needs domain.V >= 2")
        if self.teacher.kind != "markov" and not self.teacher.data:
            raise ConfigError(f"teacher.data is required for teacher.kind = {self.teacher.kind}")
        if not 0.0 <= self.teacher.stay <= 1.0:
            raise ConfigError("teacher.stay must lie in [0, 1]")
        if self.solver.scheme not in ("heun", "euler"):
            raise ConfigError(f"solver.scheme: unknown scheme {self.solver.scheme!r}")
        if self.solver.steps < 1 or not 0.0 < self.solver.t_end <= 1.0:
            raise ConfigError("solver.steps must be >= 1 and solver.t_end in (0, 1]")
        if self.solver.grid not in ("warped", "uniform"):
            raise ConfigError(f"solver.grid: unknown grid {self.solver.grid!r}")
        if self.solver.grid == "warped" and self.solver.t_end >= 1.0:
            raise ConfigError("solver.grid = warped needs solver.t_end < 1")
        if self.dataset.N < 1:
            raise ConfigError("dataset.N must be >= 1")
        tr = self.training
        if not tr.schedule or tr.schedule[0] != 1 or list(tr.schedule) != sorted(set(tr.schedule)):
            raise ConfigError("training.schedule must start at 1 and be strictly increasing")
        if tr.schedule[-1] > d.n:
            raise ConfigError("training.schedule entries must be <= domain.n")
        if tr.weights and len(tr.weights) != len(tr.schedule):
            raise ConfigError("training.weights must match training.schedule in length")
        if tr.lr_rule not in ("linear", "fixed"):
            raise ConfigError("training.lr_rule must be linear or fixed")
        if not 0.0 <= tr.ema_decay <= 1.0:
            raise ConfigError("training.ema_decay must lie in [0, 1]")
        if tr.batch < 1 or (tr.steps < 1 and tr.epochs < 1):
            raise ConfigError("training.batch and training.steps (or epochs) must be positive")
        if tr.head_init not in ("normal", "zero"):
            raise ConfigError("training.head_init must be normal or zero")
        s = self.sampling
        if s.variant not in ("deterministic", "stochastic"):
            raise ConfigError("sampling.variant must be deterministic or stochastic")
        if s.decode not in ("argmax", "sample"):
            raise ConfigError("sampling.decode must be argmax or sample")
        if s.count < 1:
            raise ConfigError("sampling.count must be >= 1")
        if self.eval.M < 1:
            raise ConfigError("eval.M must be >= 1")
        trained = set(tr.schedule)
        hybrid = self.eval_hybrid()
        if s.t_s is not None:
            hybrid.append((tuple(s.path), s.t_s))
        for path in self.eval_paths() + [tuple(s.path)] + [p for p, _ in hybrid]:
            if not set(path) <= trained:
                raise ConfigError(f"sampling path {path} uses timesteps outside training.schedule {tr.schedule}")
        for path, ts in hybrid:
            if len(path) != 2 or not path[0] < ts < path[1]:
                raise ConfigError(f"hybrid path {path} with t_s={ts} needs two timesteps and t1 < t_s < t_k2")
        unknown = set(self.eval_metrics()) - {"tv", "mi"}
        if unknown:
            raise ConfigError(f"eval.metrics: unknown metrics {sorted(unknown)}")
        return self

    def eval_paths(self):
        try:
            return [tuple(int(x) for x in p.split(",")) for p in self.eval.paths.split(";") if p.strip()]
        except ValueError as exc:
            raise ConfigError(f"eval.paths: {exc}") from None

    def eval_hybrid(self):
        out = []
        for item in filter(str.strip, self.eval.hybrid.split(";")):
            try:
                path, ts = item.split("@")
                out.append((tuple(int(x) for x in path.split(",")), int(ts)))
            except ValueError:
                raise ConfigError(f"eval.hybrid: cannot parse {item!r} (expected t1,tk2@ts)") from None
        return out

    def eval_metrics(self):
        return [m.strip() for m in self.eval.metrics.split(",") if m.strip()]


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _convert(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _convert(raw, args[0], key)
    try:
        if hint is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        seen.add(key)
        set_key(cfg, key, raw, f"{source}:{lineno}: {key}")
    return cfg


def set_key(cfg: RunConfig, key: str, raw: str, label: Optional[str] = None):
    label = label or key
    parts = key.split(".")
    if parts == ["seed"]:
        cfg.seed = _convert(raw, int, label)
        return
    if len(parts) != 2:
        raise ConfigError(f"{label}: unknown key")
    section, name = parts
    hints = typing.get_type_hints(RunConfig)
    if section == "seed" or section not in hints:
        raise ConfigError(f"{label}: unknown section {section!r}")
    target = getattr(cfg, section)
    sub_hints = typing.get_type_hints(type(target))
    if name not in sub_hints:
        raise ConfigError(f"{label}: unknown key")
    setattr(target, name, _convert(raw, sub_hints[name], label))


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
