"""AR teachers: an exact count-table model and a small neural one.

Both expose ``next_dists(prefixes, conditions)`` over batches of equal-length
prefixes, which is what the trajectory generator and the exact-joint
enumerator need. Condition ``None`` is treated as class 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import container
from .core import Codebook, TokenSeq
from .nn import tensor as T
from .nn.optim import AdamW
from .nn.transformer import (TransformerConfig, backbone, init_params, logits_head,
                             no_decay_names, param_arrays)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _cond(c):
    return 0 if c is None else int(c)


def categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row of ``probs`` given uniforms ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] >= cdf).sum(axis=-1)
    # guards against cdf[-1] < 1 by rounding; never picks a zero-probability tail entry
    last = probs.shape[-1] - 1 - np.argmax((probs > 0)[..., ::-1], axis=-1)
    return np.minimum(idx, last)


class Teacher:
    n: int
    codebook: Codebook

    @property
    def V(self):
        return self.codebook.V

    @property
    def C(self):
        return self.codebook.C

    def next_dists(self, prefixes, conditions) -> np.ndarray:
        raise NotImplementedError

    def next_dist(self, prefix, condition=None) -> np.ndarray:
        if isinstance(prefix, TokenSeq):
            condition = prefix.condition if condition is None else condition
            prefix = prefix.ids
        prefix = tuple(prefix)
        if len(prefix) >= self.n:
            raise IndexError(f"prefix length {len(prefix)} must be < n={self.n}")
        arr = np.asarray(prefix, dtype=np.int64).reshape(1, len(prefix))
        return self.next_dists(arr, np.array([_cond(condition)]))[0]

    def to_bytes(self) -> bytes:
        raise NotImplementedError

    def fingerprint(self) -> str:
        return container.fingerprint(self.to_bytes())

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return container.fingerprint(data)


class TabularTeacher(Teacher):
    """Prefix-conditional count table with additive smoothing ``(count+a)/(total+V*a)``."""

    def __init__(self, counts: dict, alpha: float, n: int, codebook: Codebook):
        if alpha < 0:
            raise ValueError("smoothing alpha must be non-negative")
        self.counts = {}
        for key, vec in counts.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (codebook.V,) or np.any(vec < 0):
                raise ValueError(f"bad count vector for prefix {key}")
            self.counts[(int(key[0]), tuple(int(i) for i in key[1]))] = vec
        self.alpha = float(alpha)
        self.n = int(n)
        self.codebook = codebook

    def _dist(self, cond, prefix):
        vec = self.counts.get((cond, prefix))
        V = self.codebook.V
        if vec is None:
            return np.full(V, 1.0 / V)
        total = vec.sum() + V * self.alpha
        if total <= 0:
            return np.full(V, 1.0 / V)
        return (vec + self.alpha) / total

    def next_dists(self, prefixes, conditions):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim != 2:
            raise ValueError("prefixes must be a (B, k) array")
        if prefixes.shape[1] >= self.n:
            raise IndexError(f"prefix length {prefixes.shape[1]} must be < n={self.n}")
        conditions = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (len(prefixes),))
        out = np.empty((len(prefixes), self.codebook.V))
        cache = {}
        for i, (c, row) in enumerate(zip(conditions.tolist(), map(tuple, prefixes.tolist()))):
            key = (c, row)
            d = cache.get(key)
            if d is None:
                d = cache[key] = self._dist(c, row)
            out[i] = d
        return out

    def to_bytes(self):
        keys = sorted(self.counts)
        karr = np.full((len(keys), 2 + self.n), -1, dtype=np.int64)
        carr = np.zeros((len(keys), self.codebook.V), dtype=np.float64)
        for i, (c, prefix) in enumerate(keys):
            karr[i, 0] = c
            karr[i, 1] = len(prefix)
            karr[i, 2:2 + len(prefix)] = prefix
            carr[i] = self.counts[(c, prefix)]
        meta = {"n": self.n, "V": self.codebook.V, "C": self.codebook.C, "alpha": self.alpha}
        return container.pack("tabular_teacher", meta,
                              {"keys": karr, "counts": carr, "codebook": self.codebook.entries})

    @classmethod
    def from_parts(cls, meta, arrays):
        cb = Codebook(arrays["codebook"])
        counts = {}
        for row, vec in zip(arrays["keys"], arrays["counts"]):
            k = int(row[1])
            counts[(int(row[0]), tuple(int(x) for x in row[2:2 + k]))] = vec
        return cls(counts, meta["alpha"], meta["n"], cb)


def fit_tabular(dataset, alpha: float = 0.0, codebook: Optional[Codebook] = None,
                V: Optional[int] = None, weights=None) -> TabularTeacher:
    """Count every (condition, prefix) -> next token transition in ``dataset``.

    ``weights`` optionally gives a multiplicity per sequence.
    """
    from .core import line_codebook

    dataset = [s if isinstance(s, TokenSeq) else TokenSeq(s) for s in dataset]
    if not dataset:
        raise ValueError("fit_tabular: empty dataset")
    n = dataset[0].n
    if any(s.n != n for s in dataset):
        raise ValueError("fit_tabular: sequences must share a common length")
    if codebook is None:
        V = V if V is not None else max(max(s.ids) for s in dataset) + 1
        codebook = line_codebook(V)
    for s in dataset:
        s.check(codebook)
    if weights is None:
        weights = np.ones(len(dataset))
    counts = {}
    for s, w in zip(dataset, weights):
        c = _cond(s.condition)
        for i in range(n):
            key = (c, s.ids[:i])
            vec = counts.get(key)
            if vec is None:
                vec = counts[key] = np.zeros(codebook.V)
            vec[s.ids[i]] += w
    return TabularTeacher(counts, alpha, n, codebook)


class MarkovTeacher(Teacher):
    """Symmetric chain: q_1 uniform, then repeat the previous token with probability
    ``stay`` and otherwise move uniformly to another token. Closed form, so any n works."""

    def __init__(self, n: int, codebook: Codebook, stay: float):
        if codebook.V < 2:
            raise ValueError("a Markov teacher needs V >= 2")
        if not 0.0 <= stay <= 1.0:
            raise ValueError("stay must lie in [0, 1]")
        self.n = int(n)
        self.codebook = codebook
        self.stay = float(stay)

    def next_dists(self, prefixes, conditions):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim != 2:
            raise ValueError("prefixes must be a (B, k) array")
        if prefixes.shape[1] >= self.n:
            raise IndexError(f"prefix length {prefixes.shape[1]} must be < n={self.n}")
        B, V = len(prefixes), self.codebook.V
        if prefixes.shape[1] == 0:
            return np.full((B, V), 1.0 / V)
        out = np.full((B, V), (1.0 - self.stay) / (V - 1))
        out[np.arange(B), prefixes[:, -1]] = self.stay
        return out

    def to_bytes(self):
        meta = {"n": self.n, "V": self.V, "C": self.C, "stay": self.stay}
        return container.pack("markov_teacher", meta, {"codebook": self.codebook.entries})

    @classmethod
    def from_parts(cls, meta, arrays):
        return cls(meta["n"], Codebook(arrays["codebook"]), meta["stay"])


def markov_teacher(n: int, codebook: Codebook, stay: float) -> MarkovTeacher:
    return MarkovTeacher(n, codebook, stay)


# neural teacher --------------------------------------------------------------------------

@dataclass
class TeacherTrainConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    num_classes: int = 1
    steps: int = 2000
    batch: int = 128
    lr: float = 3e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    holdout: float = 0.1
    eval_every: int = 200
    seed: int = 0


class NeuralTeacher(Teacher):
    """Causal transformer over ``[class, q_1, ..., q_{n-1}]``; position i predicts q_{i+1}.

    ``guidance`` = (scale, null_class) mixes conditional and unconditional logits
    (classifier-free guidance). Off by default.
    """

    def __init__(self, arrays: dict, cfg: TransformerConfig, codebook: Codebook, guidance=None):
        self.cfg = cfg
        self.n = cfg.seq_len
        self.codebook = codebook
        self.arrays = {k: np.asarray(v) for k, v in arrays.items()}
        self.params = {k: T.Tensor(v) for k, v in self.arrays.items()}
        self.guidance = guidance

    def logits(self, prefixes, conditions):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        B, k = prefixes.shape
        tokens = self.codebook.embed(prefixes).reshape(B, k, self.C)
        h = backbone(self.params, self.cfg, conditions, tokens)
        return logits_head(self.params, h[:, k]).data.astype(np.float64)

    def next_dists(self, prefixes, conditions):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim != 2:
            raise ValueError("prefixes must be a (B, k) array")
        if prefixes.shape[1] >= self.n:
            raise IndexError(f"prefix length {prefixes.shape[1]} must be < n={self.n}")
        conditions = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (len(prefixes),))
        z = self.logits(prefixes, conditions)
        if self.guidance is not None:
            scale, null_class = self.guidance
            zu = self.logits(prefixes, np.full_like(conditions, null_class))
            z = zu + scale * (z - zu)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)

    def to_bytes(self):
        meta = {"n": self.n, "V": self.V, "C": self.C, "arch": self.cfg.to_dict()}
        arrays = dict(self.arrays)
        arrays["codebook"] = self.codebook.entries
        return container.pack("neural_teacher", meta, arrays)

    @classmethod
    def from_parts(cls, meta, arrays):
        arrays = dict(arrays)
        cb = Codebook(arrays.pop("codebook"))
        return cls(arrays, TransformerConfig(**meta["arch"]), cb)


def load_teacher(path_or_bytes) -> Teacher:
    buf = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else open(path_or_bytes, "rb").read()
    kind, meta, arrays = container.unpack(buf)
    if kind == "tabular_teacher":
        return TabularTeacher.from_parts(meta, arrays)
    if kind == "neural_teacher":
        return NeuralTeacher.from_parts(meta, arrays)
    if kind == "markov_teacher":
        return MarkovTeacher.from_parts(meta, arrays)
    raise container.ContainerError(f"checkpoint kind {kind!r} is not a teacher")


def _teacher_batch(seqs, conds, codebook):
    """Inputs [cls, q_1..q_{n-1}] and targets q_1..q_n."""
    tokens = codebook.embed(seqs[:, :-1])
    return conds, tokens, seqs


def teacher_loss(params, cfg, codebook, seqs, conds):
    cls, tokens, targets = _teacher_batch(seqs, conds, codebook)
    h = backbone(params, cfg, cls, tokens)
    ce = T.softmax_cross_entropy(logits_head(params, h), targets)
    return ce.mean()


def train_neural_teacher(dataset, codebook: Codebook, config: TeacherTrainConfig = TeacherTrainConfig(),
                         callback=None):
    """Fit a NeuralTeacher by next-token cross-entropy. Returns (teacher, history).

    ``history`` holds (step, train_loss, heldout_loss) tuples; the first entry is
    the loss at initialisation.
    """
    dataset = [s if isinstance(s, TokenSeq) else TokenSeq(s) for s in dataset]
    if not dataset:
        raise ValueError("empty dataset")
    seqs = np.array([s.ids for s in dataset], dtype=np.int64)
    conds = np.array([_cond(s.condition) for s in dataset], dtype=np.int64)
    n = seqs.shape[1]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(seqs))
    n_hold = int(round(config.holdout * len(seqs))) if len(seqs) > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    if len(train) == 0:
        train = hold
    cfg = TransformerConfig(seq_len=n, C=codebook.C, V=codebook.V, num_classes=config.num_classes,
                            d_model=config.d_model, n_layers=config.n_layers, n_heads=config.n_heads,
                            d_ff=config.d_ff)
    params = init_params(cfg, rng)
    opt = AdamW(lr=config.lr, beta1=config.beta1, beta2=config.beta2, weight_decay=config.weight_decay)
    skip_decay = no_decay_names(params)

    def heldout():
        idx = hold if len(hold) else train[:1024]
        return float(teacher_loss(params, cfg, codebook, seqs[idx], conds[idx]).data)

    history = [(0, float("nan"), heldout())]
    for step in range(1, config.steps + 1):
        idx = train[rng.integers(0, len(train), size=config.batch)]
        loss = teacher_loss(params, cfg, codebook, seqs[idx], conds[idx])
        if not np.isfinite(loss.data):
            raise TrainingError(f"teacher loss became non-finite at step {step} "
                                f"(last heldout {history[-1][2]:.4f})")
        for p in params.values():
            p.zero_grad()
        loss.backward()
        opt.step(params, no_decay=skip_decay)
        if step % config.eval_every == 0 or step == config.steps:
            history.append((step, float(loss.data), heldout()))
            log.info("teacher step %d loss %.4f heldout %.4f", step, *history[-1][1:])
            if callback:
                callback(history[-1])
    teacher = NeuralTeacher(param_arrays(params), cfg, codebook)
    return teacher, history


def ar_sample(teacher: Teacher, condition=None, rng: Optional[np.random.Generator] = None) -> TokenSeq:
    """Token-by-token ancestral sampling; consumes exactly n uniforms from ``rng``."""
    rng = rng if rng is not None else np.random.default_rng()
    ids = []
    for _ in range(teacher.n):
        p = teacher.next_dist(tuple(ids), condition)
        ids.append(int(categorical(p[None], np.array([rng.random()]))[0]))
    return TokenSeq(ids, condition)


def ar_sample_batch(teacher: Teacher, count: int, rng: np.random.Generator, condition=None) -> np.ndarray:
    """(count, n) token array; position-major draws so each position consumes ``count`` uniforms."""
    seqs = np.zeros((count, 0), dtype=np.int64)
    conds = np.full(count, _cond(condition))
    for _ in range(teacher.n):
        p = teacher.next_dists(seqs, conds)
        nxt = categorical(p, rng.random(count))
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return seqs
