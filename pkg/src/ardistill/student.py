"""Few-step student: a dual-head causal transformer that jumps from any trajectory
point X_t straight to the final token sequence.

Sequence layout is ``[class, x_1, ..., x_n]`` where x_i is the codebook
embedding of q_i for i < t and the noise vector eps_i otherwise; the output
at sequence position i is the prediction for token i. Positions before t are
always copied from the input, never predicted.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import container
from .core import Codebook, TokenSeq, TrajectoryPoint, nearest_tokens
from .nn import tensor as T
from .nn.optim import EMA, AdamW, scaled_lr
from .nn.transformer import (TransformerConfig, backbone, embed_head, init_params, logits_head,
                             no_decay_names, param_arrays, params_from_arrays)
from .teacher import NeuralTeacher

log = logging.getLogger(__name__)
# rows per forward pass at prediction time; bounds memory on large sample batches
PREDICT_CHUNK = 4096

DATA, NOISE = 0, 1


class DistillError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimestepSchedule:
    timesteps: tuple
    weights: Optional[tuple] = None

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if not ts:
            raise ValueError("schedule needs at least one timestep")
        if ts[0] != 1:
            raise ValueError("schedule must start at t_1 = 1 so one-step generation is trained")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("schedule timesteps must be strictly increasing")
        w = tuple(float(x) for x in self.weights) if self.weights is not None else tuple(1.0 for _ in ts)
        if len(w) != len(ts) or any(x <= 0 for x in w):
            raise ValueError("schedule weights must be positive, one per timestep")
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "weights", w)

    def validate(self, n):
        if self.timesteps[-1] > n:
            raise ValueError(f"schedule timestep {self.timesteps[-1]} exceeds n={n}")

    def weight(self, t):
        return self.weights[self.timesteps.index(int(t))]

    def default_split(self):
        """Middle element of the schedule (first timestep served by the embedding head)."""
        ts = self.timesteps
        return ts[len(ts) // 2] if len(ts) > 1 else ts[0] + 1

    def __len__(self):
        return len(self.timesteps)


@dataclass
class StudentTrainConfig:
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    d_ff: int = 128
    num_classes: int = 1
    steps: int = 4000
    batch: int = 256
    lr: float = 1e-4
    lr_rule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    w_emb: float = 1.0
    w_logit: float = 0.1
    split_point: Optional[int] = None
    head_init: str = "normal"
    decode: str = "argmax"
    log_every: int = 0
    seed: int = 0


class StudentModel:
    def __init__(self, params, cfg: TransformerConfig, codebook: Codebook, schedule: TimestepSchedule,
                 split_point: Optional[int] = None, decode: str = "argmax"):
        if not cfg.token_types or not cfg.embed_head:
            raise ValueError("student needs token-type embeddings and an embedding head")
        self.params = params
        self.cfg = cfg
        self.codebook = codebook
        self.n = cfg.seq_len - 1
        schedule.validate(self.n)
        self.schedule = schedule
        self.split_point = int(split_point) if split_point is not None else schedule.default_split()
        if not 1 <= self.split_point <= self.n + 1:
            raise ValueError(f"split point {self.split_point} outside [1, {self.n + 1}]")
        if decode not in ("argmax", "sample"):
            raise ValueError("decode must be 'argmax' or 'sample'")
        self.decode = decode
        self.calls = 0

    @property
    def V(self):
        return self.codebook.V

    @property
    def C(self):
        return self.codebook.C

    # forward ------------------------------------------------------------------------

    def inputs(self, tokens, noise, t):
        """Embedded X_t batch and token-type ids. ``t`` is an int or a (B,) array."""
        noise = np.asarray(noise, dtype=np.float64)
        B, n, _ = noise.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        is_data = np.arange(1, n + 1)[None, :] < t[:, None]
        x = noise.copy()
        if is_data.any():
            tokens = np.asarray(tokens, dtype=np.int64)
            emb = self.codebook.embed(np.where(is_data, tokens, 0))
            x = np.where(is_data[..., None], emb, x)
        types = np.where(is_data, DATA, NOISE)
        return x, types, is_data

    def forward(self, tokens, noise, t, conditions):
        """Logits (B, n, V) and embedding predictions (B, n, C) as Tensors."""
        x, types, _ = self.inputs(tokens, noise, t)
        B = x.shape[0]
        conditions = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (B,))
        h = backbone(self.params, self.cfg, conditions, x, types)[:, 1:]
        return logits_head(self.params, h), embed_head(self.params, h)

    def predict_batch(self, tokens, noise, t: int, conditions, rng=None):
        """F_theta for a batch sharing one timestep ``t``: (B, n) token ids."""
        noise = np.asarray(noise)
        B, n, _ = noise.shape
        if not 1 <= t <= n + 1:
            raise ValueError(f"t={t} outside [1, {n + 1}]")
        out = np.zeros((B, n), dtype=np.int64)
        if t > 1:
            out[:, :t - 1] = np.asarray(tokens, dtype=np.int64)[:, :t - 1]
        if t == n + 1:
            return out
        self.calls += 1
        use_logits = t < self.split_point
        u = None
        if use_logits and self.decode == "sample":
            # drawn up front so the result does not depend on the chunking
            rng = rng if rng is not None else np.random.default_rng()
            u = rng.random((B, n - t + 1))
        tokens = np.asarray(tokens, dtype=np.int64)
        conditions = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (B,))
        pred = np.zeros((B, n - t + 1), dtype=np.int64)
        for lo in range(0, B, PREDICT_CHUNK):
            hi = min(lo + PREDICT_CHUNK, B)
            logits, emb = self.forward(tokens[lo:hi], noise[lo:hi], t, conditions[lo:hi])
            if not use_logits:
                pred[lo:hi] = nearest_tokens(emb.data[:, t - 1:].astype(np.float64), self.codebook)
                continue
            z = logits.data[:, t - 1:].astype(np.float64)
            if u is None:
                pred[lo:hi] = np.argmax(z, axis=-1)
                continue
            z = z - z.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            pred[lo:hi] = np.minimum((u[lo:hi, :, None] >= np.cumsum(p, -1)).sum(-1), self.V - 1)
        out[:, t - 1:] = pred
        return out

    def predict_final(self, xt: TrajectoryPoint, t: Optional[int] = None, condition=None, rng=None) -> TokenSeq:
        t = xt.t if t is None else t
        if t != xt.t:
            raise ValueError("t must match the trajectory point")
        cond = xt.condition if condition is None else condition
        cond = 0 if cond is None else cond
        n = xt.n
        tokens = np.zeros((1, n), dtype=np.int64)
        tokens[0, :t - 1] = xt.prefix
        noise = np.zeros((1, n, self.C))
        noise[0, t - 1:] = xt.suffix
        return TokenSeq(self.predict_batch(tokens, noise, t, [cond], rng)[0], cond)

    # persistence --------------------------------------------------------------------

    def to_bytes(self):
        meta = {"n": self.n, "V": self.V, "C": self.C, "arch": self.cfg.to_dict(),
                "schedule": list(self.schedule.timesteps), "weights": list(self.schedule.weights),
                "split_point": self.split_point, "decode": self.decode}
        arrays = param_arrays(self.params)
        arrays["codebook"] = self.codebook.entries
        return container.pack("student", meta, arrays)

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return container.fingerprint(data)

    @classmethod
    def load(cls, path_or_bytes):
        buf = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else open(path_or_bytes, "rb").read()
        kind, meta, arrays = container.unpack(buf)
        if kind != "student":
            raise container.ContainerError(f"checkpoint kind {kind!r} is not a student")
        cb = Codebook(arrays.pop("codebook"))
        return cls(params_from_arrays(arrays), TransformerConfig(**meta["arch"]), cb,
                   TimestepSchedule(meta["schedule"], meta["weights"]), meta["split_point"], meta["decode"])


def f_theta(model: StudentModel, xt: TrajectoryPoint, t=None, condition=None):
    """Raw network outputs for one trajectory point: logits (n, V) and embeddings (n, C)."""
    t = xt.t if t is None else t
    if not 1 <= t <= xt.n + 1:
        raise ValueError(f"t={t} outside [1, {xt.n + 1}]")
    cond = xt.condition if condition is None else condition
    tokens = np.zeros((1, xt.n), dtype=np.int64)
    tokens[0, :xt.t - 1] = xt.prefix
    logits, emb = model.forward(tokens, xt.embedded(model.codebook)[None], t, [0 if cond is None else cond])
    return logits.data[0], emb.data[0]


def predict_final(model, xt: TrajectoryPoint, t=None, condition=None, rng=None) -> TokenSeq:
    return model.predict_final(xt, t, condition, rng)


def student_config(n, codebook, cfg: StudentTrainConfig, teacher=None) -> TransformerConfig:
    if isinstance(teacher, NeuralTeacher):
        a = teacher.cfg
        return TransformerConfig(seq_len=n + 1, C=codebook.C, V=codebook.V, num_classes=a.num_classes,
                                 d_model=a.d_model, n_layers=a.n_layers, n_heads=a.n_heads, d_ff=a.d_ff,
                                 token_types=True, embed_head=True)
    return TransformerConfig(seq_len=n + 1, C=codebook.C, V=codebook.V, num_classes=cfg.num_classes,
                             d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_ff=cfg.d_ff,
                             token_types=True, embed_head=True)


def init_student(n, codebook, schedule, cfg: StudentTrainConfig, teacher=None, rng=None) -> StudentModel:
    """Fresh student; backbone and logits head are inherited from a neural teacher when given.

    The extra positional slot, the token-type embeddings and the embedding head
    are newly initialised (small random values).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    arch = student_config(n, codebook, cfg, teacher)
    params = init_params(arch, rng)
    if isinstance(teacher, NeuralTeacher):
        if teacher.n != n or teacher.codebook != codebook:
            raise ValueError("teacher and pair store disagree on n or the codebook")
        for name, arr in teacher.arrays.items():
            if name == "pos_emb":
                params[name].data[:teacher.n] = arr
                params[name].data[teacher.n:] = rng.normal(0.0, 1e-2, size=(1, arch.d_model))
            else:
                params[name].data[...] = arr
    if cfg.head_init == "zero":
        for name in ("head.logits.w", "head.logits.b", "head.embed.w", "head.embed.b"):
            params[name].data[...] = 0.0
    return StudentModel(params, arch, codebook, schedule, cfg.split_point, cfg.decode)


def distill_loss_batch(model: StudentModel, tokens, noise, t, conditions, lam=None,
                       w_emb=1.0, w_logit=0.1):
    """Mean over the batch of lam(t) * [w_emb * MSE_emb + w_logit * CE] averaged over positions >= t.

    ``tokens`` (B, n) are the target data sequences (their prefix also forms the
    data head of X_t). ``t`` is (B,) or an int.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    B, n = tokens.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    lam = np.ones(B) if lam is None else np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    logits, emb = model.forward(tokens, noise, t, conditions)
    sup = np.arange(1, n + 1)[None, :] >= t[:, None]
    count = sup.sum(axis=1)
    scale = np.where(count > 0, lam / np.maximum(count, 1), 0.0) / B
    wpos = (sup * scale[:, None]).astype(logits.dtype)
    target_emb = model.codebook.embed(tokens).astype(emb.dtype)
    d_emb = T.squared_error(emb, target_emb).mean(axis=-1)
    d_logit = T.softmax_cross_entropy(logits, tokens)
    per_pos = d_emb * w_emb + d_logit * w_logit
    return (per_pos * wpos).sum()


def distill_loss(model: StudentModel, pair, t: int, lam: float = 1.0, w_emb=1.0, w_logit=0.1):
    """Loss for a single pair at timestep ``t``; call ``.backward()`` for gradients."""
    tokens = np.asarray(pair.data.ids, dtype=np.int64)[None]
    noise = np.asarray(pair.noise.values)[None]
    loss = distill_loss_batch(model, tokens, noise, [t], [pair.condition], [lam], w_emb, w_logit)
    if not np.isfinite(loss.data):
        raise DistillError("non-finite distillation loss")
    return loss


def train_student(store, teacher, schedule: TimestepSchedule, config: StudentTrainConfig = StudentTrainConfig(),
                  eval_fn=None, eval_every=0):
    """Distil ``store`` into a student. Returns (student with EMA weights, history).

    ``teacher`` must be the model that generated the store (fingerprint-checked);
    neural teachers also seed the student's weights. ``eval_fn(model)`` is called
    on EMA weights every ``eval_every`` steps and its result is kept in the history.
    """
    store.check_teacher(teacher)
    schedule.validate(store.n)
    rng = np.random.default_rng(config.seed)
    model = init_student(store.n, teacher.codebook, schedule, config, teacher, rng)
    params = model.params
    lr = scaled_lr(config.lr, config.batch, config.lr_rule)
    opt = AdamW(lr=lr, beta1=config.beta1, beta2=config.beta2, weight_decay=config.weight_decay)
    ema = EMA.from_params(params, config.ema_decay, config.ema_warmup)
    skip_decay = no_decay_names(params)
    ts = np.array(schedule.timesteps)
    lam = np.array(schedule.weights)
    steps_per_epoch = max(1, math.ceil(store.N / config.batch))
    history = {"step": [], "loss": [], "epoch_loss": [], "eval": []}
    running = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, store.N, size=config.batch)
        ti = rng.integers(0, len(ts), size=config.batch)
        loss = distill_loss_batch(model, store.data[idx], store.noise[idx], ts[ti], store.conditions[idx],
                                  lam[ti], config.w_emb, config.w_logit)
        if not np.isfinite(loss.data):
            raise DistillError(f"non-finite distillation loss at step {step}")
        for p in params.values():
            p.zero_grad()
        loss.backward()
        opt.step(params, no_decay=skip_decay)
        ema.update(params)
        running.append(float(loss.data))
        if step % steps_per_epoch == 0 or step == config.steps:
            history["epoch_loss"].append((step, float(np.mean(running))))
            log.info("distill step %d epoch-loss %.5f", step, history["epoch_loss"][-1][1])
            running = []
        if config.log_every and step % config.log_every == 0:
            history["step"].append(step)
            history["loss"].append(float(loss.data))
        if eval_fn is not None and eval_every and step % eval_every == 0:
            ema.swap_in(params)
            history["eval"].append((step, eval_fn(model)))
            ema.swap_in(params)
    ema.swap_in(params)
    return model, history


def sample_timesteps(schedule: TimestepSchedule, count: int, rng) -> np.ndarray:
    ts = np.array(schedule.timesteps)
    return ts[rng.integers(0, len(ts), size=count)]
