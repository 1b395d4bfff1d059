"""Small pre-norm causal transformer over continuous token inputs.

Sequence layout is ``[class token, x_1, ..., x_{L-1}]``. Token inputs are
C-dimensional vectors (codebook embeddings or Gaussian noise) mapped to the
model width by a linear projection, so the same backbone accepts both.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class TransformerConfig:
    seq_len: int
    C: int
    V: int
    num_classes: int = 1
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    token_types: bool = False
    embed_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers > 4 or self.d_model > 256:
            raise ValueError("desk-scale networks are limited to 4 layers and width 256")

    def to_dict(self):
        return asdict(self)


def init_params(cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
    d, f = cfg.d_model, cfg.d_ff
    std = 0.02
    out_std = std / np.sqrt(2 * cfg.n_layers)

    def normal(shape, s=std):
        return rng.normal(0.0, s, size=shape).astype(dtype)

    p = {
        "cls_emb": normal((cfg.num_classes, d)),
        "in_proj.w": normal((cfg.C, d), 1.0 / np.sqrt(cfg.C)),
        "in_proj.b": np.zeros(d, dtype),
        "pos_emb": normal((cfg.seq_len, d)),
    }
    if cfg.token_types:
        p["type_emb"] = normal((2, d), 1e-2)
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        p[b + "ln1.g"] = np.ones(d, dtype)
        p[b + "ln1.b"] = np.zeros(d, dtype)
        p[b + "attn.wqkv"] = normal((d, 3 * d))
        p[b + "attn.bqkv"] = np.zeros(3 * d, dtype)
        p[b + "attn.wo"] = normal((d, d), out_std)
        p[b + "attn.bo"] = np.zeros(d, dtype)
        p[b + "ln2.g"] = np.ones(d, dtype)
        p[b + "ln2.b"] = np.zeros(d, dtype)
        p[b + "mlp.w1"] = normal((d, f))
        p[b + "mlp.b1"] = np.zeros(f, dtype)
        p[b + "mlp.w2"] = normal((f, d), out_std)
        p[b + "mlp.b2"] = np.zeros(d, dtype)
    p["ln_f.g"] = np.ones(d, dtype)
    p["ln_f.b"] = np.zeros(d, dtype)
    p["head.logits.w"] = normal((d, cfg.V))
    p["head.logits.b"] = np.zeros(cfg.V, dtype)
    if cfg.embed_head:
        p["head.embed.w"] = normal((d, cfg.C))
        p["head.embed.b"] = np.zeros(cfg.C, dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


NO_DECAY_SUFFIXES = (".b", ".g", "_emb", ".b1", ".b2", ".bo", ".bqkv")


def no_decay_names(params):
    return {k for k in params if k.endswith(NO_DECAY_SUFFIXES)}


def _block(params, i, h, cfg, mask):
    b = f"blocks.{i}."
    B, L, d = h.shape
    nh = cfg.n_heads
    dh = d // nh
    x = T.layer_norm(h, params[b + "ln1.g"], params[b + "ln1.b"])
    qkv = x @ params[b + "attn.wqkv"] + params[b + "attn.bqkv"]
    qkv = qkv.reshape(B, L, 3, nh, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    a = T.attention(q, k, v, mask)
    a = a.transpose(0, 2, 1, 3).reshape(B, L, d)
    h = h + (a @ params[b + "attn.wo"] + params[b + "attn.bo"])
    x = T.layer_norm(h, params[b + "ln2.g"], params[b + "ln2.b"])
    x = T.gelu(x @ params[b + "mlp.w1"] + params[b + "mlp.b1"])
    return h + (x @ params[b + "mlp.w2"] + params[b + "mlp.b2"])


def backbone(params, cfg: TransformerConfig, cls_ids, tokens, type_ids=None, mask=None):
    """Hidden states (B, L, d) for ``[cls, tokens...]``.

    cls_ids: (B,) ints. tokens: (B, L-1, C) array. type_ids: (B, L-1) ints in
    {0: data, 1: noise}, added to token positions when the model has token types.
    """
    tokens = np.asarray(tokens, dtype=params["in_proj.w"].dtype)
    B, Lt, C = tokens.shape
    L = Lt + 1
    if L > cfg.seq_len:
        raise T.ShapeError(f"sequence of length {L} exceeds positional table {cfg.seq_len}")
    if C != cfg.C:
        raise T.ShapeError(f"token dim {C} != model C {cfg.C}")
    cls = T.embedding(params["cls_emb"], np.asarray(cls_ids).reshape(B, 1))
    parts = [cls]
    if Lt:
        x = Tensor(tokens) @ params["in_proj.w"] + params["in_proj.b"]
        if type_ids is not None and "type_emb" in params:
            x = x + T.embedding(params["type_emb"], type_ids)
        parts.append(x)
    h = T.concat(parts, axis=1) if len(parts) > 1 else cls
    h = h + params["pos_emb"][:L]
    if mask is None:
        mask = T.causal_mask(L)
    for i in range(cfg.n_layers):
        h = _block(params, i, h, cfg, mask)
    return T.layer_norm(h, params["ln_f.g"], params["ln_f.b"])


def logits_head(params, h):
    return h @ params["head.logits.w"] + params["head.logits.b"]


def embed_head(params, h):
    return h @ params["head.embed.w"] + params["head.embed.b"]


def param_arrays(params):
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays):
    return {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in arrays.items()}
