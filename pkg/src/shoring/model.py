"""Full models: event encoder -> sequence network(s) -> three-layer task head.

SA / SSA embed events with a two-layer relu perceptron and aggregate with one
or two self-attention layers. SHORIN swaps in the high-order event network;
SHORING adds the conditional group-by branch next to attention.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encode import EncodedData, Encoder, EntityLayout
from .errors import ConfigError, ContractViolation
from .eventnet import EventNetConfig, event_forward, init_eventnet_params
from .seqnet import (AttentionConfig, ConditionalConfig, conditional_forward, hybrid_forward,
                     init_attention_params, init_conditional_params, self_attention)

ARCHITECTURES = ("SA", "SSA", "SHORIN", "SHORING")


@dataclass
class ModelSpec:
    architecture: str
    k: int = 16
    n_terms: int = 12
    emb_dim: int = 4
    d_s: int = 16
    heads: int = 2
    stack: int | None = None
    pooling: str = "sum"
    entity_width: int = 16
    field_width: int = 16
    cond_width: int = 32
    hidden: int = 128
    tracked_fields: tuple[int, ...] | None = None
    task: str = "regression"
    n_classes: int = 2
    eps: float = 1e-7
    u_init_std: float = 0.01
    pt_bias_init: float = 1.0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.stack is None:
            self.stack = 2 if self.architecture == "SSA" else 1
        if self.stack < 1:
            raise ConfigError("stack must be >= 1")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task kind {self.task!r}")
        if self.tracked_fields is not None:
            self.tracked_fields = tuple(int(f) for f in self.tracked_fields)

    @property
    def high_order(self) -> bool:
        return self.architecture in ("SHORIN", "SHORING")

    @property
    def conditional(self) -> bool:
        return self.architecture == "SHORING"

    @property
    def out_dim(self) -> int:
        return 1 if self.task == "regression" else self.n_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.tracked_fields is not None:
            d["tracked_fields"] = list(self.tracked_fields)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def orthogonal_init(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Orthonormal rows (wide) or columns (tall) via sign-fixed QR of a Gaussian draw.

    3-D shapes are a stack of independently initialised matrices; 1-D shapes
    (biases) are zeros.
    """
    shape = tuple(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    if len(shape) == 3:
        return np.stack([orthogonal_init(shape[1:], seed * 7919 + i + 1) for i in range(shape[0])])
    if len(shape) != 2:
        raise ContractViolation(f"orthogonal_init supports 1-3 dims, got {shape}")
    rows, cols = shape
    g = np.random.default_rng(seed).standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q if rows >= cols else q.T


def _name_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 32)


def make_initializer(seed: int, u_std: float, positive_bias: float = 1.0):
    def init(name: str, shape, kind: str) -> np.ndarray:
        s = _name_seed(seed, name)
        if kind == "bias":
            return np.zeros(shape)
        if kind == "positive_bias":
            return np.full(shape, positive_bias)
        if kind == "exponent":
            return np.random.default_rng(s).normal(0.0, u_std, size=shape)
        return orthogonal_init(shape, s)
    return init


class Model:
    """Parameters plus a forward pass over an :class:`EncodedData` batch."""

    def __init__(self, spec: ModelSpec, encoder: Encoder, m: int = 1, seed: int = 0):
        self.spec = spec
        self.encoder = encoder
        self.m = m
        self.seed = seed
        stats, enc_spec = encoder.stats, encoder.spec
        self.emb_fields = enc_spec.embedding_fields
        self.table_sizes = [stats.n_ids(f) for f in self.emb_fields]
        self.dense_width = enc_spec.dense_width(stats)
        self.layout = EntityLayout.from_stats(stats, spec.tracked_fields)
        self.full_layout = EntityLayout.from_stats(stats)
        self.d_x = len(self.emb_fields) * spec.emb_dim + self.dense_width
        self.event_cfg = EventNetConfig(self.d_x, spec.k, spec.n_terms, spec.eps)
        self.attn_cfgs = [AttentionConfig(spec.k if i == 0 else spec.d_s, spec.d_s, spec.heads, spec.pooling)
                          for i in range(spec.stack)]
        self.cond_cfg = (ConditionalConfig(spec.k, self.layout, spec.entity_width, spec.field_width,
                                           spec.cond_width) if spec.conditional else None)
        self.params: dict[str, Tensor] = {}
        init = make_initializer(seed, spec.u_init_std, spec.pt_bias_init)
        for j in range(m):
            pre = f"seq{j}."
            for f, size in zip(self.emb_fields, self.table_sizes):
                name = f"{pre}emb{f}"
                self.params[name] = Tensor(init(name, (size, spec.emb_dim), "matrix"), requires_grad=True)
            if spec.high_order:
                self.params.update(init_eventnet_params(self.event_cfg, init, pre + "event."))
            else:
                for name, shape, kind in ((f"{pre}mlp.w1", (self.d_x, spec.k), "matrix"),
                                          (f"{pre}mlp.b1", (spec.k,), "bias"),
                                          (f"{pre}mlp.w2", (spec.k, spec.k), "matrix"),
                                          (f"{pre}mlp.b2", (spec.k,), "bias")):
                    self.params[name] = Tensor(init(name, shape, kind), requires_grad=True)
            for i, cfg in enumerate(self.attn_cfgs):
                self.params.update(init_attention_params(cfg, init, f"{pre}sa{i + 1}."))
            if self.cond_cfg is not None:
                self.params.update(init_conditional_params(self.cond_cfg, init, pre + "cond."))
        width = m * self.seq_width
        for name, shape, kind in (("head.w1", (width, spec.hidden), "matrix"), ("head.b1", (spec.hidden,), "bias"),
                                  ("head.w2", (spec.hidden, spec.hidden), "matrix"),
                                  ("head.b2", (spec.hidden,), "bias"),
                                  ("head.w3", (spec.hidden, spec.out_dim), "matrix"),
                                  ("head.b3", (spec.out_dim,), "bias")):
            self.params[name] = Tensor(init(name, shape, kind), requires_grad=True)

    @property
    def seq_width(self) -> int:
        return self.attn_cfgs[-1].pooled_width + (self.spec.cond_width if self.cond_cfg is not None else 0)

    def descriptor(self) -> dict:
        s = self.spec
        return {
            "model": s.architecture, "k": s.k, "d_s": s.d_s, "H": s.heads,
            "tracked_fields": list(self.layout.tracked_fields),
            "widths": {"d_x": self.d_x, "sequence": self.seq_width, "cond": s.cond_width if s.conditional else 0,
                       "hidden": s.hidden, "out": s.out_dim},
            "m": self.m, "spec": s.to_dict(), "encoder_fingerprint": self.encoder.fingerprint(),
        }

    # -- forward pieces

    def event_inputs(self, data: EncodedData, j: int) -> Tensor:
        parts = [dc.take(self.params[f"seq{j}.emb{f}"], data.cat_ids[:, j, :, col])
                 for col, f in enumerate(self.emb_fields)]
        parts.append(Tensor(data.dense[:, j]))
        return dc.concat(parts, axis=-1)

    def event_embeddings(self, data: EncodedData, j: int) -> Tensor:
        x = self.event_inputs(data, j)
        pre = f"seq{j}."
        if self.spec.high_order:
            return event_forward(x, self.params, self.event_cfg, pre + "event.")
        h = dc.relu(dc.matmul(x, self.params[pre + "mlp.w1"]) + self.params[pre + "mlp.b1"])
        return dc.relu(dc.matmul(h, self.params[pre + "mlp.w2"]) + self.params[pre + "mlp.b2"])

    def attention(self, c: Tensor, mask: np.ndarray, j: int) -> Tensor:
        h = c
        for i, cfg in enumerate(self.attn_cfgs):
            last = i == len(self.attn_cfgs) - 1
            h = self_attention(h, mask, self.params, cfg, f"seq{j}.sa{i + 1}.", pooled=last)
        return h

    def entity_rows(self, data: EncodedData, j: int) -> np.ndarray:
        """Entity rows of sequence ``j`` in this model's layout.

        Data encoded with the full layout is narrowed to the tracked fields.
        """
        ent = data.entities[:, j]
        n_tracked = len(self.layout.tracked_fields)
        if ent.shape[-1] == n_tracked and self.layout == self.full_layout:
            return ent
        if ent.shape[-1] == n_tracked and ent.shape[-1] != len(self.full_layout.tracked_fields):
            return ent
        if ent.shape[-1] != len(self.full_layout.tracked_fields):
            raise ContractViolation(f"entity columns {ent.shape[-1]} match neither the tracked nor the full layout")
        full_off = self.full_layout.offsets
        cols = list(self.layout.tracked_fields)
        sub = ent[..., cols]
        shift = np.array([off - full_off[f] for f, off in zip(cols, self.layout.offsets)])
        return np.where(sub >= 0, sub + shift, -1)

    def sequence_repr(self, data: EncodedData, j: int) -> Tensor:
        c = self.event_embeddings(data, j)
        mask = data.mask[:, j]
        attn = self.attention(c, mask, j)
        cond = None
        if self.cond_cfg is not None:
            cond = conditional_forward(c, self.entity_rows(data, j), self.params, self.cond_cfg, f"seq{j}.cond.")
        return hybrid_forward(cond, attn)

    def head(self, f: Tensor) -> Tensor:
        p = self.params
        h = dc.relu(dc.matmul(f, p["head.w1"]) + p["head.b1"])
        h = dc.relu(dc.matmul(h, p["head.w2"]) + p["head.b2"])
        return dc.matmul(h, p["head.w3"]) + p["head.b3"]

    def representation(self, data: EncodedData) -> Tensor:
        reps = [self.sequence_repr(data, j) for j in range(self.m)]
        return reps[0] if len(reps) == 1 else dc.concat(reps, axis=-1)

    def forward(self, data: EncodedData) -> Tensor:
        out = self.head(self.representation(data))
        if self.spec.task == "regression":
            return dc.reshape(out, (out.shape[0],))
        return out

    def predict(self, data: EncodedData, batch_size: int = 256) -> np.ndarray:
        outs = [self.forward(data.subset(slice(i, i + batch_size))).data for i in range(0, len(data), batch_size)]
        return np.concatenate(outs) if outs else np.zeros(0)

    # -- state

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ContractViolation(f"checkpoint parameters differ from model: {sorted(missing)[:5]}")
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise ContractViolation(f"parameter {n} has shape {state[n].shape}, expected {t.shape}")
            t.data = np.array(state[n], dtype=float)

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))
