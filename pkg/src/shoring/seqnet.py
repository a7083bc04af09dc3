"""Sequence-level networks: masked multi-head self-attention, its stacked variant,
the conditional (group-by) sequence network and the hybrid concatenation.

All layers take batched inputs: embeddings ``c`` of shape (B, tau, k) and a
mask of shape (B, tau).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .diffcore import Tensor
from .encode import EntityLayout
from .errors import ConfigError, ContractViolation


# ---------------------------------------------------------------- self-attention


# "both" concatenates the sum and the mean over valid positions
POOLING_MODES = ("sum", "mean", "both")


@dataclass
class AttentionConfig:
    d_in: int
    d_s: int = 16
    heads: int = 2
    pooling: str = "sum"

    def __post_init__(self):
        if self.heads < 1 or self.d_s < 1:
            raise ConfigError("attention needs heads >= 1 and d_s >= 1")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")

    @property
    def pooled_width(self) -> int:
        return 2 * self.d_s if self.pooling == "both" else self.d_s


def init_attention_params(cfg: AttentionConfig, init, prefix: str = "") -> dict[str, Tensor]:
    shape = (cfg.heads, cfg.d_in, cfg.d_s)
    return {prefix + n: Tensor(init(prefix + n, shape, "matrix"), requires_grad=True)
            for n in ("w_q", "w_k", "w_v")}


def attention_weights(c, mask, params, cfg: AttentionConfig, prefix: str = "") -> Tensor:
    """Per-head masked softmax weights, shape (B, H, tau, tau)."""
    c4 = dc.reshape(dc.as_tensor(c), (c.shape[0], 1) + c.shape[1:])
    q = dc.matmul(c4, params[prefix + "w_q"])
    k = dc.matmul(c4, params[prefix + "w_k"])
    scores = dc.matmul(q, dc.swapaxes(k)) * (1.0 / math.sqrt(cfg.d_s))
    return dc.masked_softmax(scores, np.asarray(mask)[:, None, None, :])


def pool(h: Tensor, mask, mode: str) -> Tensor:
    """Sum, mean, or both concatenated, of (B, tau, d) rows over valid positions."""
    m = np.asarray(mask, dtype=float)
    total = dc.sum_(h * m[:, :, None], axis=1)
    if mode == "sum":
        return total
    mean = total * (1.0 / np.maximum(m.sum(axis=1, keepdims=True), 1.0))
    return mean if mode == "mean" else dc.concat([total, mean], axis=-1)


def self_attention(c, mask, params, cfg: AttentionConfig, prefix: str = "", pooled: bool = True) -> Tensor:
    """Head-averaged masked softmax attention; pooled to (B, d_s) or per position (B, tau, d_s)."""
    c = dc.as_tensor(c)
    if c.ndim != 3 or np.shape(mask) != c.shape[:2]:
        raise ContractViolation(f"expected c (B, tau, k) and mask (B, tau); got {c.shape}, {np.shape(mask)}")
    w = attention_weights(c, mask, params, cfg, prefix)
    c4 = dc.reshape(c, (c.shape[0], 1) + c.shape[1:])
    v = dc.matmul(c4, params[prefix + "w_v"])
    out = dc.mean(dc.matmul(w, v), axis=1)
    if not pooled:
        return out
    return pool(out, mask, cfg.pooling)


def stacked_self_attention(c, mask, params, cfg1: AttentionConfig, cfg2: AttentionConfig,
                           prefix1: str = "sa1.", prefix2: str = "sa2.") -> Tensor:
    if cfg1.d_s != cfg2.d_in:
        raise ContractViolation("layer-1 output width must equal layer-2 input width")
    h = self_attention(c, mask, params, cfg1, prefix1, pooled=False)
    return self_attention(h, mask, params, cfg2, prefix2, pooled=True)


# ---------------------------------------------------------------- assignment matrix


@dataclass
class AssignmentMatrix:
    """Binary entity-by-position matrix stored as per-position entity rows.

    ``rows[j]`` lists the entity rows present at position ``j`` (empty for padding).
    """

    rows: list[list[int]]
    field_partition: np.ndarray
    d_p: int

    @property
    def tau(self) -> int:
        return len(self.rows)

    def to_dense(self) -> np.ndarray:
        p = np.zeros((self.d_p, self.tau))
        for j, ents in enumerate(self.rows):
            p[ents, j] = 1.0
        return p

    def to_sparse(self) -> sp.csr_matrix:
        r = [e for ents in self.rows for e in ents]
        c = [j for j, ents in enumerate(self.rows) for _ in ents]
        return sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(self.d_p, self.tau))


def build_assignment(entity_rows: np.ndarray, layout: EntityLayout) -> AssignmentMatrix:
    """From a (tau, n_tracked) array of global entity rows (-1 at padding)."""
    entity_rows = np.asarray(entity_rows)
    rows = [[int(e) for e in pos if e >= 0] for pos in entity_rows]
    return AssignmentMatrix(rows, layout.field_of_row(), layout.d_p)


def build_assignment_from_sequence(sequence, stats, layout: EntityLayout, tau: int) -> AssignmentMatrix:
    """Assignment matrix of a raw sequence (most recent ``tau`` events, right padded)."""
    events = sequence.events[-tau:]
    rows: list[list[int]] = []
    for e in events:
        rows.append([off + stats.dense_id(f, e.cat[f]) - 1
                     for f, off in zip(layout.tracked_fields, layout.offsets)])
    rows.extend([] for _ in range(tau - len(events)))
    return AssignmentMatrix(rows, layout.field_of_row(), layout.d_p)


def batch_assignment(entities: np.ndarray, d_p: int) -> sp.csr_matrix:
    """Block-diagonal (B*d_p, B*tau) sparse matrix for a batch of entity-row arrays."""
    B, tau, n_tracked = entities.shape
    b, j, _ = np.nonzero(entities >= 0)
    ent = entities[entities >= 0]
    rows = b * d_p + ent
    cols = b * tau + j
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(B * d_p, B * tau))


# ---------------------------------------------------------------- conditional network


@dataclass
class ConditionalConfig:
    k: int
    layout: EntityLayout
    entity_width: int = 16
    field_width: int = 16
    out_width: int = 32

    def __post_init__(self):
        if not self.layout.sizes:
            raise ConfigError("conditional network needs a non-empty field partition")

    @property
    def n_fields(self) -> int:
        return len(self.layout.sizes)

    def field_membership(self) -> np.ndarray:
        m = np.zeros((self.n_fields, self.layout.d_p))
        m[self.layout.field_of_row(), np.arange(self.layout.d_p)] = 1.0
        return m


def init_conditional_params(cfg: ConditionalConfig, init, prefix: str = "") -> dict[str, Tensor]:
    names = [
        ("w_p", (cfg.k, cfg.entity_width), "matrix"), ("w_p0", (cfg.entity_width,), "bias"),
        ("w_f", (cfg.entity_width, cfg.field_width), "matrix"), ("w_f0", (cfg.field_width,), "bias"),
        ("w_z", (cfg.n_fields * cfg.field_width, cfg.out_width), "matrix"), ("w_z0", (cfg.out_width,), "bias"),
    ]
    return {prefix + n: Tensor(init(prefix + n, shape, kind), requires_grad=True) for n, shape, kind in names}


def group_sum(c, entities: np.ndarray, d_p: int) -> Tensor:
    """p c^T for a batch: (B, d_p, k) per-entity sums of event embeddings."""
    c = dc.as_tensor(c)
    B, tau, k = c.shape
    P = batch_assignment(entities, d_p)
    return dc.reshape(dc.spmm(P, dc.reshape(c, (B * tau, k))), (B, d_p, k))


def conditional_forward(c, entities: np.ndarray, params, cfg: ConditionalConfig, prefix: str = "") -> Tensor:
    """Entity-conditional statistics, field pooling, then the output layer: (B, out_width)."""
    c = dc.as_tensor(c)
    if entities.shape[:2] != c.shape[:2]:
        raise ContractViolation("assignment columns must match the number of positions")
    p = lambda n: params[prefix + n]  # noqa: E731
    pc = group_sum(c, entities, cfg.layout.d_p)
    e_ent = dc.relu(dc.matmul(pc, p("w_p")) + p("w_p0"))
    per_field = dc.matmul(cfg.field_membership(), e_ent)  # (B, F, entity_width)
    e_field = dc.relu(dc.matmul(per_field, p("w_f")) + p("w_f0"))
    flat = dc.reshape(e_field, (c.shape[0], cfg.n_fields * cfg.field_width))
    return dc.relu(dc.matmul(flat, p("w_z")) + p("w_z0"))


def hybrid_forward(cond_out: Tensor | None, attn_out: Tensor) -> Tensor:
    """[conditional branch, head-averaged attention]; the attention branch alone when disabled."""
    if cond_out is None:
        return attn_out
    return dc.concat([cond_out, attn_out], axis=-1)
