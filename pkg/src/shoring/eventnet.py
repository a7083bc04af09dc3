"""Event-level network: positive transform, linear + 2nd-order + exp-log high-order terms.

Weight matrices are stored input-major (``d x k``) so layers compute ``x @ w``.
Row ``i`` of the second-order matrix is the factor vector of feature ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractViolation, DomainError

DEFAULT_EPS = 1e-7


def _vm(x, w) -> Tensor:
    """``x @ w`` that also accepts a single feature vector ``x``."""
    x = dc.as_tensor(x)
    if x.ndim != 1:
        return dc.matmul(x, w)
    out = dc.matmul(dc.reshape(x, (1, x.shape[0])), w)
    return dc.reshape(out, out.shape[:-2] + out.shape[-1:])


def positive_transform(x, w_x, w_x0, eps: float = DEFAULT_EPS) -> Tensor:
    """relu(x @ w_x + w_x0) + eps, so every component is at least eps."""
    return dc.relu(_vm(x, w_x) + w_x0) + eps


def second_order(x_tilde, w2) -> Tensor:
    """Linear-time pairwise interaction embedding.

    h_l = 1/2 [(sum_i w_il x_i)^2 - sum_i (w_il x_i)^2]; summing h over l gives
    sum_{i<j} <w_i, w_j> x_i x_j.
    """
    x_tilde, w2 = dc.as_tensor(x_tilde), dc.as_tensor(w2)
    lin = _vm(x_tilde, w2)
    sq = _vm(dc.square(x_tilde), dc.square(w2))
    return 0.5 * (dc.square(lin) - sq)


def second_order_bruteforce(x_tilde: np.ndarray, w2: np.ndarray) -> float:
    """O(d^2) reference for ``second_order(...).sum()`` on one feature vector."""
    d = x_tilde.shape[0]
    total = 0.0
    for i in range(d):
        for j in range(i + 1, d):
            total += float(w2[i] @ w2[j]) * x_tilde[i] * x_tilde[j]
    return total


def high_order_embed(x_tilde, u) -> Tensor:
    """exp(ln(x_tilde) @ u): entry l is prod_i x_i ** u[i, l].

    ``u`` may be a single (d, k) exponent matrix or a stack (n, d, k); a stack
    yields one embedding per exponent matrix along a new leading axis.
    """
    x_tilde = dc.as_tensor(x_tilde)
    if np.any(x_tilde.data <= 0):
        raise DomainError("high_order_embed needs strictly positive inputs")
    return dc.exp(_vm(dc.log(x_tilde), u))


def monomial(x_tilde: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Explicit product form of :func:`high_order_embed` for one vector and one (d, k) matrix."""
    return np.prod(x_tilde[:, None] ** u, axis=0)


def scalar_reparam_check(x: float, y: float) -> float:
    """Exponent z with x**z == x*y (z = ln y / ln x + 1); verified before returning."""
    if not x > 0 or x == 1.0:
        raise DomainError(f"need x > 0 and x != 1, got {x!r}")
    if not y > 0:
        raise DomainError(f"need y > 0, got {y!r}")
    z = math.log(y) / math.log(x) + 1.0
    if abs(x ** z - x * y) > 1e-9 * abs(x * y):
        raise ArithmeticError(f"x**z = {x ** z!r} does not reproduce x*y = {x * y!r}")
    return z


def reparam_exponents(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exponents v with sum_l prod_j x_j**v[j, l] == <w_1, ..., w_d> prod_j x_j.

    ``weights`` is (d, k) positive, ``x`` is (d,) positive and != 1. Each weight
    w_jl is folded into its own feature as x_j**v_jl = x_j * w_jl.
    """
    weights = np.asarray(weights, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(weights <= 0) or np.any(x <= 0) or np.any(x == 1.0):
        raise DomainError("need positive weights and positive x != 1")
    return np.log(weights) / np.log(x)[:, None] + 1.0


@dataclass
class EventNetConfig:
    d_in: int
    k: int = 16
    n_terms: int = 12
    eps: float = DEFAULT_EPS

    @property
    def n_high(self) -> int:
        # terms o = 3..N beside the explicit linear and 2nd-order parts
        return max(self.n_terms - 2, 0)


def init_eventnet_params(cfg: EventNetConfig, init, prefix: str = "") -> dict[str, Tensor]:
    """``init(name, shape, kind)`` returns the initial array.

    kind is one of matrix, bias, positive_bias or exponent. The positive
    transform's bias is a positive_bias so that x~ starts near 1 rather than at
    eps, where ln x~ would make the exponent terms explode.
    """
    d, k = cfg.d_in, cfg.k
    names = [
        ("w_x", (d, d), "matrix"), ("w_x0", (d,), "positive_bias"),
        ("w1", (d, k), "matrix"), ("w2", (d, k), "matrix"),
        ("w_e", (k, k), "matrix"), ("w_e0", (k,), "bias"),
    ]
    if cfg.n_high:
        names.append(("u", (cfg.n_high, d, k), "exponent"))
    return {prefix + n: Tensor(init(prefix + n, shape, kind), requires_grad=True) for n, shape, kind in names}


def event_forward(x, params: dict[str, Tensor], cfg: EventNetConfig, prefix: str = "") -> Tensor:
    """relu((w1 x~ + h_2nd(x~) + sum_o h_o(x~)) @ w_e + w_e0) over the last axis of ``x``."""
    x = dc.as_tensor(x)
    if x.shape[-1] != cfg.d_in:
        raise ContractViolation(f"event features have width {x.shape[-1]}, expected {cfg.d_in}")
    p = lambda n: params[prefix + n]  # noqa: E731
    xt = positive_transform(x, p("w_x"), p("w_x0"), cfg.eps)
    s = _vm(xt, p("w1")) + second_order(xt, p("w2"))
    if cfg.n_high:
        lead = xt.shape[:-1]
        flat = dc.reshape(xt, (1, -1, cfg.d_in) if lead else (1, 1, cfg.d_in))
        h = high_order_embed(flat, p("u"))  # (n_high, E, k)
        # averaged rather than summed: each term starts near 1, and the scale is absorbed by w_e
        h = dc.mean(h, axis=0)
        s = s + dc.reshape(h, lead + (cfg.k,))
    return dc.relu(_vm(s, p("w_e")) + p("w_e0"))
