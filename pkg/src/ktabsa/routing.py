"""Dynamic-length agreement routing between task-specific token layers.

A routing step moves knowledge from every source token i to every target
token j of the same sentence. Source hiddens are first projected into
per-pair vote vectors ``u_hat[i, j]`` through a weight matrix shared across
the whole sentence but made position-aware by adding sinusoidal encodings of
i and j. The iterative loop then:

    1. adds the dependency adjacency prior to the routing logits b,
    2. normalizes b over targets j into coupling coefficients c (softmax),
    3. aggregates votes per target, s[j] = sum_i c[i,j] * u_hat[i,j],
    4. bounds each aggregate with squash, v[j],
    5. sharpens b by the vote/output agreement u_hat[i,j] . v[j].

The number of targets equals the sentence length, so the output is a
dynamic-length set of vectors rather than a fixed capsule bank. The loop is
fully unrolled; gradients flow through every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (ConfigError, Tensor, add, constant, coupled_sum,
                     default_dtype, masked_softmax, matmul, pairwise_dot,
                     reshape, squash)

PE_MODES = ("add-both", "add-source", "off")


def positional_encoding(n: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table: sin at even columns, cos at odd columns,
    wavelength 10000^(2p/d_model) for column pair p."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dimension, "
                          f"got {d_model}")
    if n < 1:
        raise ConfigError(f"positional encoding needs n >= 1, got {n}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    p = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * p / d_model)
    table = np.empty((n, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class PositionalEncoding:
    """Caches the encoding table as a constant tensor up to ``max_len``."""

    def __init__(self, d_model: int, max_len: int):
        self.d_model = d_model
        self.max_len = max_len
        self.table = constant(
            positional_encoding(max_len, d_model).astype(default_dtype()))

    def prefix(self, n: int) -> Tensor:
        if n > self.max_len:
            raise ConfigError(f"sentence length {n} exceeds positional "
                              f"encoding capacity {self.max_len}")
        return constant(self.table.data[:n])


@dataclass
class TransferDirection:
    """One ordered source->target task pair with its projection weight."""

    source: str
    target: str
    weight: Tensor

    @property
    def name(self) -> str:
        return f"{self.source}->{self.target}"


@dataclass
class RoutingState:
    """Snapshot of one routing iteration (plain arrays, detached)."""

    iteration: int
    b: np.ndarray
    c: np.ndarray
    s: np.ndarray
    v: np.ndarray


@dataclass
class RoutingTrace:
    direction: str
    tokens: tuple[str, ...] | None
    adjacency: np.ndarray
    states: list[RoutingState] = field(default_factory=list)


def predict_vectors(h_source: Tensor, direction: TransferDirection,
                    pe: PositionalEncoding,
                    pe_mode: str = "add-both") -> Tensor:
    """Per-pair vote vectors u_hat[i, j] = (h_i [+ PE(i)] [+ PE(j)]) @ W.

    The projection W is shared across positions; position awareness comes
    from the additive encodings selected by ``pe_mode``.
    """
    if pe_mode not in PE_MODES:
        raise ConfigError(f"unknown pe_mode {pe_mode!r}; expected one of "
                          f"{PE_MODES}")
    n, d = h_source.shape
    if d != pe.d_model:
        raise ConfigError(f"hidden width {d} does not match positional "
                          f"encoding dimension {pe.d_model}")
    pe_n = pe.prefix(n)  # also enforces the capacity limit
    if pe_mode == "off":
        src = h_source
    else:
        src = add(h_source, pe_n)
    rows = matmul(src, direction.weight)            # [n, d_route], source part
    d_route = rows.shape[1]
    left = reshape(rows, (n, 1, d_route))
    if pe_mode == "add-both":
        cols = matmul(pe_n, direction.weight)       # [n, d_route], target part
        right = reshape(cols, (1, n, d_route))
    else:
        right = constant(np.zeros((1, n, 1), dtype=rows.dtype))
    return add(left, right)                         # broadcast to [n, n, d]


def route(u_hat: Tensor, adjacency: np.ndarray, iterations: int,
          mask: np.ndarray | None = None,
          keep_trace: bool = False) -> tuple[Tensor, list[RoutingState]]:
    """Run the agreement loop and return the final target vectors.

    ``u_hat`` is [n, n, d_route] indexed (source i, target j). ``adjacency``
    is the binary n-by-n dependency prior, re-added to the logits at every
    iteration. ``mask`` flags real tokens; padded positions are dropped from
    the softmax (as targets) and from the vote aggregation (as sources).
    Gradients flow through the unrolled loop.
    """
    if iterations < 1:
        raise ConfigError(f"routing needs at least one iteration, "
                          f"got {iterations}")
    n = u_hat.shape[0]
    if u_hat.ndim != 3 or u_hat.shape[1] != n:
        raise ConfigError(f"u_hat must be [n, n, d], got {tuple(u_hat.shape)}")
    if adjacency.shape != (n, n):
        raise ConfigError(f"adjacency shape {adjacency.shape} does not match "
                          f"sentence length {n}")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    target_mask = mask[None, :]                     # masks softmax columns
    source_keep = constant(mask.astype(u_hat.dtype)[:, None])
    prior = constant(adjacency.astype(u_hat.data.dtype))

    b = constant(np.zeros((n, n), dtype=u_hat.data.dtype))
    trace: list[RoutingState] = []
    v = None
    for it in range(1, iterations + 1):
        b = add(b, prior)
        c = masked_softmax(b, target_mask, axis=1)
        c_src = c if mask.all() else c * source_keep
        s = coupled_sum(c_src, u_hat)
        v = squash(s, axis=1)
        b = add(b, pairwise_dot(u_hat, v))
        if keep_trace:
            trace.append(RoutingState(it, b.data.copy(), c.data.copy(),
                                      s.data.copy(), v.data.copy()))
    return v, trace


def agreement_trace(trace: RoutingTrace) -> list[dict]:
    """Plot-ready coupling matrices, one record per iteration.

    Rows are annotated as source tokens, columns as target tokens.
    """
    if not trace.states:
        raise ValueError("empty routing trace")
    tokens = list(trace.tokens) if trace.tokens is not None else None
    return [{
        "direction": trace.direction,
        "iteration": st.iteration,
        "c": [[float(x) for x in row] for row in st.c],
        "tokens": tokens,
        "rows": "source",
        "cols": "target",
    } for st in trace.states]
