"""Recurrent, embedding, and attention building blocks.

Shared by the retriever and the generator.  Every variable-length sequence
travels with a mask (1 = real token, 0 = padding); masked logits are set to
-1e9 before any softmax so masked attention weights underflow to exact zero.
"""
from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, apply, constant, xavier_uniform

MASK_FILL = -1e9


class Module:
    """Minimal parameter container; collection order follows attribute order."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{attr}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{attr}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def load_arrays(self, arrays, prefix=""):
        """Copy values (bit-exact) into parameters by qualified name."""
        for name, p in self.named_parameters(prefix):
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)

    def export_arrays(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}


def _check_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("all positions masked")
    return mask


class LstmCell(Module):
    """Single LSTM cell; gate order i, f, g, o; forget bias starts at 1."""

    def __init__(self, rng, input_size, hidden_size, dtype=np.float32, name="lstm"):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_x = Parameter(f"{name}.w_x", xavier_uniform(rng, (input_size, 4 * hidden_size), dtype))
        self.w_h = Parameter(f"{name}.w_h", xavier_uniform(rng, (hidden_size, 4 * hidden_size), dtype))
        bias = np.zeros(4 * hidden_size, dtype=dtype)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.b = Parameter(f"{name}.b", bias)

    def init_state(self, batch, dtype=None):
        dtype = dtype or self.w_x.dtype
        zeros = np.zeros((batch, self.hidden_size), dtype=dtype)
        return constant(zeros, dtype), constant(zeros.copy(), dtype)

    def step(self, x, state):
        h, c = state
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ValueError(
                f"lstm_step: input {x.shape}/state {h.shape} do not match cell "
                f"({self.input_size}, {self.hidden_size})")
        gates = apply("add", apply("add", apply("matmul", x, self.w_x),
                                   apply("matmul", h, self.w_h)), self.b)
        hs = self.hidden_size
        i = apply("sigmoid", apply("slice-last-axis", gates, start=0, stop=hs))
        f = apply("sigmoid", apply("slice-last-axis", gates, start=hs, stop=2 * hs))
        g = apply("tanh", apply("slice-last-axis", gates, start=2 * hs, stop=3 * hs))
        o = apply("sigmoid", apply("slice-last-axis", gates, start=3 * hs, stop=4 * hs))
        c_new = apply("add", apply("mul", f, c), apply("mul", i, g))
        h_new = apply("mul", o, apply("tanh", c_new))
        return h_new, c_new


def lstm_step(cell, x, state):
    return cell.step(x, state)


def bilstm_encode(cell_fwd, cell_bwd, embedded, mask):
    """Encode a padded batch (B, L, D) into per-position states (B, L, H).

    The two directional states at each position are averaged, not
    concatenated.  Masked positions keep the previous recurrent state so
    right-padding never leaks into real tokens in either direction.
    """
    B, L, D = embedded.shape
    if L < 1:
        raise ValueError("empty sequence")
    mask = np.asarray(mask, dtype=bool)
    dtype = embedded.dtype
    flat = apply("reshape", embedded, shape=(B, L * D))
    steps = [apply("slice-last-axis", flat, start=t * D, stop=(t + 1) * D)
             for t in range(L)]

    def run(cell, order):
        h, c = cell.init_state(B, dtype)
        outs = [None] * L
        for t in order:
            h_new, c_new = cell.step(steps[t], (h, c))
            keep = constant(mask[:, t:t + 1].astype(dtype), dtype)
            drop = constant((~mask[:, t:t + 1]).astype(dtype), dtype)
            h = apply("add", apply("mul", h_new, keep), apply("mul", h, drop))
            c = apply("add", apply("mul", c_new, keep), apply("mul", c, drop))
            outs[t] = h
        return outs

    fwd = run(cell_fwd, range(L))
    bwd = run(cell_bwd, range(L - 1, -1, -1))
    half = constant(np.asarray(0.5, dtype=dtype), dtype)
    merged = [apply("mul", apply("add", f, b), half) for f, b in zip(fwd, bwd)]
    stacked = apply("concat-last-axis", *merged) if L > 1 else merged[0]
    return apply("reshape", stacked, shape=(B, L, cell_fwd.hidden_size))


class MultiplicativeAggregator(Module):
    """Weights each position by softmax(v . w_t) and sums; v is learnable."""

    def __init__(self, rng, dim, dtype=np.float32, name="agg"):
        self.dim = dim
        self.v = Parameter(f"{name}.v", xavier_uniform(rng, (dim,), dtype))

    def __call__(self, seq, mask):
        mask = _check_mask(mask)
        scores = apply("matmul", seq, self.v)                      # (B, L)
        scores = apply("masked-fill", scores, mask=~mask, value=MASK_FILL)
        alpha = apply("softmax-last-axis", scores)                 # (B, L)
        B, L, D = seq.shape
        weighted = apply("mul", apply("reshape", alpha, shape=(B, L, 1)), seq)
        return apply("sum", weighted, axis=-2)                     # (B, D)


def aggregate(agg, seq, mask):
    return agg(seq, mask)


class AdditiveAttention(Module):
    """Bahdanau-style attention: score = v . tanh(Wq q + Wk k)."""

    def __init__(self, rng, query_dim, key_dim, state_size, dtype=np.float32, name="att"):
        self.state_size = state_size
        self.w_q = Parameter(f"{name}.w_q", xavier_uniform(rng, (query_dim, state_size), dtype))
        self.w_k = Parameter(f"{name}.w_k", xavier_uniform(rng, (key_dim, state_size), dtype))
        self.v = Parameter(f"{name}.v", xavier_uniform(rng, (state_size,), dtype))

    def __call__(self, query, keys, values, mask):
        if keys.shape[:2] != values.shape[:2]:
            raise ValueError(f"keys {keys.shape} and values {values.shape} differ in length")
        mask = _check_mask(mask)
        B, L = keys.shape[0], keys.shape[1]
        q = apply("reshape", apply("matmul", query, self.w_q), shape=(B, 1, self.state_size))
        k = apply("matmul", keys, self.w_k)                        # (B, L, S)
        scores = apply("matmul", apply("tanh", apply("add", q, k)), self.v)  # (B, L)
        scores = apply("masked-fill", scores, mask=~mask, value=MASK_FILL)
        weights = apply("softmax-last-axis", scores)
        Dv = values.shape[2]
        weighted = apply("mul", apply("reshape", weights, shape=(B, L, 1)), values)
        context = apply("sum", weighted, axis=-2)                  # (B, Dv)
        return weights, context


def additive_attention(att, query, keys, values, mask):
    return att(query, keys, values, mask)


def embed(table, ids):
    """Row lookup; gradients accumulate into looked-up rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.max() >= table.shape[0]:
        raise ValueError(f"token id {int(ids.max())} out of range "
                         f"for table with {table.shape[0]} rows")
    if ids.size and ids.min() < 0:
        raise ValueError("negative token id")
    return apply("gather-rows", table, ids=ids)


def dropout_mask(rng, shape, rate, dtype=np.float32):
    """Inverted-dropout scale mask; rate 0 means identity."""
    if rate <= 0.0:
        return None
    keep = (rng.random(shape) >= rate).astype(dtype) / (1.0 - rate)
    return constant(keep, dtype)
