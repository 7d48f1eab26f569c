"""Recurrent and affine building blocks on top of :mod:`mosenhance.numerics`.

Sequences are ``T x d`` tensors, one row per frame. Gate order inside the
fused LSTM weight matrices is input, forget, output, candidate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Tensor, concat, matmul, record_op, sigmoid, stack, tanh

__all__ = [
    "Linear",
    "LstmCell",
    "BlstmLayer",
    "PblstmStack",
    "linear",
    "lstm_step",
    "lstm_sequence",
    "lstm_sequence_reference",
    "blstm_forward",
    "pblstm_forward",
    "pyramid_length",
]

FORGET_BIAS = 1.0


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class Linear:
    weight: Tensor  # in x out
    bias: Tensor  # out

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "Linear":
        return cls(_uniform(rng, n_in, (n_in, n_out)), _uniform(rng, n_in, (n_out,)))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


def linear(layer: Linear, x: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` for a vector or a batch of row vectors."""
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != {layer.n_in}")
    return matmul(x, layer.weight) + layer.bias


@dataclass
class LstmCell:
    w_input: Tensor  # input_dim x 4h
    w_hidden: Tensor  # h x 4h
    bias: Tensor  # 4h

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int) -> "LstmCell":
        fan_in = input_dim + hidden_dim
        cell = cls(
            _uniform(rng, fan_in, (input_dim, 4 * hidden_dim)),
            _uniform(rng, fan_in, (hidden_dim, 4 * hidden_dim)),
            _uniform(rng, fan_in, (4 * hidden_dim,)),
        )
        cell.bias.data[hidden_dim : 2 * hidden_dim] = FORGET_BIAS
        return cell

    @property
    def input_dim(self) -> int:
        return self.w_input.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_hidden.shape[0]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_input", self.w_input
        yield f"{prefix}.w_hidden", self.w_hidden
        yield f"{prefix}.bias", self.bias


def _gates(cell: LstmCell, z: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    n = cell.hidden_dim
    i = sigmoid(z[0:n])
    f = sigmoid(z[n : 2 * n])
    o = sigmoid(z[2 * n : 3 * n])
    g = tanh(z[3 * n : 4 * n])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def lstm_step(cell: LstmCell, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One gated update; all vectors are 1-D."""
    if x.shape != (cell.input_dim,):
        raise ShapeError(f"lstm_step: input shape {x.shape}, expected ({cell.input_dim},)")
    if h_prev.shape != (cell.hidden_dim,) or c_prev.shape != (cell.hidden_dim,):
        raise ShapeError("lstm_step: state shape does not match hidden_dim")
    z = matmul(x, cell.w_input) + matmul(h_prev, cell.w_hidden) + cell.bias
    return _gates(cell, z, c_prev)


def lstm_sequence_reference(cell: LstmCell, xs: Tensor, reverse: bool = False) -> Tensor:
    """:func:`lstm_sequence` composed from elementary taped ops, step by step."""
    if xs.ndim != 2 or xs.shape[1] != cell.input_dim:
        raise ShapeError(f"lstm_sequence: input {xs.shape}, expected T x {cell.input_dim}")
    T = xs.shape[0]
    if T < 1:
        raise ContractError("lstm_sequence needs at least one frame")
    pre = matmul(xs, cell.w_input) + cell.bias
    n = cell.hidden_dim
    h = Tensor(np.zeros(n))
    c = Tensor(np.zeros(n))
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = pre[t] + matmul(h, cell.w_hidden)
        h, c = _gates(cell, z, c)
        outs[t] = h
    return stack(outs)


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_sequence(cell: LstmCell, xs: Tensor, reverse: bool = False) -> Tensor:
    """Run ``cell`` over the rows of ``xs`` from zero state; returns ``T x h``.

    With ``reverse`` the sequence is consumed back to front but the output
    rows stay aligned with the input frames. Recorded as a single tape node
    with an explicit backpropagation-through-time rule; numerically the same
    as :func:`lstm_sequence_reference`.
    """
    if xs.ndim != 2 or xs.shape[1] != cell.input_dim:
        raise ShapeError(f"lstm_sequence: input {xs.shape}, expected T x {cell.input_dim}")
    T = xs.shape[0]
    if T < 1:
        raise ContractError("lstm_sequence needs at least one frame")
    n = cell.hidden_dim
    X, Wx, Wh, b = xs.data, cell.w_input.data, cell.w_hidden.data, cell.bias.data
    order = np.arange(T - 1, -1, -1) if reverse else np.arange(T)
    pre = X[order] @ Wx + b
    gates = np.empty((T, 4 * n))
    cs = np.empty((T + 1, n))
    hs = np.empty((T + 1, n))
    cs[0] = 0.0
    hs[0] = 0.0
    for s in range(T):
        z = pre[s] + hs[s] @ Wh
        act = gates[s]
        act[: 3 * n] = _sig(z[: 3 * n])
        act[3 * n :] = np.tanh(z[3 * n :])
        cs[s + 1] = act[n : 2 * n] * cs[s] + act[:n] * act[3 * n :]
        hs[s + 1] = act[2 * n : 3 * n] * np.tanh(cs[s + 1])
    out = np.empty((T, n))
    out[order] = hs[1:]

    def bw(g):
        gh = g[order]
        dz = np.empty((T, 4 * n))
        dh_next = np.zeros(n)
        dc_next = np.zeros(n)
        for s in range(T - 1, -1, -1):
            i, f, o, gg = (gates[s, k * n : (k + 1) * n] for k in range(4))
            tc = np.tanh(cs[s + 1])
            dh = gh[s] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz[s, :n] = dc * gg * i * (1.0 - i)
            dz[s, n : 2 * n] = dc * cs[s] * f * (1.0 - f)
            dz[s, 2 * n : 3 * n] = dh * tc * o * (1.0 - o)
            dz[s, 3 * n :] = dc * i * (1.0 - gg * gg)
            dc_next = dc * f
            dh_next = dz[s] @ Wh.T
        dX = np.empty_like(X)
        dX[order] = dz @ Wx.T
        return dX, X[order].T @ dz, hs[:-1].T @ dz, dz.sum(axis=0)

    return record_op("lstm_sequence", out, (xs, cell.w_input, cell.w_hidden, cell.bias), bw)


@dataclass
class BlstmLayer:
    forward: LstmCell
    backward: LstmCell

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int) -> "BlstmLayer":
        return cls(LstmCell.init(rng, input_dim, hidden_dim), LstmCell.init(rng, input_dim, hidden_dim))

    @property
    def input_dim(self) -> int:
        return self.forward.input_dim

    @property
    def output_dim(self) -> int:
        return 2 * self.forward.hidden_dim

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.forward.named_parameters(f"{prefix}.fwd")
        yield from self.backward.named_parameters(f"{prefix}.bwd")


def blstm_forward(layer: BlstmLayer, xs: Tensor) -> Tensor:
    fwd = lstm_sequence(layer.forward, xs)
    bwd = lstm_sequence(layer.backward, xs, reverse=True)
    return concat([fwd, bwd], axis=1)


def pyramid_length(T: int, reduction: int, n_layers: int) -> int:
    """Output length of a pyramid stack, ``ceil(T / reduction**n_layers)``."""
    return -(-T // reduction**n_layers)


@dataclass
class PblstmStack:
    """BLSTM layers that each consume ``reduction`` concatenated lower frames."""

    layers: list[BlstmLayer]
    reduction: int = 2

    def __post_init__(self):
        if self.reduction < 2:
            raise ContractError("pyramid reduction factor must be >= 2")
        for below, above in zip(self.layers, self.layers[1:]):
            if above.input_dim != self.reduction * below.output_dim:
                raise ShapeError("pyramid layer input dim must be reduction x lower output dim")

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dims, reduction: int = 2) -> "PblstmStack":
        layers = []
        d = input_dim
        for h in hidden_dims:
            layers.append(BlstmLayer.init(rng, reduction * d, h))
            d = 2 * h
        return cls(layers, reduction)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.{i}")


def _group_frames(xs: Tensor, reduction: int) -> Tensor:
    T, d = xs.shape
    groups = -(-T // reduction)
    pad = groups * reduction - T
    if pad:
        # repeat the final frame to complete the last group
        idx = np.concatenate([np.arange(T), np.full(pad, T - 1)])
        xs = xs[idx]
    return xs.reshape(groups, reduction * d)


def pblstm_forward(stack_: PblstmStack, xs: Tensor) -> Tensor:
    if xs.shape[0] < 1:
        raise ContractError("pblstm_forward needs at least one frame")
    h = xs
    for layer in stack_.layers:
        h = blstm_forward(layer, _group_frames(h, stack_.reduction))
    return h
