"""Gated recurrent unit cell built from tensor primitives."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .core import ShapeError, Tensor


@dataclass
class GruParams:
    """Nine parameter blocks; input matrices are ``hidden x input``."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def __post_init__(self):
        hidden = self.b_z.shape[0]
        for f in fields(self):
            t = getattr(self, f.name)
            if t.shape[0] != hidden:
                raise ShapeError(f"GRU block {f.name} has leading dim {t.shape[0]}, expected {hidden}")
        if self.U_z.shape != (hidden, hidden):
            raise ShapeError(f"U_z must be {hidden}x{hidden}, got {self.U_z.shape}")

    @property
    def hidden_size(self) -> int:
        return self.b_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, input_size: int, hidden: int = 512, rng: np.random.Generator | None = None) -> "GruParams":
        """Glorot-uniform matrices, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)

        def mat(rows, cols):
            lim = np.sqrt(6.0 / (rows + cols))
            return Tensor(rng.uniform(-lim, lim, size=(rows, cols)), requires_grad=True)

        blocks = {}
        for gate in "zrh":
            blocks[f"W_{gate}"] = mat(hidden, input_size)
            blocks[f"U_{gate}"] = mat(hidden, hidden)
            blocks[f"b_{gate}"] = Tensor(np.zeros(hidden), requires_grad=True)
        return cls(**blocks)

    @classmethod
    def zeros(cls, input_size: int, hidden: int) -> "GruParams":
        blocks = {}
        for gate in "zrh":
            blocks[f"W_{gate}"] = Tensor(np.zeros((hidden, input_size)), requires_grad=True)
            blocks[f"U_{gate}"] = Tensor(np.zeros((hidden, hidden)), requires_grad=True)
            blocks[f"b_{gate}"] = Tensor(np.zeros(hidden), requires_grad=True)
        return cls(**blocks)


def _affine(x: Tensor, W: Tensor) -> Tensor:
    if x.ndim == 1:
        return ops.reshape(ops.matmul(ops.reshape(x, (1, -1)), W.T), (-1,))
    return ops.matmul(x, W.T)


def gru_cell(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU step, ``h_new = z * h_prev + (1 - z) * h_tilde``.

    ``x`` is ``(input,)`` or ``(batch, input)``; ``h_prev`` matches with the
    hidden size in place of the input size.
    """
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"gru_cell input width {x.shape[-1]} != {p.input_size}")
    if h_prev.shape[-1] != p.hidden_size or h_prev.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gru_cell hidden state shape {h_prev.shape} incompatible with input {x.shape}")
    z = ops.sigmoid(_affine(x, p.W_z) + _affine(h_prev, p.U_z) + p.b_z)
    r = ops.sigmoid(_affine(x, p.W_r) + _affine(h_prev, p.U_r) + p.b_r)
    h_tilde = ops.tanh(_affine(x, p.W_h) + _affine(r * h_prev, p.U_h) + p.b_h)
    return z * h_prev + (1.0 - z) * h_tilde
