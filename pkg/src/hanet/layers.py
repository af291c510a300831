"""LSTM, dense and attention-pooling blocks built from autodiff ops."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hanet import autodiff as ad
from hanet.autodiff import ShapeError, Tensor


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
           dtype=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), dtype=dtype or ad.default_dtype())


class _Block:
    """Mixin: ordered (name, tensor) access over dataclass fields."""

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def map(self, fn) -> "_Block":
        return dataclasses.replace(self, **{name: fn(t) for name, t in self.tensors()})

    @property
    def count(self) -> int:
        return sum(t.size for _, t in self.tensors())


@dataclass(frozen=True)
class DenseParams(_Block):
    W: Tensor  # [out, in]
    b: Tensor  # [out]

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, dtype=None) -> DenseParams:
        dtype = dtype or ad.default_dtype()
        return cls(glorot(rng, (n_out, n_in), n_in, n_out, dtype), ad.zeros(n_out, dtype))


@dataclass(frozen=True)
class LstmParams(_Block):
    """Weights of one LSTM layer.

    Gate rows are stacked in the order input, forget, output, candidate,
    each H rows tall.
    """
    W_x: Tensor  # [4H, D]
    W_h: Tensor  # [4H, H]
    b: Tensor    # [4H]

    def __post_init__(self):
        H4, D = self.W_x.shape
        if H4 % 4 or self.W_h.shape != (H4, H4 // 4) or self.b.shape != (H4,):
            raise ShapeError(f"inconsistent LSTM shapes W_x={self.W_x.shape}, "
                             f"W_h={self.W_h.shape}, b={self.b.shape}")

    @property
    def H(self) -> int:
        return self.W_h.shape[1]

    @property
    def D(self) -> int:
        return self.W_x.shape[1]

    @classmethod
    def init(cls, rng, D: int, H: int, dtype=None, forget_bias: float = 1.0) -> LstmParams:
        dtype = dtype or ad.default_dtype()
        b = np.zeros(4 * H)
        b[H:2 * H] = forget_bias
        return cls(glorot(rng, (4 * H, D), D, 4 * H, dtype),
                   glorot(rng, (4 * H, H), H, 4 * H, dtype),
                   Tensor(b, dtype=dtype))


@dataclass(frozen=True)
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, H: int, dtype=None) -> LstmState:
        z = ad.zeros(H, dtype)
        return cls(z, z)


@dataclass(frozen=True)
class AttentionParams(_Block):
    """Projection W, bias b and trainable context vector u."""
    W: Tensor  # [L, L]
    b: Tensor  # [L]
    u: Tensor  # [L]

    def __post_init__(self):
        L = self.W.shape[0]
        if self.W.shape != (L, L) or self.b.shape != (L,) or self.u.shape != (L,):
            raise ShapeError(f"inconsistent attention shapes W={self.W.shape}, "
                             f"b={self.b.shape}, u={self.u.shape}")

    @classmethod
    def init(cls, rng, L: int, dtype=None) -> AttentionParams:
        dtype = dtype or ad.default_dtype()
        return cls(glorot(rng, (L, L), L, L, dtype), ad.zeros(L, dtype),
                   glorot(rng, (L,), L, 1, dtype))


def dense(p: DenseParams, x: Tensor) -> Tensor:
    """W x + b for a vector, or row-wise for a matrix of inputs."""
    if x.data.ndim == 1:
        if x.shape[0] != p.W.shape[1]:
            raise ShapeError(f"dense: weight {p.W.shape} cannot take input {x.shape}")
        return ad.add(ad.matmul(p.W, x), p.b)
    if x.data.ndim != 2 or x.shape[1] != p.W.shape[1]:
        raise ShapeError(f"dense: weight {p.W.shape} cannot take input {x.shape}")
    return ad.add_rows(ad.matmul(x, ad.transpose(p.W)), p.b)


def _cell(p: LstmParams, zx: Tensor, s: LstmState) -> LstmState:
    # zx = W_x x + b, already computed
    H = p.H
    z = ad.add(zx, ad.matmul(p.W_h, s.h))
    gates = ad.sigmoid(ad.take(z, slice(0, 3 * H)))
    g = ad.tanh(ad.take(z, slice(3 * H, 4 * H)))
    i = ad.take(gates, slice(0, H))
    f = ad.take(gates, slice(H, 2 * H))
    o = ad.take(gates, slice(2 * H, 3 * H))
    c = ad.add(ad.mul(f, s.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


def _check_state(p: LstmParams, s: LstmState) -> None:
    if s.h.shape != (p.H,) or s.c.shape != (p.H,):
        raise ShapeError(f"LSTM state shapes {s.h.shape}/{s.c.shape} do not match H={p.H}")


def lstm_step(p: LstmParams, x: Tensor, s: LstmState) -> LstmState:
    if x.shape != (p.D,):
        raise ShapeError(f"lstm_step: input {x.shape} does not match D={p.D}")
    _check_state(p, s)
    return _cell(p, ad.add(ad.matmul(p.W_x, x), p.b), s)


def lstm_sequence(p: LstmParams, xs: Tensor | Sequence[Tensor], s0: LstmState | None = None
                  ) -> list[LstmState]:
    """Unroll the LSTM over ``xs`` (a [T, D] matrix or a list of vectors).

    The input projection for all steps is done in one matrix product.
    """
    if not isinstance(xs, Tensor):
        if len(xs) == 0:
            raise ShapeError("lstm_sequence: empty input sequence")
        xs = ad.stack(list(xs))
    if xs.data.ndim != 2 or xs.shape[1] != p.D:
        raise ShapeError(f"lstm_sequence: inputs {xs.shape} do not match D={p.D}")
    s = s0 if s0 is not None else LstmState.zeros(p.H, p.W_h.dtype)
    _check_state(p, s)
    zx = ad.add_rows(ad.matmul(xs, ad.transpose(p.W_x)), p.b)
    states = []
    for t in range(xs.shape[0]):
        s = _cell(p, ad.take(zx, t), s)
        states.append(s)
    return states


def attention_pool(p: AttentionParams, hs: Tensor | Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    """Score each row against the context vector and return the weighted sum.

    u_j = tanh(W h_j + b), alpha = softmax(u_j . u), pooled = sum_j alpha_j h_j.
    Returns ``(pooled, alpha)``.
    """
    if not isinstance(hs, Tensor):
        if len(hs) == 0:
            raise ShapeError("attention_pool: nothing to attend over")
        hs = ad.stack(list(hs))
    L = p.W.shape[0]
    if hs.data.ndim != 2 or hs.shape[1] != L:
        raise ShapeError(f"attention_pool: inputs {hs.shape} do not match L={L}")
    u = ad.tanh(ad.add_rows(ad.matmul(hs, ad.transpose(p.W)), p.b))
    alpha = ad.softmax(ad.matmul(u, p.u))
    return ad.matmul(alpha, hs), alpha
