"""Vectorised forward-mode dual numbers.

A :class:`Dual` holds a value array of shape ``S`` together with the
derivatives of every entry with respect to ``d`` input directions. Both live
in one packed array ``data`` of shape ``S + (1 + d,)``: slot 0 is the value,
slots ``1..d`` the tangent. Packing keeps linear combinations (the bulk of an
RK4 step) down to a single numpy call.
"""

from __future__ import annotations

import numpy as np


def _raw(data) -> "Dual":
    out = Dual.__new__(Dual)
    out.data = data
    return out


class Dual:
    __slots__ = ("data",)
    __array_priority__ = 1000

    def __init__(self, value, tangent):
        value = np.asarray(value, dtype=float)
        tangent = np.asarray(tangent, dtype=float)
        if tangent.shape[:-1] != value.shape:
            raise ValueError(
                f"tangent shape {tangent.shape} does not extend value shape {value.shape}"
            )
        self.data = np.concatenate([value[..., None], tangent], axis=-1)

    @classmethod
    def constant(cls, value, dim: int) -> "Dual":
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (dim,)))

    @classmethod
    def variables(cls, value) -> "Dual":
        """Seed the last axis of ``value`` as the independent directions.

        ``value`` of shape ``(..., d)`` becomes a Dual of the same shape whose
        tangent is the identity along the last axis.
        """
        value = np.asarray(value, dtype=float)
        d = value.shape[-1]
        return cls(value, np.broadcast_to(np.eye(d), value.shape + (d,)))

    @property
    def value(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def tangent(self) -> np.ndarray:
        return self.data[..., 1:]

    @property
    def dim(self) -> int:
        return self.data.shape[-1] - 1

    @property
    def shape(self):
        return self.data.shape[:-1]

    def component(self, k) -> "Dual":
        """Select index ``k`` of the last value axis."""
        return _raw(self.data[..., k, :])

    def take(self, index) -> "Dual":
        """Index the leading value axes."""
        return _raw(self.data[index])

    @staticmethod
    def stack(items, axis: int = -1) -> "Dual":
        if axis < 0:
            axis = items[0].data.ndim + axis
        return _raw(np.stack([x.data for x in items], axis=axis))

    def sum(self, axis=None) -> "Dual":
        nd = self.data.ndim - 1
        if axis is None:
            axes = tuple(range(nd))
        else:
            axes = tuple(a % nd for a in np.atleast_1d(axis))
        return _raw(self.data.sum(axis=axes))

    def __repr__(self) -> str:
        return f"Dual(value={self.value!r}, tangent={self.tangent!r})"

    # arithmetic ---------------------------------------------------------

    def __neg__(self):
        return _raw(-self.data)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return _raw(self.data + other.data)
        other = np.asarray(other, dtype=float)
        shape = np.broadcast_shapes(self.shape, other.shape) + (self.data.shape[-1],)
        out = np.array(np.broadcast_to(self.data, shape))
        out[..., 0] += other
        return _raw(out)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return _raw(self.data - other.data)
        return self + (-np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            out = self.data * other.data[..., :1]
            out[..., 1:] += other.data[..., 1:] * self.data[..., :1]
            return _raw(out)
        if np.ndim(other) == 0:
            return _raw(self.data * float(other))
        return _raw(self.data * np.asarray(other, dtype=float)[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.data[..., :1]
            out = self.data * inv
            out[..., 1:] -= other.data[..., 1:] * (out[..., :1] * inv)
            return _raw(out)
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        inv = 1.0 / self.data[..., :1]
        val = np.asarray(other, dtype=float)[..., None] * inv
        out = self.data * (-val * inv)
        out[..., :1] = val
        return _raw(out)

    def __pow__(self, exponent):
        if isinstance(exponent, Dual):
            return exp(exponent * log(self))
        exponent = float(exponent)
        return _apply(self, self.value**exponent, exponent * self.value ** (exponent - 1.0))


def _apply(x, val, deriv):
    """Value ``val`` with tangent ``deriv * x.tangent``; plain arrays pass through."""
    if not isinstance(x, Dual):
        return val
    out = x.data * np.asarray(deriv, dtype=float)[..., None]
    out[..., 0] = val
    return _raw(out)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Dual) else np.asarray(x, dtype=float)


def exp(x):
    v = np.exp(value_of(x))
    return _apply(x, v, v)


def log(x):
    v = value_of(x)
    return _apply(x, np.log(v), 1.0 / v)


def sqrt(x):
    v = np.sqrt(value_of(x))
    return _apply(x, v, 0.5 / v)


def sigmoid(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    v = value_of(x)
    return _apply(x, np.logaddexp(0.0, v), sigmoid(v))


def softplus_inverse(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def reflect(x):
    """Absolute value with derivative ``sign(x)``, taking ``sign(0) = +1``."""
    v = value_of(x)
    return _apply(x, np.abs(v), np.where(v >= 0.0, 1.0, -1.0))
