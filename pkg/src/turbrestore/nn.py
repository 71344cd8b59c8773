"""Named parameter collections, initializers, and layer helpers.

Models own a ``Params`` instance mapping hierarchical names to leaf
tensors. Freezing marks every tensor in the collection: frozen tensors
stop tracking gradients and reject in-place updates, and the collection's
byte hash is the stability witness used by the two-stage training
contract.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Params:
    """Insertion-ordered mapping of parameter names to tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data, dtype=None) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, dtype=dtype, name=name)
        self._tensors[name] = t
        return t

    def adopt(self, prefix: str, other: "Params"):
        """Mount another collection's tensors under ``prefix/``."""
        for name, t in other._tensors.items():
            full = f"{prefix}/{name}"
            if full in self._tensors:
                raise ValueError(f"duplicate parameter name {full!r}")
            self._tensors[full] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def tensors(self):
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    # -- freezing ---------------------------------------------------------

    def freeze(self):
        for t in self._tensors.values():
            t.frozen = True
            t.requires_grad = False

    @property
    def is_frozen(self) -> bool:
        return bool(self._tensors) and all(t.frozen for t in self._tensors.values())

    # -- hashing / serialization -------------------------------------------

    def byte_hash(self) -> str:
        """sha256 over names, shapes, and little-endian value bytes."""
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode("utf-8"))
            h.update(b"\x00")
            h.update(np.asarray(t.shape, dtype="<i8").tobytes())
            h.update(t.data.astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes())
        return h.hexdigest()

    def to_blobs(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_blobs(self, blobs: dict[str, np.ndarray], prefix: str = ""):
        for name, t in self._tensors.items():
            key = f"{prefix}{name}"
            if key not in blobs:
                raise KeyError(f"missing parameter blob {key!r}")
            arr = np.asarray(blobs[key])
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"blob {key!r} shape {arr.shape} != parameter shape {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype, copy=True)


# -- initializers -------------------------------------------------------------


def he_normal(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def zeros(shape, dtype):
    return np.zeros(shape, dtype=dtype)


# -- layer helpers ------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map. x is (n,) or (rows, n); w is (n, m); b is (m,)."""
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, x.shape[0]))
    y = T.matmul(x, w)
    if b is not None:
        y = T.add(y, b)
    if squeeze:
        y = T.reshape(y, (y.shape[1],))
    return y


def add_conv(params: Params, rng, name, cin, cout, k, dtype, zero=False):
    """Register weight+bias for a conv layer and return their names."""
    if zero:
        params.add(f"{name}.w", zeros((cout, cin, k, k), dtype))
    else:
        params.add(f"{name}.w", he_normal(rng, (cout, cin, k, k), cin * k * k, dtype))
    params.add(f"{name}.b", zeros((cout,), dtype))
    return f"{name}.w", f"{name}.b"


def add_linear(params: Params, rng, name, nin, nout, dtype, zero=False):
    """Register weight+bias for an affine layer and return their names."""
    if zero:
        params.add(f"{name}.w", zeros((nin, nout), dtype))
    else:
        params.add(f"{name}.w", he_normal(rng, (nin, nout), nin, dtype))
    params.add(f"{name}.b", zeros((nout,), dtype))
    return f"{name}.w", f"{name}.b"
