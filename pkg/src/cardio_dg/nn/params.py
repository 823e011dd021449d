"""Ordered parameter/buffer store backing a model and its checkpoint layout."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Named trainable tensors plus non-trainable buffers, in insertion order.

    The flat state vector is all parameters (insertion order, C-order within
    each) followed by all buffers; checkpoints store exactly this vector.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.no_decay: set[str] = set()

    def add(self, name: str, value: np.ndarray, decay: bool = True) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        if not decay:
            self.no_decay.add(name)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def n_state(self) -> int:
        return self.n_params() + int(sum(b.size for b in self.buffers.values()))

    def layout(self) -> list[tuple[str, tuple]]:
        """(name, shape) for every entry of the flat state, in order."""
        return [(k, t.shape) for k, t in self.params.items()] + [
            (k, b.shape) for k, b in self.buffers.items()
        ]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def flat_state(self) -> np.ndarray:
        parts = [t.data.ravel() for t in self.params.values()]
        parts += [b.ravel() for b in self.buffers.values()]
        if not parts:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate(parts).astype(np.float32)

    def load_flat_state(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat).ravel()
        if flat.size != self.n_state():
            raise ValueError(f"state size mismatch ({flat.size} != {self.n_state()})")
        pos = 0
        for t in self.params.values():
            n = t.data.size
            t.data = flat[pos : pos + n].reshape(t.shape).astype(self.dtype)
            pos += n
        for b in self.buffers.values():
            n = b.size
            # buffers are updated in place by batchnorm, keep the same array object
            b[...] = flat[pos : pos + n].reshape(b.shape)
            pos += n

    def snapshot(self) -> np.ndarray:
        parts = [t.data.ravel() for t in self.params.values()]
        parts += [b.ravel() for b in self.buffers.values()]
        return np.concatenate(parts).copy() if parts else np.zeros(0, self.dtype)

    def restore(self, snap: np.ndarray) -> None:
        self.load_flat_state(snap)
