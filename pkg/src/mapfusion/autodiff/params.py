"""Named, ordered collection of learnable tensors and batchnorm buffers."""

from __future__ import annotations

from typing import ItemsView

import numpy as np

from mapfusion.autodiff.tensor import Tensor


class ModelParams:
    """Learnable tensors plus non-learnable buffers, in stable insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values), requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, values: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.asarray(values)
        self._buffers[name] = arr
        return arr

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def params(self) -> ItemsView[str, Tensor]:
        return self._params.items()

    def buffers(self) -> ItemsView[str, np.ndarray]:
        return self._buffers.items()

    def names(self) -> list[str]:
        return [*self._params.keys(), *self._buffers.keys()]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def astype(self, dtype) -> "ModelParams":
        """Copy with all values cast (used for 64-bit gradient checking)."""
        out = ModelParams()
        for name, p in self._params.items():
            out.add_param(name, p.data.astype(dtype))
        for name, b in self._buffers.items():
            out.add_buffer(name, b.astype(dtype))
        return out
