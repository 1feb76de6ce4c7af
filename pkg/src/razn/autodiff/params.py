"""Named parameter storage with gradients, buffers and Adam moments."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..errors import ArtifactMismatchError, ConfigError
from .tensor import DEFAULT_DTYPE, Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` map for one network.

    Buffers (batch-norm running statistics) live beside the parameters but
    never receive gradients. Adam moments are created lazily on the first step.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.params.items()}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with every array cast to ``dtype`` (gradients dropped)."""
        out = ParamStore(dtype)
        for n, t in self.params.items():
            out.add(n, t.data)
        for n, b in self.buffers.items():
            out.add_buffer(n, b)
        return out

    def copy(self) -> "ParamStore":
        out = self.astype(self.dtype)
        out.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        out.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        out.adam_t = self.adam_t
        return out

    # --- serialization helpers -------------------------------------------------

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        """Flat ``kind/name -> array`` view used by the checkpoint writer."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for n, t in self.params.items():
            out[f"param/{n}"] = t.data
        for n, b in self.buffers.items():
            out[f"buffer/{n}"] = b
        for n in self.params:
            if n in self.adam_m:
                out[f"adam_m/{n}"] = self.adam_m[n]
                out[f"adam_v/{n}"] = self.adam_v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], adam_t: int = 0) -> None:
        """Overwrite values in place from :meth:`state_arrays` output.

        The set of names and every shape must match this store exactly.
        """
        expected = {f"param/{n}" for n in self.params} | {f"buffer/{n}" for n in self.buffers}
        present = {k for k in arrays if k.startswith(("param/", "buffer/"))}
        if expected != present:
            missing = sorted(expected - present)
            extra = sorted(present - expected)
            raise ArtifactMismatchError(f"parameter names differ (missing={missing[:3]}, unexpected={extra[:3]})")
        for n, t in self.params.items():
            src = arrays[f"param/{n}"]
            if src.shape != t.shape:
                raise ArtifactMismatchError(f"shape mismatch for {n}: {src.shape} vs {t.shape}")
            t.data = np.array(src, dtype=self.dtype)
            t.grad = None
        for n in self.buffers:
            src = arrays[f"buffer/{n}"]
            if src.shape != self.buffers[n].shape:
                raise ArtifactMismatchError(f"shape mismatch for buffer {n}")
            self.buffers[n][...] = src
        self.adam_m = {}
        self.adam_v = {}
        for n in self.params:
            if f"adam_m/{n}" in arrays:
                self.adam_m[n] = np.array(arrays[f"adam_m/{n}"], dtype=self.dtype)
                self.adam_v[n] = np.array(arrays[f"adam_v/{n}"], dtype=self.dtype)
        self.adam_t = int(adam_t)
