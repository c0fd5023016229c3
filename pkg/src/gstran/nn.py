"""Parameter containers built on the kernel."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import kernel as K
from .kernel import DiffArray, Parameter


class Module:
    """Walks attributes for parameters and submodules, in definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, DiffArray) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.values.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise K.DimensionError(f"{name}: stored {arr.shape} vs model {p.shape}")
            p.values[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.values = p.values.astype(dtype)
            p.grad = None
        return self


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=None, bias: bool = True):
        bound = 1.0 / np.sqrt(cin)
        dtype = dtype or K.default_dtype()
        self.weight = Parameter(rng.uniform(-bound, bound, (cin, cout)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, cout), dtype=dtype) if bias else None

    def __call__(self, x: DiffArray) -> DiffArray:
        return K.linear(x, self.weight, self.bias)

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]


class MLP(Module):
    """Linear layers with relu between them (and after the last when ``final_act``)."""

    def __init__(self, widths, rng, dtype=None, final_act: bool = False):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.final_act = final_act

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_act:
                x = K.relu(x)
        return x
