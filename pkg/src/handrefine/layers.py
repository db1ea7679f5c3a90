"""Parameter containers and the per-node linear / perceptron layers.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(dy, cache) -> dx``; ``backward`` accumulates parameter gradients
into ``self.grads``. There is no tape: composite layers call their
children's backward in reverse order themselves.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .numeric import DEFAULT_DTYPE, xavier_init


class Module:
    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: Module | None) -> Module | None:
        if module is not None:
            self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p[...] = state[name]


class Linear(Module):
    """``y = x @ weight + bias`` applied to every row of ``x``."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True,
                 zero: bool = False, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        w = np.zeros((n_in, n_out), dtype=dtype) if zero else xavier_init(rng, n_in, n_out, dtype)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x: np.ndarray):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        self.grads["weight"] += x.T @ dy
        if self.bias is not None:
            self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.weight.T


class MLP(Module):
    """Per-row perceptron: ReLU between layers, identity after the last one."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], zero_last: bool = False,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers: list[Linear] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layer = Linear(rng, a, b, zero=zero_last and last, dtype=dtype)
            self.layers.append(layer)
            self.add_child(f"fc{i}", layer)

    def forward(self, x: np.ndarray):
        caches = []
        h = x
        for i, layer in enumerate(self.layers):
            h, c = layer.forward(h)
            pre = h
            if i < len(self.layers) - 1:
                h = np.maximum(pre, 0.0)
            caches.append((c, pre))
        return h, caches

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        d = dy
        for i in reversed(range(len(self.layers))):
            c, pre = caches[i]
            if i < len(self.layers) - 1:
                d = d * (pre > 0)
            d = self.layers[i].backward(d, c)
        return d
