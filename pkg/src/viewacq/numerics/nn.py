"""Parameter containers, dense layers and Adam on top of the autodiff tape."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from viewacq.numerics import autodiff as ops
from viewacq.numerics.autodiff import Tensor

ACTIVATIONS = {
    "relu": ops.relu,
    "tanh": ops.tanh,
}


class ParamStore:
    """Ordered name -> Tensor mapping; the unit of checkpointing and optimisation."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.values.ravel() for t in self._params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_values():
            raise ValueError(f"weight blob has {flat.size} values, expected {self.n_values()}")
        i = 0
        for t in self._params.values():
            n = t.size
            t.values = flat[i:i + n].reshape(t.shape).copy()
            i += n

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self._params[k].values = v.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, gain: float = 1.0, bias: bool = True):
        self.w = store.add(f"{name}.w", glorot(rng, fan_in, fan_out, gain))
        self.b = store.add(f"{name}.b", np.zeros(fan_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ops.matmul(x, self.w)
        return y if self.b is None else ops.add(y, self.b)


class MLP:
    """Stack of Linear layers with a shared hidden activation and linear output."""

    def __init__(self, store: ParamStore, name: str, sizes: Iterable[int], rng: np.random.Generator,
                 activation: str = "tanh", out_gain: float = 1.0):
        sizes = list(sizes)
        self.act = ACTIVATIONS[activation]
        n = len(sizes) - 1
        self.layers = [
            Linear(store, f"{name}.{i}", sizes[i], sizes[i + 1], rng, gain=out_gain if i == n - 1 else 1.0)
            for i in range(n)
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None, weight_decay: float = 0.0):
        self.params = params
        self.weight_decay = weight_decay
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]
        self.t = 0

    def step(self) -> float:
        """Apply one update from the stored grads; returns the pre-clip gradient norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            # parameters are the one place tensor values change in place
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.values.ndim >= 2:
                # decoupled decay on weight matrices only
                step = step + self.weight_decay * p.values
            p.values = p.values - self.lr * step
        return norm
