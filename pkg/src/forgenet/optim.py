"""Named parameter storage and the Adam update rule."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .autodiff import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Ordered mapping of parameter names to tensors plus Adam moments.

    Moment arrays always mirror their parameter's shape; `step_count`
    increases by exactly one per `adam_step`.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())


def adam_step(store: ParamStore, lr: float) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    Requires a populated gradient on each parameter; gradients are zeroed
    after the update.
    """
    t = store.step_count + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    store.step_count = t
    store.zero_grads()
