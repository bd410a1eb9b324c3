"""Named computation graphs over the tensor primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .tensor import ShapeError, Tensor


class GraphError(RuntimeError):
    pass


@dataclass
class Node:
    name: str
    fn: Callable[..., Tensor]
    args: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)


class Graph:
    """A DAG of named nodes evaluated in insertion order.

    Inputs (data and parameters alike) are bound by name at ``forward`` time.
    Intermediate values are kept until the next ``forward`` so that
    ``backward`` can be run on the output.
    """

    def __init__(self, output: str | None = None):
        self.inputs: list[str] = []
        self.nodes: list[Node] = []
        self.output = output
        self._values: dict[str, Tensor] | None = None

    def input(self, *names: str) -> "Graph":
        for name in names:
            self._check_new(name)
            self.inputs.append(name)
        return self

    def add(self, name: str, fn: Callable[..., Tensor], *args: str, **attrs) -> "Graph":
        self._check_new(name)
        known = set(self.inputs) | {n.name for n in self.nodes}
        missing = [a for a in args if a not in known]
        if missing:
            raise GraphError(f"node {name!r} refers to undefined {missing}")
        self.nodes.append(Node(name, fn, tuple(args), dict(attrs)))
        self.output = name
        return self

    def _check_new(self, name: str) -> None:
        if name in self.inputs or any(n.name == name for n in self.nodes):
            raise GraphError(f"duplicate node name {name!r}")

    def forward(self, inputs: Mapping[str, Tensor | np.ndarray], output: str | None = None) -> Tensor:
        missing = [n for n in self.inputs if n not in inputs]
        if missing:
            raise GraphError(f"unbound graph inputs: {missing}")
        values: dict[str, Tensor] = {}
        for name in self.inputs:
            v = inputs[name]
            values[name] = v if isinstance(v, Tensor) else Tensor(v)
        for node in self.nodes:
            try:
                values[node.name] = node.fn(*(values[a] for a in node.args), **node.attrs)
            except (ShapeError, ValueError) as exc:
                raise ShapeError(f"node {node.name!r}: {exc}") from exc
        self._values = values
        return values[output or self.output]

    def value(self, name: str) -> Tensor:
        if self._values is None:
            raise GraphError("forward has not been run")
        return self._values[name]

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        """Back-propagate a scalar output; returns gradients of every input that requires them."""
        if self._values is None:
            raise GraphError("forward has not been run")
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        leaves = {n: self._values[n] for n in self.inputs if self._values[n].requires_grad}
        for t in leaves.values():
            t.zero_grad()
        output.backward()
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in leaves.items()}


def forward(graph: Graph, inputs: Mapping[str, Tensor | np.ndarray]) -> Tensor:
    return graph.forward(inputs)


def backward(graph: Graph, output: Tensor) -> dict[str, np.ndarray]:
    return graph.backward(output)
