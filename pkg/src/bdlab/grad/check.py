from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .graph import Graph
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: str | None
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float
    checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    wrt: list[str] | None = None,
    step: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``graph.backward`` with central differences, element by element.

    Everything runs in float64.  A non-scalar output is reduced by a fixed
    random projection so every output element contributes.  ``wrt`` defaults
    to every input.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    wrt = list(base) if wrt is None else list(wrt)
    proj: np.ndarray | None = None

    def scalar(out: Tensor) -> Tensor:
        nonlocal proj
        if out.size == 1:
            return out
        if proj is None:
            proj = np.random.default_rng(seed).standard_normal(out.shape)
        return (out * Tensor(proj)).sum()

    def evaluate(values: dict[str, np.ndarray]) -> float:
        out = graph.forward({k: Tensor(v) for k, v in values.items()})
        return float(scalar(out).data)

    tensors = {k: Tensor(v.copy(), requires_grad=k in wrt) for k, v in base.items()}
    out = scalar(graph.forward(tensors))
    analytic = graph.backward(out)

    worst = GradCheckReport(0.0, None, None, 0.0, 0.0, 0)
    count = 0
    for name in wrt:
        arr = base[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = evaluate(base)
            arr[idx] = orig - step
            fm = evaluate(base)
            arr[idx] = orig
            num = (fp - fm) / (2 * step)
            ana = float(analytic[name][idx])
            err = _rel_err(ana, num, floor)
            count += 1
            if err > worst.max_rel_error or worst.worst_input is None:
                worst = GradCheckReport(err, name, idx, ana, num, 0)
    worst.checked = count
    return worst
