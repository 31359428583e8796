"""Finite-difference gradient checking.

Analytic gradients come from a float64 graph; the perturbed losses are
recomputed in float64 with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .functional import LossValue
from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    op: str
    max_rel_error: float
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@dataclass
class GradCheckReport:
    results: List[GradCheckResult] = field(default_factory=list)

    def add(self, result: GradCheckResult) -> None:
        self.results.append(result)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def max_errors(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for r in self.results:
            out[r.op] = max(out.get(r.op, 0.0), r.max_rel_error)
        return out

    def lines(self) -> List[str]:
        return [
            f"{r.op:<28} max_rel_err={r.max_rel_error:.3e} tol={r.tolerance:.0e} "
            f"coords={r.n_coords} {'PASS' if r.passed else 'FAIL'}"
            for r in self.results
        ]


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _scalar(out, projection: Optional[np.ndarray]) -> Tensor:
    if isinstance(out, LossValue):
        return out.tensor
    if out.data.size == 1:
        return out
    return (out * Tensor(projection)).sum()


def check_tensors(fn: Callable[..., object], tensors: Sequence[Tensor], tolerance: float, op: str,
                  n_coords: int = 20, h: float = 1e-3, seed: int = 0, floor: float = 1e-8) -> GradCheckResult:
    """Compare analytic and central-difference gradients of ``fn(*tensors)``.

    ``tensors`` must be float64 leaves with ``requires_grad`` set on the ones
    to check; ``fn`` may return a scalar, a :class:`LossValue`, or any tensor
    (reduced with a fixed random projection).
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    probe = fn(*tensors)
    probe_t = probe.tensor if isinstance(probe, LossValue) else probe
    projection = None if probe_t.data.size == 1 else rng.standard_normal(probe_t.shape)
    loss = _scalar(probe, projection)
    loss.backward()

    def evaluate() -> float:
        with no_grad():
            return float(_scalar(fn(*tensors), projection).data)

    worst = 0.0
    count = 0
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = t.grad
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = evaluate()
            flat[idx] = orig - h
            down = evaluate()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[idx]), numeric, floor))
            count += 1
    return GradCheckResult(op, worst, count, tolerance)


def grad_check(builder: Callable[..., object], input_sizes: Sequence[Sequence[int]], tolerance: float,
               op: str = "op", n_coords: int = 20, h: float = 1e-3, seed: int = 0,
               init: Optional[Callable[[np.random.Generator, tuple], np.ndarray]] = None) -> GradCheckResult:
    """Build random float64 inputs of the given sizes and gradient-check ``builder``."""
    rng = np.random.default_rng(seed)
    make = init or (lambda g, shape: g.standard_normal(shape))
    tensors = [Tensor(np.asarray(make(rng, tuple(s)), dtype=np.float64), requires_grad=True) for s in input_sizes]
    return check_tensors(builder, tensors, tolerance, op, n_coords=n_coords, h=h, seed=seed + 1)
