"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import GradTape, NonFiniteGradError, Tensor

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    """Outcome of one gradient check: worst relative error over checked entries."""

    max_rel_err: float = 0.0
    tol: float = 1e-4
    entries_checked: int = 0
    worst_input: int = -1
    worst_entry: int = -1
    nonfinite_op: Optional[str] = None
    per_input_max: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.nonfinite_op is None and self.max_rel_err < self.tol

    def summary(self) -> str:
        if self.nonfinite_op is not None:
            return f"FAIL: non-finite gradient in op {self.nonfinite_op!r}"
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"{verdict}: max rel err {self.max_rel_err:.3e} over {self.entries_checked} entries "
            f"(tol {self.tol:.1e})"
        )


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries_per_input: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of a deterministic scalar function against
    central finite differences.

    ``eps`` is scaled by each input's magnitude. When an input is large,
    ``max_entries_per_input`` limits the check to a seeded random subset of
    its entries. Inputs are restored bit-exactly afterwards. ``floor`` bounds
    the relative-error denominator so that exactly-zero analytic gradients
    are not failed on finite-difference cancellation noise.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()

    report = GradCheckReport(tol=tol)
    with GradTape() as tape:
        loss = f(*inputs)
    try:
        tape.backward(loss, check_finite=True)
    except NonFiniteGradError as exc:
        report.nonfinite_op = str(exc).split("op ")[-1].strip("'\"")
        report.max_rel_err = float("inf")
        return report

    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    rng = np.random.default_rng(seed)

    for i, t in enumerate(inputs):
        n = t.size
        if max_entries_per_input is not None and n > max_entries_per_input:
            entries = rng.choice(n, size=max_entries_per_input, replace=False)
        else:
            entries = np.arange(n)
        scale = max(1.0, float(np.abs(t.data).max())) if n else 1.0
        step = eps * scale
        input_max = 0.0
        an_flat = analytic[i].reshape(-1)
        for j in entries:
            j = int(j)
            orig = t.data.flat[j]
            t.data.flat[j] = orig + step
            lp = f(*inputs).item()
            t.data.flat[j] = orig - step
            lm = f(*inputs).item()
            t.data.flat[j] = orig
            fd = (lp - lm) / (2.0 * step)
            an = float(an_flat[j])
            rel = abs(fd - an) / max(abs(fd), abs(an), floor)
            report.entries_checked += 1
            if rel > input_max:
                input_max = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_input = i
                report.worst_entry = j
        report.per_input_max.append(input_max)
    return report
