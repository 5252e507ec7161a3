"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, branch_trace, precision


def finite_difference_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
                            dtype=np.float64, max_coords: int | None = None,
                            rng: np.random.Generator | None = None, skip_kinks: bool = True,
                            report: dict | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|a - c| / max(|a|, |c|, 1e-6)``.  ``fn``
    is called as ``fn(*inputs)`` and must return a scalar.  Evaluation runs
    in ``dtype`` (float64 by default: float32 round-off in f(x+h) - f(x-h)
    swamps small gradient coordinates).  The inputs are restored to their
    original arrays afterwards.  ``max_coords`` samples that many coordinates
    per input instead of checking them all.

    With ``skip_kinks`` a coordinate whose +-h stencil lands on a different
    ReLU / max branch than the base point is not scored, since the central
    difference there straddles a kink and estimates no derivative.  Pass a
    dict as ``report`` to receive the ``checked`` and ``skipped`` counts
    and the worst error of each input (``per_input``).
    """
    rng = rng or np.random.default_rng(0)
    originals = [(t.data, t.requires_grad, t.grad) for t in inputs]
    worst = 0.0
    per_input = [0.0] * len(inputs)
    checked = skipped = 0

    def evaluate():
        with branch_trace() as trace:
            value = float(fn(*inputs).data)
        return value, trace

    try:
        with precision(dtype):
            for t in inputs:
                t.data = t.data.astype(dtype)
                t.requires_grad = True
                t.grad = None
            with Tape() as tape, branch_trace() as base_trace:
                out = fn(*inputs)
            if out.data.size != 1:
                raise ValueError(f"gradient check needs a scalar output, got shape {out.shape}")
            tape.backward(out)
            analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
            for n, (t, grad) in enumerate(zip(inputs, analytic)):
                flat = t.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = rng.choice(flat.size, size=max_coords, replace=False)
                for i in coords:
                    old = flat[i]
                    flat[i] = old + h
                    f_plus, trace_plus = evaluate()
                    flat[i] = old - h
                    f_minus, trace_minus = evaluate()
                    flat[i] = old
                    if skip_kinks and (trace_plus != base_trace or trace_minus != base_trace):
                        skipped += 1
                        continue
                    checked += 1
                    numeric = (f_plus - f_minus) / (2 * h)
                    a = float(grad.reshape(-1)[i])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                    worst = max(worst, err)
                    per_input[n] = max(per_input[n], err)
    finally:
        for t, (data, req, grad) in zip(inputs, originals):
            t.data, t.requires_grad, t.grad = data, req, grad
    if report is not None:
        report.update(checked=checked, skipped=skipped, per_input=per_input)
    return worst
