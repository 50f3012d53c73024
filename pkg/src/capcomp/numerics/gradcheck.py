"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f, x, h: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None,
               seed: int = 0, floor: float = 1e-8) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f()`` with central differences.

    ``x`` is a Tensor or a list of Tensors that ``f`` closes over; their
    ``data`` is perturbed in place and restored. ``max_entries`` caps the
    number of coordinates probed per tensor (chosen with ``seed``).
    The relative error of one coordinate is |a - n| / max(|a|, |n|, floor).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f()
    backward(out, tape, params=xs)
    analytic = [t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst_rel = 0.0
    worst_abs = 0.0
    n = 0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num)
            rel = err / max(abs(gflat[i]), abs(num), floor)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, rel)
            n += 1

    for t, (rg, g) in zip(xs, saved):
        t.requires_grad = rg
        t.grad = g
    return GradCheckReport(worst_rel, worst_abs, n, tol)
