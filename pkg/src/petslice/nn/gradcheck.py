"""Central finite-difference verification of hand-written backward passes."""

import copy
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)   # group -> max relative error
    checked: dict = field(default_factory=dict)  # group -> number of entries compared

    @property
    def failures(self):
        return [g for g, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self):
        return not self.failures

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def __str__(self):
        lines = [f"grad check (tol {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        for g, e in self.errors.items():
            flag = "" if e < self.tolerance else "  <-- exceeds tolerance"
            lines.append(f"  {g:<40s} {e:.3e} ({self.checked[g]} entries){flag}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients
    from turning finite-difference round-off into huge ratios."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def projection_loss(out, seed=1234):
    """Default scalar objective sum(out * R) with a fixed random R."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return float(np.sum(out * r)), r


def grad_check(module, x, tolerance, loss_fn=None, step=1e-5, max_entries=None,
               seed=0, include_input=True, floor=1e-6):
    """Compare analytic gradients with central finite differences.

    Args:
        module: object with ``forward``, ``backward`` and ``named_parameters``.
            It is deep-copied and cast to float64 so the caller's instance is
            left untouched.
        x: input batch.
        tolerance: max relative error allowed per parameter group.
        loss_fn: maps the module output to ``(loss, dloss/doutput)``;
            defaults to a fixed random projection.
        step: finite-difference step.
        max_entries: if set, compare at most this many randomly chosen
            entries per group (the full-model check would otherwise need two
            forward passes per weight).

    Returns:
        GradCheckReport with the max relative error of every group
        (``"input"`` plus one entry per named parameter).
    """
    model = copy.deepcopy(module).astype(np.float64)
    x = np.array(x, dtype=np.float64)
    loss_fn = loss_fn or projection_loss
    rng = np.random.default_rng(seed)

    def loss_at():
        return loss_fn(model.forward(x))[0]

    model.zero_grad()
    _, dout = loss_fn(model.forward(x))
    dx = model.backward(dout)

    groups = [(name, p, g.copy()) for name, p, g in model.named_parameters()]
    if include_input:
        groups.insert(0, ("input", x, dx))

    report = GradCheckReport(tolerance=tolerance)
    for name, arr, analytic in groups:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_at()
            flat[i] = orig - step
            lm = loss_at()
            flat[i] = orig
            numeric[k] = (lp - lm) / (2.0 * step)
        err = relative_error(analytic.reshape(-1)[idx], numeric, floor)
        report.errors[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = int(idx.size)
    return report
