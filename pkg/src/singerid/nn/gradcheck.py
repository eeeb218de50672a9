from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    checked: int = 0

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def grad_check(build, tensors, h=1e-5, max_elements=None, rng=None, floor=1e-6):
    """Compare reverse-mode gradients with central finite differences.

    ``build`` is a zero-argument callable returning a scalar Tensor that
    depends on ``tensors`` (a dict name -> Tensor with requires_grad).  The
    relative error per element is |a - n| / max(|a|, |n|, floor).  When
    ``max_elements`` is given, that many randomly chosen elements per tensor
    are probed instead of all of them.
    """
    for t in tensors.values():
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    build().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
                for name, t in tensors.items()}
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(0.0)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(build().data)
            flat[i] = orig - h
            down = float(build().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.per_tensor[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        report.checked += len(idx)
        t.grad = None
    return report
