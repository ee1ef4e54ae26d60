"""Central finite differences for verifying reverse-mode gradients.

Run everything in float64: the comparisons target ~1e-4 relative error,
which float32 arithmetic can't reliably hit.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = ["numeric_grad", "check_gradients", "GradReport"]


class GradReport:
    def __init__(self):
        self.failures: list[tuple[str, int, float, float, float]] = []
        self.checked = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def __repr__(self):
        if self.ok:
            return f"GradReport(ok, {self.checked} entries)"
        lines = [f"GradReport({len(self.failures)} failures / {self.checked} entries)"]
        for name, idx, analytic, numeric, err in self.failures[:10]:
            lines.append(f"  {name}[{idx}]: analytic={analytic:.6g} numeric={numeric:.6g} err={err:.3g}")
        return "\n".join(lines)


def numeric_grad(fn, arrays: dict[str, np.ndarray], eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar fn(arrays) w.r.t. every entry."""
    grads = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        arrays[name] = arr
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(fn(arrays))
            flat[i] = keep - eps
            lo = float(fn(arrays))
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def check_gradients(build, arrays: dict[str, np.ndarray],
                    rel_tol: float = 1e-4, abs_tol: float = 1e-6,
                    eps: float = 1e-5) -> GradReport:
    """Compare tape gradients of build(leaves) against finite differences.

    build takes {name: Var} and returns a scalar Var.  Entries with
    magnitude below 1e-3 are judged by abs_tol instead of rel_tol.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    with ad.tape():
        leaves = {k: ad.leaf(v.copy()) for k, v in arrays.items()}
        loss = build(leaves)
        ad.backward(loss)
        analytic = {k: (np.zeros_like(arrays[k]) if v.grad is None else v.grad.copy())
                    for k, v in leaves.items()}

    def fn(arrs):
        with ad.tape():
            return build({k: ad.leaf(v) for k, v in arrs.items()}).value

    numeric = numeric_grad(fn, arrays, eps=eps)

    report = GradReport()
    for name in arrays:
        a, n = analytic[name].ravel(), numeric[name].ravel()
        for i in range(a.size):
            report.checked += 1
            scale = max(abs(a[i]), abs(n[i]))
            err = abs(a[i] - n[i])
            ok = err <= abs_tol if scale < 1e-3 else err / scale <= rel_tol
            if not ok:
                report.failures.append((name, i, float(a[i]), float(n[i]), float(err)))
    return report
