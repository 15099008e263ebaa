"""Compare reverse-mode gradients with central finite differences."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .module import Param
from .tensor import Tensor, no_grad, trace_kinks


class GradCheckError(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int
    shrunk: int = 0
    unresolved: int = 0


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol

    def format(self) -> str:
        lines = [f"{'param':40s} {'checked':>7s} {'max rel err':>12s}"]
        for p in self.params:
            lines.append(f"{p.name:40s} {p.checked:7d} {p.max_rel_error:12.3e}")
        return "\n".join(lines)


def _scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    val = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
    if not np.isfinite(val):
        raise GradCheckError("non-finite objective")
    return val


def _probe(f: Callable[[], Tensor]) -> tuple[float, list]:
    with trace_kinks() as trace:
        val = _scalar(f)
    return val, trace


def _same_region(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def default_epsilon(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-2


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], epsilon: float | None = None,
               names: Sequence[str] | None = None, max_elements: int | None = 16,
               atol: float = 1e-6, seed: int = 0,
               analytic: Sequence[np.ndarray] | None = None,
               min_epsilon: float | None = None) -> GradCheckReport:
    """Check analytic gradients of scalar ``f()`` against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, atol)``. At most
    ``max_elements`` randomly chosen entries of each parameter are perturbed
    (``None`` checks every entry). ``analytic`` supplies gradients computed
    elsewhere (e.g. by a lower-precision twin of the same function) in place
    of backpropagating ``f``.

    Central differences are only meaningful inside one smooth piece of ``f``.
    Every probe records the ReLU signs and bilinear cells it used; when a
    probe leaves the piece of the base point, the step is divided by 10
    (down to ``min_epsilon``, default ``epsilon / 1000``) and retried.
    """
    params = list(params)
    if not params:
        return GradCheckReport()
    dtype = params[0].dtype
    eps = default_epsilon(dtype) if epsilon is None else epsilon
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    rng = np.random.default_rng(seed)

    if analytic is None:
        for p in params:
            p.zero_grad()
        out = f()
        if not np.isfinite(out.data).all():
            raise GradCheckError("non-finite objective")
        out.backward()
        analytic = [p.gradient.copy() for p in params]
    elif len(analytic) != len(params):
        raise ValueError("analytic gradients do not match params")

    min_eps = eps / 1000 if min_epsilon is None else min_epsilon
    report = GradCheckReport()
    with no_grad():
        _, base = _probe(f)
        for name, p, grad in zip(names, params, analytic):
            flat = p.data.reshape(-1)
            if max_elements is None or flat.size <= max_elements:
                idxs = np.arange(flat.size)
            else:
                idxs = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            worst = (0.0, 0, 0.0, 0.0)
            shrunk = unresolved = 0
            for i in idxs:
                orig = flat[i].copy()
                step = eps
                while True:
                    flat[i] = orig + step
                    fp, tp = _probe(f)
                    flat[i] = orig - step
                    fm, tm = _probe(f)
                    flat[i] = orig
                    if _same_region(base, tp) and _same_region(base, tm):
                        break
                    if step / 10 < min_eps * (1 - 1e-9):
                        unresolved += 1
                        break
                    step /= 10
                shrunk += step < eps
                num = (fp - fm) / (2 * step)
                ana = float(grad.reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), atol)
                if err >= worst[0]:
                    worst = (err, int(i), ana, num)
            report.params.append(ParamCheck(
                name=name, max_rel_error=worst[0],
                worst_index=tuple(int(v) for v in np.unravel_index(worst[1], p.shape)),
                analytic=worst[2], numeric=worst[3], checked=len(idxs),
                shrunk=int(shrunk), unresolved=unresolved))
    return report
