"""Central-difference gradient verification for small models."""

from dataclasses import dataclass

import numpy as np

from posekd.nn.layers import Array
from posekd.nn.model import ModelSpec, ParamStore, backward, forward, param_count

MAX_CHECK_PARAMS = 10_000


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    passed: bool
    tolerance: float


def grad_check(
    model: ModelSpec,
    store: ParamStore,
    x: Array,
    loss_fn,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckResult:
    """Compares analytic parameter gradients against central differences.

    Args:
        loss_fn: maps the network output to ``(value, grad_wrt_output)``.
        step: finite-difference step h; each element is perturbed by +/- h.
        tolerance: max allowed relative error |a - n| / max(1e-8, |a| + |n|).
    """
    n_params = param_count(model)
    if n_params > MAX_CHECK_PARAMS:
        raise ValueError(f"model has {n_params} params; grad_check is capped at {MAX_CHECK_PARAMS}")

    x = np.asarray(x, dtype=np.float64)
    _, gy = loss_fn(forward(model, store, x))
    analytic = backward(model, store, x, np.asarray(gy, dtype=np.float64))

    work = store.copy()
    max_rel = 0.0
    worst = ""
    for name in sorted(work.params):
        arr = work.params[name]
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi, _ = loss_fn(forward(model, work, x))
            flat[i] = orig - step
            lo, _ = loss_fn(forward(model, work, x))
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = a_flat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
    return GradCheckResult(max_rel, worst, max_rel <= tolerance, tolerance)
