"""Central finite-difference gradient oracle shared by loss tests."""

import numpy as np


def numeric_grads(fn, model, h=1e-5):
    """Central differences of fn(model) w.r.t. every tensor coordinate."""
    grads = {}
    for name in sorted(model.tensors):
        arr = model.tensors[name]
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"], op_flags=["readonly"])
        for _ in it:
            ix = it.multi_index
            orig = float(arr[ix])
            arr[ix] = orig + h
            up = fn(model)
            arr[ix] = orig - h
            down = fn(model)
            arr[ix] = orig
            g[ix] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(analytic: dict, numeric: dict) -> float:
    """Norm-based relative error over the concatenated gradient vector."""
    a = np.concatenate([np.ravel(analytic[k]) for k in sorted(analytic)])
    n = np.concatenate([np.ravel(numeric[k]) for k in sorted(numeric)])
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def per_tensor_errors(analytic: dict, numeric: dict) -> dict:
    out = {}
    for k in analytic:
        a, n = np.ravel(analytic[k]), np.ravel(numeric[k])
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        out[k] = 0.0 if denom == 0.0 else float(np.linalg.norm(a - n) / denom)
    return out
