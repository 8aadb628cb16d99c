"""Central finite-difference gradient checks against :func:`tensor.backward`."""

import numpy as np

from .tensor import backward


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def relative_error(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, tensors, h=1e-5):
    """Return the relative error for each tensor in ``tensors``.

    ``fn`` must rebuild the graph from the tensors' current ``.data`` on every
    call and return a scalar tensor.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(fn, [t.data for t in tensors], h=h)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]
