"""Central-difference gradient checking against the autodiff engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn, tensors, wrt, h=1e-4):
    """d fn(tensors) / d tensors[wrt] by central differences, element by element.

    fn maps the tensor list to a scalar Tensor. Only sensible for small inputs.
    Divides by the step that was actually realized in the tensor's dtype, so
    f32 probes are not polluted by the representation error of x +- h.
    """
    t = tensors[wrt]
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi_x = float(flat[i])
        hi = fn(tensors).item()
        flat[i] = orig - h
        lo_x = float(flat[i])
        lo = fn(tensors).item()
        flat[i] = orig
        grad[i] = (hi - lo) / (hi_x - lo_x)
    return grad.reshape(t.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.abs(analytic - numeric).max()
    den = np.abs(analytic).max() + np.abs(numeric).max() + 1e-12
    return float(num / den)


def _default_step(dtype) -> float:
    # Central differences balance truncation O(h^2) against roundoff
    # O(eps/h); the sweet spot is near cbrt(eps) of the probe dtype.
    return 3e-3 if np.dtype(dtype) == np.float32 else 1e-4


def gradcheck(fn, tensors, h=None, tol=1e-3) -> float:
    """Check every requires_grad input of fn against central differences.

    Returns the worst relative error seen; raises AssertionError above tol.
    h defaults per input dtype (see _default_step).
    """
    loss = fn(tensors)
    backward(loss, leaves=tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = numerical_grad(fn, tensors, i, h=h if h is not None else _default_step(t.dtype))
        err = rel_error(ana, num)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(f"gradcheck failed on input {i}: rel err {err:.3e} > {tol:.1e}")
    for t in tensors:
        t.grad = None
    return worst
