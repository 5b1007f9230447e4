"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, default_dtype


def numerical_gradient(fn, inputs, wrt: Tensor, eps: float = 1e-6) -> np.ndarray:
    """d sum(fn(*inputs) * probe) / d wrt by central differences.

    ``fn`` must return a tensor; a fixed random probe turns vector outputs
    into a scalar so every output element contributes.
    """
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    g = grad.reshape(-1)
    probe = None
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn(*inputs).data
        flat[i] = orig - eps
        minus = fn(*inputs).data
        flat[i] = orig
        if probe is None:
            probe = _probe(plus.shape)
        g[i] = ((plus - minus) * probe).sum() / (2 * eps)
    return grad


def _probe(shape):
    return np.random.default_rng(1234).standard_normal(shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def gradcheck(fn, inputs, eps: float = 1e-6, tol: float = 1e-4) -> dict:
    """Compare analytic and numerical gradients for every input requiring grad.

    Runs in 64-bit.  Returns ``{input_index: relative_error}`` and raises
    ``AssertionError`` if any error exceeds ``tol``.
    """
    with default_dtype(np.float64):
        inputs = [_to64(t) for t in inputs]
        out = fn(*inputs)
        probe = _probe(out.shape)
        for t in inputs:
            if isinstance(t, Tensor):
                t.grad = None
        out.backward(probe.astype(out.dtype))
        errors = {}
        for i, t in enumerate(inputs):
            if not (isinstance(t, Tensor) and t.requires_grad):
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = numerical_gradient(fn, inputs, t, eps)
            errors[i] = relative_error(analytic, numeric)
    bad = {i: e for i, e in errors.items() if e >= tol}
    if bad:
        raise AssertionError(f"gradient mismatch (relative error) {bad}")
    return errors


def _to64(t):
    if not isinstance(t, Tensor) or t.dtype == np.float64:
        return t
    return Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad)
