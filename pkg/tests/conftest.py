"""Shared test helpers: the central finite-difference gradient oracle."""

import numpy as np

from navdistill import tensor as T


def numeric_grad(f, tensors, h=1e-5):
    """Central-difference gradients of the scalar ``f()`` w.r.t. each tensor.

    Perturbs the tensors' buffers in place and re-runs the forward closure,
    so it stays independent of the tape-based backward pass it is used to
    check.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(f, tensors, h=1e-5):
    """Max relative error between tape gradients and the finite-difference oracle."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = f()
    T.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(f, tensors, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        rel = np.abs(a - n) / denom
        rel[(np.abs(a) < 1e-9) & (np.abs(n) < 1e-9)] = 0.0
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def assert_grads_match(f, tensors, h=1e-5, rtol=1e-4):
    err = max_rel_error(f, tensors, h=h)
    assert err <= rtol, f"gradient mismatch: max relative error {err:.3e} > {rtol}"
