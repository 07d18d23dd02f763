"""Shared test utilities: random tensors and the finite-difference check."""

import numpy as np

import wasr.tensor as T


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, keep_off_kinks=False):
    data = rng.uniform(lo, hi, size=shape)
    if keep_off_kinks:
        # relu-style checks need inputs away from zero by more than the fd step
        data = np.where(np.abs(data) < 0.05, 0.05 * np.sign(data) + (data == 0) * 0.05, data)
    return T.Tensor(data, requires_grad=True)


def check_grad(f, x, tol=1e-5, h=1e-5):
    x.grad = None  # isolate this check from earlier backward passes
    y = f(x)
    T.backward(y)
    numeric = T.finite_diff_grad(lambda t: f(t), x, h=h)
    err = T.max_rel_error(x.grad, numeric)
    assert err <= tol, f"gradient mismatch: max rel err {err:.3e} > {tol:.0e}"
