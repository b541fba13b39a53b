"""Shared fixtures and numerical oracles for the test suite."""

import numpy as np
import pytest

from sparsematch import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode (gradient verification)."""
    with ad.default_dtype(np.float64):
        yield


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function wrt every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference normalized by the larger gradient magnitude.

    The 1e-6 floor keeps identically-zero gradients (where central
    differences only see float64 roundoff, ~1e-11) from registering as
    relative error while still exposing any real mismatch at or above
    that scale.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_param_grad(loss_fn, param, tol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare backward() gradient of loss_fn() wrt param against central FD."""
    param.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    analytic = param.grad.copy()
    numeric = finite_diff_grad(lambda: loss_fn().item(), param.data, h=h)
    err = grad_rel_err(analytic, numeric)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"
    return err
