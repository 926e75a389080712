"""Shared test helpers: finite-difference gradient oracle and tolerances."""

import numpy as np
import pytest

from cotmisr.tensor import Tensor


def numeric_grad(scalar_fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` w.r.t. ``arr``.

    ``scalar_fn`` takes no arguments and must read ``arr`` (mutated in
    place, then restored) each call. Independent of the autodiff path.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar_fn()
        flat[i] = orig - h
        fm = scalar_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grads_match(build_loss, inputs: dict[str, Tensor], rel_tol: float = 1e-6, h: float = 1e-5):
    """Compare autodiff gradients against central differences.

    ``build_loss`` maps the input tensors to a scalar Tensor; it is
    re-invoked for every finite-difference probe so the graph is rebuilt
    from the perturbed data.
    """
    for t in inputs.values():
        t.grad = None
    loss = build_loss()
    loss.backward()
    auto = {name: t.grad.copy() for name, t in inputs.items()}

    for name, t in inputs.items():
        fd = numeric_grad(lambda: float(build_loss().data), t.data, h=h)
        rel = np.abs(auto[name] - fd) / (np.abs(fd) + 1e-8)
        worst = rel.max() if rel.size else 0.0
        assert worst < rel_tol, f"gradient mismatch for '{name}': max rel err {worst:.3e}"


def away_from_kinks(arr: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Push values away from zero so relu/abs stay differentiable at probes."""
    arr = arr.copy()
    small = np.abs(arr) < margin
    arr[small] += np.sign(arr[small] + 0.5) * (2 * margin)
    return arr


def signed_uniform(rng, shape, lo: float = 0.5, hi: float = 1.5) -> np.ndarray:
    """Random values with magnitude in [lo, hi] and random sign.

    Keeps products and gradients bounded away from zero so the
    finite-difference comparison stays well conditioned.
    """
    signs = rng.integers(0, 2, size=shape) * 2 - 1
    return signs * rng.uniform(lo, hi, size=shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
