"""Shared helpers: finite-difference gradient oracle and tiny model builders."""

from __future__ import annotations

import numpy as np
import pytest

from shiftrec.autodiff import Tape, Tensor


def finite_difference(f, tensors: list, h: float = 1e-5) -> list:
    """Central-difference gradients of scalar ``f()`` w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f()
            flat[i] = orig - h
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build, tensors: list, rel: float = 1e-4, h: float = 1e-5) -> None:
    """``build()`` returns a scalar Tensor from ``tensors``; compares both routes."""
    with Tape() as tape:
        out = build()
        assert out.size == 1, f"gradient check needs a scalar, got {out.shape}"
        grads = tape.backward(out)
    numeric = finite_difference(lambda: float(build().data), tensors, h=h)
    for t, num in zip(tensors, numeric):
        ana = grads.get(t)
        assert ana is not None, f"no gradient recorded for {t}"
        err = relative_error(ana, num)
        assert err < rel, f"gradient mismatch for {t}: rel error {err:.3e}"


def leaf(rng: np.random.Generator, *shape, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
