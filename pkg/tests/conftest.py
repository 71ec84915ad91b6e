"""Shared test helpers: independent oracles and random-case generators.

The oracles here deliberately avoid the package's numeric kernels: the
forward oracle is a triple-loop matmul working straight off the documented
flat layout, and the gradient oracle is central finite differences of the
scalar loss. Random nets are rejected while any hidden preactivation sits
closer to zero than a safety margin, so the finite-difference probes never
step across a rectifier kink.
"""

from __future__ import annotations

import numpy as np
import pytest

from fedsim import nn
from fedsim.data import ClientDataset, Dataset

# Finite differences perturb one coordinate by FD_STEP; KINK_MARGIN keeps
# every hidden preactivation far enough from zero that no probe crosses it.
FD_STEP = 1e-5
KINK_MARGIN = 5e-3


def fd_gradient(loss_fn, theta: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for j in range(theta.shape[0]):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += step
        tm[j] -= step
        g[j] = (loss_fn(tp) - loss_fn(tm)) / (2.0 * step)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a - b| relative to the larger magnitude, floored at 1.

    The floor stops near-zero gradient components from amplifying the
    rounding noise of the difference quotient into a fake relative error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / denom).max())


def naive_forward(dims, theta: np.ndarray, X: np.ndarray):
    """Triple-loop forward pass straight off the flat layout.

    Returns (logits, min_abs_hidden_preactivation). Independent of the
    package kernels: offsets, matmul and the rectifier are all spelled out.
    """
    dims = [int(d) for d in dims]
    theta = np.asarray(theta, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    act = X
    off = 0
    min_abs = np.inf
    n_layers = len(dims) - 1
    for l in range(n_layers):
        nin, nout = dims[l], dims[l + 1]
        W = theta[off:off + nout * nin].reshape(nout, nin)
        off += nout * nin
        b = theta[off:off + nout]
        off += nout
        Z = np.empty((act.shape[0], nout))
        for i in range(act.shape[0]):
            for o in range(nout):
                s = b[o]
                for j in range(nin):
                    s += W[o, j] * act[i, j]
                Z[i, o] = s
        if l < n_layers - 1:
            min_abs = min(min_abs, float(np.abs(Z).min()))
            act = np.maximum(Z, 0.0)
        else:
            act = Z
    return act, min_abs


def random_case(seed: int, max_params: int = 200, max_batch: int = 8):
    """Random (params, X, y) with params <= max_params, clear of kinks.

    Deterministic in the seed: rejected draws advance an internal counter,
    never the global RNG state.
    """
    attempt = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        n_hidden = int(rng.integers(0, 3))
        dims = [int(rng.integers(2, 7))]
        dims += [int(rng.integers(2, 9)) for _ in range(n_hidden)]
        dims.append(int(rng.integers(2, 6)))
        if nn.param_count(dims) > max_params:
            attempt += 1
            continue
        B = int(rng.integers(1, max_batch + 1))
        theta = rng.normal(0.0, 0.5, size=nn.param_count(dims))
        params = nn.ModelParams(np.asarray(dims), theta)
        X = rng.normal(size=(B, dims[0]))
        y = rng.integers(0, dims[-1], size=B).astype(np.int64)
        _, min_abs = naive_forward(dims, theta, X)
        if n_hidden == 0 or min_abs > KINK_MARGIN:
            return params, X, y, rng
        attempt += 1


def random_probs(rng, C: int) -> np.ndarray:
    """Random point on the C-simplex with no zero entries."""
    v = rng.random(C) + 1e-3
    return v / v.sum()


def make_client(rng, n: int = 24, d: int = 4, C: int = 3,
                client_id: int = 0, labels=None) -> ClientDataset:
    if labels is None:
        labels = rng.integers(0, C, size=n).astype(np.int64)
    else:
        labels = np.asarray(labels, dtype=np.int64)
        n = labels.shape[0]
    return ClientDataset(
        client_id=client_id,
        features=rng.normal(size=(n, d)),
        labels=labels,
        num_classes=C,
    )


def tiny_dataset(rng, n: int = 30, d: int = 4, C: int = 3) -> Dataset:
    return Dataset(rng.normal(size=(n, d)),
                   rng.integers(0, C, size=n).astype(np.int64), C)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
