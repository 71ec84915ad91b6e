"""Pure-NumPy backend for the hot numeric kernels.

This is the reference implementation: vectorized, no JIT. The numba backend
in `_kernels_numba` must agree with these functions to float tolerance (the
two paths are cross-checked in the test suite and timed against each other in
`benchmarks/bench_backends.py`).

Parameter layout: a network with layer widths ``dims = [d0, d1, ..., dL]``
is stored as one flat float64 vector. Layer ``l`` contributes its weight
block (``dims[l+1] x dims[l]``, row-major) followed by its bias block
(``dims[l+1]``). Hidden layers are rectified, the output layer is linear.
"""

from __future__ import annotations

import numpy as np

# Probability floor applied inside every log. Keeps CE/KL/entropy finite on
# degenerate inputs without changing well-conditioned values.
EPS = 1e-12


def softmax_rows(Z: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise temperature softmax, stable under large logits."""
    S = Z / tau
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=1, keepdims=True)


def entropy_rows(P: np.ndarray) -> np.ndarray:
    """Shannon entropy of each probability row (natural log)."""
    # 0 * log(EPS) == 0.0 exactly, so zero entries contribute nothing.
    return -(P * np.log(np.maximum(P, EPS))).sum(axis=1)


def kl_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Row-wise KL(P || Q) with both arguments floored at EPS inside the log."""
    logP = np.log(np.maximum(P, EPS))
    logQ = np.log(np.maximum(Q, EPS))
    return (P * (logP - logQ)).sum(axis=1)


def forward_logits(theta: np.ndarray, dims: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Forward pass through the dense net; returns raw logits (B x C)."""
    L = len(dims) - 1
    A = X
    off = 0
    for l in range(L):
        nin = int(dims[l])
        nout = int(dims[l + 1])
        W = theta[off:off + nout * nin].reshape(nout, nin)
        off += nout * nin
        b = theta[off:off + nout]
        off += nout
        Z = A @ W.T + b
        A = Z if l == L - 1 else np.maximum(Z, 0.0)
    return A


def loss_and_grad(
    theta: np.ndarray,
    dims: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    ce_scale: float,
    lam: float,
    tau: float,
    alpha: np.ndarray,
    teacher_tau: np.ndarray,
    grad_out: np.ndarray,
) -> tuple[float, float]:
    """Composite batch loss and its exact gradient.

    Computes the mean cross-entropy over the batch plus a weighted distillation
    term ``(1/B) * sum_i alpha[i] * KL(teacher_tau[i] || student_tau[i])``
    where the student distribution uses temperature ``tau``. The gradient of
    ``ce_scale * CE + lam * distill`` w.r.t. theta is written into ``grad_out``.
    ``alpha`` and ``teacher_tau`` are ignored when ``lam == 0``.

    Returns ``(ce, distill)`` unscaled; the caller owns the composition.
    """
    L = len(dims) - 1
    B = X.shape[0]
    acts = [X]
    zs = []
    off = 0
    for l in range(L):
        nin = int(dims[l])
        nout = int(dims[l + 1])
        W = theta[off:off + nout * nin].reshape(nout, nin)
        off += nout * nin
        b = theta[off:off + nout]
        off += nout
        Z = acts[-1] @ W.T + b
        zs.append(Z)
        acts.append(Z if l == L - 1 else np.maximum(Z, 0.0))
    logits = zs[-1]

    P1 = softmax_rows(logits, 1.0)
    rows = np.arange(B)
    ce = float(-np.log(np.maximum(P1[rows, y], EPS)).mean())

    # d(mean CE)/d(logits) = (softmax - onehot) / B
    D = P1.copy()
    D[rows, y] -= 1.0
    D *= ce_scale / B

    reg = 0.0
    if lam != 0.0:
        Pt = softmax_rows(logits, tau)
        reg = float((alpha * kl_rows(teacher_tau, Pt)).sum() / B)
        # d(KL(teacher || student_tau))/d(logits) = (student_tau - teacher) / tau
        D += (lam / (tau * B)) * alpha[:, None] * (Pt - teacher_tau)

    G = D
    off_end = theta.shape[0]
    for l in range(L - 1, -1, -1):
        nin = int(dims[l])
        nout = int(dims[l + 1])
        o_b = off_end - nout
        o_w = o_b - nout * nin
        grad_out[o_w:o_b] = (G.T @ acts[l]).ravel()
        grad_out[o_b:off_end] = G.sum(axis=0)
        if l > 0:
            W = theta[o_w:o_b].reshape(nout, nin)
            G = (G @ W) * (zs[l - 1] > 0.0)
        off_end = o_w
    return ce, reg
