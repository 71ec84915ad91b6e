"""Numba backend for the hot numeric kernels.

Same contract as `_kernels_numpy` (see that module for the parameter layout).
The kernels are written as explicit loops plus BLAS matmuls, compiled with
``nopython`` and ``nogil`` so client training threads can overlap. At the
batch sizes this simulator runs (tens of rows, networks of a few thousand
parameters) the win over NumPy comes from fusing the per-batch pipeline into
one call rather than from the matmuls themselves.

Matmul operands are made contiguous before np.dot: numba's BLAS bindings
reject strided views.
"""

from __future__ import annotations

import numpy as np
from numba import njit

EPS = 1e-12


@njit(cache=True, nogil=True)
def softmax_rows(Z, tau):
    B, C = Z.shape
    P = np.empty((B, C))
    for i in range(B):
        m = Z[i, 0]
        for c in range(1, C):
            if Z[i, c] > m:
                m = Z[i, c]
        s = 0.0
        for c in range(C):
            e = np.exp((Z[i, c] - m) / tau)
            P[i, c] = e
            s += e
        for c in range(C):
            P[i, c] /= s
    return P


@njit(cache=True, nogil=True)
def entropy_rows(P):
    B, C = P.shape
    out = np.empty(B)
    for i in range(B):
        h = 0.0
        for c in range(C):
            p = P[i, c]
            if p > 0.0:
                h -= p * np.log(p if p > EPS else EPS)
        out[i] = h
    return out


@njit(cache=True, nogil=True)
def kl_rows(P, Q):
    B, C = P.shape
    out = np.empty(B)
    for i in range(B):
        s = 0.0
        for c in range(C):
            p = P[i, c]
            if p > 0.0:
                q = Q[i, c]
                s += p * (np.log(p if p > EPS else EPS) - np.log(q if q > EPS else EPS))
        out[i] = s
    return out


@njit(cache=True, nogil=True)
def forward_logits(theta, dims, X):
    L = dims.shape[0] - 1
    A = X
    off = 0
    for l in range(L):
        nin = dims[l]
        nout = dims[l + 1]
        W = theta[off:off + nout * nin].reshape(nout, nin)
        off += nout * nin
        b = theta[off:off + nout]
        off += nout
        Z = np.dot(A, np.ascontiguousarray(W.T))
        B = Z.shape[0]
        for i in range(B):
            for c in range(nout):
                Z[i, c] += b[c]
        if l < L - 1:
            for i in range(B):
                for c in range(nout):
                    if Z[i, c] < 0.0:
                        Z[i, c] = 0.0
        A = Z
    return A


@njit(cache=True, nogil=True)
def loss_and_grad(theta, dims, X, y, ce_scale, lam, tau, alpha, teacher_tau, grad_out):
    L = dims.shape[0] - 1
    B = X.shape[0]
    C = dims[L]

    # Forward, keeping pre-activations (zs) and activations (acts).
    acts = [X]
    zs = []
    off = 0
    for l in range(L):
        nin = dims[l]
        nout = dims[l + 1]
        W = theta[off:off + nout * nin].reshape(nout, nin)
        off += nout * nin
        b = theta[off:off + nout]
        off += nout
        Z = np.dot(acts[l], np.ascontiguousarray(W.T))
        for i in range(B):
            for c in range(nout):
                Z[i, c] += b[c]
        zs.append(Z)
        if l < L - 1:
            A = np.empty_like(Z)
            for i in range(B):
                for c in range(nout):
                    v = Z[i, c]
                    A[i, c] = v if v > 0.0 else 0.0
            acts.append(A)
        else:
            acts.append(Z)
    logits = zs[L - 1]

    P1 = softmax_rows(logits, 1.0)
    ce = 0.0
    for i in range(B):
        p = P1[i, y[i]]
        ce -= np.log(p if p > EPS else EPS)
    ce /= B

    D = np.empty((B, C))
    cs = ce_scale / B
    for i in range(B):
        for c in range(C):
            D[i, c] = P1[i, c] * cs
        D[i, y[i]] -= cs

    reg = 0.0
    if lam != 0.0:
        Pt = softmax_rows(logits, tau)
        scale = lam / (tau * B)
        for i in range(B):
            kli = 0.0
            for c in range(C):
                p = teacher_tau[i, c]
                if p > 0.0:
                    q = Pt[i, c]
                    kli += p * (np.log(p if p > EPS else EPS) - np.log(q if q > EPS else EPS))
            reg += alpha[i] * kli
            a = alpha[i] * scale
            for c in range(C):
                D[i, c] += a * (Pt[i, c] - teacher_tau[i, c])
        reg /= B

    # Backprop: grad blocks are written back-to-front into grad_out.
    G = D
    off_end = theta.shape[0]
    for l in range(L - 1, -1, -1):
        nin = dims[l]
        nout = dims[l + 1]
        o_b = off_end - nout
        o_w = o_b - nout * nin
        GW = np.dot(np.ascontiguousarray(G.T), acts[l])
        grad_out[o_w:o_b] = GW.ravel()
        for c in range(nout):
            s = 0.0
            for i in range(B):
                s += G[i, c]
            grad_out[o_b + c] = s
        if l > 0:
            W = theta[o_w:o_b].reshape(nout, nin)
            Gp = np.dot(G, W)
            Zp = zs[l - 1]
            for i in range(B):
                for c in range(nin):
                    if Zp[i, c] <= 0.0:
                        Gp[i, c] = 0.0
            G = Gp
        off_end = o_w
    return ce, reg
