"""Dense-network primitives: parameters, losses, exact gradients.

All math is float64. Networks are fully connected with rectified hidden
layers and a linear output layer; parameters live in one flat vector (see
`_kernels_numpy` for the exact layout) so that aggregation, drift metrics and
Hessian probes reduce to plain vector arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """An array argument does not match the declared network geometry."""


def param_count(dims) -> int:
    """Number of parameters of a net with the given layer widths."""
    dims = np.asarray(dims, dtype=np.int64)
    return int(sum(dims[l + 1] * dims[l] + dims[l + 1] for l in range(len(dims) - 1)))


@dataclass(eq=False)
class ModelParams:
    """Flat parameter vector of a dense rectifier network.

    ``dims`` holds the layer widths from input to output; ``theta`` is the
    flat float64 vector. Gradients use the same container (entries are then
    d(loss)/d(theta)). Instances are mutable but each is owned by a single
    worker; sharing across threads is only safe read-only.
    """

    dims: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.dims = np.ascontiguousarray(self.dims, dtype=np.int64)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.dims.ndim != 1 or len(self.dims) < 2 or (self.dims < 1).any():
            raise ShapeError(f"invalid layer widths {self.dims!r}")
        expect = param_count(self.dims)
        if self.theta.ndim != 1 or self.theta.shape[0] != expect:
            raise ShapeError(
                f"theta has {self.theta.shape} entries, expected ({expect},) "
                f"for dims {self.dims.tolist()}"
            )
        if not np.isfinite(self.theta).all():
            raise ValueError("non-finite parameter entries")

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def _offsets(self, layer: int) -> tuple[int, int, int]:
        off = 0
        for l in range(layer):
            off += int(self.dims[l + 1] * self.dims[l] + self.dims[l + 1])
        o_w = off
        o_b = o_w + int(self.dims[layer + 1] * self.dims[layer])
        return o_w, o_b, o_b + int(self.dims[layer + 1])

    def weight(self, layer: int) -> np.ndarray:
        """View of layer weights, shape (out, in). Shares memory with theta."""
        o_w, o_b, _ = self._offsets(layer)
        return self.theta[o_w:o_b].reshape(int(self.dims[layer + 1]), int(self.dims[layer]))

    def bias(self, layer: int) -> np.ndarray:
        """View of layer biases, shape (out,). Shares memory with theta."""
        _, o_b, o_e = self._offsets(layer)
        return self.theta[o_b:o_e]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims.copy(), self.theta.copy())

    def same_shape(self, other: "ModelParams") -> bool:
        return np.array_equal(self.dims, other.dims)


# Gradients share the ModelParams container; semantics differ, layout does not.
Gradient = ModelParams


def init_params(dims, rng) -> ModelParams:
    """Rectifier-scaled random init: W ~ N(0, 2/fan_in), biases zero."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    dims = np.asarray(dims, dtype=np.int64)
    blocks = []
    for l in range(len(dims) - 1):
        nin, nout = int(dims[l]), int(dims[l + 1])
        blocks.append(rng.normal(0.0, np.sqrt(2.0 / nin), size=nout * nin))
        blocks.append(np.zeros(nout))
    return ModelParams(dims, np.concatenate(blocks))


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(params.dims.copy(), np.zeros(params.n_params))


def _as_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.dims[0]:
        raise ShapeError(
            f"batch shape {X.shape} does not match input width {int(params.dims[0])}"
        )
    return X


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Logits of the network on a batch (B x input) -> (B x output)."""
    return kernels.forward_logits(params.theta, params.dims, _as_batch(params, batch))


def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax along the last axis; accepts a vector or matrix."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    Z = np.asarray(logits, dtype=np.float64)
    if Z.ndim == 1:
        return kernels.softmax_rows(np.ascontiguousarray(Z[None, :]), tau)[0]
    if Z.ndim == 2:
        return kernels.softmax_rows(np.ascontiguousarray(Z), tau)
    raise ShapeError(f"logits must be 1-D or 2-D, got shape {Z.shape}")


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Negative log-likelihood of the labels; mean over rows for a matrix."""
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim == 1:
        return float(-np.log(max(P[int(labels)], kernels.EPS)))
    if P.ndim == 2:
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (P.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match probs {P.shape}")
        picked = P[np.arange(P.shape[0]), y]
        return float(-np.log(np.maximum(picked, kernels.EPS)).mean())
    raise ShapeError(f"probs must be 1-D or 2-D, got shape {P.shape}")


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for one distribution pair (zeros floored inside the log)."""
    p = np.ascontiguousarray(np.asarray(p, dtype=np.float64)[None, :])
    q = np.ascontiguousarray(np.asarray(q, dtype=np.float64)[None, :])
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape[1:]} vs {q.shape[1:]}")
    return float(kernels.kl_rows(p, q)[0])


def entropy(p: np.ndarray):
    """Shannon entropy; a float for a vector, per-row array for a matrix."""
    P = np.asarray(p, dtype=np.float64)
    if P.ndim == 1:
        return float(kernels.entropy_rows(np.ascontiguousarray(P[None, :]))[0])
    if P.ndim == 2:
        return kernels.entropy_rows(np.ascontiguousarray(P))
    raise ShapeError(f"probs must be 1-D or 2-D, got shape {P.shape}")


@dataclass
class LossSpec:
    """Composite objective: ce_scale * CE + lam * distill + prox.

    The distillation term is ``(1/B) * sum_i weights[i] *
    KL(teacher_probs_tau[i] || student_probs_tau[i])`` with student
    temperature ``tau``; weights and teacher rows are constants w.r.t. the
    parameters. The proximal term is ``(prox_mu/2) * ||w - prox_ref||^2``.
    """

    ce_scale: float = 1.0
    lam: float = 0.0
    tau: float = 2.0
    weights: np.ndarray | None = None
    teacher_probs_tau: np.ndarray | None = None
    prox_mu: float = 0.0
    prox_ref: ModelParams | None = None


@dataclass
class LossTerms:
    """Unscaled loss components plus the gradient of the scaled sum."""

    ce: float
    distill: float
    prox: float
    grad: Gradient
    spec: LossSpec = field(repr=False)

    @property
    def total(self) -> float:
        s = self.spec
        return s.ce_scale * self.ce + s.lam * self.distill + self.prox


_DUMMY_W = np.zeros(1)
_DUMMY_T = np.zeros((1, 1))


def backward_terms(params: ModelParams, batch: np.ndarray, labels: np.ndarray,
                   spec: LossSpec) -> LossTerms:
    """Exact loss components and gradient of the composite objective."""
    X = _as_batch(params, batch)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch {X.shape}")
    C = int(params.dims[-1])
    if (y < 0).any() or (y >= C).any():
        raise ValueError(f"labels out of range [0, {C})")
    if spec.tau <= 0:
        raise ValueError(f"temperature must be positive, got {spec.tau}")

    if spec.lam != 0.0:
        if spec.weights is None or spec.teacher_probs_tau is None:
            raise ValueError("lam != 0 requires weights and teacher_probs_tau")
        alpha = np.ascontiguousarray(spec.weights, dtype=np.float64)
        teacher = np.ascontiguousarray(spec.teacher_probs_tau, dtype=np.float64)
        if alpha.shape != (X.shape[0],):
            raise ShapeError(f"weights shape {alpha.shape} does not match batch")
        if teacher.shape != (X.shape[0], C):
            raise ShapeError(f"teacher shape {teacher.shape} does not match ({X.shape[0]}, {C})")
    else:
        alpha, teacher = _DUMMY_W, _DUMMY_T

    gtheta = np.empty(params.n_params)
    ce, distill = kernels.loss_and_grad(
        params.theta, params.dims, X, y,
        float(spec.ce_scale), float(spec.lam), float(spec.tau),
        alpha, teacher, gtheta,
    )

    prox = 0.0
    if spec.prox_mu != 0.0:
        if spec.prox_ref is None:
            raise ValueError("prox_mu != 0 requires prox_ref")
        if not params.same_shape(spec.prox_ref):
            raise ShapeError("prox_ref geometry differs from params")
        d = params.theta - spec.prox_ref.theta
        prox = 0.5 * float(spec.prox_mu) * float(d @ d)
        gtheta += spec.prox_mu * d

    return LossTerms(ce=ce, distill=distill, prox=prox,
                     grad=Gradient(params.dims, gtheta), spec=spec)


def backward(params: ModelParams, batch: np.ndarray, labels: np.ndarray,
             spec: LossSpec | None = None) -> tuple[float, Gradient]:
    """Mean composite loss over the batch and its exact gradient."""
    terms = backward_terms(params, batch, labels, spec or LossSpec())
    return terms.total, terms.grad


def sgd_step(params: ModelParams, grad: Gradient, lr: float) -> ModelParams:
    """One SGD update w <- w - lr * grad; returns new params."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not params.same_shape(grad):
        raise ShapeError("gradient geometry differs from params")
    return ModelParams(params.dims, params.theta - lr * grad.theta)


# --- persistence: JSON header line + raw little-endian float64 payload ---

_PARAMS_FORMAT = "fedsim-params"


def save_params(path, params: ModelParams) -> None:
    """Write params as a one-line JSON header plus little-endian float64 bytes."""
    header = {
        "format": _PARAMS_FORMAT,
        "version": 1,
        "dims": [int(d) for d in params.dims],
        "dtype": "<f8",
        "count": params.n_params,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(params.theta.astype("<f8", copy=False).tobytes())


def load_params(path) -> ModelParams:
    """Inverse of save_params; validates header and payload length."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: not a params file (bad header: {exc})") from exc
        if header.get("format") != _PARAMS_FORMAT:
            raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
        dims = np.asarray(header["dims"], dtype=np.int64)
        count = int(header["count"])
        payload = fh.read()
    if len(payload) != 8 * count:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, expected {8 * count}"
        )
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelParams(dims, theta)
