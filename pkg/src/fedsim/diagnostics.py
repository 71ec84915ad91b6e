"""Drift and flatness diagnostics.

Gradient dissimilarity over clients, the class-wise gradient decomposition
identity (raw-weight variant), and Hessian probes (finite-difference HVP,
power iteration, Hutchinson trace) that only need a gradient callable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, nn
from .data import ClientDataset, Dataset
from .regularizers import RegularizerSpec, batch_weights, build_teacher_cache

# Mean-gradient norms below this are reported as an infinite ratio.
GD_DENOM_FLOOR = 1e-18


@dataclass
class DriftReport:
    """Gradient dissimilarity (mean squared norm over squared mean norm)."""

    gd: float
    is_infinite: bool
    client_sq_norms: np.ndarray
    mean_grad_sq_norm: float
    lam: float
    round: int | None = None


@dataclass
class PowerResult:
    eigenvalue: float
    residual: float
    converged: bool
    iterations: int


@dataclass
class TraceResult:
    estimate: float
    stderr: float
    probes: int


@dataclass
class SpectralReport:
    """Curvature summary of a loss at one parameter point."""

    top_eigenvalue: float
    power_residual: float
    power_converged: bool
    power_iterations: int
    trace_estimate: float
    trace_stderr: float
    trace_probes: int

    def to_dict(self) -> dict:
        return {
            "top_eigenvalue": self.top_eigenvalue,
            "power_residual": self.power_residual,
            "power_converged": self.power_converged,
            "power_iterations": self.power_iterations,
            "trace_estimate": self.trace_estimate,
            "trace_stderr": self.trace_stderr,
            "trace_probes": self.trace_probes,
        }


def client_gradient(client: ClientDataset, params: nn.ModelParams,
                    teacher: nn.ModelParams, spec: RegularizerSpec,
                    lam: float | None = None) -> np.ndarray:
    """Exact full-shard gradient of one client's objective at ``params``.

    The shard is treated as a single batch: distillation weights are built
    (and, in normalized mode, normalized) over all of the client's samples.
    ``lam`` overrides ``spec.lam`` so the dissimilarity of a fixed point
    can be probed at arbitrary strengths.
    """
    eff_lam = spec.lam if lam is None else lam
    loss_spec = nn.LossSpec(tau=spec.tau)
    if spec.needs_teacher and eff_lam != 0.0:
        cache = build_teacher_cache(teacher, client.features, spec.tau, round_tag=0)
        loss_spec.lam = eff_lam
        loss_spec.weights = batch_weights(spec, cache.entropies, client.labels,
                                          client.label_dist)
        loss_spec.teacher_probs_tau = cache.probs_tau
    elif spec.kind == "prox" and spec.mu != 0.0:
        loss_spec.prox_mu = spec.mu
        loss_spec.prox_ref = teacher
    terms = nn.backward_terms(params, client.features, client.labels, loss_spec)
    return terms.grad.theta


def gradient_dissimilarity(client_grads, lam: float = 0.0,
                           round_idx: int | None = None) -> DriftReport:
    """Dissimilarity ratio of a set of client gradients at a common point.

    ``mean_k ||g_k||^2 / ||mean_k g_k||^2``; flagged infinite when the mean
    gradient is numerically zero. Accepts flat vectors or Gradient objects.
    """
    if len(client_grads) == 0:
        raise ValueError("need at least one client gradient")
    flats = np.stack([
        g.theta if isinstance(g, nn.ModelParams) else np.asarray(g, dtype=np.float64)
        for g in client_grads
    ])
    sq = np.einsum("ij,ij->i", flats, flats)
    mean_grad = flats.mean(axis=0)
    denom = float(mean_grad @ mean_grad)
    if denom < GD_DENOM_FLOOR:
        return DriftReport(gd=float("inf"), is_infinite=True, client_sq_norms=sq,
                           mean_grad_sq_norm=denom, lam=lam, round=round_idx)
    return DriftReport(gd=float(sq.mean() / denom), is_infinite=False,
                       client_sq_norms=sq, mean_grad_sq_norm=denom, lam=lam,
                       round=round_idx)


def measure_gd(clients: list[ClientDataset], params: nn.ModelParams,
               teacher: nn.ModelParams, spec: RegularizerSpec,
               lam: float | None = None, round_idx: int | None = None
               ) -> DriftReport:
    """Gradient dissimilarity of all clients' exact objectives at ``params``."""
    eff_lam = spec.lam if lam is None else lam
    grads = [client_gradient(c, params, teacher, spec, lam=eff_lam) for c in clients]
    return gradient_dissimilarity(grads, lam=eff_lam, round_idx=round_idx)


def classwise_gradient_check(client: ClientDataset, params: nn.ModelParams,
                             teacher: nn.ModelParams, lam: float,
                             tau: float = 2.0, weights_mode: str = "raw") -> float:
    """Max deviation between the direct objective gradient and its class-wise
    reconstruction ``sum_c p_c * (g_c + lam * (1/p_c) * gtilde_c)``.

    Only defined for the raw (un-normalized) weighting scheme, where the
    batch-level weight constant is absorbed into lam.
    """
    if weights_mode != "raw":
        raise ValueError(
            "class-wise gradient decomposition requires weights_mode='raw'; "
            f"got {weights_mode!r}"
        )
    spec = RegularizerSpec(kind="asd", lam=lam, tau=tau, weights_mode="raw")
    direct = client_gradient(client, params, teacher, spec)

    cache = build_teacher_cache(teacher, client.features, tau, round_tag=0)
    recon = np.zeros_like(direct)
    p = client.label_dist
    for c in range(client.num_classes):
        if p[c] <= 0:
            continue
        rows = np.flatnonzero(client.labels == c)
        Xc = client.features[rows]
        yc = client.labels[rows]
        g_c = nn.backward_terms(params, Xc, yc, nn.LossSpec(tau=tau)).grad.theta
        gt_c = nn.backward_terms(
            params, Xc, yc,
            nn.LossSpec(ce_scale=0.0, lam=1.0, tau=tau,
                        weights=np.exp(-cache.entropies[rows]),
                        teacher_probs_tau=cache.probs_tau[rows]),
        ).grad.theta
        gamma = 1.0 / p[c]
        recon += p[c] * (g_c + lam * gamma * gt_c)
    return float(np.abs(direct - recon).max())


def classwise_cosine_stats(client: ClientDataset, params: nn.ModelParams,
                           teacher: nn.ModelParams, tau: float = 2.0
                           ) -> tuple[float, float]:
    """Mean |cosine| between per-class gradient components (measured only).

    Returns (ce_mean_abs_cos, distill_mean_abs_cos) over unordered class
    pairs present on the client. Reported for inspection; nothing asserts it.
    """
    cache = build_teacher_cache(teacher, client.features, tau, round_tag=0)
    g_ce, g_dt = [], []
    for c in range(client.num_classes):
        rows = np.flatnonzero(client.labels == c)
        if rows.size == 0:
            continue
        Xc = client.features[rows]
        yc = client.labels[rows]
        g_ce.append(nn.backward_terms(params, Xc, yc, nn.LossSpec(tau=tau)).grad.theta)
        g_dt.append(nn.backward_terms(
            params, Xc, yc,
            nn.LossSpec(ce_scale=0.0, lam=1.0, tau=tau,
                        weights=np.exp(-cache.entropies[rows]),
                        teacher_probs_tau=cache.probs_tau[rows]),
        ).grad.theta)

    def mean_abs_cos(vecs: list[np.ndarray]) -> float:
        cos = []
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                ni = np.linalg.norm(vecs[i])
                nj = np.linalg.norm(vecs[j])
                if ni > 0 and nj > 0:
                    cos.append(abs(float(vecs[i] @ vecs[j])) / (ni * nj))
        return float(np.mean(cos)) if cos else 0.0

    return mean_abs_cos(g_ce), mean_abs_cos(g_dt)


def hvp(grad_fn, theta: np.ndarray, v: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Hessian-vector product by central differences of exact gradients.

    The probe offset is ``step / ||v||`` so the perturbation magnitude is
    independent of the scale of v.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise nn.ShapeError(f"probe shape {v.shape} does not match params {theta.shape}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("probe vector must be nonzero")
    eps = step / norm
    out = (grad_fn(theta + eps * v) - grad_fn(theta - eps * v)) / (2.0 * eps)
    if not np.isfinite(out).all():
        raise ArithmeticError("non-finite Hessian-vector product")
    return out


def top_eigenvalue(grad_fn, theta: np.ndarray, iters: int = 100,
                   tol: float = 1e-3, step: float = 1e-4, seed: int = 0
                   ) -> PowerResult:
    """Dominant Hessian eigenvalue by power iteration on HVPs.

    Convergence means the Rayleigh residual ``||Hv - eig*v||`` dropped below
    ``tol * |eig|``. A non-converged result is still returned, flagged.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=theta.shape[0])
    v /= np.linalg.norm(v)
    eig = 0.0
    residual = float("inf")
    for it in range(1, iters + 1):
        Hv = hvp(grad_fn, theta, v, step)
        eig = float(v @ Hv)
        residual = float(np.linalg.norm(Hv - eig * v))
        if residual <= tol * abs(eig):
            return PowerResult(eig, residual, True, it)
        nv = float(np.linalg.norm(Hv))
        if nv == 0.0:
            return PowerResult(0.0, 0.0, True, it)
        v = Hv / nv
    return PowerResult(eig, residual, False, iters)


def hessian_trace(grad_fn, theta: np.ndarray, probes: int = 1000,
                  step: float = 1e-4, seed: int = 0) -> TraceResult:
    """Hutchinson trace estimate with Rademacher probes (mean of v'Hv)."""
    if probes < 1:
        raise ValueError(f"probes must be >= 1, got {probes}")
    rng = np.random.default_rng(seed)
    n = theta.shape[0]
    vals = np.empty(probes)
    for i in range(probes):
        v = rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
        vals[i] = float(v @ hvp(grad_fn, theta, v, step))
    stderr = float(vals.std(ddof=1) / np.sqrt(probes)) if probes > 1 else 0.0
    return TraceResult(estimate=float(vals.mean()), stderr=stderr, probes=probes)


_DUMMY_W = np.zeros(1)
_DUMMY_T = np.zeros((1, 1))


def ce_grad_fn(ds: Dataset, dims: np.ndarray):
    """Gradient callable of the mean cross-entropy over a fixed split."""
    X = np.ascontiguousarray(ds.features)
    y = np.ascontiguousarray(ds.labels)
    dims = np.ascontiguousarray(dims, dtype=np.int64)

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        g = np.empty_like(theta)
        kernels.loss_and_grad(np.ascontiguousarray(theta), dims, X, y,
                              1.0, 0.0, 1.0, _DUMMY_W, _DUMMY_T, g)
        return g

    return grad_fn


def spectral_report(params: nn.ModelParams, eval_ds: Dataset,
                    iters: int = 100, tol: float = 1e-3, probes: int = 1000,
                    step: float = 1e-4, seed: int = 0) -> SpectralReport:
    """Curvature of the CE loss over an evaluation split at ``params``."""
    grad_fn = ce_grad_fn(eval_ds, params.dims)
    power = top_eigenvalue(grad_fn, params.theta, iters=iters, tol=tol,
                           step=step, seed=seed)
    trace = hessian_trace(grad_fn, params.theta, probes=probes, step=step,
                          seed=seed + 1)
    return SpectralReport(
        top_eigenvalue=power.eigenvalue,
        power_residual=power.residual,
        power_converged=power.converged,
        power_iterations=power.iterations,
        trace_estimate=trace.estimate,
        trace_stderr=trace.stderr,
        trace_probes=trace.probes,
    )
