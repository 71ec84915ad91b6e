"""Client-side regularizers: self-distillation variants and a proximal term.

The distillation loss on a batch is ``(1/B) * sum_i alpha_i *
KL(q_g(x_i) || q_k(x_i))`` where q_g comes from the frozen round-start global
model (the teacher) and q_k from the student, both at temperature tau. The
per-sample weights alpha depend only on the teacher and the client's label
counts, so they are constants during local training:

* ``asd``              alpha_hat_i = exp(-H(x_i)) / p_k[y_i]
* ``asd_entropy_only`` alpha_hat_i = exp(-H(x_i))
* ``asd_label_only``   alpha_hat_i = 1 / p_k[y_i]
* ``sd_uniform``       alpha_i = 1 (no normalization)

H is the teacher's prediction entropy at temperature 1; p_k is the client's
empirical label distribution. Adaptive kinds normalize alpha_hat to sum to 1
over the batch unless ``weights_mode='raw'`` (the scale-absorbed variant used
by the class-wise gradient identity checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, nn

DISTILL_KINDS = ("asd", "asd_entropy_only", "asd_label_only", "sd_uniform")
KINDS = ("none",) + DISTILL_KINDS + ("prox",)
WEIGHT_MODES = ("normalized", "raw")


class StaleTeacherCacheError(RuntimeError):
    """A teacher cache from a different round was offered to local training."""


@dataclass(frozen=True)
class RegularizerSpec:
    """Which client regularizer to apply and with what strengths."""

    kind: str = "asd"
    lam: float = 20.0
    tau: float = 2.0
    mu: float = 1e-4
    weights_mode: str = "normalized"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.weights_mode not in WEIGHT_MODES:
            raise ValueError(
                f"unknown weights_mode {self.weights_mode!r}; expected one of {WEIGHT_MODES}"
            )

    @property
    def needs_teacher(self) -> bool:
        return self.kind in DISTILL_KINDS


@dataclass
class TeacherCache:
    """Frozen per-sample teacher state, built once per (client, round).

    Holds the teacher's temperature-tau distribution, its temperature-1
    distribution, and the entropy of the latter for every sample of the
    client's shard. ``round_tag`` guards against reuse across rounds.
    """

    probs_tau: np.ndarray
    probs_t1: np.ndarray
    entropies: np.ndarray
    round_tag: int

    def require_round(self, expected: int) -> None:
        if self.round_tag != expected:
            raise StaleTeacherCacheError(
                f"teacher cache built for round {self.round_tag}, "
                f"used in round {expected}"
            )


def build_teacher_cache(global_params: nn.ModelParams, features: np.ndarray,
                        tau: float, round_tag: int) -> TeacherCache:
    """Single forward pass of the teacher over a client's full shard."""
    logits = nn.forward(global_params, features)
    probs_tau = kernels.softmax_rows(logits, tau)
    probs_t1 = kernels.softmax_rows(logits, 1.0)
    entropies = kernels.entropy_rows(probs_t1)
    return TeacherCache(probs_tau, probs_t1, entropies, round_tag)


def asd_weights_raw(entropies: np.ndarray, labels: np.ndarray,
                    label_dist: np.ndarray) -> np.ndarray:
    """Un-normalized adaptive weights exp(-H_i) / p_k[y_i]."""
    entropies = np.asarray(entropies, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    p = np.asarray(label_dist, dtype=np.float64)[labels]
    if (p <= 0).any():
        bad = labels[p <= 0][0]
        raise RuntimeError(
            f"sample carries label {bad} with zero empirical frequency; "
            "label_dist is inconsistent with the shard"
        )
    return np.exp(-entropies) / p


def asd_weights_normalize(raw: np.ndarray) -> np.ndarray:
    """Normalize raw weights to sum to 1 over the batch."""
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if not (total > 0):
        raise ValueError(f"weights sum to {total}; expected a positive total")
    return raw / total


def batch_weights(spec: RegularizerSpec, entropies: np.ndarray,
                  labels: np.ndarray, label_dist: np.ndarray) -> np.ndarray:
    """Per-sample distillation weights for one batch under the given kind."""
    if spec.kind == "sd_uniform":
        return np.ones(np.asarray(labels).shape[0])
    if spec.kind == "asd":
        raw = asd_weights_raw(entropies, labels, label_dist)
    elif spec.kind == "asd_entropy_only":
        raw = np.exp(-np.asarray(entropies, dtype=np.float64))
    elif spec.kind == "asd_label_only":
        p = np.asarray(label_dist, dtype=np.float64)[np.asarray(labels, dtype=np.int64)]
        if (p <= 0).any():
            raise RuntimeError("sample carries a label with zero empirical frequency")
        raw = 1.0 / p
    else:
        raise ValueError(f"kind {spec.kind!r} has no distillation weights")
    if spec.weights_mode == "raw":
        return raw
    return asd_weights_normalize(raw)


def asd_loss(spec: RegularizerSpec, cache: TeacherCache,
             student_probs_tau: np.ndarray, labels: np.ndarray,
             label_dist: np.ndarray, rows: np.ndarray | None = None,
             expected_round: int | None = None) -> tuple[float, np.ndarray]:
    """Weighted distillation loss for a batch; returns (loss, weights).

    ``rows`` selects the cache entries matching the batch (defaults to the
    whole shard). ``expected_round`` enforces cache freshness when given.
    """
    if spec.kind not in DISTILL_KINDS:
        raise ValueError(f"kind {spec.kind!r} is not a distillation regularizer")
    if expected_round is not None:
        cache.require_round(expected_round)
    teacher = cache.probs_tau if rows is None else cache.probs_tau[rows]
    ent = cache.entropies if rows is None else cache.entropies[rows]
    student = np.ascontiguousarray(student_probs_tau, dtype=np.float64)
    if student.shape != teacher.shape:
        raise nn.ShapeError(
            f"student probs shape {student.shape} does not match teacher {teacher.shape}"
        )
    weights = batch_weights(spec, ent, labels, label_dist)
    kl = kernels.kl_rows(np.ascontiguousarray(teacher), student)
    loss = float((weights * kl).sum() / student.shape[0])
    return loss, weights


def prox_loss(params: nn.ModelParams, global_params: nn.ModelParams,
              mu: float) -> tuple[float, nn.Gradient]:
    """Proximal penalty (mu/2) * ||w - w_global||^2 and its gradient."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if not params.same_shape(global_params):
        raise nn.ShapeError("prox reference geometry differs from params")
    d = params.theta - global_params.theta
    return 0.5 * mu * float(d @ d), nn.Gradient(params.dims, mu * d)
