"""Federated round loop: sampling, local SGD, aggregation, evaluation.

Determinism contract: every random stream is derived from the run seed with a
fixed tag, and each (round, client) pair gets its own generator. Client
training is a pure function of (broadcast params, shard, round stream), and
aggregation always iterates clients in ascending id order, so results do not
depend on how many workers execute the round (``FEDSIM_WORKERS``).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math
import os
import time

import numpy as np

from . import diagnostics, kernels, nn
from .data import (ClientDataset, Dataset, PartitionSpec, dirichlet_partition,
                   load_idx, mixture_train_test, standardize)
from .regularizers import RegularizerSpec, batch_weights, build_teacher_cache

WORKERS_ENV = "FEDSIM_WORKERS"

# Stream tags keep the independent RNG families from colliding.
_TAG_INIT = 1
_TAG_SAMPLE = 2
_TAG_CLIENT = 3
_TAG_SPECTRAL = 4
_SEED_STRIDE = 1_000_003  # derived default seeds: seed + k * stride


class DivergenceError(RuntimeError):
    """Local training produced a non-finite loss."""


@dataclass
class RunConfig:
    """Everything a run needs; mirrors the flat experiment-file keys."""

    seed: int = 0
    num_clients: int = 20
    participation_rate: float = 0.2
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 50
    lr: float = 0.1
    lr_decay_per_round: float = 0.998
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    delta: float = 0.3
    balanced: bool = True
    partition_seed: int = -1
    data_seed: int = -1
    dataset: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 20
    train_per_class: int = 200
    test_per_class: int = 100
    spread: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    sampling: str = "bernoulli"
    gd_every: int = 10
    spectral: bool = False
    spectral_probes: int = 1000
    spectral_iters: int = 100
    spectral_tol: float = 1e-3
    spectral_seed: int = -1
    save_model: bool = True
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""

    def resolved(self) -> "RunConfig":
        """Copy with derived default seeds filled in (negative = derive)."""
        out = replace(
            self,
            partition_seed=self.partition_seed if self.partition_seed >= 0
            else self.seed + 2 * _SEED_STRIDE,
            data_seed=self.data_seed if self.data_seed >= 0
            else self.seed + _SEED_STRIDE,
            spectral_seed=self.spectral_seed if self.spectral_seed >= 0
            else self.seed + 3 * _SEED_STRIDE,
        )
        out.hidden = tuple(int(h) for h in self.hidden)
        return out

    def validate(self) -> None:
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not (0 < self.participation_rate <= 1):
            raise ValueError(
                f"participation_rate must be in (0, 1], got {self.participation_rate}"
            )
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr > 0):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 < self.lr_decay_per_round <= 1):
            raise ValueError(
                f"lr_decay_per_round must be in (0, 1], got {self.lr_decay_per_round}"
            )
        if self.dataset not in ("synthetic", "idx"):
            raise ValueError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.sampling not in ("bernoulli", "fixed"):
            raise ValueError(f"sampling must be 'bernoulli' or 'fixed', got {self.sampling!r}")
        if self.gd_every < 0:
            raise ValueError(f"gd_every must be >= 0, got {self.gd_every}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.spectral_probes < 1 or self.spectral_iters < 1:
            raise ValueError("spectral_probes and spectral_iters must be >= 1")
        if not (self.spectral_tol > 0):
            raise ValueError(f"spectral_tol must be positive, got {self.spectral_tol}")
        if self.dataset == "idx" and not self.idx_train_images:
            raise ValueError("dataset=idx requires idx_train_images")

    @property
    def partition(self) -> PartitionSpec:
        return PartitionSpec(self.num_clients, self.delta, self.balanced,
                             self.partition_seed)


@dataclass
class ServerState:
    """Broadcast model plus each client's latest locally trained params."""

    global_params: nn.ModelParams
    client_params: list[nn.ModelParams]
    round: int
    sampler_rng: np.random.Generator


@dataclass
class RoundMetrics:
    round: int
    test_acc_global: float
    test_acc_allavg: float
    ce_loss: float
    asd_loss: float
    gd: float | None
    lr: float
    sampled: tuple[int, ...]
    wall_time: float
    weight_sum_dev: float

    @property
    def sampled_count(self) -> int:
        return len(self.sampled)


@dataclass
class LocalStats:
    ce_mean: float
    reg_mean: float
    weight_sum_dev: float
    n_batches: int


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    state: ServerState
    clients: list[ClientDataset]
    test: Dataset
    config: RunConfig

    @property
    def final_global(self) -> nn.ModelParams:
        return self.state.global_params


def client_round_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    """Private stream for one client's work in one round."""
    return np.random.default_rng(
        np.random.SeedSequence([_TAG_CLIENT, seed, round_idx, client_id])
    )


def sample_clients(num_clients: int, rate: float, rng: np.random.Generator,
                   mode: str = "bernoulli") -> np.ndarray:
    """Pick this round's participants; never returns an empty set."""
    if not (0 < rate <= 1):
        raise ValueError(f"participation rate must be in (0, 1], got {rate}")
    if mode == "fixed":
        size = max(1, int(round(rate * num_clients)))
        return np.sort(rng.choice(num_clients, size=size, replace=False))
    if mode != "bernoulli":
        raise ValueError(f"unknown sampling mode {mode!r}")
    while True:
        mask = rng.random(num_clients) < rate
        if mask.any():
            return np.flatnonzero(mask)


def aggregate(models: list[nn.ModelParams]) -> nn.ModelParams:
    """Elementwise mean of parameter vectors."""
    if not models:
        raise ValueError("cannot aggregate an empty model list")
    first = models[0]
    for m in models[1:]:
        if not first.same_shape(m):
            raise nn.ShapeError("aggregation requires identical geometries")
    stacked = np.stack([m.theta for m in models])
    return nn.ModelParams(first.dims.copy(), stacked.mean(axis=0))


def evaluate_params(params: nn.ModelParams, test: Dataset) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    logits = nn.forward(params, test.features)
    pred = np.argmax(logits, axis=1)
    return float((pred == test.labels).mean())


def evaluate(state: ServerState, test: Dataset, mode: str = "global") -> float:
    """Accuracy of the broadcast model or of the average of all clients."""
    if mode == "global":
        return evaluate_params(state.global_params, test)
    if mode == "all_client_avg":
        return evaluate_params(aggregate(state.client_params), test)
    raise ValueError(f"unknown evaluation mode {mode!r}")


def per_class_accuracy(params: nn.ModelParams, test: Dataset) -> np.ndarray:
    """Accuracy per true class; NaN for classes absent from the test set."""
    logits = nn.forward(params, test.features)
    pred = np.argmax(logits, axis=1)
    out = np.full(test.num_classes, np.nan)
    for c in range(test.num_classes):
        mask = test.labels == c
        if mask.any():
            out[c] = float((pred[mask] == c).mean())
    return out


_DUMMY_W = np.zeros(1)
_DUMMY_T = np.zeros((1, 1))


def local_train(client: ClientDataset, global_params: nn.ModelParams,
                cfg: RunConfig, round_idx: int, lr_round: float | None = None
                ) -> tuple[nn.ModelParams, LocalStats]:
    """Epochs of shuffled minibatch SGD from a copy of the broadcast model.

    The teacher (broadcast params) is never mutated; the distillation cache is
    built once per round over the full shard. Raises DivergenceError naming
    the round/client/batch on a non-finite loss.
    """
    spec = cfg.regularizer
    if lr_round is None:
        lr_round = cfg.lr * cfg.lr_decay_per_round ** round_idx
    rng = client_round_rng(cfg.seed, round_idx, client.client_id)

    theta = global_params.theta.copy()
    theta0 = global_params.theta
    dims = global_params.dims
    grad = np.empty_like(theta)

    # lam == 0 must reproduce plain FedAvg bit-for-bit, so the distillation
    # branch is skipped entirely rather than multiplied by zero.
    distill = spec.needs_teacher and spec.lam != 0.0
    prox = spec.kind == "prox" and spec.mu != 0.0
    cache = None
    if distill:
        cache = build_teacher_cache(global_params, client.features, spec.tau, round_idx)

    adaptive = spec.kind in ("asd", "asd_entropy_only", "asd_label_only")
    track_dev = distill and adaptive and spec.weights_mode == "normalized"

    n = client.n
    B = cfg.batch_size
    ce_sum = 0.0
    reg_sum = 0.0
    dev_max = 0.0
    n_batches = 0
    for epoch in range(cfg.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, B):
            idx = perm[start:start + B]
            X = client.features[idx]
            y = client.labels[idx]
            if distill:
                cache.require_round(round_idx)
                alpha = batch_weights(spec, cache.entropies[idx], y, client.label_dist)
                teacher = np.ascontiguousarray(cache.probs_tau[idx])
                if track_dev:
                    dev_max = max(dev_max, abs(float(alpha.sum()) - 1.0))
                ce, reg = kernels.loss_and_grad(
                    theta, dims, X, y, 1.0, spec.lam, spec.tau, alpha, teacher, grad)
                loss = ce + spec.lam * reg
            else:
                ce, _ = kernels.loss_and_grad(
                    theta, dims, X, y, 1.0, 0.0, spec.tau, _DUMMY_W, _DUMMY_T, grad)
                reg = 0.0
                loss = ce
            if prox:
                d = theta - theta0
                reg = 0.5 * spec.mu * float(d @ d)
                loss += reg
                grad += spec.mu * d
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss in round {round_idx}, client "
                    f"{client.client_id}, epoch {epoch}, batch {start // B}"
                )
            ce_sum += ce
            reg_sum += reg
            n_batches += 1
            theta -= lr_round * grad

    # the loss check above runs before each step, so an overflow on the very
    # last update would otherwise escape unnamed
    if not np.isfinite(theta).all():
        raise DivergenceError(
            f"non-finite parameters after round {round_idx}, "
            f"client {client.client_id}"
        )
    stats = LocalStats(ce_mean=ce_sum / n_batches, reg_mean=reg_sum / n_batches,
                       weight_sum_dev=dev_max, n_batches=n_batches)
    return nn.ModelParams(dims.copy(), theta), stats


def per_class_drift(client: ClientDataset, global_params: nn.ModelParams,
                    cfg: RunConfig, test: Dataset, round_idx: int = 0
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Per-class test-accuracy change caused by one client's local training.

    Returns (after - before, client label distribution).
    """
    before = per_class_accuracy(global_params, test)
    trained, _ = local_train(client, global_params, cfg, round_idx)
    after = per_class_accuracy(trained, test)
    return after - before, client.label_dist.copy()


def prepare_data(cfg: RunConfig) -> tuple[list[ClientDataset], Dataset]:
    """Build the train partition and the test split for a run."""
    if cfg.dataset == "synthetic":
        train, test = mixture_train_test(
            cfg.num_classes, cfg.input_dim, cfg.train_per_class,
            cfg.test_per_class, cfg.spread, cfg.data_seed)
    else:
        train = load_idx(cfg.idx_train_images, cfg.idx_train_labels or None)
        test = load_idx(cfg.idx_test_images, cfg.idx_test_labels or None)
        C = max(train.num_classes, test.num_classes)
        train = Dataset(train.features, train.labels, C)
        test = Dataset(test.features, test.labels, C)
        train, test = standardize(train, test)
    clients = dirichlet_partition(train, cfg.partition)
    return clients, test


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return 1
    workers = int(raw)
    if workers < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1, got {raw!r}")
    return workers


def run(cfg: RunConfig, on_round=None) -> RunResult:
    """Full federated run; invokes ``on_round(metrics)`` as rounds complete."""
    cfg = cfg.resolved()
    cfg.validate()
    clients, test = prepare_data(cfg)
    dims = np.array([test.dim, *cfg.hidden, test.num_classes], dtype=np.int64)

    global_params = nn.init_params(
        dims, np.random.default_rng(np.random.SeedSequence([_TAG_INIT, cfg.seed])))
    state = ServerState(
        global_params=global_params,
        client_params=[global_params.copy() for _ in range(cfg.num_clients)],
        round=0,
        sampler_rng=np.random.default_rng(np.random.SeedSequence([_TAG_SAMPLE, cfg.seed])),
    )

    workers = _worker_count()
    metrics: list[RoundMetrics] = []
    for t in range(cfg.rounds):
        t0 = time.perf_counter()
        lr_t = cfg.lr * cfg.lr_decay_per_round ** t
        sampled = sample_clients(cfg.num_clients, cfg.participation_rate,
                                 state.sampler_rng, cfg.sampling)
        broadcast = state.global_params

        def train_one(k: int):
            return local_train(clients[k], broadcast, cfg, t, lr_t)

        if workers > 1 and len(sampled) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(train_one, sampled))
        else:
            results = [train_one(k) for k in sampled]

        new_global = aggregate([params for params, _ in results])
        for k, (params, _) in zip(sampled, results):
            state.client_params[int(k)] = params
        state.global_params = new_global
        state.round = t + 1

        gd = None
        if cfg.gd_every and (t + 1) % cfg.gd_every == 0:
            # Dissimilarity of the exact client objectives at the freshly
            # aggregated point, teacher fixed at this round's broadcast.
            report = diagnostics.measure_gd(clients, new_global, broadcast,
                                            cfg.regularizer)
            gd = math.inf if report.is_infinite else report.gd

        stats = [s for _, s in results]
        m = RoundMetrics(
            round=t,
            test_acc_global=evaluate(state, test, "global"),
            test_acc_allavg=evaluate(state, test, "all_client_avg"),
            ce_loss=float(np.mean([s.ce_mean for s in stats])),
            asd_loss=float(np.mean([s.reg_mean for s in stats])),
            gd=gd,
            lr=lr_t,
            sampled=tuple(int(k) for k in sampled),
            wall_time=time.perf_counter() - t0,
            weight_sum_dev=max((s.weight_sum_dev for s in stats), default=0.0),
        )
        metrics.append(m)
        if on_round is not None:
            on_round(m)

    return RunResult(metrics=metrics, state=state, clients=clients, test=test,
                     config=cfg)
