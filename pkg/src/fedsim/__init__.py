"""Deterministic federated-learning simulator.

Dense-network clients trained with SGD under a configurable client
regularizer (adaptive self-distillation variants or a proximal term), plus
drift and flatness diagnostics and a small CLI.
"""

__version__ = "0.1.0"

from .data import (ClientDataset, Dataset, PartitionSpec, dirichlet_partition,
                   empirical_label_dist, gen_synthetic_mixture, load_idx,
                   mixture_train_test)
from .diagnostics import (DriftReport, SpectralReport, gradient_dissimilarity,
                          hessian_trace, hvp, measure_gd, spectral_report,
                          top_eigenvalue)
from .engine import (DivergenceError, RoundMetrics, RunConfig, RunResult,
                     ServerState, aggregate, evaluate, local_train,
                     per_class_drift, run, sample_clients)
from .nn import (Gradient, LossSpec, ModelParams, backward, cross_entropy,
                 entropy, forward, init_params, kl_divergence, load_params,
                 save_params, sgd_step, softmax_temp)
from .regularizers import (RegularizerSpec, StaleTeacherCacheError,
                           TeacherCache, asd_loss, asd_weights_normalize,
                           asd_weights_raw, build_teacher_cache, prox_loss)
from .config import ConfigError, emit_config, parse_config, parse_config_text

__all__ = [
    "__version__",
    "ClientDataset", "Dataset", "PartitionSpec", "dirichlet_partition",
    "empirical_label_dist", "gen_synthetic_mixture", "load_idx",
    "mixture_train_test",
    "DriftReport", "SpectralReport", "gradient_dissimilarity", "hessian_trace",
    "hvp", "measure_gd", "spectral_report", "top_eigenvalue",
    "DivergenceError", "RoundMetrics", "RunConfig", "RunResult", "ServerState",
    "aggregate", "evaluate", "local_train", "per_class_drift", "run",
    "sample_clients",
    "Gradient", "LossSpec", "ModelParams", "backward", "cross_entropy",
    "entropy", "forward", "init_params", "kl_divergence", "load_params",
    "save_params", "sgd_step", "softmax_temp",
    "RegularizerSpec", "StaleTeacherCacheError", "TeacherCache", "asd_loss",
    "asd_weights_normalize", "asd_weights_raw", "build_teacher_cache",
    "prox_loss",
    "ConfigError", "emit_config", "parse_config", "parse_config_text",
]
