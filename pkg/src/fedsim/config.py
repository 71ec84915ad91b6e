"""Flat ``key = value`` experiment files.

UTF-8 text, one assignment per line, ``#`` starts a comment. Unknown keys,
duplicate keys and malformed values are rejected with line numbers. Parsing
fills every omitted key with its default and resolves derived seeds, so the
echoed config is complete; ``parse_config(emit_config(cfg)) == cfg``.
"""

from __future__ import annotations

import io

from .engine import RunConfig
from .regularizers import KINDS, RegularizerSpec, WEIGHT_MODES


class ConfigError(ValueError):
    """An experiment file (or assembled config) is invalid."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean (true/false), got {s!r}")


def _parse_int(s: str) -> int:
    return int(s.strip())


def _parse_float(s: str) -> float:
    return float(s.strip())


def _parse_str(s: str) -> str:
    return s.strip()


def _parse_choice(options):
    def parse(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {s!r}")
        return v
    return parse


def _parse_hidden(s: str) -> tuple[int, ...]:
    v = s.strip()
    if not v:
        return ()
    try:
        return tuple(int(part.strip()) for part in v.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {s!r}") from None


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _fmt_hidden(v) -> str:
    return ",".join(str(int(h)) for h in v)


def _fmt_plain(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# key -> (parser, formatter, config attribute or regularizer field)
_REG_FIELDS = {"regularizer": "kind", "lambda": "lam", "tau": "tau", "mu": "mu",
               "weights": "weights_mode"}

_SCHEMA: dict[str, tuple] = {
    "seed": (_parse_int, _fmt_plain),
    "num_clients": (_parse_int, _fmt_plain),
    "participation_rate": (_parse_float, _fmt_plain),
    "rounds": (_parse_int, _fmt_plain),
    "local_epochs": (_parse_int, _fmt_plain),
    "batch_size": (_parse_int, _fmt_plain),
    "lr": (_parse_float, _fmt_plain),
    "lr_decay_per_round": (_parse_float, _fmt_plain),
    "regularizer": (_parse_choice(KINDS), _fmt_plain),
    "lambda": (_parse_float, _fmt_plain),
    "tau": (_parse_float, _fmt_plain),
    "mu": (_parse_float, _fmt_plain),
    "weights": (_parse_choice(WEIGHT_MODES), _fmt_plain),
    "delta": (_parse_float, _fmt_plain),
    "balanced": (_parse_bool, _fmt_bool),
    "partition_seed": (_parse_int, _fmt_plain),
    "data_seed": (_parse_int, _fmt_plain),
    "dataset": (_parse_choice(("synthetic", "idx")), _fmt_plain),
    "num_classes": (_parse_int, _fmt_plain),
    "input_dim": (_parse_int, _fmt_plain),
    "train_per_class": (_parse_int, _fmt_plain),
    "test_per_class": (_parse_int, _fmt_plain),
    "spread": (_parse_float, _fmt_plain),
    "hidden": (_parse_hidden, _fmt_hidden),
    "sampling": (_parse_choice(("bernoulli", "fixed")), _fmt_plain),
    "gd_every": (_parse_int, _fmt_plain),
    "spectral": (_parse_bool, _fmt_bool),
    "spectral_probes": (_parse_int, _fmt_plain),
    "spectral_iters": (_parse_int, _fmt_plain),
    "spectral_tol": (_parse_float, _fmt_plain),
    "spectral_seed": (_parse_int, _fmt_plain),
    "save_model": (_parse_bool, _fmt_bool),
    "idx_train_images": (_parse_str, _fmt_plain),
    "idx_train_labels": (_parse_str, _fmt_plain),
    "idx_test_images": (_parse_str, _fmt_plain),
    "idx_test_labels": (_parse_str, _fmt_plain),
}


def parse_raw_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse experiment-file text into typed key/value pairs (no defaults)."""
    values: dict[str, object] = {}
    first_line: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in first_line:
            raise ConfigError(
                f"{source}:{lineno}: duplicate key {key!r} "
                f"(first set on line {first_line[key]})"
            )
        first_line[key] = lineno
        parser = _SCHEMA[key][0]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse experiment-file text into a fully resolved RunConfig."""
    return build_config(parse_raw_text(text, source), source)


def parse_config_raw(path) -> dict[str, object]:
    """Read an experiment file as typed key/value pairs without defaulting."""
    with io.open(path, "r", encoding="utf-8") as fh:
        return parse_raw_text(fh.read(), source=str(path))


def parse_config(path) -> RunConfig:
    """Read and parse an experiment file."""
    with io.open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def build_config(values: dict[str, object], source: str = "<config>") -> RunConfig:
    """Assemble a RunConfig from parsed key/value pairs and validate it."""
    reg_kwargs = {}
    cfg_kwargs = {}
    for key, val in values.items():
        if key in _REG_FIELDS:
            reg_kwargs[_REG_FIELDS[key]] = val
        else:
            cfg_kwargs[key] = val
    try:
        cfg = RunConfig(regularizer=RegularizerSpec(**reg_kwargs), **cfg_kwargs)
        cfg = cfg.resolved()
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def config_items(cfg: RunConfig) -> list[tuple[str, str]]:
    """Canonical (key, formatted value) pairs for the full effective config."""
    out = []
    for key, (_, fmt) in _SCHEMA.items():
        if key in _REG_FIELDS:
            val = getattr(cfg.regularizer, _REG_FIELDS[key])
        else:
            val = getattr(cfg, key)
        out.append((key, fmt(val)))
    return out


def emit_config(cfg: RunConfig) -> str:
    """Render the full effective config as experiment-file text."""
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg))


def config_dict(cfg: RunConfig) -> dict[str, object]:
    """JSON-friendly view of the full effective config."""
    out: dict[str, object] = {}
    for key, _ in _SCHEMA.items():
        if key in _REG_FIELDS:
            out[key] = getattr(cfg.regularizer, _REG_FIELDS[key])
        else:
            val = getattr(cfg, key)
            out[key] = list(val) if isinstance(val, tuple) else val
    return out
