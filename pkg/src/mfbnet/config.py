"""``key = value`` run configuration shared by every CLI command.

One setting per line, ``#`` starts a comment line, no nesting. Unknown keys
are rejected. :func:`emit` writes every key in declaration order, so
``emit(parse(text))`` is the canonical form of ``text``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .bench import DEFAULT_GRID, format_grid
from .errors import ConfigurationError


def _key(default, doc):
    return field(default=default, metadata={"doc": doc})


@dataclass(frozen=True)
class RunConfig:
    # shared
    seed: int = _key(0, "master seed for data, initialization, dropout and suite instances")
    # gradcheck
    tol: float = _key(1e-4, "relative-error tolerance of the gradient suite")
    step: float = _key(1e-3, "central-difference step")
    kink_margin: float = _key(0.05, "minimum |input| to the signed sqrt at a gradient-check point")
    relu_margin: float = _key(0.01, "minimum |input| to relu at a gradient-check point")
    fd_agreement: float = _key(1e-4, "max relative gap between step-2h and step-h differences at a check point")
    # equivalence
    instances: int = _key(100, "random instances per equivalence suite")
    max_dim: int = _key(8, "largest m and n drawn for equivalence instances")
    max_k: int = _key(4, "largest factor count k drawn")
    max_o: int = _key(4, "largest output width o drawn")
    fault: float = _key(0.0, "perturbation added to one MFB weight per instance (fault injection)")
    # model
    architecture: str = _key("coatt", "coatt | baseline")
    fusion: str = _key("mfb", "mfb | mlb | mcb | concat")
    k: int = _key(5, "MFB factor count (forced to 1 for other fusions)")
    o: int = _key(32, "width of the final fused feature (sketch size for mcb)")
    att_o: int = _key(32, "width of the fused feature inside image attention")
    glimpses: int = _key(2, "attention maps per head")
    hidden: int = _key(32, "LSTM hidden units per layer")
    embed_dim: int = _key(16, "word embedding width")
    att_hidden: int = _key(32, "hidden width of the attention heads")
    power_norm: bool = _key(True, "signed square root after fusion")
    l2_norm: bool = _key(True, "l2 normalization after fusion")
    sketch_seed: int = _key(0, "seed of the count-sketch hash maps")
    # synthetic task
    grid: int = _key(16, "grid cells per image")
    max_len: int = _key(6, "question length T")
    colors: int = _key(4, "distinct cell colors (answer classes used)")
    answers: int = _key(4, "classifier width N")
    extra_dims: int = _key(4, "zero-mean noise dims appended to each grid feature")
    train_samples: int = _key(2000, "training examples")
    test_samples: int = _key(500, "held-out examples for accuracy")
    annotator_noise: float = _key(0.1, "chance a simulated annotator answers uniformly at random")
    feature_noise: float = _key(0.1, "std of Gaussian noise on grid features")
    # optimization
    base_lr: float = _key(0.003, "initial Adam learning rate")
    beta1: float = _key(0.9, "Adam first-moment decay")
    beta2: float = _key(0.99, "Adam second-moment decay")
    adam_eps: float = _key(1e-8, "Adam denominator constant")
    decay_interval: int = _key(40000, "iterations between learning-rate halvings")
    decay_rate: float = _key(0.5, "learning-rate multiplier per interval")
    max_iters: int = _key(400, "training iterations")
    batch_size: int = _key(64, "examples per iteration")
    dropout_lstm: float = _key(0.3, "dropout after each LSTM layer")
    dropout_mfb: float = _key(0.1, "dropout after the fusion product")
    log_interval: int = _key(5, "iterations between percentile records")
    track_neuron: int = _key(0, "index of the pre-normalization neuron tracked in percentiles.csv")
    label: str = _key("", "run label; empty derives one from the normalization switches")
    # bench
    bench_grid: str = _key(format_grid(DEFAULT_GRID), "'op m=.. n=.. k=.. o=.. d=..' entries separated by ';'")
    bench_timing: bool = _key(True, "measure wall time (false: counts only)")
    bench_batch: int = _key(8, "rows per timed call")
    bench_repetitions: int = _key(20, "timed calls per configuration (median reported)")
    bench_warmup: int = _key(5, "untimed calls before timing")


KEYS = [f.name for f in fields(RunConfig)]
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def docs() -> dict:
    return {f.name: (f.default, f.metadata["doc"]) for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {kind}") from exc


def parse(text: str, base: RunConfig = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in _TYPES:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return replace(base or RunConfig(), **values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_format(getattr(cfg, key))}\n" for key in KEYS)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())
