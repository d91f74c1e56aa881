"""Parameter counts, intermediate sizes, and timing of the fusion operators."""

from __future__ import annotations

import csv
import dataclasses
import statistics
import time
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .fusion import McbParams, MfbParams, mcb, mfb, mlb
from .tensor_core import Tape, Tensor, backward, ops

OPERATORS = ("mfb", "mlb", "mcb")
BYTES_PER_ELEMENT = 8


@dataclass(frozen=True)
class BenchResult:
    operator: str
    m: int
    n: int
    k: int
    o: int
    d: int
    projection_param_count: int
    intermediate_dim: int
    forward_ns_per_call: float
    backward_ns_per_call: float
    peak_bytes_estimate: int


CSV_FIELDS = [f.name for f in fields(BenchResult)]


@dataclass(frozen=True)
class BenchConfig:
    operator: str
    m: int
    n: int
    k: int = 1
    o: int = 0
    d: int = 0

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigurationError(f"unknown operator {self.operator!r}; expected one of {OPERATORS}")
        if self.m < 1 or self.n < 1:
            raise ConfigurationError("input dims must be positive")
        if self.operator == "mcb":
            if self.d < 1:
                raise ConfigurationError("mcb needs a sketch dimension d >= 1")
        elif self.o < 1 or self.k < 1:
            raise ConfigurationError(f"{self.operator} needs o >= 1 and k >= 1")
        if self.operator == "mlb" and self.k != 1:
            raise ConfigurationError("mlb has k = 1 by definition")


# Reference grid: an MFB k/o sweep next to MLB (o=1000) and MCB (d=16000).
DEFAULT_GRID = (
    BenchConfig("mcb", 2048, 2048, d=16000),
    BenchConfig("mlb", 2048, 2048, o=1000),
    BenchConfig("mfb", 2048, 2048, k=1, o=5000),
    BenchConfig("mfb", 2048, 2048, k=5, o=1000),
    BenchConfig("mfb", 2048, 2048, k=10, o=500),
    BenchConfig("mfb", 2048, 2048, k=5, o=200),
    BenchConfig("mfb", 2048, 2048, k=5, o=500),
    BenchConfig("mfb", 2048, 2048, k=5, o=2000),
    BenchConfig("mfb", 2048, 2048, k=5, o=4000),
)


def parse_grid(text: str) -> list:
    """Parse ``"mfb m=2048 n=2048 k=5 o=1000; mcb m=2048 n=2048 d=16000"``."""
    grid = []
    for entry in text.split(";"):
        words = entry.split()
        if not words:
            continue
        kwargs = {}
        for word in words[1:]:
            key, sep, value = word.partition("=")
            if not sep or key not in ("m", "n", "k", "o", "d"):
                raise ConfigurationError(f"bad bench grid field {word!r} in {entry.strip()!r}")
            try:
                kwargs[key] = int(value)
            except ValueError as exc:
                raise ConfigurationError(f"bench grid value {word!r} is not an integer") from exc
        if "m" not in kwargs or "n" not in kwargs:
            raise ConfigurationError(f"bench grid entry {entry.strip()!r} needs m and n")
        grid.append(BenchConfig(words[0], **kwargs))
    if not grid:
        raise ConfigurationError("empty bench grid")
    return grid


def format_grid(grid: Iterable[BenchConfig]) -> str:
    parts = []
    for c in grid:
        extra = f"d={c.d}" if c.operator == "mcb" else (f"o={c.o}" if c.operator == "mlb" else f"k={c.k} o={c.o}")
        parts.append(f"{c.operator} m={c.m} n={c.n} {extra}")
    return "; ".join(parts)


def closed_form_params(c: BenchConfig) -> int:
    if c.operator == "mfb":
        return (c.m + c.n) * c.k * c.o
    if c.operator == "mlb":
        return (c.m + c.n) * c.o
    return 0


def intermediate_dim(c: BenchConfig) -> int:
    return {"mfb": c.k * c.o, "mlb": c.o, "mcb": c.d}[c.operator]


def build_record(c: BenchConfig, rng=None, zeros=False):
    """Construct the operator's parameter record (zeros skips the random draw)."""
    if c.operator == "mcb":
        return McbParams.from_seed(c.m, c.n, c.d, 0)
    width = c.k * c.o
    if zeros:
        U, V = Tensor._wrap(np.zeros((c.m, width))), Tensor._wrap(np.zeros((c.n, width)))
    else:
        p = MfbParams.init(c.m, c.n, c.k, c.o, rng if rng is not None else np.random.default_rng(0))
        U, V = p.U_tilde, p.V_tilde
    return MfbParams(c.m, c.n, c.k, c.o, U, V)


def enumerate_params(record) -> int:
    """Count learned elements by walking every tensor field of a record."""
    total = 0
    for f in dataclasses.fields(record):
        value = getattr(record, f.name)
        if isinstance(value, Tensor):
            total += value.size
    return total


def peak_bytes(c: BenchConfig, batch: int = 1) -> int:
    """Live-intermediate estimate: inputs, projections/sketches, product, output."""
    if c.operator == "mcb":
        spectrum = 2 * (c.d // 2 + 1)  # complex halves of two rfft spectra, counted as reals
        elems = c.m + c.n + 2 * c.d + 2 * spectrum + c.d
    else:
        width = c.k * c.o
        elems = c.m + c.n + 3 * width + c.o
    return int(batch * elems * BYTES_PER_ELEMENT)


def _result(c: BenchConfig, fwd=0.0, bwd=0.0, batch=1) -> BenchResult:
    return BenchResult(c.operator, c.m, c.n, c.k if c.operator != "mcb" else 0, c.o, c.d, closed_form_params(c),
                       intermediate_dim(c), float(fwd), float(bwd), peak_bytes(c, batch))


def param_report(grid: Sequence[BenchConfig]) -> list:
    if not grid:
        raise ConfigurationError("empty bench grid")
    return [_result(c) for c in grid]


def _apply(c: BenchConfig, record, x, y):
    if c.operator == "mfb":
        return mfb(x, y, record)
    if c.operator == "mlb":
        return mlb(x, y, record.U_tilde, record.V_tilde)
    return mcb(x, y, record)


def throughput(c: BenchConfig, batch: int = 8, repetitions: int = 20, warmup: int = 5, seed: int = 0) -> BenchResult:
    """Median wall time per call, forward only and forward+backward."""
    if repetitions < 1 or warmup < 0 or batch < 1:
        raise ConfigurationError("need repetitions >= 1, warmup >= 0, batch >= 1")
    rng = np.random.default_rng(seed)
    record = build_record(c, rng)
    x = Tensor._wrap(rng.uniform(-1, 1, size=(batch, c.m)))
    y = Tensor._wrap(rng.uniform(-1, 1, size=(batch, c.n)))

    def fwd():
        _apply(c, record, x, y)

    def fwd_bwd():
        with Tape() as tape:
            xs, ys = tape.watch(x, "x"), tape.watch(y, "y")
            loss = ops.sum(_apply(c, record, xs, ys))
        backward(tape, loss)

    def timed(fn):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - t0)
        return statistics.median(samples)

    return _result(c, timed(fwd), timed(fwd_bwd), batch)


def write_csv(results: Iterable[BenchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in results:
            w.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(r)])


def read_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_FIELDS:
            raise ConfigurationError(f"unexpected bench CSV header {header}")
        for row in reader:
            convert = {"str": str, "int": int, "float": float}
            out.append(BenchResult(*(convert[f.type](raw) for f, raw in zip(fields(BenchResult), row))))
    return out
