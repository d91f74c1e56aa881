"""Multi-modal fusion operators and the normalization pipeline around them.

All operators act on the last axis, so a leading batch axis passes through:
``x`` is (..., m), ``y`` is (..., n), the result is (..., out_dim).

    naive_bilinear  explicit z_i = x^T W_i y loops (reference only)
    mfb             project both sides to k*o, multiply, sum-pool windows of k
    mlb             project both sides to o, multiply
    mcb             count-sketch both sides, circularly convolve via FFT
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor_core import Tensor, ops
from .tensor_core.gradcheck import note_kink_inputs

NORM_EPS = 1e-12
FUSIONS = ("mfb", "mlb", "mcb", "concat")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class MfbParams:
    m: int
    n: int
    k: int
    o: int
    U_tilde: Tensor
    V_tilde: Tensor
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.k < 1 or self.o < 1:
            raise ConfigurationError(f"MFB needs k >= 1 and o >= 1, got k={self.k}, o={self.o}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout probability must lie in [0, 1), got {self.dropout_p}")
        width = self.k * self.o
        if self.U_tilde.shape != (self.m, width) or self.V_tilde.shape != (self.n, width):
            raise DimensionError(
                f"MFB projections must be ({self.m}, {width}) and ({self.n}, {width}), "
                f"got {self.U_tilde.shape} and {self.V_tilde.shape}"
            )

    @classmethod
    def init(cls, m, n, k, o, rng=None, dropout_p=0.0) -> "MfbParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        U = glorot_uniform(rng, m, k * o)
        V = glorot_uniform(rng, n, k * o)
        return cls(m, n, k, o, Tensor(U), Tensor(V), dropout_p)

    @property
    def param_count(self) -> int:
        return self.U_tilde.size + self.V_tilde.size


@dataclass(frozen=True)
class McbParams:
    """Count-sketch maps for both inputs. Fixed at construction, never learned."""

    m: int
    n: int
    d: int
    h_x: np.ndarray
    h_y: np.ndarray
    s_x: np.ndarray
    s_y: np.ndarray
    rng_seed: Optional[int] = None

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError(f"sketch dimension must be >= 1, got {self.d}")
        for h, s, size in ((self.h_x, self.s_x, self.m), (self.h_y, self.s_y, self.n)):
            _check_sketch_maps(h, s, size, self.d)

    @classmethod
    def from_seed(cls, m, n, d, seed) -> "McbParams":
        rng = np.random.default_rng(seed)
        h_x = rng.integers(0, d, size=m)
        s_x = rng.choice([-1.0, 1.0], size=m)
        h_y = rng.integers(0, d, size=n)
        s_y = rng.choice([-1.0, 1.0], size=n)
        for arr in (h_x, h_y, s_x, s_y):
            arr.flags.writeable = False
        return cls(m, n, d, h_x, h_y, s_x, s_y, seed)

    @property
    def param_count(self) -> int:
        return 0


@dataclass(frozen=True)
class BilinearOracleParams:
    W: np.ndarray  # (o, m, n)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 3:
            raise DimensionError(f"bilinear weights must be (o, m, n), got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ConfigurationError("bilinear weights must be finite")
        object.__setattr__(self, "W", W)

    @classmethod
    def from_factors(cls, U_tilde, V_tilde, k: int) -> "BilinearOracleParams":
        """W_i = U_i V_i^T, where U_i is the i-th block of k columns of U_tilde."""
        U = np.asarray(getattr(U_tilde, "data", U_tilde))
        V = np.asarray(getattr(V_tilde, "data", V_tilde))
        o = U.shape[1] // k
        W = np.stack([U[:, i * k:(i + 1) * k] @ V[:, i * k:(i + 1) * k].T for i in range(o)])
        return cls(W)


def naive_bilinear(x, y, W: BilinearOracleParams) -> np.ndarray:
    """z_i = sum_a sum_b x_a W_i[a, b] y_b, looped element by element.

    Deliberately unvectorized: this is the reference that faster paths are
    compared against.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    o, m, n = W.W.shape
    if x.shape != (m,) or y.shape != (n,):
        raise DimensionError(f"naive_bilinear expects x ({m},) and y ({n},), got {x.shape} and {y.shape}")
    z = np.zeros(o)
    for i in range(o):
        acc = 0.0
        for a in range(m):
            row = 0.0
            for b in range(n):
                row += W.W[i, a, b] * y[b]
            acc += x[a] * row
        z[i] = acc
    return z


# ------------------------------------------------------------------ pieces


def sum_pool(v: Tensor, k: int) -> Tensor:
    """Sum non-overlapping windows of ``k`` along the last axis."""
    if k < 1 or v.shape[-1] % k:
        raise ConfigurationError(f"length {v.shape[-1]} is not divisible by pooling window {k}")
    o = v.shape[-1] // k
    return ops.sum(ops.reshape(v, v.shape[:-1] + (o, k)), axis=-1)


def power_normalize(z: Tensor) -> Tensor:
    """sign(z) * |z|^0.5; backward clamps |z| at 1e-12."""
    v = z.data
    note_kink_inputs(v, "sqrt")
    out = np.sign(v) * np.sqrt(np.abs(v))
    slope = 0.5 / np.sqrt(np.maximum(np.abs(v), NORM_EPS))
    return ops.emit("power_normalize", (z,), out, lambda g: (g * slope,))


def l2_normalize(z: Tensor) -> Tensor:
    """z / max(||z||, 1e-12) along the last axis."""
    v = z.data
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, NORM_EPS)
    out = v / denom
    active = norm > NORM_EPS

    def rule(g):
        proj = g - out * (g * out).sum(axis=-1, keepdims=True)
        return (np.where(active, proj, g) / denom,)

    return ops.emit("l2_normalize", (z,), out, rule)


def dropout(v: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return v
    if rng is None:
        raise ConfigurationError("training-mode dropout needs an RNG")
    keep = rng.random(v.shape) >= p
    return ops.mul(v, Tensor._wrap(keep / (1.0 - p)))


def _check_sketch_maps(h, s, size, d):
    h = np.asarray(h)
    s = np.asarray(s)
    if h.shape != (size,) or s.shape != (size,):
        raise ConfigurationError(f"sketch maps must cover {size} indices, got {h.shape} and {s.shape}")
    if size and (h.min() < 0 or h.max() >= d):
        raise ConfigurationError(f"sketch index map has entries outside [0, {d})")
    if not np.all(np.abs(s) == 1.0):
        raise ConfigurationError("sketch sign map must be +-1")


def count_sketch(v: Tensor, h, s, d: int) -> Tensor:
    """sketch[..., j] = sum over i with h[i] == j of s[i] * v[..., i]."""
    if d < 1:
        raise ConfigurationError(f"sketch dimension must be >= 1, got {d}")
    v = _as_tensor(v)
    h = np.asarray(h, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    _check_sketch_maps(h, s, v.shape[-1], d)
    lead = v.shape[:-1]
    flat = v.data.reshape(-1, v.shape[-1])
    out = np.zeros((flat.shape[0], d))
    np.add.at(out, (slice(None), h), flat * s)

    def rule(g):
        return (g[..., h] * s,)

    return ops.emit("count_sketch", (v,), out.reshape(lead + (d,)), rule)


def circular_convolution(a: Tensor, b: Tensor) -> Tensor:
    """(a * b)[j] = sum_i a[i] b[(j - i) mod d], evaluated in the frequency domain."""
    if a.shape != b.shape:
        raise DimensionError(f"circular convolution needs equal shapes, got {a.shape} and {b.shape}")
    d = a.shape[-1]
    fa = np.fft.rfft(a.data, axis=-1)
    fb = np.fft.rfft(b.data, axis=-1)
    out = np.fft.irfft(fa * fb, n=d, axis=-1)

    def rule(g):
        fg = np.fft.rfft(g, axis=-1)
        ga = np.fft.irfft(fg * np.conj(fb), n=d, axis=-1)
        gb = np.fft.irfft(fg * np.conj(fa), n=d, axis=-1)
        return ga, gb

    return ops.emit("circular_convolution", (a, b), out, rule)


# --------------------------------------------------------------- operators


def mfb(x, y, p: MfbParams) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_inputs(x, y, p.m, p.n, "mfb")
    return sum_pool(_expand(x, y, p.U_tilde, p.V_tilde), p.k)


def mlb(x, y, U, V) -> Tensor:
    x, y, U, V = (_as_tensor(t) for t in (x, y, U, V))
    if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
        raise DimensionError(f"mlb projections must share an output width, got {U.shape} and {V.shape}")
    _check_inputs(x, y, U.shape[0], V.shape[0], "mlb")
    return _expand(x, y, U, V)


def mcb(x, y, p: McbParams) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_inputs(x, y, p.m, p.n, "mcb")
    return circular_convolution(count_sketch(x, p.h_x, p.s_x, p.d), count_sketch(y, p.h_y, p.s_y, p.d))


def _check_inputs(x, y, m, n, name):
    if x.shape[-1:] != (m,) or y.shape[-1:] != (n,) or x.shape[:-1] != y.shape[:-1]:
        raise DimensionError(f"{name} expects x (..., {m}) and y (..., {n}), got {x.shape} and {y.shape}")


def _expand(x, y, U, V) -> Tensor:
    return ops.mul(ops.matmul(x, U), ops.matmul(y, V))


def _normalize(z: Tensor, power_norm: bool, l2_norm: bool) -> Tensor:
    if power_norm:
        z = power_normalize(z)
    if l2_norm:
        z = l2_normalize(z)
    return z


def mfb_module(x, y, p: MfbParams, rng=None, training=False, *, power_norm=True, l2_norm=True, trace=None) -> Tensor:
    """Project, multiply, dropout, sum-pool, power-normalize, l2-normalize.

    ``trace``, when a dict, receives the pooled output before normalization
    under the key ``"pre_norm"``.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    _check_inputs(x, y, p.m, p.n, "mfb")
    z = dropout(_expand(x, y, p.U_tilde, p.V_tilde), p.dropout_p, rng, training)
    z = sum_pool(z, p.k)
    if trace is not None:
        trace["pre_norm"] = z.data
    return _normalize(z, power_norm, l2_norm)


# ------------------------------------------------------ configurable block


@dataclass(frozen=True)
class FusionSpec:
    """Shape and switches of one fusion block inside a network.

    ``kind`` picks the operator; ``concat`` is the linear control
    z = W^T [x; y] with no multiplicative interaction.
    """

    kind: str
    m: int
    n: int
    o: int
    k: int = 1
    dropout_p: float = 0.0
    power_norm: bool = True
    l2_norm: bool = True
    sketch_seed: int = 0

    def __post_init__(self):
        if self.kind not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.kind!r}; expected one of {FUSIONS}")
        if self.k < 1 or self.o < 1:
            raise ConfigurationError(f"fusion needs k >= 1 and o >= 1, got k={self.k}, o={self.o}")
        if self.kind == "mlb" and self.k != 1:
            raise ConfigurationError("mlb has no factor dimension; use k=1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout probability must lie in [0, 1), got {self.dropout_p}")

    @property
    def out_dim(self) -> int:
        return self.o

    @property
    def intermediate_dim(self) -> int:
        return {"mfb": self.k * self.o, "mlb": self.o, "mcb": self.o, "concat": self.o}[self.kind]

    def param_shapes(self) -> dict:
        width = self.k * self.o
        if self.kind == "mfb":
            return {"U": (self.m, width), "V": (self.n, width)}
        if self.kind == "mlb":
            return {"U": (self.m, self.o), "V": (self.n, self.o)}
        if self.kind == "concat":
            return {"W": (self.m + self.n, self.o)}
        return {}

    def init_params(self, rng: np.random.Generator) -> dict:
        return {name: glorot_uniform(rng, shape[0], shape[1]) for name, shape in self.param_shapes().items()}

    @cached_property
    def sketch(self) -> McbParams:
        return McbParams.from_seed(self.m, self.n, self.o, self.sketch_seed)


def fusion_block(spec: FusionSpec, x: Tensor, y: Tensor, weights: Mapping[str, Tensor], rng=None,
                 training=False, trace=None) -> Tensor:
    """Run ``spec.kind`` fusion followed by dropout and the enabled normalizations.

    ``weights`` holds the tensors named by ``spec.param_shapes()``.
    """
    if spec.kind == "mfb":
        p = MfbParams(spec.m, spec.n, spec.k, spec.o, weights["U"], weights["V"], spec.dropout_p)
        return mfb_module(x, y, p, rng, training, power_norm=spec.power_norm, l2_norm=spec.l2_norm, trace=trace)
    if spec.kind == "mlb":
        z = mlb(x, y, weights["U"], weights["V"])
    elif spec.kind == "mcb":
        z = mcb(x, y, spec.sketch)
    else:
        _check_inputs(x, y, spec.m, spec.n, "concat")
        z = ops.matmul(ops.concat([x, y], axis=-1), weights["W"])
    z = dropout(z, spec.dropout_p, rng, training)
    if trace is not None:
        trace["pre_norm"] = z.data
    return _normalize(z, spec.power_norm, spec.l2_norm)
