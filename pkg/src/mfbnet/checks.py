"""Seeded verification suites: per-operator gradient checks and fusion equivalences.

Gradient cases are small closures ``case(rng) -> (f, point)``. The suite
redraws a point until finite differences are a trustworthy reference there:

* relu inputs at least ``relu_margin`` from zero, so no step crosses the kink;
* signed-sqrt inputs at least ``kink_margin`` from zero;
* the central difference has converged: estimates at steps 2h and h agree
  within ``fd_agreement``. Truncation error is O(h^2), so the gap between the two is
  about three times the error left in the step-h estimate.

None of these look at the tape gradient, so a wrong backward rule fails at
every admissible point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import fusion as fu
from .attention import (AttentionHead, ModelConfig, baseline_forward, coatt_forward, encode_question, image_attention,
                        init_params, lstm_cell, question_attention)
from .errors import ContractError
from .tensor_core import GradCheckReport, Tensor, grad_check, no_tape, ops
from .tensor_core.gradcheck import central_differences, kink_distance, relative_error
from .training import kl_div_loss

# Network dims for gradient checks: every parameter is perturbed, so keep them tiny.
TINY = ModelConfig(vocab=6, embed_dim=3, hidden=3, max_len=3, grid=4, grid_dim=4, glimpses=2, att_hidden=4,
                   num_answers=3, k=2, o=3, att_o=3)

GradCase = Callable[[np.random.Generator], tuple]
CASES: Dict[str, GradCase] = {}


def case(name):
    def register(fn):
        CASES[name] = fn
        return fn

    return register


def _u(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


def _probe(rng, shape):
    # random projection so every output coordinate reaches the scalar loss
    return Tensor._wrap(rng.normal(size=shape))


def _scalar(out: Tensor, probe: Tensor) -> Tensor:
    return ops.sum(ops.mul(out, probe))


@case("matmul")
def _matmul(rng):
    w = _probe(rng, (3, 2))
    return lambda t: _scalar(ops.matmul(t["a"], t["b"]), w), {"a": _u(rng, 3, 4), "b": _u(rng, 4, 2)}


for _op in ("mul", "add", "sub"):
    def _make(op):
        def build(rng):
            w = _probe(rng, (5,))
            return lambda t: _scalar(ops.elementwise(op, t["a"], t["b"]), w), {"a": _u(rng, 5), "b": _u(rng, 5)}

        return build

    CASES[f"elementwise_{_op}"] = _make(_op)


@case("softmax")
def _softmax(rng):
    w = _probe(rng, (2, 5))
    return lambda t: _scalar(ops.softmax(t["v"], axis=-1), w), {"v": _u(rng, 2, 5)}


@case("log_softmax")
def _log_softmax(rng):
    w = _probe(rng, (2, 5))
    return lambda t: _scalar(ops.log_softmax(t["v"], axis=-1), w), {"v": _u(rng, 2, 5)}


@case("sigmoid_tanh")
def _sig(rng):
    w = _probe(rng, (6,))
    return lambda t: _scalar(ops.tanh(ops.sigmoid(t["v"])), w), {"v": _u(rng, 6)}


@case("relu")
def _relu(rng):
    w = _probe(rng, (6,))
    return lambda t: _scalar(ops.relu(t["v"]), w), {"v": _u(rng, 6)}


@case("shape_ops")
def _shape(rng):
    w = _probe(rng, (3, 2, 5))

    def f(t):
        a, b = t["a"], t["b"]
        joined = ops.concat([a, b], axis=-1)  # (3, 5)
        tiled = ops.repeat(ops.slice_axis(joined, 0, 3, axis=0), 2, axis=1)
        stacked = ops.stack([ops.take(tiled, 0, axis=1), ops.take(tiled, 1, axis=1)], axis=1)
        return _scalar(ops.reshape(stacked, (3, 2, 5)), w)

    return f, {"a": _u(rng, 3, 2), "b": _u(rng, 3, 3)}


@case("einsum")
def _einsum(rng):
    w = _probe(rng, (2, 3, 4))
    return lambda t: _scalar(ops.einsum("bpg,bpd->bgd", t["a"], t["b"]), w), {"a": _u(rng, 2, 5, 3),
                                                                             "b": _u(rng, 2, 5, 4)}


@case("embedding")
def _embedding(rng):
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    w = _probe(rng, (2, 3, 2))
    return lambda t: _scalar(ops.embedding(t["table"], ids, padding_idx=0), w), {"table": _u(rng, 4, 2)}


@case("sum_pool")
def _sum_pool(rng):
    w = _probe(rng, (3,))
    return lambda t: _scalar(fu.sum_pool(t["v"], 4), w), {"v": _u(rng, 12)}


@case("power_normalize")
def _power(rng):
    w = _probe(rng, (6,))
    return lambda t: _scalar(fu.power_normalize(t["z"]), w), {"z": _u(rng, 6)}


@case("l2_normalize")
def _l2(rng):
    w = _probe(rng, (2, 5))
    return lambda t: _scalar(fu.l2_normalize(t["z"]), w), {"z": _u(rng, 2, 5)}


@case("count_sketch")
def _cs(rng):
    h, s = rng.integers(0, 5, size=7), rng.choice([-1.0, 1.0], size=7)
    w = _probe(rng, (5,))
    return lambda t: _scalar(fu.count_sketch(t["v"], h, s, 5), w), {"v": _u(rng, 7)}


@case("circular_convolution")
def _cconv(rng):
    w = _probe(rng, (8,))
    return lambda t: _scalar(fu.circular_convolution(t["a"], t["b"]), w), {"a": _u(rng, 8), "b": _u(rng, 8)}


@case("mfb")
def _mfb(rng):
    w = _probe(rng, (3,))
    point = {"x": _u(rng, 4), "y": _u(rng, 5), "U": _u(rng, 4, 6), "V": _u(rng, 5, 6)}
    return lambda t: _scalar(fu.mfb(t["x"], t["y"], fu.MfbParams(4, 5, 2, 3, t["U"], t["V"])), w), point


@case("mlb")
def _mlb(rng):
    w = _probe(rng, (3,))
    point = {"x": _u(rng, 4), "y": _u(rng, 5), "U": _u(rng, 4, 3), "V": _u(rng, 5, 3)}
    return lambda t: _scalar(fu.mlb(t["x"], t["y"], t["U"], t["V"]), w), point


@case("mcb")
def _mcb(rng):
    p = fu.McbParams.from_seed(4, 5, 8, int(rng.integers(1 << 30)))
    w = _probe(rng, (8,))
    return lambda t: _scalar(fu.mcb(t["x"], t["y"], p), w), {"x": _u(rng, 4), "y": _u(rng, 5)}


@case("mfb_module")
def _mfb_module(rng):
    w = _probe(rng, (2, 3))
    seed = int(rng.integers(1 << 30))
    point = {"x": _u(rng, 2, 4), "y": _u(rng, 2, 5), "U": _u(rng, 4, 6), "V": _u(rng, 5, 6)}

    def f(t):
        p = fu.MfbParams(4, 5, 2, 3, t["U"], t["V"], dropout_p=0.1)
        # training mode with the same mask on every evaluation
        return _scalar(fu.mfb_module(t["x"], t["y"], p, np.random.default_rng(seed), training=True), w)

    return f, point


@case("kl_div_loss")
def _kl(rng):
    target = rng.dirichlet(np.ones(5), size=2)
    return lambda t: kl_div_loss(t["logits"], target), {"logits": _u(rng, 2, 5)}


@case("lstm_cell")
def _lstm(rng):
    w = _probe(rng, (2, 3))

    def f(t):
        h, c = lstm_cell(t["x"], t["h"], t["c"], t["Wx"], t["Wh"], t["b"])
        return ops.add(_scalar(h, w), _scalar(c, w))

    point = {"x": _u(rng, 2, 4), "h": _u(rng, 2, 3), "c": _u(rng, 2, 3), "Wx": _u(rng, 4, 12) / 4,
             "Wh": _u(rng, 3, 12) / 4, "b": _u(rng, 12) / 4}
    return f, point


def _network_point(rng, cfg):
    # O(1) weights rather than the training init: with Glorot-scale weights the
    # fused pre-norm values sit within a few hundredths of zero
    params = {name: rng.uniform(-1, 1, arr.shape) for name, arr in init_params(cfg, 0).items()}
    params["embed"][0] = 0.0
    grid = _u(rng, 1, cfg.grid, cfg.grid_dim)
    tokens = rng.integers(1, cfg.vocab, size=(1, cfg.max_len))
    target = rng.dirichlet(np.ones(cfg.num_answers), size=1)
    return params, grid, tokens, target


@case("encode_question")
def _encode(rng):
    params, _, tokens, _ = _network_point(rng, TINY)
    tokens[0, -1] = 0
    w = _probe(rng, (1, TINY.max_len, TINY.question_dim))
    v = _probe(rng, (1, TINY.question_dim))

    def f(t):
        words, last = encode_question(tokens, t, TINY)
        return ops.add(_scalar(words, w), _scalar(last, v))

    names = ["embed", "lstm1.Wx", "lstm1.Wh", "lstm1.b", "lstm2.Wx", "lstm2.Wh", "lstm2.b"]
    return f, {k: params[k] for k in names}


@case("question_attention")
def _qatt(rng):
    w = _probe(rng, (2, 2 * 5))
    mask = np.array([[True, True, True, False], [True, True, True, True]])
    point = {"words": _u(rng, 2, 4, 5), "W1": _u(rng, 5, 3), "W2": _u(rng, 3, 2)}
    return lambda t: _scalar(question_attention(t["words"], AttentionHead(t["W1"], t["W2"]), mask=mask), w), point


@case("image_attention")
def _iatt(rng):
    spec = fu.FusionSpec("mfb", 4, 6, 3, k=2)
    w = _probe(rng, (2, 2 * 4))
    point = {"grid": _u(rng, 2, 3, 4), "q": _u(rng, 2, 6), "U": _u(rng, 4, 6) / 2, "V": _u(rng, 6, 6) / 2,
             "W1": _u(rng, 3, 4) / 2, "W2": _u(rng, 4, 2) / 2}

    def f(t):
        head = AttentionHead(t["W1"], t["W2"])
        return _scalar(image_attention(t["grid"], t["q"], spec, {"U": t["U"], "V": t["V"]}, head), w)

    return f, point


@case("coatt_forward")
def _coatt(rng):
    params, grid, tokens, target = _network_point(rng, TINY)
    return lambda t: kl_div_loss(coatt_forward(grid, tokens, t, TINY), target), params


@case("coatt_forward_train")
def _coatt_train(rng):
    params, grid, tokens, target = _network_point(rng, TINY)
    seed = int(rng.integers(1 << 30))
    return (lambda t: kl_div_loss(coatt_forward(grid, tokens, t, TINY, np.random.default_rng(seed), True), target),
            params)


@case("baseline_forward")
def _baseline(rng):
    cfg = ModelConfig(**{**TINY.to_dict(), "architecture": "baseline"})
    params, grid, tokens, target = _network_point(rng, cfg)
    image = grid.mean(axis=1)
    return lambda t: kl_div_loss(baseline_forward(image, tokens, t, cfg), target), params


def fd_converged(f, point, step: float, tol: float) -> bool:
    coarse, fine = central_differences(f, point, 2 * step), central_differences(f, point, step)
    return all(relative_error(coarse[k], fine[k]).max(initial=0.0) <= tol for k in fine)


def admissible(build: GradCase, seed: int, margin: float, relu_margin: float, step: float, fd_agreement: float,
               max_tries: int = 500):
    """First (f, point, seed) at or after ``seed`` where finite differences can be trusted."""
    for s in range(seed, seed + max_tries):
        f, point = build(np.random.default_rng(s))
        with no_tape(), kink_distance() as kd:
            f({k: Tensor._wrap(np.asarray(v, dtype=np.float64)) for k, v in point.items()})
        if kd.of("sqrt") >= margin and kd.of("relu") >= relu_margin and fd_converged(f, point, step, fd_agreement):
            return f, point, s
    raise ContractError(f"no admissible point within {max_tries} draws from seed {seed}")


@dataclass
class CaseResult:
    name: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def run_gradcheck_suite(seed=0, step=1e-3, tol=1e-4, kink_margin=0.05, relu_margin=0.01, fd_agreement=1e-4,
                        names=None) -> List[CaseResult]:
    results = []
    for name in names or CASES:
        f, point, used = admissible(CASES[name], seed, kink_margin, relu_margin, step, fd_agreement)
        results.append(CaseResult(name, used, grad_check(f, point, step=step, tol=tol)))
    return results


# ----------------------------------------------------------------- equivalence


@dataclass
class EquivalenceFailure:
    suite: str
    seed: int
    error: float


def factorization_instance(seed: int, max_dim=8, max_k=4, max_o=4):
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
    k, o = int(rng.integers(1, max_k + 1)), int(rng.integers(1, max_o + 1))
    params = fu.MfbParams(m, n, k, o, Tensor(rng.uniform(-1, 1, (m, k * o))), Tensor(rng.uniform(-1, 1, (n, k * o))))
    return params, rng.uniform(-2, 2, m), rng.uniform(-2, 2, n)


def check_factorization(seed: int, fault=0.0, max_dim=8, max_k=4, max_o=4, atol=1e-10) -> float:
    """Max |mfb - naive bilinear with W_i = U_i V_i^T| for one seeded instance."""
    p, x, y = factorization_instance(seed, max_dim, max_k, max_o)
    W = fu.BilinearOracleParams.from_factors(p.U_tilde, p.V_tilde, p.k)
    if fault:
        U = p.U_tilde.numpy()
        U[0, 0] += fault
        p = fu.MfbParams(p.m, p.n, p.k, p.o, Tensor(U), p.V_tilde)
    with no_tape():
        z = fu.mfb(x, y, p).data
    return float(np.max(np.abs(z - fu.naive_bilinear(x, y, W))))


def check_mlb_specialization(seed: int, fault=0.0, max_dim=8, max_o=4):
    """(bitwise identical, max abs gap) between mfb with k=1 and mlb on shared weights."""
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
    o = int(rng.integers(1, max_o + 1))
    U, V = rng.uniform(-1, 1, (m, o)), rng.uniform(-1, 1, (n, o))
    x, y = rng.uniform(-2, 2, m), rng.uniform(-2, 2, n)
    U_mfb = U.copy()
    if fault:
        U_mfb[0, 0] += fault
    with no_tape():
        a = fu.mfb(x, y, fu.MfbParams(m, n, 1, o, Tensor(U_mfb), Tensor(V))).data
        b = fu.mlb(x, y, Tensor(U), Tensor(V)).data
    return a.tobytes() == b.tobytes(), float(np.max(np.abs(a - b)))


def run_equivalence(instances=100, seed=0, fault=0.0, max_dim=8, max_k=4, max_o=4, atol=1e-10):
    """Both suites over seeds seed, seed+1, ...; returns the failures."""
    failures = []
    for i in range(instances):
        s = seed + i
        err = check_factorization(s, fault, max_dim, max_k, max_o)
        if not err < atol:
            failures.append(EquivalenceFailure("factorization", s, err))
        identical, gap = check_mlb_specialization(s, fault, max_dim, max_o)
        if not identical:
            failures.append(EquivalenceFailure("mlb_specialization", s, gap))
    return failures
