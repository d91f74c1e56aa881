"""Loss, Adam, learning-rate schedule, the synthetic task, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .attention import PAD, CoAttModel, forward
from .errors import ConfigurationError, InputError, NumericError, TrainingError
from .tensor_core import Tape, Tensor, backward, no_tape, ops

log = logging.getLogger(__name__)

PERCENTILES = (15, 50, 85)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.0007
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    decay_interval: int = 40000
    decay_rate: float = 0.5
    max_iters: int = 100000
    batch_size: int = 64
    seed: int = 0
    dropout_lstm: float = 0.3
    dropout_mfb: float = 0.1
    log_interval: int = 10
    track_neuron: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigurationError(f"base_lr must be >= 0, got {self.base_lr}")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigurationError(f"decay_rate must lie in (0, 1], got {self.decay_rate}")
        if self.decay_interval < 1 or self.batch_size < 1 or self.max_iters < 0 or self.log_interval < 1:
            raise ConfigurationError("decay_interval, batch_size and log_interval must be positive")


# batch sizes used without / with attention
BATCH_PRESETS = {"baseline": 200, "coatt": 64}


# ---------------------------------------------------------------------- loss


def _check_target(target: np.ndarray, shape) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != tuple(shape):
        raise InputError(f"target shape {target.shape} does not match logits {tuple(shape)}")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-6):
        raise InputError("target must be a probability vector (nonnegative, summing to 1 within 1e-6)")
    return target


def kl_div_loss(logits: Tensor, soft_target) -> Tensor:
    """KL(target || softmax(logits)), averaged over leading rows. 0 log 0 counts as 0."""
    target = _check_target(soft_target, logits.shape)
    rows = int(np.prod(logits.shape[:-1], dtype=np.int64)) if logits.ndim > 1 else 1
    pos = target > 0
    entropy_term = float(np.sum(target[pos] * np.log(target[pos])))
    cross = ops.sum(ops.mul(ops.log_softmax(logits, axis=-1), Tensor._wrap(target)))
    return ops.mul(ops.sub(entropy_term, cross), 1.0 / rows)


# ----------------------------------------------------------------- optimizer


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ConfigurationError("iteration must be >= 0")
    return cfg.base_lr * cfg.decay_rate ** (iteration // cfg.decay_interval)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1=0.9, beta2=0.99, eps=1e-8):
    """One bias-corrected Adam update. Returns (new params, new state); inputs untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        if m.shape != p.shape:
            raise ConfigurationError(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# ------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SyntheticSample:
    grid_feats: np.ndarray  # (G, dv)
    tokens: np.ndarray  # (T,)
    soft_target: np.ndarray  # (N,)
    hard_answer: int


@dataclass(frozen=True)
class SyntheticTask:
    """Vocabulary layout and the fixed key -> cell table behind a dataset.

    Token 0 pads, tokens 1..G name a key, the rest are filler words. Grid
    cell features are [location one-hot (G) | color one-hot (C) | zeros] plus
    Gaussian noise, so a cell can only be picked by matching its location
    against the key in the question.
    """

    G: int
    T: int
    dv: int
    C: int
    N: int
    vocab: int
    key_to_cell: np.ndarray
    feature_noise: float

    @property
    def first_filler(self) -> int:
        return 1 + self.G


def make_task(G, T, dv, C, N=None, vocab=None, seed=0, feature_noise=0.1) -> SyntheticTask:
    N = C if N is None else N
    vocab = 2 * G + 2 if vocab is None else vocab
    if G < 2 or T < 2:
        raise ConfigurationError(f"need G >= 2 and T >= 2, got G={G}, T={T}")
    if C < 2 or C > N:
        raise ConfigurationError(f"need 2 <= C <= N, got C={C}, N={N}")
    if dv < G + C:
        raise ConfigurationError(f"grid feature width {dv} cannot hold {G} location and {C} color slots")
    if vocab < G + 2:
        raise ConfigurationError(f"vocabulary of {vocab} has no room for {G} keys plus filler")
    rng = np.random.default_rng([seed, 0])
    return SyntheticTask(G, T, dv, C, N, vocab, rng.permutation(G), feature_noise)


def make_synthetic_dataset(G, T, dv, C, num_samples, annotator_noise, seed, *, N=None, vocab=None,
                           feature_noise=0.1, annotators=10, task: Optional[SyntheticTask] = None):
    """Generate ``num_samples`` examples of the key-lookup color task.

    ``task`` fixes the key table; pass the same one to build train and test
    splits that share it. Otherwise it is derived from ``seed``.
    """
    if not 0.0 <= annotator_noise <= 1.0:
        raise ConfigurationError(f"annotator noise must lie in [0, 1], got {annotator_noise}")
    if num_samples < 0:
        raise ConfigurationError("num_samples must be >= 0")
    task = task or make_task(G, T, dv, C, N, vocab, seed, feature_noise)
    rng = np.random.default_rng([seed, 1])
    fillers = np.arange(task.first_filler, task.vocab)
    samples = []
    for _ in range(num_samples):
        colors = rng.integers(0, task.C, size=task.G)
        grid = np.zeros((task.G, task.dv))
        grid[np.arange(task.G), np.arange(task.G)] = 1.0
        grid[np.arange(task.G), task.G + colors] = 1.0
        grid += task.feature_noise * rng.standard_normal(grid.shape)

        key = int(rng.integers(0, task.G))
        length = int(rng.integers(2, task.T + 1))
        tokens = np.full(task.T, PAD, dtype=np.int64)
        tokens[:length] = rng.choice(fillers, size=length)
        tokens[int(rng.integers(0, length))] = 1 + key

        answer = int(colors[task.key_to_cell[key]])
        votes = np.where(rng.random(annotators) < annotator_noise, rng.integers(0, task.C, size=annotators), answer)
        soft = np.bincount(votes, minlength=task.N).astype(np.float64) / annotators
        samples.append(SyntheticSample(grid, tokens, soft, int(np.argmax(soft))))
    return samples


def stack_samples(samples: Sequence[SyntheticSample]):
    return (np.stack([s.grid_feats for s in samples]), np.stack([s.tokens for s in samples]),
            np.stack([s.soft_target for s in samples]), np.array([s.hard_answer for s in samples]))


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class PercentileLog:
    iteration: int
    p15: float
    p50: float
    p85: float


@dataclass
class History:
    losses: list = field(default_factory=list)  # (iter, loss, lr)
    accuracy: list = field(default_factory=list)  # (epoch, accuracy)
    percentiles: list = field(default_factory=list)  # PercentileLog


def accuracy(model: CoAttModel, samples: Sequence[SyntheticSample], batch_size=256) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) is the hard answer."""
    if not samples:
        raise InputError("accuracy of an empty dataset")
    correct = 0
    tensors = model.tensors()
    with no_tape():
        for start in range(0, len(samples), batch_size):
            grid, tok, _, ans = stack_samples(samples[start:start + batch_size])
            logits = forward(grid, tok, tensors, model.cfg).data
            correct += int(np.sum(np.argmax(logits, axis=-1) == ans))
    return correct / len(samples)


def train_loop(model: CoAttModel, dataset: Sequence[SyntheticSample], cfg: TrainConfig,
               callbacks: Sequence[Callable] = (), eval_set: Optional[Sequence[SyntheticSample]] = None):
    """Mini-batch Adam with the step schedule. Deterministic given ``cfg.seed``.

    Accuracy is measured on ``eval_set`` (default: the training set) at the
    end of every epoch and after the final iteration. Each callback is called
    as ``cb(iteration, loss, params)``.
    """
    if not dataset:
        raise InputError("cannot train on an empty dataset")
    model_cfg = replace(model.cfg, dropout_lstm=cfg.dropout_lstm, dropout_fusion=cfg.dropout_mfb)
    if not 0 <= cfg.track_neuron < model_cfg.o:
        raise ConfigurationError(f"track_neuron {cfg.track_neuron} outside fused width {model_cfg.o}")
    params = {k: v.copy() for k, v in model.params.items()}
    grids, tokens, targets, _ = stack_samples(dataset)
    order_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    state = AdamState()
    history = History()
    eval_set = dataset if eval_set is None else eval_set
    batch = min(cfg.batch_size, len(dataset))
    order, cursor, epoch = order_rng.permutation(len(dataset)), 0, 0

    def snapshot():
        return CoAttModel(model.cfg, {k: v.copy() for k, v in params.items()})

    for it in range(cfg.max_iters):
        if cursor + batch > len(order):
            epoch += 1
            history.accuracy.append((epoch, accuracy(snapshot(), eval_set)))
            order, cursor = order_rng.permutation(len(dataset)), 0
        idx = order[cursor:cursor + batch]
        cursor += batch

        trace = {}
        with Tape() as tape:
            weights = tape.watch_all(params)
            try:
                logits = forward(grids[idx], tokens[idx], weights, model_cfg, drop_rng, True, trace=trace)
                loss = kl_div_loss(logits, targets[idx])
            except NumericError as exc:
                raise TrainingError(it, f"non-finite forward pass at iteration {it}: {exc}") from exc
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingError(it)
        grads = backward(tape, loss)
        lr = lr_at(it, cfg)
        history.losses.append((it, loss_val, lr))
        if it % cfg.log_interval == 0 and "pre_norm" in trace:
            column = trace["pre_norm"].reshape(-1, model_cfg.o)[:, cfg.track_neuron]
            p15, p50, p85 = np.percentile(column, PERCENTILES)
            history.percentiles.append(PercentileLog(it, float(p15), float(p50), float(p85)))
        try:
            params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        except NumericError as exc:
            raise TrainingError(it, f"non-finite gradient at iteration {it}: {exc}") from exc
        for cb in callbacks:
            cb(it, loss_val, params)
        if it % 100 == 0:
            log.debug("iter %d loss %.5f lr %.2e", it, loss_val, lr)
    trained = snapshot()
    history.accuracy.append((epoch + 1, accuracy(trained, eval_set)))
    return trained, history


# ------------------------------------------------------------- percentiles


@dataclass(frozen=True)
class SpreadSummary:
    p50_range: float
    mean_spread: float
    max_p50_drift: float


def percentile_summary(logs: Sequence[PercentileLog], window: float = 0.5) -> SpreadSummary:
    """Spread statistics over the trailing ``window`` fraction of the log."""
    if not logs:
        raise InputError("percentile summary of an empty log")
    if not 0.0 < window <= 1.0:
        raise ConfigurationError(f"window must lie in (0, 1], got {window}")
    count = max(1, int(round(len(logs) * window)))
    tail = logs[-count:]
    p50 = np.array([r.p50 for r in tail])
    spread = np.array([r.p85 - r.p15 for r in tail])
    return SpreadSummary(float(p50.max() - p50.min()), float(spread.mean()), float(np.abs(p50 - p50[0]).max()))
