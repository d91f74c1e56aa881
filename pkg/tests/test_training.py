import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfbnet import training as tr
from mfbnet.attention import CoAttModel, ModelConfig
from mfbnet.errors import ConfigurationError, InputError, NumericError, TrainingError
from mfbnet.tensor_core import Tape, Tensor, backward, ops

TINY = ModelConfig(vocab=18, embed_dim=4, hidden=6, max_len=4, grid=8, grid_dim=14, glimpses=1, att_hidden=6,
                   num_answers=4, k=2, o=6, att_o=4)


def tiny_data(n=32, seed=0, noise=0.1):
    return tr.make_synthetic_dataset(8, 4, 14, 4, n, noise, seed)


# ---------------------------------------------------------------------- loss

def test_kl_zero_when_prediction_matches_target():
    t = np.array([0.2, 0.5, 0.3])
    assert abs(float(tr.kl_div_loss(Tensor(np.log(t)), t).data)) < 1e-15


def test_kl_one_hot_is_cross_entropy(rng):
    logits = rng.normal(size=5)
    target = np.eye(5)[2]
    p = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    assert float(tr.kl_div_loss(Tensor(logits), target).data) == pytest.approx(-math.log(p[2]), abs=1e-12)


def test_kl_against_scalar_loop(rng):
    logits = rng.normal(size=5)
    target = rng.dirichlet(np.ones(5))
    target[1] = 0.0
    target /= target.sum()
    mx = max(logits)
    log_z = mx + math.log(sum(math.exp(v - mx) for v in logits))
    expect = sum(t * (math.log(t) - (v - log_z)) for t, v in zip(target, logits) if t > 0)
    assert abs(float(tr.kl_div_loss(Tensor(logits), target).data) - expect) < 1e-12


def test_kl_rejects_non_distribution():
    with pytest.raises(InputError):
        tr.kl_div_loss(Tensor(np.zeros(3)), [0.5, 0.6, 0.0])
    with pytest.raises(InputError):
        tr.kl_div_loss(Tensor(np.zeros(3)), [0.5, 0.5])


@given(arrays(np.float64, 6, elements=st.floats(-20, 20)), st.integers(0, 2 ** 32 - 1))
def test_kl_nonnegative_and_gradient_identity(logits, seed):
    target = np.random.default_rng(seed).dirichlet(np.ones(6))
    with Tape() as tape:
        z = tape.watch(Tensor(logits), "z")
        loss = tr.kl_div_loss(z, target)
    assert float(loss.data) >= -1e-12
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert np.max(np.abs(backward(tape, loss)["z"] - (p - target))) < 1e-10


def test_kl_batch_is_row_average(rng):
    logits, target = rng.normal(size=(3, 4)), rng.dirichlet(np.ones(4), size=3)
    rows = [float(tr.kl_div_loss(Tensor(logits[i]), target[i]).data) for i in range(3)]
    assert float(tr.kl_div_loss(Tensor(logits), target).data) == pytest.approx(np.mean(rows), abs=1e-14)


# ----------------------------------------------------------------- schedule

def test_lr_schedule_points():
    cfg = tr.TrainConfig()
    assert tr.lr_at(0, cfg) == 0.0007
    assert tr.lr_at(40000, cfg) == pytest.approx(0.00035, abs=1e-18)
    assert tr.lr_at(80001, cfg) == pytest.approx(0.000175, abs=1e-18)
    assert tr.lr_at(39999, cfg) == 0.0007


@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6), st.integers(1, 50000), st.floats(0.01, 1.0))
def test_lr_non_increasing(a, b, interval, rate):
    cfg = tr.TrainConfig(decay_interval=interval, decay_rate=rate)
    lo, hi = sorted((a, b))
    assert tr.lr_at(hi, cfg) <= tr.lr_at(lo, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(decay_rate=0.0)
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(base_lr=-1.0)
    assert tr.BATCH_PRESETS == {"baseline": 200, "coatt": 64}


# --------------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = tr.adam_step(p, {"w": np.zeros(2)}, tr.AdamState(), 0.1)
    assert np.array_equal(new["w"], p["w"])


def test_adam_first_step_moves_by_lr():
    new, _ = tr.adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, tr.AdamState(), 0.1)
    assert float(new["w"]) == pytest.approx(-0.1, rel=1e-6)


def test_adam_three_step_hand_recurrence():
    b1, b2, eps, lr = 0.9, 0.99, 1e-8, 0.05
    grads = [0.3, -1.2, 0.7]
    theta, m, v = 1.0, 0.0, 0.0
    params, state = {"w": np.array(1.0)}, tr.AdamState()
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        params, state = tr.adam_step(params, {"w": np.array(g)}, state, lr, b1, b2, eps)
        assert abs(float(params["w"]) - theta) < 1e-12
    assert state.step == 3


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericError, match="bias"):
        tr.adam_step({"bias": np.zeros(2)}, {"bias": np.array([0.0, np.nan])}, tr.AdamState(), 0.1)


def test_adam_does_not_mutate_inputs():
    p, g = {"w": np.ones(3)}, {"w": np.ones(3)}
    tr.adam_step(p, g, tr.AdamState(), 0.1)
    assert np.array_equal(p["w"], np.ones(3))


# --------------------------------------------------------------------- data

def test_noise_free_targets_are_one_hot():
    for s in tiny_data(noise=0.0):
        assert np.array_equal(s.soft_target, np.eye(4)[s.hard_answer])


def test_dataset_deterministic():
    a, b = tiny_data(seed=3), tiny_data(seed=3)
    for x, y in zip(a, b):
        assert x.grid_feats.tobytes() == y.grid_feats.tobytes()
        assert np.array_equal(x.tokens, y.tokens) and np.array_equal(x.soft_target, y.soft_target)


def test_average_max_probability_matches_analytic():
    C = 4
    samples = tr.make_synthetic_dataset(4, 3, 8, C, 10_000, 0.1, 0)
    observed = np.mean([s.soft_target.max() for s in samples])
    assert abs(observed - (0.9 + 0.1 / C)) < 0.02 * (0.9 + 0.1 / C)


@given(st.integers(0, 2 ** 16), st.floats(0, 1))
def test_sample_invariants(seed, noise):
    for s in tr.make_synthetic_dataset(5, 4, 9, 3, 5, noise, seed, N=4):
        assert abs(s.soft_target.sum() - 1) < 1e-12
        assert s.hard_answer == int(np.argmax(s.soft_target))
        assert s.soft_target.shape == (4,) and s.soft_target[3] == 0.0


def test_answer_is_color_of_keyed_cell():
    task = tr.make_task(6, 4, 12, 3, seed=2, feature_noise=0.0)
    for s in tr.make_synthetic_dataset(6, 4, 12, 3, 50, 0.0, 2, task=task):
        keys = [t for t in s.tokens if 1 <= t <= 6]
        assert len(keys) == 1
        cell = task.key_to_cell[keys[0] - 1]
        assert np.argmax(s.grid_feats[cell, 6:9]) == s.hard_answer


def test_dataset_size_validation():
    with pytest.raises(ConfigurationError):
        tr.make_synthetic_dataset(1, 4, 8, 2, 5, 0.1, 0)
    with pytest.raises(ConfigurationError):
        tr.make_synthetic_dataset(4, 1, 8, 2, 5, 0.1, 0)
    with pytest.raises(ConfigurationError):
        tr.make_synthetic_dataset(4, 4, 8, 5, 5, 0.1, 0, N=4)
    with pytest.raises(ConfigurationError):
        tr.make_synthetic_dataset(4, 4, 5, 2, 5, 0.1, 0)


# ------------------------------------------------------------- train loop

def quick_cfg(**kw):
    base = dict(base_lr=0.01, max_iters=6, batch_size=8, log_interval=2, seed=0)
    return tr.TrainConfig(**{**base, **kw})


def test_zero_learning_rate_leaves_parameters():
    model = CoAttModel.create(TINY, 0)
    trained, _ = tr.train_loop(model, tiny_data(), quick_cfg(base_lr=0.0))
    assert all(trained.params[k].tobytes() == model.params[k].tobytes() for k in model.params)


def test_training_is_bitwise_deterministic():
    runs = [tr.train_loop(CoAttModel.create(TINY, 1), tiny_data(), quick_cfg()) for _ in range(2)]
    (m1, h1), (m2, h2) = runs
    assert h1.losses == h2.losses and h1.percentiles == h2.percentiles
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)


def test_history_contents():
    _, h = tr.train_loop(CoAttModel.create(TINY, 0), tiny_data(n=20), quick_cfg(max_iters=7))
    assert [it for it, _, _ in h.losses] == list(range(7))
    assert [p.iteration for p in h.percentiles] == [0, 2, 4, 6]
    assert all(p.p15 <= p.p50 <= p.p85 for p in h.percentiles)
    # 20 samples / batch 8 -> a new epoch every 2 iterations, plus the final score
    assert [e for e, _ in h.accuracy] == [1, 2, 3, 4]


def test_single_sample_memorization():
    sample = tiny_data(n=1, noise=0.0)
    # budget from a pilot: loss first drops below 1e-3 near iteration 285 at this rate
    cfg = quick_cfg(base_lr=0.03, max_iters=400, batch_size=1, dropout_lstm=0.0, dropout_mfb=0.0)
    _, h = tr.train_loop(CoAttModel.create(TINY, 0), sample, cfg)
    assert h.losses[-1][1] < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_iteration():
    # a huge learning rate with no normalization blows the logits up
    cfg_model = replace(TINY, power_norm=False, l2_norm=False)
    with pytest.raises(TrainingError) as info:
        tr.train_loop(CoAttModel.create(cfg_model, 0), tiny_data(), quick_cfg(base_lr=1e150, max_iters=50))
    assert isinstance(info.value.iteration, int) and 0 < info.value.iteration < 50


def test_callbacks_see_every_iteration():
    seen = []
    tr.train_loop(CoAttModel.create(TINY, 0), tiny_data(), quick_cfg(), callbacks=[lambda it, loss, p: seen.append(it)])
    assert seen == list(range(6))


def test_empty_dataset_rejected():
    with pytest.raises(InputError):
        tr.train_loop(CoAttModel.create(TINY, 0), [], quick_cfg())


def test_track_neuron_range_checked():
    with pytest.raises(ConfigurationError):
        tr.train_loop(CoAttModel.create(TINY, 0), tiny_data(), quick_cfg(track_neuron=TINY.o))


def test_mlb_run_equals_mfb_with_one_factor_bitwise():
    data = tiny_data()
    mfb_cfg = replace(TINY, fusion="mfb", k=1)
    mlb_cfg = replace(TINY, fusion="mlb", k=1)
    params = CoAttModel.create(mfb_cfg, 2).params
    _, h1 = tr.train_loop(CoAttModel(mfb_cfg, params), data, quick_cfg())
    _, h2 = tr.train_loop(CoAttModel(mlb_cfg, params), data, quick_cfg())
    assert [l for _, l, _ in h1.losses] == [l for _, l, _ in h2.losses]


def test_accuracy_lowest_index_tie_break():
    cfg = replace(TINY, architecture="baseline")
    params = CoAttModel.create(cfg, 0).params
    params = {k: np.zeros_like(v) for k, v in params.items()}  # every logit ties at 0
    samples = tiny_data(n=40)
    acc = tr.accuracy(CoAttModel(cfg, params), samples)
    assert acc == np.mean([s.hard_answer == 0 for s in samples])


# ---------------------------------------------------------- percentiles

def logs(values):
    return [tr.PercentileLog(i, p - a, p, p + a) for i, (p, a) in enumerate(values)]


def test_constant_logs_have_no_spread():
    s = tr.percentile_summary(logs([(0.0, 0.0)] * 6))
    assert s.p50_range == s.mean_spread == s.max_p50_drift == 0.0


def test_double_amplitude_doubles_spread(rng):
    amp = rng.uniform(0.1, 1.0, size=10)
    mid = rng.normal(size=10)
    a = tr.percentile_summary(logs(zip(mid, amp)))
    b = tr.percentile_summary(logs(zip(2 * mid, 2 * amp)))
    assert b.mean_spread / a.mean_spread == pytest.approx(2.0, abs=1e-12)
    assert b.p50_range / a.p50_range == pytest.approx(2.0, abs=1e-12)


def test_summary_uses_trailing_window():
    s = tr.percentile_summary(logs([(5.0, 3.0)] * 5 + [(0.0, 1.0)] * 5), window=0.5)
    assert s.mean_spread == pytest.approx(2.0) and s.p50_range == 0.0


def test_empty_log_rejected():
    with pytest.raises(InputError):
        tr.percentile_summary([])
