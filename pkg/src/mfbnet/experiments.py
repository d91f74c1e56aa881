"""Synthetic training runs driven entirely by a :class:`RunConfig`."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

from . import serialize
from .attention import CoAttModel, ModelConfig
from .config import RunConfig, emit
from .training import History, SpreadSummary, TrainConfig, make_synthetic_dataset, make_task, percentile_summary, \
    train_loop

# Row labels of the normalization ablation, keyed by (power_norm, l2_norm).
ABLATION_LABELS = {
    (True, True): "standard",
    (False, True): "w/o power norm.",
    (True, False): "w/o l2 norm.",
    (False, False): "w/o power and l2 norms.",
}
TEST_SEED_OFFSET = 1000
SUMMARY_FIELDS = ["label", "architecture", "fusion", "k", "o", "power_norm", "l2_norm", "param_count",
                  "final_loss", "final_accuracy", "p50_range", "mean_spread", "max_p50_drift"]


def run_label(cfg: RunConfig) -> str:
    return cfg.label or ABLATION_LABELS[(cfg.power_norm, cfg.l2_norm)]


def grid_dim(cfg: RunConfig) -> int:
    return cfg.grid + cfg.colors + cfg.extra_dims


def build_data(cfg: RunConfig):
    """(task, train split, held-out split); both splits share one key table."""
    dv = grid_dim(cfg)
    task = make_task(cfg.grid, cfg.max_len, dv, cfg.colors, cfg.answers, seed=cfg.seed,
                     feature_noise=cfg.feature_noise)
    common = dict(N=cfg.answers, task=task)
    train = make_synthetic_dataset(cfg.grid, cfg.max_len, dv, cfg.colors, cfg.train_samples, cfg.annotator_noise,
                                   cfg.seed, **common)
    test = make_synthetic_dataset(cfg.grid, cfg.max_len, dv, cfg.colors, cfg.test_samples, cfg.annotator_noise,
                                  cfg.seed + TEST_SEED_OFFSET, **common)
    return task, train, test


def model_config(cfg: RunConfig, vocab: int) -> ModelConfig:
    return ModelConfig(architecture=cfg.architecture, vocab=vocab, embed_dim=cfg.embed_dim, hidden=cfg.hidden,
                       max_len=cfg.max_len, grid=cfg.grid, grid_dim=grid_dim(cfg), glimpses=cfg.glimpses,
                       att_hidden=cfg.att_hidden, num_answers=cfg.answers, fusion=cfg.fusion, k=cfg.k, o=cfg.o,
                       att_o=cfg.att_o, power_norm=cfg.power_norm, l2_norm=cfg.l2_norm,
                       dropout_lstm=cfg.dropout_lstm, dropout_fusion=cfg.dropout_mfb, sketch_seed=cfg.sketch_seed)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(base_lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2, adam_eps=cfg.adam_eps,
                       decay_interval=cfg.decay_interval, decay_rate=cfg.decay_rate, max_iters=cfg.max_iters,
                       batch_size=cfg.batch_size, seed=cfg.seed, dropout_lstm=cfg.dropout_lstm,
                       dropout_mfb=cfg.dropout_mfb, log_interval=cfg.log_interval, track_neuron=cfg.track_neuron)


@dataclass
class RunResult:
    config: RunConfig
    model: CoAttModel
    history: History

    @property
    def label(self) -> str:
        return run_label(self.config)

    @property
    def final_accuracy(self) -> float:
        return self.history.accuracy[-1][1]

    @property
    def spread(self) -> SpreadSummary:
        return percentile_summary(self.history.percentiles)


def run(cfg: RunConfig, callbacks=()) -> RunResult:
    task, train, test = build_data(cfg)
    model = CoAttModel.create(model_config(cfg, task.vocab), cfg.seed)
    trained, history = train_loop(model, train, train_config(cfg), callbacks, eval_set=test)
    return RunResult(cfg, trained, history)


def ablation_configs(cfg: RunConfig) -> list:
    """The four normalization variants of ``cfg``, each labelled by its switches."""
    return [replace(cfg, power_norm=pn, l2_norm=l2, label="") for pn, l2 in ABLATION_LABELS]


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def summary_row(result: RunResult) -> list:
    c, s = result.config, result.spread
    return [result.label, c.architecture, c.fusion, result.model.cfg.k, c.o, c.power_norm, c.l2_norm,
            result.model.param_count(), result.history.losses[-1][1], result.final_accuracy, s.p50_range,
            s.mean_spread, s.max_p50_drift]


def write_run(out_dir, result: RunResult) -> None:
    """metrics.csv, accuracy.csv, percentiles.csv, summary.csv, model.bin and config.txt."""
    os.makedirs(out_dir, exist_ok=True)
    h = result.history
    _write_rows(os.path.join(out_dir, "metrics.csv"), ["iter", "loss", "lr"], h.losses)
    _write_rows(os.path.join(out_dir, "accuracy.csv"), ["epoch", "accuracy"], h.accuracy)
    _write_rows(os.path.join(out_dir, "percentiles.csv"), ["iter", "p15", "p50", "p85"],
                [(p.iteration, p.p15, p.p50, p.p85) for p in h.percentiles])
    _write_rows(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS, [summary_row(result)])
    serialize.save(os.path.join(out_dir, "model.bin"), result.model.params)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(emit(result.config))


def read_csv(path) -> list:
    """Rows of a run CSV as dicts of strings."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_separation(path) -> dict:
    """Budget and thresholds written by ``scripts/pilot_separation.py``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    return {"budget": int(out["budget"]), "seeds": [int(s) for s in out["seeds"].split(",")],
            "mfb_min_accuracy": float(out["mfb_min_accuracy"]),
            "concat_max_accuracy": float(out["concat_max_accuracy"])}
