"""Question encoder, attention heads, and the two VQA networks.

Networks are plain functions of a parameter mapping (name -> Tensor) so the
same code runs under a tape for training, without one for evaluation, and
inside the finite-difference checker. Batched inputs are the norm:

    grid_feats  (B, G, dv)      tokens  (B, T) int, 0 = padding
    image_feat  (B, dv)         logits  (B, N)

Unbatched inputs (no leading B) are accepted and return unbatched outputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError
from .fusion import FusionSpec, dropout, fusion_block, glorot_uniform
from .tensor_core import Tensor, no_tape, ops

PAD = 0
ARCHITECTURES = ("coatt", "baseline")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "coatt"
    vocab: int = 64
    embed_dim: int = 32
    hidden: int = 64
    max_len: int = 8
    grid: int = 16
    grid_dim: int = 32
    glimpses: int = 2
    att_hidden: int = 32
    num_answers: int = 8
    fusion: str = "mfb"
    k: int = 5
    o: int = 64
    att_o: int = 32
    power_norm: bool = True
    l2_norm: bool = True
    dropout_lstm: float = 0.3
    dropout_fusion: float = 0.1
    sketch_seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.num_answers < 2:
            raise ConfigurationError("need at least two answer classes")
        for name in ("vocab", "embed_dim", "hidden", "max_len", "grid", "grid_dim", "glimpses", "att_hidden", "k", "o",
                     "att_o"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fusion in ("mlb", "mcb", "concat") and self.k != 1:
            object.__setattr__(self, "k", 1)
        for p in (self.dropout_lstm, self.dropout_fusion):
            if not 0.0 <= p < 1.0:
                raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")

    @property
    def question_dim(self) -> int:
        return 2 * self.hidden

    def fusion_spec(self, m: int, n: int, o: int) -> FusionSpec:
        return FusionSpec(self.fusion, m, n, o, k=self.k, dropout_p=self.dropout_fusion, power_norm=self.power_norm,
                          l2_norm=self.l2_norm, sketch_seed=self.sketch_seed)

    @property
    def fuse_att(self) -> FusionSpec:
        return self.fusion_spec(self.grid_dim, self.glimpses * self.question_dim, self.att_o)

    @property
    def fuse_final(self) -> FusionSpec:
        if self.architecture == "baseline":
            return self.fusion_spec(self.grid_dim, self.question_dim, self.o)
        return self.fusion_spec(self.glimpses * self.grid_dim, self.glimpses * self.question_dim, self.o)

    def to_dict(self) -> dict:
        return asdict(self)


# Full-scale shapes; used for shape tests, far too large to train here.
FULL_SCALE_CONFIG = ModelConfig(hidden=1024, embed_dim=300, vocab=1000, max_len=15, grid=196, grid_dim=2048, glimpses=2,
                           att_hidden=512, num_answers=3000, k=5, o=1000, att_o=1000)


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map for every trainable tensor of ``cfg``."""
    h, e, q = cfg.hidden, cfg.embed_dim, cfg.question_dim
    shapes = {"embed": (cfg.vocab, e)}
    for layer, in_dim in (("lstm1", e), ("lstm2", h)):
        shapes[f"{layer}.Wx"] = (in_dim, 4 * h)
        shapes[f"{layer}.Wh"] = (h, 4 * h)
        shapes[f"{layer}.b"] = (4 * h,)
    if cfg.architecture == "coatt":
        shapes["q_att.W1"] = (q, cfg.att_hidden)
        shapes["q_att.W2"] = (cfg.att_hidden, cfg.glimpses)
        for name, shape in cfg.fuse_att.param_shapes().items():
            shapes[f"fuse_att.{name}"] = shape
        shapes["i_att.W1"] = (cfg.att_o, cfg.att_hidden)
        shapes["i_att.W2"] = (cfg.att_hidden, cfg.glimpses)
    for name, shape in cfg.fuse_final.param_shapes().items():
        shapes[f"fuse_final.{name}"] = shape
    shapes["cls.W"] = (cfg.o, cfg.num_answers)
    shapes["cls.b"] = (cfg.num_answers,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Glorot-uniform matrices, zero biases, zero padding embedding row."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = glorot_uniform(rng, shape[0], shape[1])
    params["embed"][PAD] = 0.0
    return params


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _batched(x, ndim):
    """Returns (tensor with a batch axis, whether one was added)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == ndim - 1:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise DimensionError(f"expected rank {ndim - 1} or {ndim}, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, added: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if added else x


def _tokens(tokens, vocab) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise DimensionError(f"tokens must be (T,) or (B, T), got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise InputError(f"token id outside vocabulary [0, {vocab})")
    return tokens.astype(np.int64)


# ------------------------------------------------------------------- encoder


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor):
    """One step with gate order (input, forget, candidate, output)."""
    hidden = h.shape[-1]
    gates = ops.add_bias(ops.add(ops.matmul(x, Wx), ops.matmul(h, Wh)), b)
    i = ops.sigmoid(ops.slice_axis(gates, 0, hidden))
    f = ops.sigmoid(ops.slice_axis(gates, hidden, 2 * hidden))
    g = ops.tanh(ops.slice_axis(gates, 2 * hidden, 3 * hidden))
    o = ops.sigmoid(ops.slice_axis(gates, 3 * hidden, 4 * hidden))
    c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, c_new


def last_positions(tokens: np.ndarray) -> np.ndarray:
    """Index of the final non-pad token per row; the last slot for all-pad rows."""
    T = tokens.shape[1]
    nonpad = tokens != PAD
    rev = np.argmax(nonpad[:, ::-1], axis=1)
    return np.where(nonpad.any(axis=1), T - 1 - rev, T - 1)


def encode_question(tokens, params: Mapping[str, Tensor], cfg: ModelConfig, rng=None, training=False):
    """Two-layer LSTM over embedded tokens.

    Returns (word_feats (B, T, 2h), last_feat (B, 2h)); each per-word feature
    concatenates both layers' (dropped-out) outputs at that step.
    """
    unbatched = np.asarray(tokens).ndim == 1
    tokens = _tokens(tokens, cfg.vocab)
    B, T = tokens.shape
    h = cfg.hidden
    x_seq = ops.embedding(params["embed"], tokens, padding_idx=PAD)
    layers = [_sub(params, "lstm1"), _sub(params, "lstm2")]
    state = [(Tensor._wrap(np.zeros((B, h))), Tensor._wrap(np.zeros((B, h)))) for _ in layers]
    words = []
    for t in range(T):
        inp = ops.take(x_seq, t, axis=1)
        outs = []
        for li, w in enumerate(layers):
            hs, cs = lstm_cell(inp, *state[li], w["Wx"], w["Wh"], w["b"])
            state[li] = (hs, cs)
            inp = dropout(hs, cfg.dropout_lstm, rng, training)
            outs.append(inp)
        words.append(ops.concat(outs, axis=-1))
    word_feats = ops.stack(words, axis=1)
    pick = np.zeros((B, T))
    pick[np.arange(B), last_positions(tokens)] = 1.0
    last = ops.einsum("bt,btd->bd", Tensor._wrap(pick), word_feats)
    if unbatched:
        return _unbatch(word_feats, True), _unbatch(last, True)
    return word_feats, last


# ----------------------------------------------------------------- attention


@dataclass(frozen=True)
class AttentionHead:
    """linear -> ReLU -> linear producing one logit per glimpse at each position."""

    W1: Tensor
    W2: Tensor

    def __post_init__(self):
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W1.shape[1] != self.W2.shape[0]:
            raise DimensionError(f"attention head weights do not chain: {self.W1.shape} then {self.W2.shape}")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def glimpses(self) -> int:
        return self.W2.shape[1]

    def logits(self, feats: Tensor) -> Tensor:
        if feats.shape[-1] != self.in_dim:
            raise DimensionError(f"attention head expects features of width {self.in_dim}, got {feats.shape}")
        return ops.matmul(ops.relu(ops.matmul(feats, self.W1)), self.W2)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "AttentionHead":
        return cls(params[f"{prefix}.W1"], params[f"{prefix}.W2"])


def attend(logits: Tensor, feats: Tensor, mask=None, trace=None, key=None) -> Tensor:
    """Softmax ``logits`` (B, P, g) over positions and pool ``feats`` (B, P, d) into (B, g*d)."""
    weights = ops.softmax(logits, axis=1, mask=None if mask is None else np.repeat(mask[:, :, None], logits.shape[2], 2))
    if trace is not None and key is not None:
        trace[key] = weights.data
    pooled = ops.einsum("bpg,bpd->bgd", weights, feats)
    B, g, d = pooled.shape
    return ops.reshape(pooled, (B, g * d))


def question_attention(word_feats, head: AttentionHead, rng=None, training=False, mask=None, trace=None) -> Tensor:
    """Attend over words using the words alone (no image input). Returns (B, g*dq)."""
    feats, added = _batched(word_feats, 3)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(feats.shape[:2])
    out = attend(head.logits(feats), feats, mask, trace, "q_att")
    return _unbatch(out, added)


def image_attention(grid_feats, q_feat, fuse: FusionSpec, fuse_weights: Mapping[str, Tensor], head: AttentionHead,
                    rng=None, training=False, trace=None) -> Tensor:
    """Fuse the question with every grid cell, score cells, and pool. Returns (B, g*dv)."""
    grid, added = _batched(grid_feats, 3)
    q, q_added = _batched(q_feat, 2)
    if added != q_added or grid.shape[0] != q.shape[0]:
        raise DimensionError(f"grid {grid.shape} and question {q.shape} batch axes disagree")
    q_tiled = ops.repeat(q, grid.shape[1], axis=1)
    fused = fusion_block(fuse, grid, q_tiled, fuse_weights, rng, training)
    out = attend(head.logits(fused), grid, None, trace, "i_att")
    return _unbatch(out, added)


# ------------------------------------------------------------------ networks


def _classify(z: Tensor, params) -> Tensor:
    return ops.add_bias(ops.matmul(z, params["cls.W"]), params["cls.b"])


def coatt_forward(grid_feats, tokens, params: Mapping[str, Tensor], cfg: ModelConfig, rng=None, training=False,
                  trace=None, question_pooling="attention", image_pooling="attention") -> Tensor:
    """Question attention, question-conditioned image attention, final fusion, classifier.

    ``question_pooling="last"`` / ``image_pooling="mean"`` bypass the two heads
    (last-word question feature, mean grid feature). Bypasses need one glimpse
    so the final fusion keeps its input widths.
    """
    if (question_pooling, image_pooling) != ("attention", "attention") and cfg.glimpses != 1:
        raise ConfigurationError("attention bypass requires glimpses=1")
    grid, added = _batched(grid_feats, 3)
    if grid.shape[2] != cfg.grid_dim:
        raise DimensionError(f"grid features {grid.shape} do not match grid_dim {cfg.grid_dim}")
    tok = _tokens(tokens, cfg.vocab)
    if tok.shape[0] != grid.shape[0]:
        raise DimensionError(f"{tok.shape[0]} questions for {grid.shape[0]} images")
    words, last = encode_question(tok, params, cfg, rng, training)
    if question_pooling == "last":
        q = last
    else:
        q = question_attention(words, AttentionHead.from_params(params, "q_att"), rng, training, mask=tok != PAD,
                               trace=trace)
    if image_pooling == "mean":
        v = ops.mean(grid, axis=1)
    else:
        v = image_attention(grid, q, cfg.fuse_att, _sub(params, "fuse_att"), AttentionHead.from_params(params, "i_att"),
                            rng, training, trace=trace)
    z = fusion_block(cfg.fuse_final, v, q, _sub(params, "fuse_final"), rng, training, trace=trace)
    return _unbatch(_classify(z, params), added)


def baseline_forward(image_feat, tokens, params: Mapping[str, Tensor], cfg: ModelConfig, rng=None, training=False,
                     trace=None) -> Tensor:
    """Last-word question feature fused with a single image vector, then the classifier."""
    img, added = _batched(image_feat, 2)
    tok = _tokens(tokens, cfg.vocab)
    if tok.shape[0] != img.shape[0]:
        raise DimensionError(f"{tok.shape[0]} questions for {img.shape[0]} images")
    _, last = encode_question(tok, params, cfg, rng, training)
    z = fusion_block(cfg.fuse_final, img, last, _sub(params, "fuse_final"), rng, training, trace=trace)
    return _unbatch(_classify(z, params), added)


def forward(grid_feats, tokens, params, cfg: ModelConfig, rng=None, training=False, trace=None) -> Tensor:
    """Dispatch on ``cfg.architecture``; the baseline sees the mean grid feature."""
    if cfg.architecture == "baseline":
        grid, added = _batched(grid_feats, 3)
        out = baseline_forward(ops.mean(grid, axis=1), tokens, params, cfg, rng, training, trace)
        return _unbatch(out, added)
    return coatt_forward(grid_feats, tokens, params, cfg, rng, training, trace)


@dataclass
class CoAttModel:
    """A configuration plus its parameter arrays (numpy, owned, mutable between steps)."""

    cfg: ModelConfig
    params: dict

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "CoAttModel":
        return cls(cfg, init_params(cfg, seed))

    def tensors(self) -> dict:
        return {k: Tensor._wrap(v.copy()) for k, v in self.params.items()}

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def predict(self, grid_feats, tokens) -> np.ndarray:
        with no_tape():
            return forward(grid_feats, tokens, self.tensors(), self.cfg).data

    def with_config(self, **changes) -> "CoAttModel":
        return CoAttModel(replace(self.cfg, **changes), {k: v.copy() for k, v in self.params.items()})


def check_shapes(cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DimensionError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        got = tuple(np.shape(params[name]))
        if got != tuple(shape):
            raise DimensionError(f"{name}: expected shape {shape}, got {got}")
