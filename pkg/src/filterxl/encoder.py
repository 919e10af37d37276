"""XLM-style transformer encoder blocks on d x len column layouts.

Post-norm layers (residual, then layer norm), learned absolute position
embeddings added only at the embedding stage, no dropout.  One set of layer
weights encodes every stream handed to it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DataError, DimensionError, LengthError, VocabularyError
from .rng import Xoshiro256, derive_seed
from .tensor import Tensor

PAD = 0
LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    max_positions: int = 64
    n_layers: int = 6

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "max_positions", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def to_dict(self):
        return asdict(self)


LAYER_FIELDS = (
    ("attn.q.weight", "dd"),
    ("attn.q.bias", "d1"),
    ("attn.k.weight", "dd"),
    ("attn.k.bias", "d1"),
    ("attn.v.weight", "dd"),
    ("attn.v.bias", "d1"),
    ("attn.o.weight", "dd"),
    ("attn.o.bias", "d1"),
    ("ffn.in.weight", "fd"),
    ("ffn.in.bias", "f1"),
    ("ffn.out.weight", "df"),
    ("ffn.out.bias", "d1"),
    ("ln1.gain", "d1"),
    ("ln1.bias", "d1"),
    ("ln2.gain", "d1"),
    ("ln2.bias", "d1"),
)


@dataclass
class LayerWeights:
    """Weights of one encoder layer.

    The attention projections are stored as full d x d matrices; head ``h``
    uses rows ``[h*d/heads, (h+1)*d/heads)`` of Q, K, V and the matching
    columns of O.
    """

    params: dict

    def __getitem__(self, key):
        return self.params[key]


@dataclass
class EncoderWeights:
    tok_emb: Tensor  # d x vocab
    pos_emb: Tensor  # d x max_positions
    layers: list = field(default_factory=list)

    def named_parameters(self):
        out = [("embed.tok", self.tok_emb), ("embed.pos", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            for key, _ in LAYER_FIELDS:
                out.append((f"layer.{i}.{key}", layer.params[key]))
        return out


def _shape(code, cfg):
    dims = {"d": cfg.d_model, "f": cfg.d_ff, "1": 1}
    return dims[code[0]], dims[code[1]]


def uniform_param(root_seed, name, rows, cols, bound):
    """Parameter drawn from its own named stream of the root seed."""
    rng = Xoshiro256(derive_seed(root_seed, "param:" + name))
    data = rng.uniform_array(rows * cols, -bound, bound).reshape(rows, cols)
    return Tensor(data, requires_grad=True, name=name)


def init_encoder(cfg, seed):
    """Uniform(-1/sqrt(d), 1/sqrt(d)) matrices, zero biases, unit LN gains."""
    bound = 1.0 / np.sqrt(cfg.d_model)
    tok = uniform_param(seed, "embed.tok", cfg.d_model, cfg.vocab_size, bound)
    pos = uniform_param(seed, "embed.pos", cfg.d_model, cfg.max_positions, bound)
    layers = []
    for i in range(cfg.n_layers):
        params = {}
        for key, code in LAYER_FIELDS:
            name = f"layer.{i}.{key}"
            rows, cols = _shape(code, cfg)
            if key.endswith(".gain"):
                params[key] = Tensor(np.ones((rows, cols)), requires_grad=True, name=name)
            elif key.endswith("bias"):
                params[key] = Tensor(np.zeros((rows, cols)), requires_grad=True, name=name)
            else:
                params[key] = uniform_param(seed, name, rows, cols, bound)
        layers.append(LayerWeights(params))
    return EncoderWeights(tok, pos, layers)


def encoder_from_named(cfg, named):
    """Rebuild :class:`EncoderWeights` from a name -> Tensor mapping."""
    layers = []
    for i in range(cfg.n_layers):
        layers.append(LayerWeights({key: named[f"layer.{i}.{key}"] for key, _ in LAYER_FIELDS}))
    return EncoderWeights(named["embed.tok"], named["embed.pos"], layers)


class AttentionMask:
    """Boolean query x key matrix of permitted attention links."""

    def __init__(self, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise DimensionError(f"attention mask must be square, got {allowed.shape}")
        self.allowed = allowed

    @property
    def size(self):
        return self.allowed.shape[0]

    @classmethod
    def from_tokens(cls, tokens):
        """Every query may attend to every non-padding key."""
        keys = np.asarray(tokens) != PAD
        if not keys.any():
            raise DataError("sequence consists of padding only")
        return cls(np.broadcast_to(keys, (len(keys), len(keys))))

    def additive(self):
        return np.where(self.allowed, 0.0, tn.MASK_VALUE)


def check_tokens(tokens, cfg):
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise DataError("empty token sequence")
    if len(tokens) > cfg.max_positions:
        raise LengthError(f"sequence length {len(tokens)} exceeds max_positions={cfg.max_positions}")
    bad = [t for t in tokens if not 0 <= t < cfg.vocab_size]
    if bad:
        raise VocabularyError(f"token ids {bad[:5]} outside vocabulary of size {cfg.vocab_size}")
    return tokens


def embed(tokens, cfg, weights):
    """Token plus position embeddings, positions counted from 0."""
    tokens = check_tokens(tokens, cfg)
    tok = tn.take_cols(weights.tok_emb, tokens)
    pos = tn.take_cols(weights.pos_emb, range(len(tokens)))
    return tn.add(tok, pos)


def _ln_cols(h, gain, bias):
    # columns are tokens, so normalise along axis 0
    return tn.layer_norm(h, gain, bias, LN_EPS, axis=0)


def multi_head_attention(h, mask, w, n_heads):
    if mask.size != h.cols:
        raise DimensionError(f"mask of size {mask.size} does not match length {h.cols}")
    q = tn.linear(w["attn.q.weight"], h, w["attn.q.bias"])
    k = tn.linear(w["attn.k.weight"], h, w["attn.k.bias"])
    v = tn.linear(w["attn.v.weight"], h, w["attn.v.bias"])
    heads = tn.attention(q, k, v, n_heads, mask.additive())
    return tn.linear(w["attn.o.weight"], heads, w["attn.o.bias"])


def feed_forward(h, w):
    inner = tn.gelu(tn.linear(w["ffn.in.weight"], h, w["ffn.in.bias"]))
    return tn.linear(w["ffn.out.weight"], inner, w["ffn.out.bias"])


def encoder_layer(h, mask, w, n_heads):
    h = _ln_cols(tn.add(h, multi_head_attention(h, mask, w, n_heads)), w["ln1.gain"], w["ln1.bias"])
    return _ln_cols(tn.add(h, feed_forward(h, w)), w["ln2.gain"], w["ln2.bias"])


def run_stack(h, mask, weights, start, stop, n_heads):
    """Apply layers ``[start, stop)`` in order; an empty range is the identity."""
    if not 0 <= start <= stop <= len(weights.layers):
        raise IndexError(f"layer range [{start}, {stop}) outside [0, {len(weights.layers)})")
    for i in range(start, stop):
        h = encoder_layer(h, mask, weights.layers[i], n_heads)
    return h


def encode(tokens, cfg, weights):
    """Plain single-stream encoder over all layers."""
    h = embed(tokens, cfg, weights)
    return run_stack(h, AttentionMask.from_tokens(tokens), weights, 0, cfg.n_layers, cfg.n_heads)
