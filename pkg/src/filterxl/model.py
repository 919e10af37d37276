"""The three-stage FILTER forward pass and its task heads.

A source sequence S and its translation T are encoded separately by the
``m`` local layers, jointly by the ``k`` fusion layers over the concatenated
d x (l_s + l_t) matrix, and separately again by the remaining domain layers.
All layers and the task head are shared between the two streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoder import (
    AttentionMask,
    EncoderConfig,
    embed,
    encoder_from_named,
    init_encoder,
    run_stack,
    uniform_param,
)
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

CLASSIFICATION = "classification"
TAGGING = "tagging"
SPAN = "span"
TASK_KINDS = (CLASSIFICATION, TAGGING, SPAN)

SPECIAL_TOKENS = 3  # PAD, BOS, SEP occupy ids 0..2
SEP = 2
DEFAULT_MAX_ANSWER_LEN = 8


@dataclass(frozen=True)
class TaskKind:
    kind: str
    n_labels: int = 0  # C for classification, Y for tagging, unused for spans

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind != SPAN and self.n_labels < 2:
            raise ConfigError(f"{self.kind} needs at least 2 labels")

    @classmethod
    def classification(cls, n_classes):
        return cls(CLASSIFICATION, n_classes)

    @classmethod
    def tagging(cls, n_tags):
        return cls(TAGGING, n_tags)

    @classmethod
    def span(cls):
        return cls(SPAN, 0)


@dataclass(frozen=True)
class FilterConfig:
    encoder: EncoderConfig
    m_local: int
    k_fuse: int
    task: TaskKind
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN

    @property
    def n_domain(self):
        return self.encoder.n_layers - self.m_local - self.k_fuse

    def to_dict(self):
        return {
            "encoder": self.encoder.to_dict(),
            "m_local": self.m_local,
            "k_fuse": self.k_fuse,
            "task": {"kind": self.task.kind, "n_labels": self.task.n_labels},
            "max_answer_len": self.max_answer_len,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            m_local=int(d["m_local"]),
            k_fuse=int(d["k_fuse"]),
            task=TaskKind(d["task"]["kind"], int(d["task"]["n_labels"])),
            max_answer_len=int(d.get("max_answer_len", DEFAULT_MAX_ANSWER_LEN)),
        )


def validate_config(cfg):
    """Return the stage sizes ``(m, k, L - m - k)`` or raise ConfigError."""
    m, k, L = cfg.m_local, cfg.k_fuse, cfg.encoder.n_layers
    if m < 0 or k < 0:
        raise ConfigError(f"m_local={m} and k_fuse={k} must be non-negative")
    if m + k > L:
        raise ConfigError(f"constraint m + k <= L violated: m={m}, k={k}, L={L}")
    if cfg.max_answer_len < 1:
        raise ConfigError("max_answer_len must be >= 1")
    return m, k, L - m - k


# ------------------------------------------------------------------ heads


def classification_head(h, w, b):
    """Logits (1 x C) from the first (BOS) position."""
    pooled = tn.slice_cols(h, 0, 1)
    return tn.transpose(tn.linear(w, pooled, b))


def tagging_head(h, w, b):
    """Per-position logits, len x Y."""
    return tn.transpose(tn.linear(w, h, b))


def span_head(h, w_start, b_start, w_end, b_end, allowed=None):
    """Start and end logits (each 1 x len); disallowed positions get -1e9."""
    start = tn.linear(w_start, h, b_start)
    end = tn.linear(w_end, h, b_end)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool).reshape(1, -1)
        if allowed.shape[1] != h.cols:
            raise DimensionError(f"span mask of length {allowed.shape[1]} for {h.cols} positions")
        penalty = np.where(allowed, 0.0, tn.MASK_VALUE)
        start = tn.add_constant(start, penalty)
        end = tn.add_constant(end, penalty)
    return start, end


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probabilities(task, logits):
    """Turn head logits into the task's probability structure (numpy)."""
    if task.kind == CLASSIFICATION:
        return _softmax(logits.data[0])
    if task.kind == TAGGING:
        return _softmax(logits.data)
    start, end = logits
    return _softmax(start.data[0]), _softmax(end.data[0])


def decode_span(p_start, p_end, max_answer_len=DEFAULT_MAX_ANSWER_LEN):
    """``(i, j)`` maximising ``p_start[i] * p_end[j]`` with ``i <= j < i + max_answer_len``.

    Ties resolve to the smallest ``i`` then the smallest ``j``.
    """
    p_start = np.asarray(p_start, dtype=float)
    p_end = np.asarray(p_end, dtype=float)
    n = len(p_start)
    i, j = np.indices((n, n))
    valid = (i <= j) & (j - i < max_answer_len)
    score = np.where(valid, np.outer(p_start, p_end), -np.inf)
    flat = int(np.argmax(score))
    return flat // n, flat % n


def context_positions(tokens):
    """Positions of the first segment's content (after BOS, before the first SEP)."""
    tokens = list(tokens)
    stop = tokens.index(SEP) if SEP in tokens else len(tokens)
    allowed = np.zeros(len(tokens), dtype=bool)
    for p in range(stop):
        allowed[p] = tokens[p] >= SPECIAL_TOKENS
    if not allowed.any():
        raise DataError("span example has no context positions")
    return allowed


# ------------------------------------------------------------------ model


def _head_shapes(cfg):
    d = cfg.encoder.d_model
    task = cfg.task
    if task.kind == CLASSIFICATION:
        return [("head.cls.weight", task.n_labels, d), ("head.cls.bias", task.n_labels, 1)]
    if task.kind == TAGGING:
        return [("head.tag.weight", task.n_labels, d), ("head.tag.bias", task.n_labels, 1)]
    return [
        ("head.span.start.weight", 1, d),
        ("head.span.start.bias", 1, 1),
        ("head.span.end.weight", 1, d),
        ("head.span.end.bias", 1, 1),
    ]


@dataclass
class PairForward:
    h_s_local: Tensor
    h_t_local: Tensor
    h_s_fused: Tensor
    h_t_fused: Tensor
    h_s_domain: Tensor
    h_t_domain: Tensor
    h_joint: Tensor | None  # output of the fusion stack, None when k = 0
    logits_s: object
    logits_t: object
    p_s: object
    p_t: object


class FilterModel:
    """Configuration plus parameters; the forward pass is :meth:`forward_pair`."""

    def __init__(self, cfg, encoder_weights, head):
        validate_config(cfg)
        self.cfg = cfg
        self.encoder = encoder_weights
        self.head = head

    @classmethod
    def init(cls, cfg, seed):
        validate_config(cfg)
        enc = init_encoder(cfg.encoder, seed)
        bound = 1.0 / np.sqrt(cfg.encoder.d_model)
        head = {}
        for name, rows, cols in _head_shapes(cfg):
            if name.endswith("bias"):
                head[name] = Tensor(np.zeros((rows, cols)), requires_grad=True, name=name)
            else:
                head[name] = uniform_param(seed, name, rows, cols, bound)
        return cls(cfg, enc, head)

    @classmethod
    def from_named(cls, cfg, named):
        validate_config(cfg)
        enc = encoder_from_named(cfg.encoder, named)
        head = {name: named[name] for name, _, _ in _head_shapes(cfg)}
        return cls(cfg, enc, head)

    def named_parameters(self):
        return self.encoder.named_parameters() + [(n, self.head[n]) for n, _, _ in _head_shapes(self.cfg)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def copy(self):
        named = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.named_parameters()}
        return FilterModel.from_named(self.cfg, named)

    # -------------------------------------------------------------- heads

    def apply_head(self, h, tokens):
        kind = self.cfg.task.kind
        hd = self.head
        if kind == CLASSIFICATION:
            return classification_head(h, hd["head.cls.weight"], hd["head.cls.bias"])
        if kind == TAGGING:
            return tagging_head(h, hd["head.tag.weight"], hd["head.tag.bias"])
        return span_head(
            h,
            hd["head.span.start.weight"],
            hd["head.span.start.bias"],
            hd["head.span.end.weight"],
            hd["head.span.end.bias"],
            allowed=context_positions(tokens),
        )

    # ------------------------------------------------------------ forward

    def forward_pair(self, S, T):
        cfg = self.cfg
        enc_cfg = cfg.encoder
        m, k, _ = validate_config(cfg)
        L, heads = enc_cfg.n_layers, enc_cfg.n_heads
        S, T = list(S), list(T)
        h_s = embed(S, enc_cfg, self.encoder)
        h_t = embed(T, enc_cfg, self.encoder)
        mask_s = AttentionMask.from_tokens(S)
        mask_t = AttentionMask.from_tokens(T)

        h_s_local = run_stack(h_s, mask_s, self.encoder, 0, m, heads)
        h_t_local = run_stack(h_t, mask_t, self.encoder, 0, m, heads)

        h_joint = None
        if k > 0:
            joint = tn.concat_cols(h_s_local, h_t_local)
            h_joint = run_stack(joint, AttentionMask.from_tokens(S + T), self.encoder, m, m + k, heads)
            h_s_fused, h_t_fused = tn.split_cols(h_joint, len(S))
        else:
            h_s_fused, h_t_fused = h_s_local, h_t_local

        h_s_domain = run_stack(h_s_fused, mask_s, self.encoder, m + k, L, heads)
        h_t_domain = run_stack(h_t_fused, mask_t, self.encoder, m + k, L, heads)

        logits_s = self.apply_head(h_s_domain, S)
        logits_t = self.apply_head(h_t_domain, T)
        return PairForward(
            h_s_local, h_t_local, h_s_fused, h_t_fused, h_s_domain, h_t_domain, h_joint,
            logits_s, logits_t,
            probabilities(cfg.task, logits_s), probabilities(cfg.task, logits_t),
        )

    def forward_single(self, tokens):
        """Unpaired pass: one stream through all layers, returns (logits, probs)."""
        enc_cfg = self.cfg.encoder
        tokens = list(tokens)
        h = embed(tokens, enc_cfg, self.encoder)
        h = run_stack(h, AttentionMask.from_tokens(tokens), self.encoder, 0, enc_cfg.n_layers, enc_cfg.n_heads)
        logits = self.apply_head(h, tokens)
        return logits, probabilities(self.cfg.task, logits)
