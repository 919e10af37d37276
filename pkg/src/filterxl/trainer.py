"""Teacher training, frozen soft-label generation and student training.

The student objective is ``L_s + lam * L_t + (1 - lam) * L_kl`` where the KL
term compares the teacher's frozen target-stream distributions with the
student's target-stream logits.  Terms whose coefficient is exactly zero are
not computed at all, so ``lam = 1`` reproduces a plain teacher run.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DataError, DimensionError, LabelError, NumericError
from .model import CLASSIFICATION, SPAN, TAGGING, FilterModel
from .rng import Xoshiro256, derive_seed

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_LAMBDA = {CLASSIFICATION: 0.5, SPAN: 0.9, TAGGING: 0.0}


def default_lambda(kind):
    return DEFAULT_LAMBDA[kind]


@dataclass(frozen=True)
class TrainConfig:
    lambda_weight: float
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0

    def check(self, kind):
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ConfigError(f"lambda_weight={self.lambda_weight} outside [0, 1]")
        if kind == TAGGING and self.lambda_weight != 0.0:
            raise ConfigError("tagging transfers no target labels, so lambda_weight must be 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning_rate, batch_size and epochs must be positive")


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params`` (numpy arrays)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


class Adam:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.state = OptimizerState.zeros_like([p.data for p in self.params])

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr)


# -------------------------------------------------------------------- losses


def task_loss(kind, logits, label, tokens=None):
    """Supervised loss from head logits.

    classification: cross-entropy; tagging: mean token cross-entropy over
    non-padding positions; span: mean of start and end cross-entropies.
    """
    if kind == CLASSIFICATION:
        return tn.cross_entropy(logits, int(label))
    if kind == TAGGING:
        tags = list(label)
        if len(tags) != logits.rows:
            raise LabelError(f"{len(tags)} tags for a sequence of length {logits.rows}")
        if tokens is not None and 0 in tokens:
            keep = [i for i, t in enumerate(tokens) if t != 0]
            rows = tn.transpose(tn.take_cols(tn.transpose(logits), keep))
            return tn.cross_entropy(rows, [tags[i] for i in keep])
        return tn.cross_entropy(logits, tags)
    start, end = logits
    if len(label) != 2:
        raise LabelError(f"span label must be (start, end), got {label!r}")
    return tn.scale(tn.add(tn.cross_entropy(start, int(label[0])), tn.cross_entropy(end, int(label[1]))), 0.5)


def kl_loss(kind, p_teacher, logits):
    """KL(teacher || student) on the target stream, averaged like :func:`task_loss`."""
    if kind == SPAN:
        p_start, p_end = p_teacher
        start, end = logits
        return tn.scale(tn.add(tn.kl_divergence(p_start, start), tn.kl_divergence(p_end, end)), 0.5)
    return tn.kl_divergence(p_teacher, logits)


def combined_loss(l_s, l_t, l_kl, lam):
    """``l_s + lam * l_t + (1 - lam) * l_kl``; absent (None) terms contribute 0."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda={lam} outside [0, 1]")
    total = l_s
    if l_t is not None and lam != 0.0:
        total = tn.add(total, tn.scale(l_t, lam))
    if l_kl is not None and lam != 1.0:
        total = tn.add(total, tn.scale(l_kl, 1.0 - lam))
    return total


# ---------------------------------------------------------------- soft labels


class SoftLabelSet:
    """Frozen map from example id to teacher target-stream probabilities."""

    def __init__(self, entries):
        frozen = {}
        for eid in sorted(entries):
            value = entries[eid]
            if isinstance(value, tuple):
                value = tuple(_freeze(v) for v in value)
            else:
                value = _freeze(value)
            frozen[eid] = value
        self._entries = MappingProxyType(frozen)

    def __getitem__(self, eid):
        return self._entries[eid]

    def __contains__(self, eid):
        return eid in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def items(self):
        return self._entries.items()


def _freeze(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def generate_soft_labels(teacher, data):
    """Teacher target-stream probabilities for every example, computed untaped."""
    out = {}
    with tn.no_grad():
        for ex in data:
            if ex.id in out:
                raise DataError(f"duplicate example id {ex.id}")
            fw = teacher.forward_pair(ex.source_tokens, ex.target_tokens)
            out[ex.id] = fw.p_t
    return SoftLabelSet(out)


def _to_jsonable(value):
    if isinstance(value, tuple):
        return [v.tolist() for v in value]
    return value.tolist()


def write_soft_labels(path, soft_labels, header=None):
    """Line-delimited JSON: a header line, then ``{example_id, probabilities}`` per id."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"header": {"format": "filterxl-softlabels", "version": 1, **(header or {})}}, sort_keys=True) + "\n")
        for eid, value in soft_labels.items():
            fh.write(json.dumps({"example_id": eid, "probabilities": _to_jsonable(value)}, separators=(",", ":")) + "\n")


def read_soft_labels(path, kind):
    entries = {}
    header = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if "header" in rec:
                header = rec["header"]
                continue
            eid = rec["example_id"]
            if eid in entries:
                raise DataError(f"duplicate soft label for {eid}")
            probs = rec["probabilities"]
            entries[eid] = (np.array(probs[0]), np.array(probs[1])) if kind == SPAN else np.array(probs)
    return SoftLabelSet(entries), header


# ------------------------------------------------------------------ training


LOG_COLUMNS = ("phase", "epoch", "L_s", "L_t", "L_kl")


def _example_losses(model, ex, phase_lam, soft_labels):
    kind = model.cfg.task.kind
    fw = model.forward_pair(ex.source_tokens, ex.target_tokens)
    l_s = task_loss(kind, fw.logits_s, ex.label_source, ex.source_tokens)
    l_t = None
    # tagging never transfers target labels, whatever the record says
    if kind != TAGGING and phase_lam != 0.0 and ex.label_target is not None:
        l_t = task_loss(kind, fw.logits_t, ex.label_target, ex.target_tokens)
    l_kl = None
    if soft_labels is not None and phase_lam != 1.0:
        l_kl = kl_loss(kind, soft_labels[ex.id], fw.logits_t)
    return l_s, l_t, l_kl


def _fit(data, model_cfg, train_cfg, phase, lam, soft_labels=None, callback=None):
    if not data:
        raise DataError("training data is empty")
    train_cfg.check(model_cfg.task.kind)
    root = train_cfg.seed
    model = FilterModel.init(model_cfg, derive_seed(root, phase + ":init"))
    opt = Adam(model.parameters(), train_cfg.learning_rate)
    order_rng = Xoshiro256(derive_seed(root, phase + ":shuffle"))
    log = []
    n = len(data)
    for epoch in range(1, train_cfg.epochs + 1):
        order = order_rng.shuffle(list(range(n)))
        sums = {"L_s": 0.0, "L_t": 0.0, "L_kl": 0.0}
        seen = {"L_s": 0, "L_t": 0, "L_kl": 0}
        for b in range(0, n, train_cfg.batch_size):
            batch = order[b : b + train_cfg.batch_size]
            model.zero_grad()
            for idx in batch:
                ex = data[idx]
                with tn.Tape() as tape:
                    l_s, l_t, l_kl = _example_losses(model, ex, lam, soft_labels)
                    total = combined_loss(l_s, l_t, l_kl, lam)
                    scaled = tn.scale(total, 1.0 / len(batch))
                tape.backward(scaled)
                for key, val in (("L_s", l_s), ("L_t", l_t), ("L_kl", l_kl)):
                    if val is not None:
                        sums[key] += val.item()
                        seen[key] += 1
            opt.step()
        row = {"phase": phase, "epoch": epoch}
        for key in ("L_s", "L_t", "L_kl"):
            row[key] = sums[key] / seen[key] if seen[key] else None
        if not math.isfinite(row["L_s"]):
            raise NumericError(f"{phase} loss diverged at epoch {epoch}")
        log.append(row)
        if callback is not None and callback(epoch, model, row):
            break
    return model, log


def train_teacher(data, model_cfg, train_cfg, callback=None, phase="teacher"):
    """Minimise ``L_s + L_t`` (``L_s`` alone for tagging); returns ``(model, log)``."""
    return _fit(data, model_cfg, train_cfg, phase, 1.0, None, callback)


def train_student(data, soft_labels, model_cfg, train_cfg, callback=None, phase="student"):
    """Fresh model trained on the combined objective with frozen soft labels."""
    missing = [ex.id for ex in data if ex.id not in soft_labels]
    if missing:
        raise DataError(f"no soft label for {len(missing)} examples, e.g. {missing[0]}")
    return _fit(data, model_cfg, train_cfg, phase, train_cfg.lambda_weight, soft_labels, callback)


def write_log(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in LOG_COLUMNS])
