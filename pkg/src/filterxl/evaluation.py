"""Paired inference, task metrics and the cross-lingual transfer gap."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .corpus import N_SPECIAL, TAG_NAMES
from .errors import DataError
from .model import CLASSIFICATION, SPAN, TAGGING, decode_span

SOURCE, TARGET = "source", "target"
PRIMARY_METRIC = {CLASSIFICATION: "accuracy", TAGGING: "entity_f1", SPAN: "f1"}


# ----------------------------------------------------------------- inference


def _decode(model, probs):
    kind = model.cfg.task.kind
    if kind == CLASSIFICATION:
        return int(np.argmax(probs))
    if kind == TAGGING:
        return [int(i) for i in np.argmax(probs, axis=1)]
    return decode_span(probs[0], probs[1], model.cfg.max_answer_len)


def infer(example, model, language=None, source_pairing="paired"):
    """Predict for the evaluated text of ``example``.

    The evaluated text always sits in the T slot with its translation in the
    S slot, and the prediction is decoded from the T-stream probabilities.
    ``source_pairing="unpaired"`` instead runs source text alone through the
    full stack.
    """
    language = language or example.eval_language
    if not example.source_tokens or not example.target_tokens:
        raise DataError(f"{example.id}: missing translation")
    with tn.no_grad():
        if language == TARGET:
            probs = model.forward_pair(example.source_tokens, example.target_tokens).p_t
        elif language == SOURCE:
            if source_pairing == "paired":
                probs = model.forward_pair(example.target_tokens, example.source_tokens).p_t
            elif source_pairing == "unpaired":
                probs = model.forward_single(example.source_tokens)[1]
            else:
                raise ValueError(f"unknown source_pairing {source_pairing!r}")
        else:
            raise DataError(f"unknown language {language!r}")
    return _decode(model, probs)


def gold_label(example, language):
    gold = example.label_target if language == TARGET else example.label_source
    if gold is None:
        raise DataError(f"{example.id}: no gold label for the {language} language")
    return gold


# ------------------------------------------------------------------- metrics


def accuracy(preds, golds):
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not golds:
        raise DataError("accuracy of an empty set is undefined")
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def bio_entities(tags):
    """Entity spans ``(start, end, type)`` from a BIO sequence.

    An ``I-X`` that does not continue an ``X`` entity opens a new one.
    """
    out = []
    start = kind = None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, typ = tag.partition("-")
        continues = prefix == "I" and kind == typ
        if kind is not None and not continues:
            out.append((start, i - 1, kind))
            start = kind = None
        if prefix in ("B", "I") and not continues:
            start, kind = i, typ
    return out


def _as_sentences(seqs):
    seqs = list(seqs)
    if seqs and isinstance(seqs[0], str):
        return [seqs]
    return seqs


def entity_prf(pred_tags, gold_tags):
    """Corpus-level entity precision, recall and F1.

    Accepts one tag sequence or a list of them.  No predicted and no gold
    entities at all counts as a perfect score.
    """
    preds, golds = _as_sentences(pred_tags), _as_sentences(gold_tags)
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predicted sequences for {len(golds)} gold sequences")
    n_pred = n_gold = n_hit = 0
    for p, g in zip(preds, golds):
        if len(p) != len(g):
            raise DataError(f"tag sequences differ in length: {len(p)} vs {len(g)}")
        pe, ge = set(bio_entities(p)), set(bio_entities(g))
        n_pred += len(pe)
        n_gold += len(ge)
        n_hit += len(pe & ge)
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = n_hit / n_pred if n_pred else 0.0
    recall = n_hit / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if n_hit else 0.0
    return precision, recall, f1


def entity_f1(pred_tags, gold_tags):
    return entity_prf(pred_tags, gold_tags)[2]


def span_em_f1(pred_span_tokens, gold_span_tokens):
    """Exact match and token-multiset F1 over token ids."""
    pred, gold = list(pred_span_tokens), list(gold_span_tokens)
    em = float(pred == gold)
    if not pred or not gold:
        return em, em
    same = sum((Counter(pred) & Counter(gold)).values())
    if same == 0:
        return em, 0.0
    p, r = same / len(pred), same / len(gold)
    return em, 2 * p * r / (p + r)


@dataclass
class MetricsReport:
    task: str
    metric: str
    scores: dict  # language -> {metric name: value}
    n_examples: dict = field(default_factory=dict)
    source_language: str = SOURCE
    meta: dict = field(default_factory=dict)

    @property
    def aggregate(self):
        return float(np.mean([s[self.metric] for s in self.scores.values()]))

    def to_dict(self):
        gap = transfer_gap(self) if self.source_language in self.scores and len(self.scores) > 1 else None
        return {
            "task": self.task,
            "metric": self.metric,
            "scores": self.scores,
            "n_examples": self.n_examples,
            "aggregate": self.aggregate,
            "transfer_gap": gap,
            "meta": self.meta,
        }

    def table(self):
        names = sorted({k for s in self.scores.values() for k in s})
        lines = [f"{'language':<10}" + "".join(f"{n:>14}" for n in names) + f"{'n':>8}"]
        for lang, s in self.scores.items():
            lines.append(f"{lang:<10}" + "".join(f"{s[n]:>14.4f}" for n in names) + f"{self.n_examples.get(lang, 0):>8}")
        lines.append(f"aggregate {self.metric}: {self.aggregate:.4f}")
        d = self.to_dict()
        if d["transfer_gap"] is not None:
            lines.append(f"transfer gap ({self.metric}): {d['transfer_gap']:.4f}")
        return "\n".join(lines)


def transfer_gap(report):
    """Source-language score minus the mean score of the other languages."""
    scores = report.scores
    if report.source_language not in scores:
        raise DataError("report has no source-language score")
    others = [s[report.metric] for lang, s in scores.items() if lang != report.source_language]
    if not others:
        raise DataError("report needs at least one non-source language")
    return scores[report.source_language][report.metric] - float(np.mean(others))


def tag_names(ids):
    return [TAG_NAMES[i] for i in ids]


def score_language(model, examples, language, source_pairing="paired"):
    kind = model.cfg.task.kind
    preds, golds, tokens = [], [], []
    for ex in examples:
        preds.append(infer(ex, model, language, source_pairing))
        golds.append(gold_label(ex, language))
        tokens.append(ex.target_tokens if language == TARGET else ex.source_tokens)
    if kind == CLASSIFICATION:
        return {"accuracy": accuracy(preds, golds)}
    if kind == TAGGING:
        hit = total = 0
        for p, g, toks in zip(preds, golds, tokens):
            for pi, gi, t in zip(p, g, toks):
                if t >= N_SPECIAL:
                    total += 1
                    hit += pi == gi
        return {
            "token_accuracy": hit / total,
            "entity_f1": entity_f1([tag_names(p) for p in preds], [tag_names(g) for g in golds]),
        }
    em_sum = f1_sum = 0.0
    for (ps, pe), (gs, ge), toks in zip(preds, golds, tokens):
        em, f1 = span_em_f1(toks[ps : pe + 1], toks[gs : ge + 1])
        em_sum += em
        f1_sum += f1
    return {"em": em_sum / len(preds), "f1": f1_sum / len(preds)}


def evaluate(model, examples, languages=(SOURCE, TARGET), source_pairing="paired", meta=None):
    if not examples:
        raise DataError("no examples to evaluate")
    kind = model.cfg.task.kind
    scores, counts = {}, {}
    for lang in languages:
        scores[lang] = score_language(model, examples, lang, source_pairing)
        counts[lang] = len(examples)
    return MetricsReport(kind, PRIMARY_METRIC[kind], scores, counts, meta=dict(meta or {}))


def write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
