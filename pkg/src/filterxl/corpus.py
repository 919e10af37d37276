"""Deterministic synthetic bilingual corpora with exact alignments.

Two artificial languages share the special tokens PAD/BOS/SEP and have
disjoint content vocabularies of ``V`` tokens each.  "Translation" maps every
source content token through a fixed bijection and then swaps adjacent
content tokens pairwise inside each SEP-delimited segment, so the position
alignment is known exactly.  An optional noise rate replaces target content
tokens at random, standing in for imperfect machine translation.

Three task families are generated: sentence-pair classification, token
tagging (BIO over two entity types) and extractive spans (context SEP
question).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import DataError, VocabularyError
from .model import CLASSIFICATION, SPAN, TAGGING
from .rng import Xoshiro256, derive_seed

PAD, BOS, SEP = 0, 1, 2
N_SPECIAL = 3
DEFAULT_VOCAB = 64
MIN_LEN, MAX_LEN = 4, 16
FORMAT_VERSION = 1
RECORD_FIELDS = (
    "id", "split", "source_tokens", "target_tokens", "alignment",
    "label_source", "label_target", "eval_language",
)

N_CLASSES = 3
TAG_NAMES = ("O", "B-A", "I-A", "B-B", "I-B")
N_TAGS = len(TAG_NAMES)

# token classes, as ranges of the source content index (token id - 3)
CLASS_MARKERS = {"A": range(0, 4), "B": range(4, 8)}
TAG_ENTITIES = {"A": range(0, 12), "B": range(12, 24)}
SPAN_ENTITIES = {"A": range(0, 10), "B": range(10, 20)}
SPAN_QUESTION = {"A": 20, "B": 21}
SPAN_FILLER_START = 22


def vocab_size(v=DEFAULT_VOCAB):
    return N_SPECIAL + 2 * v


@dataclass
class Lexicon:
    """Bijection between the two content vocabularies."""

    v: int
    to_target: list  # to_target[r] = target id for source id 3 + r
    to_source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.to_source = {t: N_SPECIAL + r for r, t in enumerate(self.to_target)}

    @classmethod
    def build(cls, seed, v=DEFAULT_VOCAB):
        targets = list(range(N_SPECIAL + v, N_SPECIAL + 2 * v))
        Xoshiro256(derive_seed(seed, "lexicon")).shuffle(targets)
        return cls(v, targets)

    def is_source(self, tok):
        return N_SPECIAL <= tok < N_SPECIAL + self.v

    def is_target(self, tok):
        return N_SPECIAL + self.v <= tok < N_SPECIAL + 2 * self.v

    def source_index(self, tok):
        """Content index 0..V-1 of a source token or of a target token's preimage."""
        if self.is_target(tok):
            tok = self.to_source[tok]
        if not self.is_source(tok):
            raise VocabularyError(f"token {tok} is not a content token")
        return tok - N_SPECIAL


def reorder(n):
    """Pairwise swap permutation for ``n`` content tokens: index -> new index."""
    return [c ^ 1 if (c ^ 1) < n else c for c in range(n)]


def _segments(tokens):
    """Yield ``(start, stop)`` ranges of content between specials."""
    start = None
    for p, t in enumerate(tokens):
        if t < N_SPECIAL:
            if start is not None:
                yield start, p
                start = None
        elif start is None:
            start = p
    if start is not None:
        yield start, len(tokens)


def alignment_for(tokens):
    align = list(range(len(tokens)))
    for start, stop in _segments(tokens):
        for c, new in enumerate(reorder(stop - start)):
            align[start + c] = start + new
    return align


def translate(tokens, lexicon, noise=0.0, rng=None):
    """Return ``(target_tokens, alignment)`` with ``alignment[i]`` the target position of source position ``i``."""
    tokens = [int(t) for t in tokens]
    out = [0] * len(tokens)
    align = alignment_for(tokens)
    for i, t in enumerate(tokens):
        if t < N_SPECIAL:
            out[align[i]] = t
        elif lexicon.is_source(t):
            mapped = lexicon.to_target[t - N_SPECIAL]
            if noise > 0 and rng.random() < noise:
                mapped = N_SPECIAL + lexicon.v + rng.randbelow(lexicon.v)
            out[align[i]] = mapped
        else:
            raise VocabularyError(f"token {t} is not in the source vocabulary")
    return out, align


def back_translate(tokens, lexicon):
    """Exact inverse of noise-free :func:`translate` (pair swaps are involutions)."""
    tokens = [int(t) for t in tokens]
    out = [0] * len(tokens)
    align = alignment_for(tokens)
    for j, t in enumerate(tokens):
        if t < N_SPECIAL:
            out[align[j]] = t
        elif lexicon.is_target(t):
            out[align[j]] = lexicon.to_source[t]
        else:
            raise VocabularyError(f"token {t} is not in the target vocabulary")
    return out


@dataclass
class BilingualExample:
    id: str
    split: str
    source_tokens: list
    target_tokens: list
    alignment: list
    label_source: object
    label_target: object = None
    eval_language: str = "source"

    def to_record(self):
        return {name: getattr(self, name) for name in RECORD_FIELDS}

    @classmethod
    def from_record(cls, rec):
        if tuple(rec) != RECORD_FIELDS:
            raise DataError(f"record fields {list(rec)} do not match {list(RECORD_FIELDS)}")
        return cls(**rec)


# ------------------------------------------------------------- generators


def _filler(rng, lo):
    return N_SPECIAL + lo + rng.randbelow(DEFAULT_VOCAB - lo)


def _in(rng, r):
    return N_SPECIAL + r.start + rng.randbelow(len(r))


def _classification_example(rng):
    """Label 0: no marker; 1: markers of group A; 2: markers of group B."""
    label = rng.randbelow(N_CLASSES)
    prem = [_filler(rng, 8) for _ in range(rng.randint(MIN_LEN, MAX_LEN))]
    hyp = [_filler(rng, 8) for _ in range(rng.randint(MIN_LEN, MAX_LEN))]
    if label:
        group = CLASS_MARKERS["A" if label == 1 else "B"]
        for _ in range(rng.randint(1, 2)):
            seg = prem if rng.randbelow(2) == 0 else hyp
            seg[rng.randbelow(len(seg))] = _in(rng, group)
    return [BOS] + prem + [SEP] + hyp, label


def token_class(index, table):
    for name, r in table.items():
        if index in r:
            return name
    return None


def tag_sequence(tokens, lexicon):
    """BIO tags: a maximal run of same-type entity tokens is B then I..."""
    tags = []
    prev = None
    for t in tokens:
        cls = token_class(lexicon.source_index(t), TAG_ENTITIES) if t >= N_SPECIAL else None
        if cls is None:
            tags.append(0)
        else:
            base = 1 if cls == "A" else 3
            tags.append(base + 1 if prev == cls else base)
        prev = cls
    return tags


def _tagging_tokens(rng):
    out = []
    prev = None
    for _ in range(rng.randint(MIN_LEN, MAX_LEN)):
        if prev is not None and rng.random() < 0.5:
            cls = prev
        else:
            u = rng.random()
            cls = None if u < 0.5 else ("A" if u < 0.75 else "B")
        out.append(_filler(rng, 24) if cls is None else _in(rng, TAG_ENTITIES[cls]))
        prev = cls
    return [BOS] + out


def _span_tokens(rng):
    """Context with one A-run and one B-run; the question names the type asked for."""
    n = rng.randint(6, MAX_LEN)
    ctx = [_filler(rng, SPAN_FILLER_START) for _ in range(n)]
    la, lb = rng.randint(1, 3), rng.randint(1, 3)
    while la + lb + 1 > n:  # both runs plus a separating filler must fit
        lb = rng.randint(1, 3)
    while True:
        sa = rng.randbelow(n - la + 1)
        sb = rng.randbelow(n - lb + 1)
        if sa + la < sb or sb + lb < sa:  # disjoint with at least one filler between
            break
    for i in range(la):
        ctx[sa + i] = _in(rng, SPAN_ENTITIES["A"])
    for i in range(lb):
        ctx[sb + i] = _in(rng, SPAN_ENTITIES["B"])
    asked = "A" if rng.randbelow(2) == 0 else "B"
    question = [N_SPECIAL + SPAN_QUESTION[asked]] + [_filler(rng, SPAN_FILLER_START) for _ in range(rng.randint(1, 3))]
    start, length = (sa, la) if asked == "A" else (sb, lb)
    # +1 for BOS
    return [BOS] + ctx + [SEP] + question, (start + 1, start + length)


def transfer_span(span, alignment):
    """Map a source span through the alignment; None if it is not contiguous."""
    pos = sorted(alignment[i] for i in range(span[0], span[1] + 1))
    if pos[-1] - pos[0] != len(pos) - 1:
        return None
    return pos[0], pos[-1]


@dataclass
class Dataset:
    task: str
    seed: int
    noise: float
    lexicon: Lexicon
    splits: dict  # split -> list[BilingualExample]
    regenerated: int = 0

    def manifest(self):
        tables = {CLASSIFICATION: CLASS_MARKERS, TAGGING: TAG_ENTITIES, SPAN: SPAN_ENTITIES}
        return {
            "format_version": FORMAT_VERSION,
            "task": self.task,
            "seed": self.seed,
            "noise": self.noise,
            "vocab_per_language": self.lexicon.v,
            "vocab_size": vocab_size(self.lexicon.v),
            "lexicon": list(self.lexicon.to_target),
            "token_classes": {k: [r.start, r.stop] for k, r in tables[self.task].items()},
            "tag_names": list(TAG_NAMES) if self.task == TAGGING else None,
            "counts": {s: len(v) for s, v in self.splits.items()},
            "regenerated": self.regenerated,
        }

    def all_examples(self):
        return [ex for s in ("train", "dev", "test") for ex in self.splits.get(s, [])]


def split_sizes(n):
    n_dev = n // 10
    n_test = n // 10
    return {"train": n - n_dev - n_test, "dev": n_dev, "test": n_test}


def generate(task, n, seed, noise=0.0, v=DEFAULT_VOCAB):
    """Generate ``n`` examples split 80/10/10; each split has its own seed stream."""
    if n < 1:
        raise DataError("n must be >= 1")
    if task not in (CLASSIFICATION, TAGGING, SPAN):
        raise DataError(f"unknown task {task!r}")
    if not 0.0 <= noise < 1.0:
        raise DataError("noise must be in [0, 1)")
    lexicon = Lexicon.build(seed, v)
    splits = {}
    regenerated = 0
    prefix = {CLASSIFICATION: "cls", TAGGING: "tag", SPAN: "span"}[task]
    for split, size in split_sizes(n).items():
        rng = Xoshiro256(derive_seed(seed, f"{task}:{split}"))
        noise_rng = Xoshiro256(derive_seed(seed, f"{task}:{split}:noise"))
        evaluated = "source" if split == "train" else "target"
        items = []
        for i in range(size):
            eid = f"{prefix}-{split}-{i:06d}"
            if task == CLASSIFICATION:
                src, label = _classification_example(rng)
                tgt, align = translate(src, lexicon, noise, noise_rng)
                ex = BilingualExample(eid, split, src, tgt, align, label, label, evaluated)
            elif task == TAGGING:
                src = _tagging_tokens(rng)
                tgt, align = translate(src, lexicon, noise, noise_rng)
                l_t = None if split == "train" else tag_sequence(tgt, lexicon)
                ex = BilingualExample(eid, split, src, tgt, align, tag_sequence(src, lexicon), l_t, evaluated)
            else:
                while True:
                    src, span = _span_tokens(rng)
                    align = alignment_for(src)
                    t_span = transfer_span(span, align)
                    if t_span is not None:
                        break
                    regenerated += 1
                tgt, align = translate(src, lexicon, noise, noise_rng)
                ex = BilingualExample(eid, split, src, tgt, align, list(span), list(t_span), evaluated)
            items.append(ex)
        splits[split] = items
    return Dataset(task, seed, noise, lexicon, splits, regenerated)


def generate_classification_task(n, seed, noise=0.0):
    return generate(CLASSIFICATION, n, seed, noise)


def generate_tagging_task(n, seed, noise=0.0):
    return generate(TAGGING, n, seed, noise)


def generate_span_task(n, seed, noise=0.0):
    return generate(SPAN, n, seed, noise)


# --------------------------------------------------------------------- io


def dumps_record(rec):
    return json.dumps(rec, separators=(",", ":"))


def write_dataset(dataset, out_dir):
    """Write ``{train,dev,test}.jsonl`` plus ``manifest.json``; returns the counts."""
    os.makedirs(out_dir, exist_ok=True)
    for split, items in dataset.splits.items():
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
            for ex in items:
                fh.write(dumps_record(ex.to_record()) + "\n")
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(dataset.manifest(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return {s: len(v) for s, v in dataset.splits.items()}


def read_split(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(BilingualExample.from_record(json.loads(line)))
    ids = [ex.id for ex in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate example ids")
    return out


def read_manifest(data_dir):
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)
