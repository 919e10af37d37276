"""Brute-force re-derivation of every transferred target label in a dataset.

Deliberately shares no code with the generator: it reads the JSONL files and
``manifest.json`` and recomputes each ``label_target`` from first principles.

    python -m filterxl.rederive DATA_DIR
"""

import json
import os
import sys


def _class_of(index, classes):
    for name, (lo, hi) in classes.items():
        if lo <= index < hi:
            return name
    return None


def expected_target_label(rec, manifest):
    task = manifest["task"]
    align = rec["alignment"]
    if task == "classification":
        return rec["label_source"]
    if task == "span":
        s, e = rec["label_source"]
        hits = []
        for j in range(len(rec["target_tokens"])):
            for i in range(s, e + 1):
                if align[i] == j:
                    hits.append(j)
        for a, b in zip(hits, hits[1:]):
            if b != a + 1:
                return "non-contiguous"
        return [hits[0], hits[-1]]
    # tagging: gold target tags exist only outside the training split
    if rec["split"] == "train":
        return None
    v = manifest["vocab_per_language"]
    inverse = {}
    for r, t in enumerate(manifest["lexicon"]):
        inverse[t] = r
    classes = manifest["token_classes"]
    names = manifest["tag_names"]
    tags = []
    prev = None
    for tok in rec["target_tokens"]:
        cls = None
        if tok >= 3 + v:
            cls = _class_of(inverse[tok], classes)
        if cls is None:
            tags.append(names.index("O"))
        elif prev == cls:
            tags.append(names.index("I-" + cls))
        else:
            tags.append(names.index("B-" + cls))
        prev = cls
    return tags


def check_dir(data_dir):
    """Return ``(checked, mismatches)`` over all splits present in ``data_dir``."""
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    checked, bad = 0, []
    for split in ("train", "dev", "test"):
        path = os.path.join(data_dir, f"{split}.jsonl")
        if not os.path.exists(path):
            continue
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                checked += 1
                if expected_target_label(rec, manifest) != rec["label_target"]:
                    bad.append(rec["id"])
    return checked, bad


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m filterxl.rederive DATA_DIR", file=sys.stderr)
        return 2
    checked, bad = check_dir(argv[0])
    print(f"checked {checked} records, {len(bad)} mismatches")
    for rid in bad[:20]:
        print("  mismatch:", rid)
    return 0 if not bad else 3


if __name__ == "__main__":
    sys.exit(main())
