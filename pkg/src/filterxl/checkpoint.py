"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"FLTRCKPT"
    4 bytes   uint32 format version (1)
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header, keys sorted:
                {"config": FilterConfig dict, "meta": {...},
                 "params": [{"name", "rows", "cols", "offset"}, ...]}
    rest      float64 parameter values, row-major, concatenated in header order

``offset`` counts float64 elements from the start of the data block.
Parameter names follow ``embed.{tok,pos}``, ``layer.{i}.{attn|ffn|ln1|ln2}.*``
and ``head.*``.
"""

import json
import struct

import numpy as np

from .errors import DataError
from .model import FilterConfig, FilterModel
from .tensor import Tensor

MAGIC = b"FLTRCKPT"
VERSION = 1


def checkpoint_bytes(model, meta=None):
    entries = []
    blocks = []
    offset = 0
    for name, p in model.named_parameters():
        rows, cols = p.shape
        entries.append({"name": name, "rows": rows, "cols": cols, "offset": offset})
        blocks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        offset += rows * cols
    header = {"config": model.cfg.to_dict(), "meta": meta or {}, "params": entries}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw + b"".join(blocks)


def save_checkpoint(path, model, meta=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:8] != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<IQ", head[8:])
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(n).decode("utf-8")), 20 + n


def load_checkpoint(path):
    """Return ``(model, meta)``."""
    header, start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        values = np.frombuffer(fh.read(), dtype="<f8")
    named = {}
    for e in header["params"]:
        size = e["rows"] * e["cols"]
        chunk = values[e["offset"] : e["offset"] + size]
        if chunk.size != size:
            raise DataError(f"{path}: truncated data for {e['name']}")
        named[e["name"]] = Tensor(chunk.reshape(e["rows"], e["cols"]).astype(np.float64), requires_grad=True, name=e["name"])
    cfg = FilterConfig.from_dict(header["config"])
    return FilterModel.from_named(cfg, named), header["meta"]
