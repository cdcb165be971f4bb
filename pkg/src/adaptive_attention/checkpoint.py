"""Binary checkpoint files.

Layout (all integers little-endian)::

    8 bytes   magic b"AANLICKP"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header: model config, vocabulary, tensor index
    ...       concatenated '<f8' payloads, in header order

Each tensor index entry is ``{"name", "shape", "offset", "frozen"}`` with
``offset`` counted in bytes from the start of the payload section. The
frozen embedding matrix is stored under the name ``"embedding"``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .errors import DataFormatError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"AANLICKP"
VERSION = 1
EMBEDDING_KEY = "embedding"


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None):
    arrays = [(EMBEDDING_KEY, params.embedding, True)]
    arrays += [(name, t.data, False) for name, t in params.items()]
    index, offset = [], 0
    for name, arr, frozen in arrays:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "frozen": frozen})
        offset += arr.size * 8
    header = {
        "config": params.config.to_dict(),
        "vocab": params.vocab.itos if params.vocab is not None else None,
        "tensors": index,
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for _, arr, _ in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        return _read_header(fh, path)[0]


def _read_header(fh, path):
    if fh.read(8) != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", fh.read(12))
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(fh.read(hlen).decode("utf-8")), 20 + hlen


def load_checkpoint(path: str | Path) -> ModelParams:
    with Path(path).open("rb") as fh:
        header, start = _read_header(fh, path)
        payload = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + 8 * count > len(payload):
            raise DataFormatError(f"{path}: payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=lo).reshape(entry["shape"])
    config = ModelConfig(**header["config"])
    embedding = arrays.pop(EMBEDDING_KEY).astype(np.float64)
    tensors = {n: Tensor(a.astype(np.float64), requires_grad=True, name=n) for n, a in arrays.items()}
    vocab = Vocabulary(header["vocab"]) if header.get("vocab") else None
    return ModelParams(config, tensors, embedding, vocab)
