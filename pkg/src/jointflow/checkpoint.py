"""Single-file tensor container used for model checkpoints.

Layout (little-endian)::

    magic     8 bytes  b"JFCKPT01"
    hdr_len   u64      length of the JSON header
    hdr_crc   u32      crc32 of the header bytes
    header    JSON     {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes", "crc"}]}
    data      raw C-order tensor bytes; offsets relative to the end of the header

``meta`` carries the model config, stage tag, step and any JSON-able state
(RNG states, optimizer hyperparameters). Writes go to a temporary file in
the same directory that is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np
import torch

from .errors import CorruptArchive

MAGIC = b"JFCKPT01"
_PREFIX = struct.Struct("<8sQI")
_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    path = os.fspath(path)
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw), "crc": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}).encode()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, len(header), zlib.crc32(header)))
            f.write(header)
            for raw in blobs:
                f.write(raw)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _PREFIX.size:
        raise CorruptArchive(f"{path}: file too short")
    magic, hdr_len, hdr_crc = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptArchive(f"{path}: not a checkpoint")
    header = data[_PREFIX.size:_PREFIX.size + hdr_len]
    if len(header) != hdr_len or zlib.crc32(header) != hdr_crc:
        raise CorruptArchive(f"{path}: header checksum mismatch")
    info = json.loads(header.decode())
    base = _PREFIX.size + hdr_len
    tensors = {}
    for rec in info["tensors"]:
        raw = data[base + rec["offset"]: base + rec["offset"] + rec["nbytes"]]
        if len(raw) != rec["nbytes"] or zlib.crc32(raw) != rec["crc"]:
            raise CorruptArchive(f"{path}: tensor {rec['name']} is damaged")
        dtype = _DTYPES[rec["dtype"]]
        np_dtype = np.bool_ if dtype == torch.bool else np.dtype(rec["dtype"])
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(rec["shape"]).copy()
        tensors[rec["name"]] = torch.from_numpy(arr)
    return tensors, info["meta"]
