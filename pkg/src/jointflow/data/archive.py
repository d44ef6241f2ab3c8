"""Versioned single-file container for assembly samples.

Layout (all integers little-endian)::

    magic      8 bytes   b"JFSAMPLE"
    version    u32
    hdr_len    u64       length of the JSON header
    hdr_crc    u32       crc32 of the JSON header bytes
    header     JSON      {"version", "count", "meta", "records": [[offset, length, crc32], ...]}
    records    ...       one uncompressed ``.npz`` blob per sample; offsets are
                         relative to the first byte after the header

Each record holds named typed arrays (see ``_to_arrays``). Readers only load
the header on open and fetch records on demand with positional reads, so many
readers can share one file.
"""
from __future__ import annotations

import io
import json
import os
import shutil
import struct
import tempfile
import zlib
from typing import Iterable

import numpy as np

from ..errors import CorruptArchive
from ..manifold import PoseState
from .fracture import Fragment
from .sample import AssemblySample

MAGIC = b"JFSAMPLE"
VERSION = 1
_PREFIX = struct.Struct("<8sIQI")


def _to_arrays(s: AssemblySample) -> dict[str, np.ndarray]:
    sizes = [len(f.points) for f in s.fragments]
    meta = json.dumps({"category": s.category, "family": s.family}).encode()
    return {
        "frag_points": np.concatenate([f.points for f in s.fragments]),
        "frag_sizes": np.asarray(sizes, dtype=np.int64),
        "frag_areas": np.asarray([f.area for f in s.fragments], dtype=np.float64),
        "frag_ids": np.asarray([f.id for f in s.fragments], dtype=np.int64),
        "gt_rotation": s.gt_poses.rotation,
        "gt_translation": s.gt_poses.translation,
        "whole_points": s.whole_points,
        "whole_queries": s.whole_queries,
        "sdf_points": s.sdf_points,
        "sdf_values": s.sdf_values,
        "silhouette": s.silhouette,
        "view_axis": s.view_axis,
        "missing_mask": s.missing_mask,
        "reference_points": s.reference_points,
        "meta": np.frombuffer(meta, dtype=np.uint8),
    }


def _from_arrays(a) -> AssemblySample:
    meta = json.loads(bytes(a["meta"]).decode())
    bounds = np.concatenate([[0], np.cumsum(a["frag_sizes"])])
    pts = a["frag_points"]
    frags = [
        Fragment(int(fid), pts[bounds[i]:bounds[i + 1]], float(area))
        for i, (fid, area) in enumerate(zip(a["frag_ids"], a["frag_areas"]))
    ]
    return AssemblySample(
        fragments=frags,
        gt_poses=PoseState(a["gt_rotation"], a["gt_translation"]),
        whole_points=a["whole_points"],
        whole_queries=a["whole_queries"],
        sdf_points=a["sdf_points"],
        sdf_values=a["sdf_values"],
        silhouette=a["silhouette"],
        view_axis=a["view_axis"],
        category=meta["category"],
        missing_mask=a["missing_mask"],
        family=meta["family"],
        reference_points=a["reference_points"],
    )


def encode_sample(sample: AssemblySample) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **_to_arrays(sample))
    return buf.getvalue()


def decode_sample(blob: bytes) -> AssemblySample:
    with np.load(io.BytesIO(blob), allow_pickle=False) as data:
        return _from_arrays({k: data[k] for k in data.files})


def write_archive(samples: Iterable[AssemblySample], path, meta: dict | None = None) -> int:
    """Stream ``samples`` into ``path`` atomically; returns the record count."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    records = []
    with tempfile.TemporaryFile(dir=directory) as body:
        offset = 0
        for s in samples:
            blob = encode_sample(s)
            body.write(blob)
            records.append([offset, len(blob), zlib.crc32(blob)])
            offset += len(blob)
        header = json.dumps(
            {"version": VERSION, "count": len(records), "meta": meta or {}, "records": records}
        ).encode()
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".part")
        try:
            with os.fdopen(fd, "wb") as out:
                out.write(_PREFIX.pack(MAGIC, VERSION, len(header), zlib.crc32(header)))
                out.write(header)
                body.seek(0)
                shutil.copyfileobj(body, out)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return len(records)


class SampleArchive:
    """Lazy random-access reader."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        try:
            self._read_header()
        except BaseException:
            os.close(self._fd)
            raise

    def _read_header(self):
        size = os.fstat(self._fd).st_size
        prefix = os.pread(self._fd, _PREFIX.size, 0)
        if len(prefix) < _PREFIX.size:
            raise CorruptArchive(f"{self.path}: file too short")
        magic, version, hdr_len, hdr_crc = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CorruptArchive(f"{self.path}: bad magic")
        if version != VERSION:
            raise CorruptArchive(f"{self.path}: unsupported version {version}")
        header = os.pread(self._fd, hdr_len, _PREFIX.size)
        if len(header) != hdr_len or zlib.crc32(header) != hdr_crc:
            raise CorruptArchive(f"{self.path}: header checksum mismatch")
        info = json.loads(header.decode())
        self.meta = info["meta"]
        self._records = info["records"]
        self._base = _PREFIX.size + hdr_len
        end = max((o + n for o, n, _ in self._records), default=0)
        if self._base + end > size:
            raise CorruptArchive(f"{self.path}: truncated ({size} bytes, expected {self._base + end})")

    def __len__(self) -> int:
        return len(self._records)

    def read_raw(self, index: int) -> bytes:
        offset, length, crc = self._records[index]
        blob = os.pread(self._fd, length, self._base + offset)
        if len(blob) != length or zlib.crc32(blob) != crc:
            raise CorruptArchive(f"{self.path}: record {index} checksum mismatch")
        return blob

    def __getitem__(self, index: int) -> AssemblySample:
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        return decode_sample(self.read_raw(index))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass
