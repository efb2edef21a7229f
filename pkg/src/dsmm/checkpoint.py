"""Model checkpoints.

Container format, version 1 (little-endian), magic "DSMN":

    bytes 0-3    magic "DSMN"
    u32          version = 1
    u32          epoch
    f64          sparsity degree
    u32          tensor count
    per tensor:
        u16          name length, then that many UTF-8 bytes
        u32          ndim, then ndim u32 dims
        f64 * prod(dims)   data, row-major

The sampling weights are stored unconstrained under the name
"sampling_raw"; reconstruction tensors keep their field names.  Floats
round-trip bit-exactly because they are written as raw IEEE-754 doubles.
"""

import os
import struct

import numpy as np

from .errors import FormatError
from .reconstruction import PARAM_FIELDS, ReconstructionParams
from .sampling import SamplingLayerState

MAGIC = b"DSMN"
VERSION = 1
_HEAD = struct.Struct("<4sIIdI")


def _pack_tensor(name, arr):
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<I", arr.ndim)]
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, sampling, recon, epoch=0):
    """Write the full training state; the write is atomic."""
    tensors = [("sampling_raw", sampling.raw_weights)]
    tensors.extend(recon.named_arrays())
    payload = [_HEAD.pack(MAGIC, VERSION, epoch, sampling.sparsity_degree,
                          len(tensors))]
    payload.extend(_pack_tensor(name, arr) for name, arr in tensors)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(payload))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.blob):
            raise FormatError(f"{self.path}: truncated at byte "
                              f"{len(self.blob)}: {what} needs {size} bytes "
                              f"at offset {self.offset}")
        out = self.blob[self.offset:self.offset + size]
        self.offset += size
        return out


def load_checkpoint(path):
    """Read a checkpoint back; returns (sampling, recon, epoch)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob, path)
    magic, version, epoch, alpha, count = _HEAD.unpack(
        reader.take(_HEAD.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2, "name length"))
        name = reader.take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", reader.take(4, "rank"))
        shape = tuple(struct.unpack("<I", reader.take(4, "dim"))[0]
                      for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = reader.take(8 * size, f"tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    if reader.offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - reader.offset} trailing "
                          f"bytes after tensor {count}")

    missing = [n for n in ("sampling_raw",) + PARAM_FIELDS if n not in tensors]
    if missing:
        raise FormatError(f"{path}: missing tensors {missing}")
    sampling = SamplingLayerState(raw_weights=tensors["sampling_raw"],
                                  sparsity_degree=alpha)
    recon = ReconstructionParams(**{n: tensors[n] for n in PARAM_FIELDS})
    return sampling, recon, epoch
