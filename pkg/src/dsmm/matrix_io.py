"""Measurement-matrix files.

Binary format, version 1 (all little-endian):

    bytes 0-3    magic "DSMM"
    u32          version = 1
    u32          n_b
    u32          n_B
    u32          block_size
    f64          sparsity degree
    u8           provenance (0 learned, 1 gaussian, 2 imported)
    f64 * n_b*n_B   entries, row-major

The text format is a COO export for third-party solvers: a header line
``n_b n_B B alpha nnz`` followed by one ``row col value`` triple per
nonzero, 0-indexed, sorted row-major, with values printed to 17
significant digits so they parse back bit-equal.
"""

import os
import struct

import numpy as np

from .errors import FormatError
from .sampling import PROVENANCES, MeasurementMatrix

MAGIC = b"DSMM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIdB")


def _atomic_write(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_matrix(path, matrix):
    """Serialize to the binary format; the write is atomic."""
    header = _HEADER.pack(MAGIC, VERSION, matrix.n_b, matrix.n_B,
                          matrix.block_size, matrix.sparsity_degree,
                          PROVENANCES.index(matrix.provenance))
    body = np.ascontiguousarray(matrix.entries, dtype="<f8").tobytes()
    _atomic_write(path, header + body)


def read_matrix(path):
    """Parse a binary matrix file, validating structure byte-for-byte."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated at byte {len(blob)}: "
                          f"header needs {_HEADER.size} bytes")
    magic, version, n_b, n_B, block, alpha, prov = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if prov >= len(PROVENANCES):
        raise FormatError(f"{path}: unknown provenance code {prov}")
    expected = _HEADER.size + 8 * n_b * n_B
    if len(blob) != expected:
        raise FormatError(f"{path}: truncated at byte {len(blob)}: "
                          f"expected {expected} bytes for {n_b}x{n_B} entries")
    entries = np.frombuffer(blob, dtype="<f8", count=n_b * n_B,
                            offset=_HEADER.size).reshape(n_b, n_B).copy()
    return MeasurementMatrix(n_b=n_b, n_B=n_B, block_size=block,
                             sparsity_degree=alpha, entries=entries,
                             provenance=PROVENANCES[prov])


def write_sparse_text(path, matrix):
    """COO text export of the nonzero entries."""
    rows, cols = np.nonzero(matrix.entries)
    lines = [f"{matrix.n_b} {matrix.n_B} {matrix.block_size} "
             f"{matrix.sparsity_degree:.17g} {rows.size}"]
    for r, c in zip(rows, cols):
        lines.append(f"{r} {c} {matrix.entries[r, c]:.17g}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_sparse_text(path):
    """Parse a COO text file back into a (dense-storage) matrix.

    Entries absent from the file are zero; provenance comes back as
    "imported" because the text format does not record it.
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 5:
        raise FormatError(f"{path}: line 1: header needs 5 fields, "
                          f"got {len(head)}")
    try:
        n_b, n_B, block = int(head[0]), int(head[1]), int(head[2])
        alpha = float(head[3])
        nnz = int(head[4])
    except ValueError as exc:
        raise FormatError(f"{path}: line 1: {exc}") from None
    if len(lines) - 1 != nnz:
        raise FormatError(f"{path}: header promises {nnz} triples, "
                          f"file has {len(lines) - 1}")
    entries = np.zeros((n_b, n_B))
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}: line {lineno}: need 'row col value'")
        try:
            r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        if not (0 <= r < n_b and 0 <= c < n_B):
            raise FormatError(f"{path}: line {lineno}: index ({r}, {c}) "
                              f"outside {n_b}x{n_B}")
        entries[r, c] = v
    return MeasurementMatrix(n_b=n_b, n_B=n_B, block_size=block,
                             sparsity_degree=alpha, entries=entries,
                             provenance="imported")
