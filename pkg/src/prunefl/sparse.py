"""Dense/sparse 2-D matrices, sparse x dense products and the storage model.

Byte accounting follows the wire format: 32-bit values, 16-bit row and
column indices, one bit per entry for the bitmap layout.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels

VALUE_BYTES = 4
INDEX_BYTES = 2
HEADER_BYTES = 12
MAX_TUPLE_DIM = 65535

_HEADER = struct.Struct("<III")


class Layout(enum.IntEnum):
    BITMAP = 0
    COORD_TUPLE = 1


@dataclass(frozen=True)
class StorageReport:
    dense_bytes: int
    sparse_bytes: int
    bitmap_bytes: int
    tuple_bytes: int
    density: float
    chosen_layout: Layout

    @property
    def ratio(self) -> float:
        return self.sparse_bytes / self.dense_bytes if self.dense_bytes else 0.0


def storage_cost(total: int, nonzero: int) -> StorageReport:
    """Bytes needed to ship ``nonzero`` of ``total`` entries, header excluded.

    Ties go to the bitmap layout.
    """
    if not 0 <= nonzero <= total:
        raise ValueError(f"need 0 <= nonzero <= total, got {nonzero}/{total}")
    tuple_bytes = nonzero * (VALUE_BYTES + 2 * INDEX_BYTES)
    bitmap_bytes = -(-total // 8) + nonzero * VALUE_BYTES
    if tuple_bytes < bitmap_bytes:
        layout, sparse = Layout.COORD_TUPLE, tuple_bytes
    else:
        layout, sparse = Layout.BITMAP, bitmap_bytes
    return StorageReport(
        dense_bytes=total * VALUE_BYTES,
        sparse_bytes=sparse,
        bitmap_bytes=bitmap_bytes,
        tuple_bytes=tuple_bytes,
        density=nonzero / total if total else 0.0,
        chosen_layout=layout,
    )


def fixed_pattern_bytes(nonzero: int) -> int:
    """Bytes when the sparsity pattern is already known to the receiver."""
    return nonzero * VALUE_BYTES


class SparseMatrix:
    """Immutable sparse matrix in bitmap or coordinate-tuple layout.

    Both layouts keep values in row-major order of their positions, so the
    coordinate view is identical whichever layout was picked.
    """

    __slots__ = ("rows", "cols", "layout", "_r", "_c", "_v", "_bitmap")

    def __init__(self, rows: int, cols: int, r, c, v, layout: Optional[Layout] = None):
        r = np.ascontiguousarray(r, dtype=np.int64)
        c = np.ascontiguousarray(c, dtype=np.int64)
        v = np.ascontiguousarray(v, dtype=np.float64)
        if not (r.shape == c.shape == v.shape and r.ndim == 1):
            raise ValueError("row, column and value arrays must be 1-D and equal length")
        if len(v):
            if r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols:
                raise ValueError("index out of bounds")
            key = r * cols + c
            if np.any(np.diff(key) <= 0):
                raise ValueError("coordinates must be sorted row-major and unique")
            if np.any(v == 0.0):
                raise ValueError("explicit zeros are not stored")
        if layout is None:
            layout = storage_cost(rows * cols, len(v)).chosen_layout
            if layout is Layout.COORD_TUPLE and max(rows, cols) > MAX_TUPLE_DIM:
                layout = Layout.BITMAP
        layout = Layout(layout)
        if layout is Layout.COORD_TUPLE and max(rows, cols) > MAX_TUPLE_DIM:
            raise ValueError(f"coordinate-tuple layout limited to {MAX_TUPLE_DIM} rows/cols")
        self.rows, self.cols, self.layout = int(rows), int(cols), layout
        for a in (r, c, v):
            a.flags.writeable = False
        self._r, self._c, self._v = r, c, v
        self._bitmap = None

    @property
    def nnz(self) -> int:
        return len(self._v)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def density(self) -> float:
        return self.nnz / (self.rows * self.cols) if self.rows * self.cols else 0.0

    def coords(self):
        """(row, col, value) arrays in row-major order."""
        return self._r, self._c, self._v

    def bitmap(self) -> np.ndarray:
        if self._bitmap is None:
            bits = np.zeros(self.rows * self.cols, dtype=bool)
            bits[self._r * self.cols + self._c] = True
            self._bitmap = np.packbits(bits, bitorder="little")
        return self._bitmap

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self._r, self._c] = self._v
        return out

    def storage(self) -> StorageReport:
        return storage_cost(self.rows * self.cols, self.nnz)

    def to_bytes(self) -> bytes:
        """Serialize in the current layout; values are narrowed to float32."""
        head = _HEADER.pack(self.rows, self.cols, int(self.layout))
        vals = self._v.astype("<f4").tobytes()
        if self.layout is Layout.BITMAP:
            return head + self.bitmap().tobytes() + vals
        # per entry: value then row, col
        rec = np.empty(self.nnz, dtype=[("v", "<f4"), ("r", "<u2"), ("c", "<u2")])
        rec["v"], rec["r"], rec["c"] = self._v, self._r, self._c
        return head + rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SparseMatrix":
        rows, cols, layout = _HEADER.unpack_from(buf, 0)
        body = memoryview(buf)[HEADER_BYTES:]
        if layout == Layout.BITMAP:
            nbit = -(-rows * cols // 8)
            bits = np.unpackbits(
                np.frombuffer(body[:nbit], dtype=np.uint8), count=rows * cols, bitorder="little"
            )
            flat = np.flatnonzero(bits)
            vals = np.frombuffer(body[nbit:], dtype="<f4").astype(np.float64)
            if len(vals) != len(flat):
                raise ValueError("bitmap and value count disagree")
            return cls(rows, cols, flat // cols, flat % cols, vals, Layout.BITMAP)
        rec = np.frombuffer(body, dtype=[("v", "<f4"), ("r", "<u2"), ("c", "<u2")])
        return cls(rows, cols, rec["r"], rec["c"], rec["v"].astype(np.float64), Layout.COORD_TUPLE)

    def __repr__(self):
        return (
            f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz}, "
            f"layout={self.layout.name})"
        )


def sparse_from_dense(m, layout: Optional[Layout] = None) -> SparseMatrix:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    r, c = np.nonzero(m)
    return SparseMatrix(m.shape[0], m.shape[1], r, c, m[r, c], layout)


def spmm(s: SparseMatrix, d) -> np.ndarray:
    """``to_dense(s) @ d``, with cost linear in ``s.nnz``."""
    d = np.ascontiguousarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != s.cols:
        raise ValueError(f"dimension mismatch: {s.shape} x {d.shape}")
    r, c, v = s.coords()
    return kernels.spmm_coo(r, c, v, d, s.rows)


def amortized_comm_ratio(density: float, interval: int) -> float:
    """Average per-round traffic as a fraction of the full model size.

    One round in ``interval`` uploads the full-size importance and downloads
    the pruned model (``1 + d``); the others exchange pruned values both
    ways (``2d``). Mask metadata is ignored, as in the usual back-of-envelope
    comparison with full-gradient schemes.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    return ((1 + density) + 2 * (interval - 1) * density) / interval


def tuple_density_threshold() -> float:
    """Density below which the coordinate-tuple layout is cheaper."""
    return 1 / (8 * VALUE_BYTES)


def is_sparse_worthwhile(density: float) -> bool:
    return density < tuple_density_threshold()


__all__ = [
    "Layout",
    "StorageReport",
    "SparseMatrix",
    "storage_cost",
    "fixed_pattern_bytes",
    "sparse_from_dense",
    "spmm",
    "amortized_comm_ratio",
    "is_sparse_worthwhile",
    "HEADER_BYTES",
    "MAX_TUPLE_DIM",
]
