"""Packed storage for block-punched layers.

Block rows are stored in ``block_order`` sequence: storage position ``p`` holds
original block row ``block_order[p]``. Within a block row, blocks follow in
column order; each block stores its kept-column count, the kept local column
indices (uint8) and the values of those columns, column by column, each column
holding the block's rows top to bottom. Value/index offsets are derived from
the counts and are not persisted.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..graph import WeightTensor
from ..pruner import BlockConfig, BlockGrid, PruneMask

MAGIC = b"BPCR"
VERSION = 1
_HEADER = struct.Struct("<4sHH")


class PackedFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PackedSparseLayer:
    layer_id: str
    dims: tuple[int, int, int, int]
    cfg: BlockConfig
    block_order: np.ndarray  # int32 (block_rows,)
    counts: np.ndarray  # uint8 (block_rows * block_cols,), storage order
    indices: np.ndarray  # uint8 (sum(counts),)
    values: np.ndarray  # float32 (nnz,)

    def __post_init__(self):
        dtypes = (("block_order", np.int32), ("counts", np.uint8), ("indices", np.uint8), ("values", np.float32))
        for name, dtype in dtypes:
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        grid = self.grid
        if sorted(self.block_order.tolist()) != list(range(grid.rows)):
            raise PackedFormatError("block_order is not a permutation of block rows")
        if self.counts.size != grid.rows * grid.cols:
            raise PackedFormatError("one kept-column count per block expected")
        if int(self.counts.sum(dtype=np.int64)) != self.indices.size:
            raise PackedFormatError("index count does not match kept-column counts")
        heights = grid.band_heights()[self.block_order]
        per_block_rows = np.repeat(heights, grid.cols)
        nnz = int((self.counts.astype(np.int64) * per_block_rows).sum())
        if nnz != self.values.size:
            raise PackedFormatError(f"{self.values.size} values, counts imply {nnz}")
        idx_off = np.zeros(self.counts.size + 1, dtype=np.int64)
        np.cumsum(self.counts, out=idx_off[1:])
        val_off = np.zeros(self.counts.size + 1, dtype=np.int64)
        np.cumsum(self.counts.astype(np.int64) * per_block_rows, out=val_off[1:])
        widths = np.array([grid.col_slice(j).stop - grid.col_slice(j).start for j in range(grid.cols)])
        for b in np.flatnonzero(self.counts):
            local = self.indices[idx_off[b] : idx_off[b + 1]]
            if local[-1] >= widths[b % grid.cols] or (local.size > 1 and np.any(np.diff(local.astype(np.int16)) <= 0)):
                raise PackedFormatError(f"block {b}: column indices not strictly increasing in range")
        for name, arr in (("index_offsets", idx_off), ("value_offsets", val_off)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        m, n, kh, kw = self.dims
        return (m, n * kh * kw)

    @property
    def grid(self) -> BlockGrid:
        return BlockGrid(self.shape, self.cfg)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def row_counts(self) -> np.ndarray:
        """Kept columns per original block row."""
        grid = self.grid
        per_pos = self.counts.reshape(grid.rows, grid.cols).sum(axis=1, dtype=np.int64)
        out = np.empty(grid.rows, dtype=np.int64)
        out[self.block_order] = per_pos
        return out

    def index_bytes(self) -> int:
        """Bytes of structural metadata: permutation, per-block counts, column indices."""
        return self.block_order.nbytes + self.counts.nbytes + self.indices.nbytes

    def to_bytes(self) -> bytes:
        raw_id = self.layer_id.encode("utf-8")
        grid = self.grid
        parts = [
            _HEADER.pack(MAGIC, VERSION, 0),
            struct.pack("<H", len(raw_id)),
            raw_id,
            struct.pack("<4I", *self.dims),
            struct.pack("<HH", self.cfg.gm, self.cfg.gn),
            struct.pack("<II", grid.rows, grid.cols),
            self.block_order.astype("<u4").tobytes(),
            self.counts.tobytes(),
            struct.pack("<I", self.indices.size),
            self.indices.tobytes(),
            self.values.astype("<f4").tobytes(),
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> PackedSparseLayer:
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise PackedFormatError(f"truncated packed layer at byte {pos}")
            chunk = data[pos : pos + n]
            pos += n
            return chunk

        magic, version, _flags = _HEADER.unpack(take(_HEADER.size))
        if magic != MAGIC:
            raise PackedFormatError("bad magic: not a packed layer")
        if version != VERSION:
            raise PackedFormatError(f"unsupported packed-layer version {version}")
        (id_len,) = struct.unpack("<H", take(2))
        layer_id = take(id_len).decode("utf-8")
        dims = struct.unpack("<4I", take(16))
        gm, gn = struct.unpack("<HH", take(4))
        rows, cols = struct.unpack("<II", take(8))
        cfg = BlockConfig(gm, gn)
        m, n, kh, kw = dims
        grid = BlockGrid((m, n * kh * kw), cfg)
        if (rows, cols) != (grid.rows, grid.cols):
            raise PackedFormatError("block grid does not match dims and block size")
        order = np.frombuffer(take(4 * rows), dtype="<u4").astype(np.int32)
        counts = np.frombuffer(take(rows * cols), dtype=np.uint8)
        (n_idx,) = struct.unpack("<I", take(4))
        indices = np.frombuffer(take(n_idx), dtype=np.uint8)
        heights = grid.band_heights()[order] if rows else np.zeros(0, dtype=np.int64)
        nnz = int((counts.astype(np.int64) * np.repeat(heights, cols)).sum())
        values = np.frombuffer(take(4 * nnz), dtype="<f4")
        if pos != len(data):
            raise PackedFormatError(f"{len(data) - pos} trailing bytes")
        return cls(layer_id, dims, cfg, order, counts, indices, values)


def encode(weights, mask: PruneMask, cfg: BlockConfig | None = None) -> PackedSparseLayer:
    """Pack the kept columns of ``weights`` (WeightTensor) under ``mask``."""
    cfg = cfg or mask.cfg
    if cfg != mask.cfg:
        raise ValueError(f"block config {cfg} differs from the mask's {mask.cfg}")
    if not isinstance(weights, WeightTensor):
        raise TypeError("encode expects a WeightTensor")
    w = weights.gemm_view
    if w.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match weights {w.shape}")
    grid = mask.grid
    counts, indices, values = [], [], []
    for i in range(grid.rows):
        rs = grid.row_slice(i)
        for j in range(grid.cols):
            local = mask.block_columns(i, j)
            counts.append(local.size)
            indices.append(local)
            cols = j * cfg.gn + local
            values.append(w[rs, cols].T.ravel())
    cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)  # noqa: E731
    return PackedSparseLayer(
        weights.layer_id,
        weights.dims,
        cfg,
        np.arange(grid.rows, dtype=np.int32),
        np.asarray(counts, dtype=np.uint8),
        cat(indices, np.uint8),
        cat(values, np.float32),
    )


def decode(packed: PackedSparseLayer) -> WeightTensor:
    """Masked dense weights (zeros at punched positions)."""
    grid = packed.grid
    out = np.zeros(packed.shape, dtype=np.float32)
    for p, i in enumerate(packed.block_order):
        rs = grid.row_slice(int(i))
        rows = rs.stop - rs.start
        for j in range(grid.cols):
            b = p * grid.cols + j
            local = packed.indices[packed.index_offsets[b] : packed.index_offsets[b + 1]]
            if local.size:
                vals = packed.values[packed.value_offsets[b] : packed.value_offsets[b + 1]]
                out[rs, j * packed.cfg.gn + local.astype(np.int64)] = vals.reshape(local.size, rows).T
    return WeightTensor.from_gemm(packed.layer_id, packed.dims, out)


def mask_of(packed: PackedSparseLayer) -> PruneMask:
    grid = packed.grid
    kept = np.zeros((grid.rows, packed.shape[1]), dtype=bool)
    for p, i in enumerate(packed.block_order):
        for j in range(grid.cols):
            b = p * grid.cols + j
            local = packed.indices[packed.index_offsets[b] : packed.index_offsets[b + 1]]
            kept[i, j * packed.cfg.gn + local.astype(np.int64)] = True
    return PruneMask(packed.layer_id, packed.shape, packed.cfg, kept)


def reorder_blocks(packed: PackedSparseLayer) -> PackedSparseLayer:
    """Store block rows by descending kept-column count (stable on row index)."""
    counts = packed.row_counts()
    order = np.lexsort((np.arange(counts.size), -counts)).astype(np.int32)
    return permute_blocks(packed, order)


def permute_blocks(packed: PackedSparseLayer, order) -> PackedSparseLayer:
    """Re-store ``packed`` with block rows in an arbitrary ``order``."""
    order = np.asarray(order, dtype=np.int32)
    grid = packed.grid
    position = np.empty(grid.rows, dtype=np.int64)
    position[packed.block_order] = np.arange(grid.rows)
    counts, indices, values = [], [], []
    for i in order:
        p = position[i]
        b0, b1 = p * grid.cols, (p + 1) * grid.cols
        counts.append(packed.counts[b0:b1])
        indices.append(packed.indices[packed.index_offsets[b0] : packed.index_offsets[b1]])
        values.append(packed.values[packed.value_offsets[b0] : packed.value_offsets[b1]])
    return PackedSparseLayer(
        packed.layer_id,
        packed.dims,
        packed.cfg,
        order,
        np.concatenate(counts) if counts else np.zeros(0, np.uint8),
        np.concatenate(indices) if indices else np.zeros(0, np.uint8),
        np.concatenate(values) if values else np.zeros(0, np.float32),
    )


def save_packed(packed: PackedSparseLayer, path) -> None:
    Path(path).write_bytes(packed.to_bytes())


def load_packed(path) -> PackedSparseLayer:
    return PackedSparseLayer.from_bytes(Path(path).read_bytes())


def csr_index_bytes(dense: np.ndarray, index_dtype=np.int32) -> int:
    """Index storage of a CSR encoding with ``index_dtype`` column indices and row pointers."""
    nnz = int(np.count_nonzero(dense))
    itemsize = np.dtype(index_dtype).itemsize
    return itemsize * nnz + itemsize * (dense.shape[0] + 1)
