"""Bitmap, COO and CSR weight encodings with storage and decode-cycle models.

Matrices are (rows, cols) with one row per output channel and one column per
position of the flattened receptive field. Bitmap masks are segmented along
each row; a row is padded with zero bits up to a whole number of segments.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError


class SparseFormat(str, Enum):
    BITMAP = "bitmap"
    COO = "coo"
    CSR = "csr"
    DENSE = "dense"


def index_bits(extent: int) -> int:
    """Minimal width able to address ``extent`` positions (at least one bit)."""
    return max(1, math.ceil(math.log2(extent))) if extent > 1 else 1


@dataclass
class BitmapMatrix:
    shape: tuple[int, int]
    mask: np.ndarray      # (rows, n_segments * segment_len) uint8, padding bits 0
    values: np.ndarray    # nonzeros, row-major then LSB-first within each row
    segment_len: int

    def __post_init__(self):
        if int(self.mask.sum()) != self.values.size:
            raise ShapeError(f"mask has {int(self.mask.sum())} set bits for {self.values.size} values")
        if self.mask.shape[1] % self.segment_len:
            raise ShapeError("mask width is not a whole number of segments")
        if self.mask[:, self.shape[1]:].any():
            raise ShapeError("segment padding bits must be zero")

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def positions(self) -> int:
        return self.shape[0] * self.shape[1]

    def segments(self) -> np.ndarray:
        """(rows, n_segments, segment_len) view of the mask."""
        r = self.shape[0]
        return self.mask.reshape(r, -1, self.segment_len)

    def segment_words(self) -> np.ndarray:
        """Each segment as an integer with position 0 in the least significant bit."""
        seg = self.segments().astype(object)
        weights = np.array([1 << i for i in range(self.segment_len)], dtype=object)
        return (seg * weights).sum(axis=2)


@dataclass
class CooMatrix:
    shape: tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if not (self.rows.size == self.cols.size == self.values.size):
            raise ShapeError("COO arrays differ in length")
        if self.rows.size and (self.rows.max() >= self.shape[0] or self.cols.max() >= self.shape[1]
                               or self.rows.min() < 0 or self.cols.min() < 0):
            raise ShapeError("COO index out of bounds")

    @property
    def nnz(self) -> int:
        return int(self.values.size)


@dataclass
class CsrMatrix:
    shape: tuple[int, int]
    offsets: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.offsets.size != self.shape[0] + 1 or self.offsets[0] != 0:
            raise ShapeError("CSR offsets must have rows+1 entries starting at 0")
        if np.any(np.diff(self.offsets) < 0):
            raise ShapeError("CSR offsets must be nondecreasing")
        if self.offsets[-1] != self.values.size or self.cols.size != self.values.size:
            raise ShapeError("CSR offsets do not match the stored pairs")
        if self.cols.size and (self.cols.min() < 0 or self.cols.max() >= self.shape[1]):
            raise ShapeError("CSR column index out of bounds")

    @property
    def nnz(self) -> int:
        return int(self.values.size)


@dataclass
class DenseMatrix:
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))


def _as_matrix(matrix) -> np.ndarray:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.integer):
        if not np.array_equal(m, np.round(m)):
            raise DomainError("sparse encodings hold integer matrices")
    return m.astype(np.int64)


def encode(matrix, fmt: SparseFormat | str, segment_len: int = 16):
    m = _as_matrix(matrix)
    fmt = SparseFormat(fmt)
    if fmt is SparseFormat.BITMAP:
        if segment_len < 1:
            raise DomainError(f"segment_len must be >= 1, got {segment_len}")
        r, c = m.shape
        width = -(-c // segment_len) * segment_len if c else segment_len
        mask = np.zeros((r, width), dtype=np.uint8)
        mask[:, :c] = m != 0
        return BitmapMatrix((r, c), mask, m[m != 0], segment_len)
    if fmt is SparseFormat.COO:
        rows, cols = np.nonzero(m)
        return CooMatrix(m.shape, rows, cols, m[rows, cols])
    if fmt is SparseFormat.CSR:
        rows, cols = np.nonzero(m)
        offsets = np.zeros(m.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=m.shape[0]), out=offsets[1:])
        return CsrMatrix(m.shape, offsets, cols, m[rows, cols])
    return DenseMatrix(m.copy())


def decode(enc) -> np.ndarray:
    if isinstance(enc, DenseMatrix):
        return enc.values.copy()
    out = np.zeros(enc.shape, dtype=np.int64)
    if isinstance(enc, BitmapMatrix):
        out[enc.mask[:, :enc.shape[1]].astype(bool)] = enc.values
    elif isinstance(enc, CooMatrix):
        out[enc.rows, enc.cols] = enc.values
    elif isinstance(enc, CsrMatrix):
        rows = np.repeat(np.arange(enc.shape[0]), np.diff(enc.offsets))
        out[rows, enc.cols] = enc.values
    else:
        raise DomainError(f"not a sparse encoding: {type(enc).__name__}")
    return out


def storage_bits(enc, value_bits: int = 4, index_bits_: int | tuple[int, int] | None = None,
                 offset_bits: int | None = None) -> int:
    """Storage cost in bits.

    ``index_bits_`` is one width shared by rows and columns, or a (row, col)
    pair; by default each is the minimal width for its extent. CSR offsets
    default to ceil(log2(nnz + 1)) bits.
    """
    if value_bits < 1:
        raise DomainError("value_bits must be >= 1")
    rows, cols = enc.shape
    if index_bits_ is None:
        rb, cb = index_bits(rows), index_bits(cols)
    elif isinstance(index_bits_, tuple):
        rb, cb = index_bits_
    else:
        rb = cb = int(index_bits_)
    if min(rb, cb) < 1:
        raise DomainError("index widths must be >= 1")
    if isinstance(enc, BitmapMatrix):
        return rows * cols + enc.nnz * value_bits
    if isinstance(enc, CooMatrix):
        return enc.nnz * (rb + cb + value_bits)
    if isinstance(enc, CsrMatrix):
        ob = offset_bits if offset_bits is not None else index_bits(enc.nnz + 1)
        return enc.nnz * (cb + value_bits) + (rows + 1) * ob
    if isinstance(enc, DenseMatrix):
        return rows * cols * value_bits
    raise DomainError(f"not a sparse encoding: {type(enc).__name__}")


def merge_walk_cycles(w_idx: Sequence[int], s_idx: Sequence[int]) -> tuple[int, int]:
    """Two-pointer alignment of sorted weight and spike index streams.

    Each cycle advances the pointer with the smaller index, or both on a
    match. Returns (cycles, matches); the walk ends when either stream runs out.
    """
    i = j = cycles = matches = 0
    while i < len(w_idx) and j < len(s_idx):
        cycles += 1
        if w_idx[i] == s_idx[j]:
            matches += 1
            i += 1
            j += 1
        elif w_idx[i] < s_idx[j]:
            i += 1
        else:
            j += 1
    return cycles, matches


def _spike_matrix(spikes, cols: int) -> np.ndarray:
    s = np.asarray(spikes)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2 or s.shape[1] != cols:
        raise ShapeError(f"spike vectors of length {s.shape[-1]} do not match {cols} weight columns")
    return (s != 0).astype(np.uint8)


def decode_cycles(fmt: SparseFormat | str, weights, spikes, segment_len: int = 16) -> tuple[int, int]:
    """Scalar cycle model: (cycles, matched pairs) over every (weight row, spike vector).

    This is the readable reference; ``_cycle_tables`` computes the same counts
    in bulk for the format study.
    """
    fmt = SparseFormat(fmt)
    w = _as_matrix(weights)
    s = _spike_matrix(spikes, w.shape[1])
    cycles = matches = 0
    for row in w:
        nzw = np.flatnonzero(row)
        for vec in s:
            if fmt is SparseFormat.BITMAP:
                for lo in range(0, max(len(row), 1), segment_len):
                    m = int(np.count_nonzero(vec[lo:lo + segment_len] & (row[lo:lo + segment_len] != 0)))
                    cycles += max(1, m)
                    matches += m
            elif fmt is SparseFormat.DENSE:
                cycles += len(row)
                matches += int(np.count_nonzero(vec & (row != 0)))
            else:
                c, m = merge_walk_cycles(nzw.tolist(), np.flatnonzero(vec).tolist())
                cycles += c
                matches += m
    return cycles, matches


def _padded(a: np.ndarray, seg: int) -> np.ndarray:
    width = -(-a.shape[1] // seg) * seg
    if width == a.shape[1]:
        return a
    return np.pad(a, ((0, 0), (0, width - a.shape[1])))


def _cycle_tables(w_nz: np.ndarray, s: np.ndarray, segment_lens: Iterable[int]) -> dict:
    """Bulk cycle counts for every format; w_nz is the weight nonzero pattern."""
    wf = w_nz.astype(np.float32)
    sf = s.astype(np.float32)
    out = {}
    for seg in segment_lens:
        wp, sp = _padded(wf, seg), _padded(sf, seg)
        n_seg = wp.shape[1] // seg
        cyc = 0
        for k in range(n_seg):
            cnt = sp[:, k * seg:(k + 1) * seg] @ wp[:, k * seg:(k + 1) * seg].T
            cyc += int(np.maximum(cnt, 1).sum())
        out[(SparseFormat.BITMAP, seg)] = cyc
    # merge walk: both streams are consumed up to the smaller of their maxima
    cols = w_nz.shape[1]
    cum_w = np.cumsum(w_nz, axis=1)
    cum_s = np.cumsum(s, axis=1)
    ar = np.arange(cols)
    max_w = np.where(w_nz.any(axis=1), (w_nz * ar).max(axis=1), -1)
    max_s = np.where(s.any(axis=1), (s * ar).max(axis=1), -1)
    m = np.minimum(max_w[:, None], max_s[None, :])            # (rows, vectors)
    valid = m >= 0
    mc = np.where(valid, m, 0)
    walked_w = np.take_along_axis(cum_w, mc, axis=1)
    walked_s = cum_s[np.arange(s.shape[0])[None, :], mc]
    pair_matches = (wf @ sf.T).round().astype(np.int64)
    merge = np.where(valid, walked_w + walked_s - pair_matches, 0)
    out[SparseFormat.COO] = out[SparseFormat.CSR] = int(merge.sum())
    out[SparseFormat.DENSE] = cols * w_nz.shape[0] * s.shape[0]
    out["matches"] = int(pair_matches.sum())
    return out


@dataclass(frozen=True)
class ConvConfig:
    t: int
    c_o: int
    c_i: int
    f_ho: int
    f_wo: int
    k_h: int
    k_w: int

    @classmethod
    def parse(cls, text: str) -> "ConvConfig":
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 7 or min(parts) < 1:
            raise DomainError("config needs seven positive integers T,Co,Ci,Fh,Fw,Kh,Kw")
        return cls(*parts)


def random_workload(cfg: ConvConfig, density: float, rng: np.random.Generator,
                    value_bits: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Random weights (c_o, k_h*k_w*c_i) and im2col spike vectors at one shared density.

    Spike vectors come from a random input map large enough for a valid
    convolution with the requested output size, one vector per (pixel, t).
    """
    lo, hi = -(1 << (value_bits - 1)), (1 << (value_bits - 1)) - 1
    n = cfg.k_h * cfg.k_w * cfg.c_i
    nz = rng.random((cfg.c_o, n)) < density
    mags = rng.integers(lo, hi, size=nz.shape, endpoint=True)
    mags[mags == 0] = hi
    weights = np.where(nz, mags, 0)
    fmap = (rng.random((cfg.f_ho + cfg.k_h - 1, cfg.f_wo + cfg.k_w - 1, cfg.c_i, cfg.t)) < density)
    win = np.lib.stride_tricks.sliding_window_view(fmap, (cfg.k_h, cfg.k_w), axis=(0, 1))
    # (ho, wo, ci, t, kh, kw) -> (ho, wo, t, kh, kw, ci)
    vecs = win.transpose(0, 1, 3, 4, 5, 2).reshape(-1, n).astype(np.uint8)
    return weights, vecs


@dataclass
class RatioRow:
    sparsity: float
    format: str
    segment_len: int
    throughput: float
    storage_bits: int
    ratio: float


CSV_COLUMNS = ("sparsity", "format", "segment_len", "throughput", "storage_bits", "ratio")


def trial_ratios(cfg: ConvConfig, sparsity: float, segment_lens: Sequence[int],
                 rng: np.random.Generator, value_bits: int = 4) -> dict:
    """One random trial: {(format, segment_len): (throughput, storage, ratio)}."""
    weights, vecs = random_workload(cfg, 1.0 - sparsity, rng, value_bits)
    nz = (weights != 0).astype(np.uint8)
    cyc = _cycle_tables(nz, vecs, segment_lens)
    matches = cyc["matches"]
    out = {}
    keys = [(SparseFormat.BITMAP, s) for s in segment_lens]
    keys += [(SparseFormat.COO, 0), (SparseFormat.CSR, 0), (SparseFormat.DENSE, 0)]
    for fmt, seg in keys:
        enc = encode(weights, fmt, seg or 16)
        bits = storage_bits(enc, value_bits)
        cycles = cyc[(fmt, seg)] if fmt is SparseFormat.BITMAP else cyc[fmt]
        thr = matches / cycles if cycles else 0.0
        out[(fmt.value, seg)] = (thr, bits, thr / bits if bits else 0.0)
    return out


def analyze_ratio(cfg: ConvConfig, sparsities: Sequence[float],
                  segment_lens: Sequence[int] = (16, 32, 64, 128), trials: int = 1,
                  seed: int = 0, value_bits: int = 4) -> list[RatioRow]:
    """Median throughput, storage and ratio per (sparsity, format, segment length).

    Each grid point has its own seed derived from ``seed`` and its index, so
    points are reproducible independently of the grid they sit in. COO, CSR
    and dense rows carry segment_len 0.
    """
    rows = []
    for sp in sparsities:
        if not 0.0 <= sp < 1.0:
            raise DomainError(f"sparsity must lie in [0, 1), got {sp}")
        rng = np.random.default_rng([seed, int(round(sp * 10000))])
        acc: dict = {}
        for _ in range(trials):
            for key, val in trial_ratios(cfg, sp, segment_lens, rng, value_bits).items():
                acc.setdefault(key, []).append(val)
        for (fmt, seg), vals in acc.items():
            arr = np.array(vals, dtype=np.float64)
            med = np.median(arr, axis=0)
            rows.append(RatioRow(float(sp), fmt, seg, float(med[0]), int(round(med[1])), float(med[2])))
    return rows


def write_ratio_csv(rows: Sequence[RatioRow], path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS)
        for r in rows:
            wr.writerow([f"{r.sparsity:.4f}", r.format, r.segment_len, f"{r.throughput:.6g}",
                         r.storage_bits, f"{r.ratio:.6g}"])


def read_ratio_csv(path) -> list[RatioRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [RatioRow(float(d["sparsity"]), d["format"], int(d["segment_len"]), float(d["throughput"]),
                         int(d["storage_bits"]), float(d["ratio"])) for d in rd]
