"""Little-endian binary containers: panoptic maps (OVPM), RLE masks (OVRL), feature grids (OVFT),
text embeddings (OVTE) and candidate records (OVCD)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import FormatError, PanopticMap, RleMask, ValidationError
from .proposals import CandidateSet
from .zeroshot import DenseFeatureGrid, TextEmbeddings

PANOPTIC_MAGIC = b"OVPM"
RLE_MAGIC = b"OVRL"
FEATURE_MAGIC = b"OVFT"
TEXT_MAGIC = b"OVTE"
CANDIDATE_MAGIC = b"OVCD"
VERSION = 1

FLAG_CLIP = 1
POSTERIOR_LOAD_ATOL = 1e-3


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise FormatError(
                f"{self.source}: truncated while reading {what} at byte {self.offset}: "
                f"expected {end} bytes, file has {len(self.data)}"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"{self.source}: bad magic {got!r} at byte 0, expected {expected!r}")

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).copy()

    def version(self) -> None:
        at = self.offset
        v = self.u16("version")
        if v != VERSION:
            raise FormatError(f"{self.source}: unsupported version {v} at byte {at}, expected {VERSION}")

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{self.source}: {len(self.data) - self.offset} trailing bytes after byte {self.offset}"
            )


def _read(path) -> _Reader:
    path = Path(path)
    return _Reader(path.read_bytes(), str(path))


def encode_panoptic(pmap: PanopticMap) -> bytes:
    if pmap.ids.max(initial=0) > 0xFFFFFFFF:
        raise ValidationError("segment ids exceed u32")
    parts = [
        PANOPTIC_MAGIC,
        struct.pack("<HII", VERSION, pmap.width, pmap.height),
        pmap.ids.astype("<u4").tobytes(),
        struct.pack("<I", len(pmap.segments)),
    ]
    parts.extend(struct.pack("<II", s, c) for s, c in pmap.segments)
    return b"".join(parts)


def decode_panoptic(data: bytes, source: str = "<bytes>") -> PanopticMap:
    r = _Reader(data, source)
    r.magic(PANOPTIC_MAGIC)
    r.version()
    width, height = r.u32("width"), r.u32("height")
    ids = r.array("<u4", width * height, "id raster").astype(np.int64).reshape(height, width)
    count = r.u32("segment count")
    pairs = r.array("<u4", 2 * count, "segment table").reshape(count, 2)
    r.finish()
    try:
        return PanopticMap(ids, tuple((int(s), int(c)) for s, c in pairs))
    except ValidationError as exc:
        raise ValidationError(f"{source}: {exc}") from None


def write_panoptic(path, pmap: PanopticMap) -> None:
    Path(path).write_bytes(encode_panoptic(pmap))


def read_panoptic(path) -> PanopticMap:
    path = Path(path)
    return decode_panoptic(path.read_bytes(), str(path))


def encode_rle(rle: RleMask) -> bytes:
    return RLE_MAGIC + struct.pack("<III", rle.width, rle.height, len(rle.runs)) + np.asarray(
        rle.runs, dtype="<u4"
    ).tobytes()


def decode_rle(data: bytes, source: str = "<bytes>") -> RleMask:
    r = _Reader(data, source)
    r.magic(RLE_MAGIC)
    width, height, count = r.u32("width"), r.u32("height"), r.u32("run count")
    runs = r.array("<u4", count, "runs")
    r.finish()
    return RleMask(width, height, tuple(int(x) for x in runs))


def write_rle(path, rle: RleMask) -> None:
    Path(path).write_bytes(encode_rle(rle))


def read_rle(path) -> RleMask:
    path = Path(path)
    return decode_rle(path.read_bytes(), str(path))


def encode_features(grid: DenseFeatureGrid) -> bytes:
    fh, fw = grid.grid_shape
    return FEATURE_MAGIC + struct.pack("<HIII", VERSION, fh, fw, grid.dim) + grid.values.astype("<f4").tobytes()


def decode_features(data: bytes, source: str = "<bytes>") -> DenseFeatureGrid:
    r = _Reader(data, source)
    r.magic(FEATURE_MAGIC)
    r.version()
    fh, fw, dim = r.u32("fh"), r.u32("fw"), r.u32("D")
    values = r.array("<f4", fh * fw * dim, "feature values").reshape(fh, fw, dim)
    r.finish()
    return DenseFeatureGrid(values.astype(np.float64))


def write_features(path, grid: DenseFeatureGrid) -> None:
    Path(path).write_bytes(encode_features(grid))


def read_features(path) -> DenseFeatureGrid:
    path = Path(path)
    return decode_features(path.read_bytes(), str(path))


def encode_texts(texts: TextEmbeddings) -> bytes:
    c, d = texts.matrix.shape
    return TEXT_MAGIC + struct.pack("<II", c, d) + texts.matrix.astype("<f4").tobytes()


def decode_texts(data: bytes, source: str = "<bytes>") -> TextEmbeddings:
    r = _Reader(data, source)
    r.magic(TEXT_MAGIC)
    c, d = r.u32("|C|"), r.u32("D")
    matrix = r.array("<f4", c * d, "embeddings").reshape(c, d)
    r.finish()
    return TextEmbeddings(matrix.astype(np.float64))


def write_texts(path, texts: TextEmbeddings) -> None:
    Path(path).write_bytes(encode_texts(texts))


def read_texts(path) -> TextEmbeddings:
    path = Path(path)
    return decode_texts(path.read_bytes(), str(path))


def quantize_sigma(values: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(values) * 255.0).astype(np.uint8)


def dequantize_sigma(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / 255.0


def encode_candidates(cands: CandidateSet) -> bytes:
    if not cands.has_no_object:
        raise ValidationError("candidate records store raw posteriors including the no-object column")
    n = len(cands)
    h, w = cands.shape
    c = cands.num_classes
    flags = FLAG_CLIP if cands.clip_posteriors is not None else 0
    parts = [CANDIDATE_MAGIC, struct.pack("<IIIII", n, c, h, w, flags)]
    q = quantize_sigma(cands.sigmas)
    post = cands.posteriors.astype("<f4")
    clip = None if cands.clip_posteriors is None else cands.clip_posteriors.astype("<f4")
    for i in range(n):
        parts.append(q[i].tobytes())
        parts.append(post[i].tobytes())
        if clip is not None:
            parts.append(clip[i].tobytes())
    return b"".join(parts)


def decode_candidates(data: bytes, source: str = "<bytes>") -> CandidateSet:
    r = _Reader(data, source)
    r.magic(CANDIDATE_MAGIC)
    n, c, h, w, flags = (r.u32(name) for name in ("N", "C", "height", "width", "flags"))
    if flags & ~FLAG_CLIP:
        raise FormatError(f"{source}: unknown flag bits {flags:#x} at byte 20")
    has_clip = bool(flags & FLAG_CLIP)
    sigmas = np.zeros((n, h, w))
    post = np.zeros((n, c + 1))
    clip = np.zeros((n, c)) if has_clip else None
    for i in range(n):
        sigmas[i] = dequantize_sigma(r.array("u1", h * w, f"sigma of candidate {i}").reshape(h, w))
        at = r.offset
        post[i] = r.array("<f4", c + 1, f"posterior of candidate {i}")
        _check_row(post[i], f"{source}: posterior of candidate {i} at byte {at}")
        if has_clip:
            at = r.offset
            clip[i] = r.array("<f4", c, f"clip posterior of candidate {i}")
            _check_row(clip[i], f"{source}: clip posterior of candidate {i} at byte {at}")
    r.finish()
    return CandidateSet(sigmas, post, clip_posteriors=clip, atol=POSTERIOR_LOAD_ATOL)


def _check_row(row: np.ndarray, where: str) -> None:
    if not np.isfinite(row).all() or (row < 0).any():
        raise ValidationError(f"{where}: entries must be finite and non-negative")
    total = float(row.sum())
    if abs(total - 1.0) > POSTERIOR_LOAD_ATOL:
        raise ValidationError(f"{where}: sums to {total:.6g}, expected 1 within {POSTERIOR_LOAD_ATOL}")


def write_candidates(path, cands: CandidateSet) -> None:
    Path(path).write_bytes(encode_candidates(cands))


def read_candidates(path) -> CandidateSet:
    path = Path(path)
    return decode_candidates(path.read_bytes(), str(path))
