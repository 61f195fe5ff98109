"""Fundamental types: binary/soft masks, panoptic maps, taxonomies, and the RLE codec."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class OvsegError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(OvsegError, ValueError):
    """A value violates a structural invariant."""


class FormatError(OvsegError, ValueError):
    """A serialized payload is malformed (bad magic, truncation, run-sum mismatch)."""


class InvariantViolation(OvsegError, AssertionError):
    """An internal consistency check failed; indicates a bug, not bad input."""


def _frozen(array: np.ndarray) -> np.ndarray:
    # private copy: freezing the caller's array in place would be a side effect
    array = np.array(array, order="C", copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major boolean raster of shape (height, width)."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValidationError(f"BinaryMask needs a 2-D raster, got shape {bits.shape}")
        if bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValidationError(f"BinaryMask dimensions must be >= 1, got {bits.shape}")
        if bits.dtype != np.bool_:
            if not np.isin(bits, (0, 1)).all():
                raise ValidationError("BinaryMask values must be 0 or 1")
            bits = bits.astype(bool)
        object.__setattr__(self, "bits", _frozen(bits))

    @classmethod
    def from_flat(cls, width: int, height: int, bits: Sequence[int]) -> "BinaryMask":
        flat = np.asarray(bits)
        if flat.size != width * height:
            raise ValidationError(f"expected {width * height} bits for {width}x{height}, got {flat.size}")
        return cls(flat.reshape(height, width))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.area()})"


@dataclass(frozen=True, eq=False)
class SoftMask:
    """Row-major raster of reals in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or min(values.shape) < 1:
            raise ValidationError(f"SoftMask needs a non-empty 2-D raster, got shape {values.shape}")
        if not np.isfinite(values).all() or values.min() < 0.0 or values.max() > 1.0:
            raise ValidationError("SoftMask values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class RleMask:
    """Row-major run lengths, alternating 0-runs and 1-runs, starting with a 0-run."""

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(int(r) for r in self.runs))
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"RleMask dimensions must be >= 1, got {self.width}x{self.height}")
        if any(r < 0 for r in self.runs):
            raise ValidationError("run lengths must be non-negative")
        if any(r == 0 for r in self.runs[1:]):
            raise ValidationError("only the leading 0-run may have length 0")


def rle_encode(mask: BinaryMask) -> RleMask:
    flat = mask.bits.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    runs = np.diff(np.concatenate(([0], change, [flat.size]))).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(mask.width, mask.height, tuple(runs))


def rle_decode(rle: RleMask) -> BinaryMask:
    expected = rle.width * rle.height
    actual = sum(rle.runs)
    if actual != expected:
        raise FormatError(
            f"RLE run sum mismatch: expected {expected} pixels for {rle.width}x{rle.height}, got {actual}"
        )
    values = np.arange(len(rle.runs)) % 2 == 1
    flat = np.repeat(values, rle.runs)
    return BinaryMask(flat.reshape(rle.height, rle.width))


@dataclass(frozen=True, eq=False)
class PanopticMap:
    """Segment-id raster (0 = void) plus an ordered (segment_id, class_id) table."""

    ids: np.ndarray
    segments: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2 or min(ids.shape) < 1:
            raise ValidationError(f"PanopticMap needs a non-empty 2-D id raster, got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValidationError(f"segment ids must be integers, got dtype {ids.dtype}")
        if ids.size and ids.min() < 0:
            raise ValidationError("segment ids must be non-negative")
        ids = ids.astype(np.int64)
        segments = tuple((int(s), int(c)) for s, c in self.segments)
        seg_ids = [s for s, _ in segments]
        if len(set(seg_ids)) != len(seg_ids):
            raise ValidationError(f"duplicate segment ids in table: {sorted(seg_ids)}")
        if any(s <= 0 for s in seg_ids):
            raise ValidationError("segment ids in the table must be positive")
        if any(c < 0 for _, c in segments):
            raise ValidationError("class ids must be non-negative")
        present = set(int(v) for v in np.unique(ids)) - {0}
        orphans = sorted(present - set(seg_ids))
        if orphans:
            raise ValidationError(f"raster ids missing from segment table: {orphans}")
        unused = sorted(set(seg_ids) - present)
        if unused:
            raise ValidationError(f"segment table ids absent from raster: {unused}")
        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "segments", segments)

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def class_of(self) -> dict[int, int]:
        return dict(self.segments)

    def void(self) -> np.ndarray:
        return self.ids == 0

    def mask(self, segment_id: int) -> np.ndarray:
        return self.ids == segment_id

    def check_classes(self, num_classes: int) -> None:
        bad = sorted({c for _, c in self.segments if c >= num_classes})
        if bad:
            raise ValidationError(f"class ids out of range for taxonomy of size {num_classes}: {bad}")

    def __eq__(self, other):
        if not isinstance(other, PanopticMap):
            return NotImplemented
        return self.segments == other.segments and bool(np.array_equal(self.ids, other.ids))

    @classmethod
    def void_map(cls, height: int, width: int) -> "PanopticMap":
        return cls(np.zeros((height, width), dtype=np.int64), ())

    @classmethod
    def from_masks(cls, masks: Iterable[tuple[np.ndarray, int]], shape: tuple[int, int]) -> "PanopticMap":
        """Build a map from disjoint (mask, class_id) pairs; segment ids are 1..k in order."""
        ids = np.zeros(shape, dtype=np.int64)
        segments = []
        for k, (mask, class_id) in enumerate(masks, start=1):
            mask = np.asarray(mask, dtype=bool)
            if (ids[mask] != 0).any():
                raise ValidationError(f"mask {k - 1} overlaps an earlier mask")
            if not mask.any():
                continue
            ids[mask] = k
            segments.append((k, class_id))
        return cls(ids, tuple(segments))


def panoptic_to_masks(pmap: PanopticMap) -> list[tuple[BinaryMask, int]]:
    return [(BinaryMask(pmap.ids == sid), cid) for sid, cid in pmap.segments]


def validate_panoptic(ids: np.ndarray, segments: Sequence[tuple[int, int]]) -> PanopticMap:
    """Construct a PanopticMap, raising ValidationError listing orphan ids on failure."""
    return PanopticMap(np.asarray(ids), tuple(segments))


_WS = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    return _WS.sub(" ", name.strip().lower())


def split_synonyms(name: str) -> list[str]:
    return [n for n in (normalize_name(part) for part in name.split(",")) if n]


@dataclass(frozen=True)
class ClassInfo:
    name: str
    synonyms: tuple[str, ...] = ()
    is_thing: bool = True

    def all_names(self) -> frozenset[str]:
        names = set(split_synonyms(self.name))
        for syn in self.synonyms:
            names.update(split_synonyms(syn))
        return frozenset(names)


@dataclass(frozen=True)
class Taxonomy:
    """Ordered class list with an optional seen/unseen partition (stored as seen indices)."""

    classes: tuple[ClassInfo, ...]
    seen: frozenset[int] | None = None
    _keys: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        keys = tuple(normalize_name(c.name) for c in self.classes)
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        if dupes:
            raise ValidationError(f"class names not unique after normalization: {dupes}")
        object.__setattr__(self, "_keys", keys)
        if self.seen is not None:
            seen = frozenset(int(i) for i in self.seen)
            bad = sorted(i for i in seen if not 0 <= i < len(self.classes))
            if bad:
                raise ValidationError(f"seen indices out of range: {bad}")
            object.__setattr__(self, "seen", seen)

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def unseen(self) -> frozenset[int] | None:
        if self.seen is None:
            return None
        return frozenset(range(len(self.classes))) - self.seen

    def seen_vector(self) -> np.ndarray:
        """Boolean seen flag per class; every class counts as seen when no split is recorded."""
        vec = np.ones(len(self.classes), dtype=bool)
        if self.seen is not None:
            vec[:] = False
            vec[sorted(self.seen)] = True
        return vec

    def thing_vector(self) -> np.ndarray:
        return np.array([c.is_thing for c in self.classes], dtype=bool)

    def with_split(self, seen: Iterable[int]) -> "Taxonomy":
        return Taxonomy(self.classes, frozenset(seen))

    def to_json(self) -> dict:
        out: dict = {
            "classes": [
                {"name": c.name, "synonyms": list(c.synonyms), "is_thing": c.is_thing} for c in self.classes
            ]
        }
        if self.seen is not None:
            out["seen"] = sorted(self.seen)
        return out

    @classmethod
    def from_json(cls, data) -> "Taxonomy":
        # accepts either a bare array of classes or {"classes": [...], "seen": [...]}
        if isinstance(data, list):
            entries, seen = data, None
        elif isinstance(data, dict) and "classes" in data:
            entries, seen = data["classes"], data.get("seen")
        else:
            raise ValidationError("taxonomy JSON must be an array of classes or an object with 'classes'")
        classes = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict) or "name" not in entry:
                raise ValidationError(f"taxonomy entry {i} lacks a 'name'")
            classes.append(
                ClassInfo(
                    name=str(entry["name"]),
                    synonyms=tuple(str(s) for s in entry.get("synonyms", ())),
                    is_thing=bool(entry.get("is_thing", True)),
                )
            )
        return cls(tuple(classes), None if seen is None else frozenset(seen))


def taxonomy_split(train: Taxonomy, test: Taxonomy) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Partition test class indices into (seen, unseen) by synonym overlap with the train classes."""
    train_names = frozenset().union(*(c.all_names() for c in train.classes)) if train.classes else frozenset()
    seen, unseen = [], []
    for i, cls in enumerate(test.classes):
        (seen if cls.all_names() & train_names else unseen).append(i)
    return tuple(seen), tuple(unseen)


def resample_nearest(raster: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of a 2-D raster (floor(dst * src / dst_size) sampling)."""
    src_h, src_w = raster.shape[:2]
    dst_h, dst_w = shape
    if (src_h, src_w) == (dst_h, dst_w):
        return raster
    rows = (np.arange(dst_h) * src_h) // dst_h
    cols = (np.arange(dst_w) * src_w) // dst_w
    return raster[rows][:, cols]
