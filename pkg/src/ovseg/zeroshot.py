"""Mask-pooled vision-language classification and the ground-truth-mask (segmentation oracle) evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import BinaryMask, OvsegError, PanopticMap, Taxonomy, ValidationError, resample_nearest
from .metrics import MatchReport, evaluate_image

DEFAULT_TAU = 0.01


class EmptyMaskError(OvsegError, ValueError):
    """The mask has no set pixel on the feature grid."""


@dataclass(frozen=True, eq=False)
class DenseFeatureGrid:
    """Channel-last feature raster of shape (fh, fw, D)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValidationError(f"feature grid must be (fh, fw, D) with all sizes >= 1, got {values.shape}")
        if not np.isfinite(values).all():
            raise ValidationError("feature grid contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class TextEmbeddings:
    """One embedding row per taxonomy class, in taxonomy order."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or min(matrix.shape) < 1:
            raise ValidationError(f"text embeddings must be (|C|, D), got {matrix.shape}")
        if not np.isfinite(matrix).all():
            raise ValidationError("text embeddings contain non-finite values")
        zero = np.flatnonzero(np.linalg.norm(matrix, axis=1) == 0)
        if zero.size:
            raise ValidationError(f"text embedding row {int(zero[0])} has zero norm")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def mask_pool(features: DenseFeatureGrid, mask: BinaryMask | np.ndarray) -> np.ndarray:
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    grid_mask = resample_nearest(bits, features.grid_shape)
    count = int(grid_mask.sum())
    if count == 0:
        raise EmptyMaskError(
            f"mask of shape {bits.shape} has no pixel on the {features.grid_shape} feature grid"
        )
    return features.values[grid_mask].sum(axis=0) / count


def cosine_logits(embed, texts: TextEmbeddings) -> np.ndarray:
    embed = np.asarray(embed, dtype=np.float64)
    if embed.shape != (texts.dim,):
        raise ValidationError(f"embedding has shape {embed.shape}, text rows have dimension {texts.dim}")
    norm = np.linalg.norm(embed)
    if norm == 0:
        raise ValidationError("visual embedding has zero norm")
    sims = texts.matrix @ embed / (np.linalg.norm(texts.matrix, axis=1) * norm)
    return np.clip(sims, -1.0, 1.0)


def softmax_temperature(logits, tau: float = DEFAULT_TAU) -> np.ndarray:
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    if not np.isfinite(z).all():
        raise ValidationError("logits must be finite")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def classify_region(features: DenseFeatureGrid, mask, texts: TextEmbeddings, tau: float = DEFAULT_TAU) -> np.ndarray:
    """CLIP-style class posterior for one region: pool, cosine-compare, softmax."""
    return softmax_temperature(cosine_logits(mask_pool(features, mask), texts), tau)


def classify_gt_segments(
    features: DenseFeatureGrid, gt: PanopticMap, texts: TextEmbeddings
) -> tuple[PanopticMap, int]:
    """Relabel every gt segment with its zero-shot class, keeping gt boundaries.

    Segments whose mask vanishes on the feature grid are left void in the
    prediction; their count is returned alongside the map.
    """
    ids = gt.ids.copy()
    segments = []
    skipped = 0
    for sid, _ in gt.segments:
        mask = gt.ids == sid
        try:
            logits = cosine_logits(mask_pool(features, mask), texts)
        except EmptyMaskError:
            ids[mask] = 0
            skipped += 1
            continue
        # argmax of the tempered softmax equals argmax of the logits
        segments.append((sid, int(np.argmax(logits))))
    return PanopticMap(ids, tuple(segments)), skipped


def segmentation_oracle_image(
    features: DenseFeatureGrid, gt: PanopticMap, texts: TextEmbeddings, taxonomy: Taxonomy
) -> MatchReport:
    if len(texts) != len(taxonomy):
        raise ValidationError(f"{len(texts)} text embeddings for a taxonomy of {len(taxonomy)} classes")
    pred, skipped = classify_gt_segments(features, gt, texts)
    report = evaluate_image(pred, gt, num_classes=len(taxonomy))
    return replace(report, empty_mask_skips=skipped)


def segmentation_oracle_eval(
    features: Sequence[DenseFeatureGrid],
    gts: Sequence[PanopticMap],
    texts: TextEmbeddings,
    tau: float,
    taxonomy: Taxonomy,
) -> list[MatchReport]:
    """Per-image reports for classifying ground-truth masks from pooled features.

    ``tau`` does not change the predicted classes (softmax is monotone); it is
    validated here so a bad configuration fails early.
    """
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if len(features) != len(gts):
        raise ValidationError(f"{len(features)} feature grids for {len(gts)} ground-truth maps")
    return [segmentation_oracle_image(f, g, texts, taxonomy) for f, g in zip(features, gts)]
