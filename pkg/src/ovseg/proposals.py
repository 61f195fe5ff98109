"""Test-time mask-transformer inference: no-object handling, panoptic fusion, and geometric ensembling."""

from __future__ import annotations

from dataclasses import InitVar, dataclass

import numpy as np

from .core import BinaryMask, OvsegError, PanopticMap, SoftMask, Taxonomy, ValidationError

POSTERIOR_ATOL = 1e-5
PROB_FLOOR = 1e-12


class EnsembleError(OvsegError, ValueError):
    """The ensembled distribution has zero total mass."""


def _readonly(array):
    if array is None:
        return None
    # private copy: freezing the caller's array in place would be a side effect
    array = np.array(array, order="C", copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """N candidate masks with class posteriors.

    ``posteriors`` has C+1 columns (last = no-object) while ``has_no_object`` is
    True, and C columns once a no-object policy has been applied.
    ``source_index`` tracks each candidate's position in the original decoder
    output, so selections can be audited against the raw dump.
    """

    sigmas: np.ndarray
    posteriors: np.ndarray
    has_no_object: bool = True
    clip_posteriors: np.ndarray | None = None
    source_index: np.ndarray | None = None
    degenerate: np.ndarray | None = None
    atol: InitVar[float] = POSTERIOR_ATOL

    def __post_init__(self, atol):
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        post = np.asarray(self.posteriors, dtype=np.float64)
        if sigmas.ndim != 3 or min(sigmas.shape[1:]) < 1:
            raise ValidationError(f"sigmas must be (N, H, W) with H, W >= 1, got {sigmas.shape}")
        n = sigmas.shape[0]
        if post.ndim != 2 or post.shape[0] != n:
            raise ValidationError(f"posteriors must be ({n}, K), got {post.shape}")
        min_cols = 2 if self.has_no_object else 1
        if post.shape[1] < min_cols:
            raise ValidationError(f"posteriors need at least {min_cols} columns, got {post.shape[1]}")
        if n:
            if not np.isfinite(sigmas).all() or sigmas.min() < 0 or sigmas.max() > 1:
                raise ValidationError("sigma values must lie in [0, 1]")
            _check_distributions(post, atol, "posterior")
        clip = self.clip_posteriors
        if clip is not None:
            clip = np.asarray(clip, dtype=np.float64)
            c = post.shape[1] - 1 if self.has_no_object else post.shape[1]
            if clip.shape != (n, c):
                raise ValidationError(f"clip posteriors must be ({n}, {c}), got {clip.shape}")
            if n:
                _check_distributions(clip, atol, "clip posterior")
        source = np.arange(n) if self.source_index is None else np.asarray(self.source_index, dtype=np.int64)
        degenerate = np.zeros(n, dtype=bool) if self.degenerate is None else np.asarray(self.degenerate, bool)
        if source.shape != (n,) or degenerate.shape != (n,):
            raise ValidationError("source_index and degenerate must have one entry per candidate")
        object.__setattr__(self, "sigmas", _readonly(sigmas))
        object.__setattr__(self, "posteriors", _readonly(post))
        object.__setattr__(self, "clip_posteriors", _readonly(clip))
        object.__setattr__(self, "source_index", _readonly(source))
        object.__setattr__(self, "degenerate", _readonly(degenerate))

    def __len__(self) -> int:
        return self.sigmas.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.sigmas.shape[1], self.sigmas.shape[2]

    @property
    def num_classes(self) -> int:
        return self.posteriors.shape[1] - (1 if self.has_no_object else 0)

    def sigma(self, i: int) -> SoftMask:
        return SoftMask(self.sigmas[i])

    def subset(self, indices) -> "CandidateSet":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return CandidateSet(
            self.sigmas[idx],
            self.posteriors[idx],
            self.has_no_object,
            None if self.clip_posteriors is None else self.clip_posteriors[idx],
            self.source_index[idx],
            self.degenerate[idx],
            atol=np.inf,
        )

    def with_posteriors(self, posteriors, has_no_object: bool | None = None, degenerate=None) -> "CandidateSet":
        posteriors = np.asarray(posteriors, dtype=np.float64)
        if len(self):
            _check_distributions(posteriors, POSTERIOR_ATOL, "posterior")
        return CandidateSet(
            self.sigmas,
            posteriors,
            self.has_no_object if has_no_object is None else has_no_object,
            self.clip_posteriors,
            self.source_index,
            self.degenerate if degenerate is None else degenerate,
            atol=np.inf,
        )

    def with_sigmas(self, sigmas) -> "CandidateSet":
        return CandidateSet(
            sigmas, self.posteriors, self.has_no_object, self.clip_posteriors, self.source_index, self.degenerate,
            atol=np.inf,
        )


def _check_distributions(probs: np.ndarray, atol: float, what: str) -> None:
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise ValidationError(f"{what} entries must be finite and non-negative")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"{what} of candidate {i} sums to {sums[i]:.6g}, not 1")


@dataclass(frozen=True)
class FusionParams:
    object_score_threshold: float = 0.8
    overlap_keep_ratio: float = 0.8
    sigma_threshold: float = 0.5
    merge_stuff: bool = True

    def __post_init__(self):
        for name in ("object_score_threshold", "overlap_keep_ratio", "sigma_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")


def binarize(sigma: SoftMask, threshold: float = 0.5) -> BinaryMask:
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must be in [0, 1], got {threshold}")
    return BinaryMask(sigma.values >= threshold)


def drop_no_object(cands: CandidateSet) -> CandidateSet:
    """Discard candidates whose argmax is no-object; renormalize survivors over the real classes."""
    if not cands.has_no_object:
        raise ValidationError("candidate set has no no-object column")
    c = cands.num_classes
    keep = np.flatnonzero(np.argmax(cands.posteriors, axis=1) != c)
    kept = cands.subset(keep)
    mass = kept.posteriors[:, :c].sum(axis=1, keepdims=True)
    # argmax on a real class implies positive class mass
    return kept.with_posteriors(kept.posteriors[:, :c] / mass, has_no_object=False)


def strip_no_object_logit(cands: CandidateSet) -> CandidateSet:
    """Keep every candidate, renormalizing over the real classes; all-no-object rows become uniform and flagged."""
    if not cands.has_no_object:
        raise ValidationError("candidate set has no no-object column")
    c = cands.num_classes
    probs = cands.posteriors[:, :c].copy()
    mass = probs.sum(axis=1)
    flat = mass <= 0.0
    probs[flat] = 1.0 / c
    probs[~flat] /= mass[~flat, None]
    return cands.with_posteriors(probs, has_no_object=False, degenerate=cands.degenerate | flat)


def panoptic_fusion(cands: CandidateSet, taxonomy: Taxonomy, params: FusionParams = FusionParams()) -> PanopticMap:
    if cands.has_no_object:
        raise ValidationError("apply drop_no_object or strip_no_object_logit before fusion")
    if cands.num_classes != len(taxonomy):
        raise ValidationError(
            f"posteriors cover {cands.num_classes} classes but the taxonomy has {len(taxonomy)}"
        )
    height, width = cands.shape
    scores = cands.posteriors.max(axis=1)
    labels = cands.posteriors.argmax(axis=1)
    keep = np.flatnonzero(scores >= params.object_score_threshold)
    if keep.size == 0:
        return PanopticMap.void_map(height, width)

    weighted = scores[keep, None, None] * cands.sigmas[keep]
    owner = np.argmax(weighted, axis=0)  # first maximum = lowest candidate index
    things = taxonomy.thing_vector()
    ids = np.zeros((height, width), dtype=np.int64)
    segments: list[tuple[int, int]] = []
    stuff_ids: dict[int, int] = {}
    for k, cand in enumerate(keep):
        label = int(labels[cand])
        claimed = owner == k
        binary = cands.sigmas[cand] >= params.sigma_threshold
        region = claimed & binary
        claimed_area = int(claimed.sum())
        binary_area = int(binary.sum())
        if claimed_area == 0 or binary_area == 0 or not region.any():
            continue
        if claimed_area / binary_area < params.overlap_keep_ratio:
            continue
        if params.merge_stuff and not things[label]:
            if label not in stuff_ids:
                stuff_ids[label] = len(segments) + 1
                segments.append((stuff_ids[label], label))
            ids[region] = stuff_ids[label]
            continue
        segments.append((len(segments) + 1, label))
        ids[region] = len(segments)
    return PanopticMap(ids, tuple(segments))


def _as_distribution(p) -> np.ndarray:
    # renormalize first so a rescaled input cannot shift the seen/unseen balance
    p = np.asarray(p, dtype=np.float64)
    total = p.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, p / total, p)
    return np.clip(p, PROB_FLOOR, 1.0)


def geometric_ensemble(p_in, p_clip, seen, alpha: float = 0.4, beta: float = 0.8) -> np.ndarray:
    """Exponent-weighted geometric mean of in-vocabulary and CLIP distributions.

    Seen classes use weight ``alpha`` on the CLIP term, unseen classes ``beta``.
    Raises EnsembleError when the product has no mass, so the caller can fall
    back to ``p_clip``.
    """
    for name, value in (("alpha", alpha), ("beta", beta)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name} must be in [0, 1], got {value}")
    p_in, p_clip = _as_distribution(p_in), _as_distribution(p_clip)
    seen = np.asarray(seen, dtype=bool)
    if p_in.shape != p_clip.shape or p_in.shape[-1:] != seen.shape:
        raise ValidationError(f"shape mismatch: p_in {p_in.shape}, p_clip {p_clip.shape}, seen {seen.shape}")
    weight = np.where(seen, alpha, beta)
    scores = p_in ** (1.0 - weight) * p_clip**weight
    total = scores.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(total)) or np.any(total <= 0):
        raise EnsembleError("ensembled distribution has zero total mass")
    return scores / total


def ensemble_candidates(cands: CandidateSet, seen, alpha: float = 0.4, beta: float = 0.8) -> CandidateSet:
    """Replace class posteriors (over C) by their geometric ensemble with the CLIP posteriors."""
    if cands.has_no_object:
        raise ValidationError("ensembling operates on posteriors over C; apply a no-object policy first")
    if cands.clip_posteriors is None:
        raise ValidationError("candidate set carries no CLIP posteriors")
    if len(cands) == 0:
        return cands
    rows = []
    for p_in, p_clip in zip(cands.posteriors, cands.clip_posteriors):
        try:
            rows.append(geometric_ensemble(p_in, p_clip, seen, alpha, beta))
        except EnsembleError:
            rows.append(p_clip)
    return cands.with_posteriors(np.stack(rows))


def use_clip_posteriors(cands: CandidateSet) -> CandidateSet:
    """Classify with the CLIP posteriors alone (MAFT+-style inference)."""
    if cands.has_no_object:
        raise ValidationError("apply a no-object policy first")
    if cands.clip_posteriors is None:
        raise ValidationError("candidate set carries no CLIP posteriors")
    return cands.with_posteriors(cands.clip_posteriors)

