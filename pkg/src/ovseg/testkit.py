"""Synthetic scenes and independent brute-force reference implementations.

Nothing here shares code paths with :mod:`ovseg.metrics` or the Hungarian
solver; the brute-force routines recompute overlaps from boolean masks and
enumerate matchings exhaustively.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .core import ClassInfo, PanopticMap, Taxonomy, ValidationError
from .proposals import CandidateSet
from .zeroshot import DenseFeatureGrid, TextEmbeddings


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    min_segments: int = 2
    max_segments: int = 6
    num_classes: int = 8
    morph_radius: int = 1
    morph_mode: str = "both"
    class_flip_prob: float = 0.0
    no_object_flip_prob: float = 0.0
    spurious_count: int = 0
    void_prob: float = 0.0
    clip_flip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("scene dimensions must be >= 1")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ValidationError("segment count range must be non-empty and start at >= 1")
        if self.max_segments > self.width * self.height:
            raise ValidationError("more segments requested than pixels")
        if self.num_classes < 2:
            raise ValidationError("need at least two classes")
        if self.morph_mode not in ("both", "erode", "dilate"):
            raise ValidationError("morph_mode must be 'both', 'erode' or 'dilate'")
        if self.morph_radius < 0 or self.spurious_count < 0:
            raise ValidationError("morph_radius and spurious_count must be non-negative")
        for name in ("class_flip_prob", "no_object_flip_prob", "void_prob", "clip_flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")


def synthetic_taxonomy(num_classes: int, seen_fraction: float = 0.5) -> Taxonomy:
    """Even class indices are things, odd ones stuff; the first classes form the seen split."""
    classes = tuple(ClassInfo(f"class_{i:02d}", (), i % 2 == 0) for i in range(num_classes))
    n_seen = max(1, int(round(num_classes * seen_fraction)))
    return Taxonomy(classes, frozenset(range(n_seen)))


def _voronoi(height, width, k, rng):
    points = rng.choice(height * width, size=k, replace=False)
    py, px = np.divmod(points, width)
    yy, xx = np.mgrid[0:height, 0:width]
    dist = (yy[None] - py[:, None, None]) ** 2 + (xx[None] - px[:, None, None]) ** 2
    return np.argmin(dist, axis=0)


def _pick_classes(k, num_classes, things, rng):
    used_stuff: set[int] = set()
    classes = []
    for _ in range(k):
        while True:
            c = int(rng.integers(num_classes))
            if things[c] or c not in used_stuff:
                break
        if not things[c]:
            used_stuff.add(c)
        classes.append(c)
    return classes


def gen_gt(spec: SceneSpec, rng: np.random.Generator, taxonomy: Taxonomy) -> PanopticMap:
    k = int(rng.integers(spec.min_segments, spec.max_segments + 1))
    regions = _voronoi(spec.height, spec.width, k, rng)
    void = rng.random(k) < spec.void_prob
    if void.all():
        void[int(rng.integers(k))] = False
    seg_ids = rng.choice(np.arange(1, 10 * k + 1), size=k, replace=False)
    classes = _pick_classes(k, len(taxonomy), taxonomy.thing_vector(), rng)
    ids = np.zeros((spec.height, spec.width), dtype=np.int64)
    segments = []
    for r in range(k):
        if void[r]:
            continue
        ids[regions == r] = seg_ids[r]
        segments.append((int(seg_ids[r]), classes[r]))
    return PanopticMap(ids, tuple(segments))


def _soft(region, rng):
    sigma = np.where(region, rng.uniform(0.6, 1.0, region.shape), rng.uniform(0.0, 0.3, region.shape))
    # 8-bit grid so dumps round-trip exactly
    return np.round(sigma * 255) / 255


def _as_f32(probs):
    probs = np.asarray(probs, dtype=np.float32).astype(np.float64)
    return probs


def _posterior(cls, num_classes, rng, no_object: bool):
    out = np.zeros(num_classes + 1)
    others = [c for c in range(num_classes) if c != cls]
    if no_object:
        p_none = rng.uniform(0.55, 0.9)
        class_mass = 1.0 - p_none
        out[cls] = 0.95 * class_mass
        out[others] = 0.05 * class_mass * rng.dirichlet(np.ones(len(others)))
        out[num_classes] = p_none
    else:
        conf = rng.uniform(0.85, 0.99)
        rest = 1.0 - conf
        out[cls] = conf
        split = rng.dirichlet(np.ones(len(others) + 1))
        out[others] = rest * split[:-1]
        out[num_classes] = rest * split[-1]
    return _as_f32(out / out.sum())


def _clip_posterior(cls, num_classes, rng):
    out = np.zeros(num_classes)
    conf = rng.uniform(0.5, 0.9)
    others = [c for c in range(num_classes) if c != cls]
    out[cls] = conf
    out[others] = (1.0 - conf) * rng.dirichlet(np.ones(len(others)))
    return _as_f32(out / out.sum())


def _morph(mask, radius):
    if radius > 0:
        return ndimage.binary_dilation(mask, iterations=radius)
    if radius < 0:
        eroded = ndimage.binary_erosion(mask, iterations=-radius)
        return eroded if eroded.any() else mask
    return mask


def gen_candidates(spec: SceneSpec, gt: PanopticMap, rng: np.random.Generator, num_classes: int) -> CandidateSet:
    sigmas, posts, clips = [], [], []
    for sid, cls in gt.segments:
        radius = int(rng.integers(-spec.morph_radius, spec.morph_radius + 1))
        if spec.morph_mode == "erode":
            radius = -abs(radius)
        elif spec.morph_mode == "dilate":
            radius = abs(radius)
        region = _morph(gt.ids == sid, radius)
        label = cls
        if rng.random() < spec.class_flip_prob:
            label = int(rng.choice([c for c in range(num_classes) if c != cls]))
        no_object = rng.random() < spec.no_object_flip_prob
        clip_label = cls
        if rng.random() < spec.clip_flip_prob:
            clip_label = int(rng.choice([c for c in range(num_classes) if c != cls]))
        sigmas.append(_soft(region, rng))
        posts.append(_posterior(label, num_classes, rng, no_object))
        clips.append(_clip_posterior(clip_label, num_classes, rng))
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    for _ in range(spec.spurious_count):
        cy, cx = rng.uniform(0, spec.height), rng.uniform(0, spec.width)
        radius = rng.uniform(1.0, max(1.5, min(spec.height, spec.width) / 3))
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        label = int(rng.integers(num_classes))
        sigmas.append(_soft(region, rng))
        posts.append(_posterior(label, num_classes, rng, rng.random() < 0.5))
        clips.append(_clip_posterior(int(rng.integers(num_classes)), num_classes, rng))
    order = rng.permutation(len(sigmas))
    shape = (0, spec.height, spec.width)
    return CandidateSet(
        np.stack(sigmas)[order] if sigmas else np.zeros(shape),
        np.stack(posts)[order] if posts else np.zeros((0, num_classes + 1)),
        clip_posteriors=np.stack(clips)[order] if clips else np.zeros((0, num_classes)),
    )


def gen_scene(spec: SceneSpec, taxonomy: Taxonomy | None = None) -> tuple[PanopticMap, CandidateSet]:
    """Seeded Voronoi ground truth plus candidates derived from it under the SceneSpec noise model."""
    taxonomy = taxonomy or synthetic_taxonomy(spec.num_classes)
    rng = np.random.default_rng(spec.seed)
    gt = gen_gt(spec, rng, taxonomy)
    return gt, gen_candidates(spec, gt, rng, len(taxonomy))


def random_text_embeddings(num_classes: int, dim: int, seed: int) -> TextEmbeddings:
    rng = np.random.default_rng(seed)
    mat = rng.normal(size=(num_classes, dim))
    return TextEmbeddings(mat / np.linalg.norm(mat, axis=1, keepdims=True))


def gen_features(
    gt: PanopticMap,
    texts: TextEmbeddings,
    stride: int = 1,
    noise: float = 0.0,
    seed: int = 0,
    class_override: dict[int, int] | None = None,
) -> DenseFeatureGrid:
    """Feature grid whose value over each gt segment is its class text embedding (plus noise).

    ``class_override`` maps segment id -> class whose embedding is painted instead.
    """
    rng = np.random.default_rng(seed)
    fh, fw = -(-gt.height // stride), -(-gt.width // stride)
    rows = (np.arange(fh) * gt.height) // fh
    cols = (np.arange(fw) * gt.width) // fw
    grid_ids = gt.ids[rows][:, cols]
    values = rng.normal(scale=0.05, size=(fh, fw, texts.dim))
    override = class_override or {}
    for sid, cls in gt.segments:
        values[grid_ids == sid] = texts.matrix[override.get(sid, cls)]
    values += noise * rng.normal(size=values.shape)
    return DenseFeatureGrid(values)


# ---------------------------------------------------------------------------
# brute-force references


@dataclass(frozen=True)
class BruteClass:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int


def _segment_masks(pmap: PanopticMap):
    return {sid: (pmap.ids == sid, cid) for sid, cid in pmap.segments}


def _best_matching(edges):
    """Exhaustive search over edge subsets forming a matching: max cardinality, then max IoU sum."""
    best = (0, 0.0, ())
    for size in range(len(edges), 0, -1):
        for combo in itertools.combinations(edges, size):
            preds = [e[0] for e in combo]
            gts = [e[1] for e in combo]
            if len(set(preds)) < size or len(set(gts)) < size:
                continue
            total = sum(e[2] for e in combo)
            if (size, total) > best[:2]:
                best = (size, total, combo)
        if best[0]:
            break
    return best[2]


def brute_pq(pred: PanopticMap, gt: PanopticMap, void_overlap_threshold: float = 0.5) -> dict[int, BruteClass]:
    """Per-class PQ/SQ/RQ for one image by exhaustive same-class matching on pixel masks."""
    pred_masks = _segment_masks(pred)
    gt_masks = _segment_masks(gt)
    void = gt.ids == 0
    classes = sorted({c for _, c in pred_masks.values()} | {c for _, c in gt_masks.values()})
    out = {}
    for c in classes:
        ps = [p for p, (_, pc) in pred_masks.items() if pc == c]
        gs = [g for g, (_, gc) in gt_masks.items() if gc == c]
        edges = []
        for p in ps:
            for g in gs:
                a, b = pred_masks[p][0], gt_masks[g][0]
                value = np.count_nonzero(a & b) / np.count_nonzero(a | b)
                if value > 0.5:
                    edges.append((p, g, value))
        matching = _best_matching(edges)
        matched_p = {e[0] for e in matching}
        tp = len(matching)
        iou_sum = sum(e[2] for e in matching)
        fp = 0
        for p in ps:
            if p in matched_p:
                continue
            a = pred_masks[p][0]
            if np.count_nonzero(a & void) / np.count_nonzero(a) <= void_overlap_threshold:
                fp += 1
        fn = len(gs) - tp
        if tp + fp + fn == 0:
            continue
        if tp:
            sq = iou_sum / tp
            rq = tp / (tp + fp / 2 + fn / 2)
            pq = iou_sum / (tp + fp / 2 + fn / 2)
        else:
            sq = rq = pq = 0.0
        out[c] = BruteClass(pq, sq, rq, tp, fp, fn)
    return out


def brute_pq_all(per_class: dict[int, BruteClass]) -> float:
    return sum(v.pq for v in per_class.values()) / len(per_class)


@lru_cache(maxsize=64)
def _injections(rows: int, cols: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(cols), rows)), dtype=np.int64).reshape(-1, rows)


def brute_assignment(cost) -> float:
    """Minimal total cost over all injections of the smaller side into the larger."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return 0.0
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    rows, cols = cost.shape
    if rows > 7:
        raise ValidationError("brute_assignment is limited to a smaller side of at most 7")
    perms = _injections(rows, cols)
    totals = cost[np.arange(rows)[None, :], perms].sum(axis=1)
    return float(totals.min())


# ---------------------------------------------------------------------------
# constructed fixtures


def no_object_fixture() -> tuple[Taxonomy, PanopticMap, CandidateSet]:
    """Miniature of the selection-oracle drop.

    Two gt segments (a thing of class 0 on the left, class 2 on the right).
    Candidate 0 reproduces the left segment exactly but its argmax is no-object;
    candidate 1 is a looser, confident duplicate of the left segment; candidate
    2 reproduces the right segment but is also argmax no-object. Baseline
    inference keeps only the duplicate; oracle selection picks candidates 0 and
    2, which the keep policy then discards; the strip policy recovers both.
    """
    taxonomy = Taxonomy(
        (ClassInfo("car"), ClassInfo("road", is_thing=False), ClassInfo("person")),
        frozenset({0, 1}),
    )
    h, w = 8, 8
    ids = np.zeros((h, w), dtype=np.int64)
    ids[:, :4] = 1
    ids[:, 4:] = 2
    gt = PanopticMap(ids, ((1, 0), (2, 2)))

    left = (ids == 1).astype(float)
    right = (ids == 2).astype(float)
    loose = left.copy()
    loose[:2, :4] = 0.0  # misses the top two rows: IoU 24/32 = 0.75
    sigmas = np.stack([left, loose, right])
    posteriors = np.array(
        [
            [0.19, 0.005, 0.005, 0.80],
            [0.90, 0.03, 0.03, 0.04],
            [0.005, 0.005, 0.19, 0.80],
        ]
    )
    return taxonomy, gt, CandidateSet(sigmas, posteriors)


def diagonal_fixture(num_extra: int = 2) -> tuple[Taxonomy, PanopticMap, CandidateSet]:
    """Candidates 0..G-1 reproduce gt segments 0..G-1 exactly, followed by blurry extras."""
    taxonomy = synthetic_taxonomy(4)
    h, w = 6, 9
    ids = np.zeros((h, w), dtype=np.int64)
    ids[:, 0:3] = 5
    ids[:, 3:6] = 7
    ids[:, 6:9] = 9
    gt = PanopticMap(ids, ((5, 0), (7, 1), (9, 2)))
    exact = [(ids == sid).astype(float) for sid, _ in gt.segments]
    extras = [np.full((h, w), 0.4) for _ in range(num_extra)]
    sigmas = np.stack(exact + extras)
    posteriors = []
    for _, cls in gt.segments:
        row = np.full(5, 0.02)
        row[cls] = 0.92
        posteriors.append(row)
    for _ in range(num_extra):
        posteriors.append(np.array([0.1, 0.1, 0.1, 0.1, 0.6]))
    return taxonomy, gt, CandidateSet(sigmas, np.array(posteriors))
