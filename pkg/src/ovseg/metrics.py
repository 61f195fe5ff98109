"""IoU, panoptic quality (PQ = SQ x RQ) with seen/unseen stratification, and FN_seg/FN_cls analysis."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from .core import BinaryMask, OvsegError, PanopticMap, Taxonomy, ValidationError

MATCH_IOU = 0.5
DEFAULT_VOID_OVERLAP = 0.5


class EmptyEvaluationError(OvsegError, ValueError):
    """Raised instead of returning NaN when no class occurs in the evaluated set."""


def iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


@dataclass(frozen=True)
class SegmentMatch:
    pred_segment_id: int
    gt_segment_id: int
    iou: float
    class_id: int

    def __post_init__(self):
        if not MATCH_IOU < self.iou <= 1.0:
            raise ValidationError(f"a match needs iou in (0.5, 1], got {self.iou}")


@dataclass
class ClassStats:
    """Additive per-class counters; PQ terms are derived on demand."""

    tp: int = 0
    fp: int = 0
    fn_seg: int = 0
    fn_cls: int = 0
    iou_sum: float = 0.0

    @property
    def fn(self) -> int:
        return self.fn_seg + self.fn_cls

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        return self.sq * self.rq if self.tp else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    def add(self, other: "ClassStats") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn_seg += other.fn_seg
        self.fn_cls += other.fn_cls
        self.iou_sum += other.iou_sum


@dataclass(frozen=True)
class MatchReport:
    """Per-image matching outcome.

    Until :func:`stratify_false_negatives` runs, every false negative is listed
    in ``fn_seg`` and ``stratified`` is False. Predictions excluded by the void
    rule are listed in ``ignored`` and count as neither TP nor FP.
    """

    tp: tuple[SegmentMatch, ...]
    fp: tuple[int, ...]
    fn_seg: tuple[int, ...]
    fn_cls: tuple[tuple[int, int], ...]
    per_class: Mapping[int, ClassStats]
    ignored: tuple[int, ...] = ()
    stratified: bool = False
    empty_mask_skips: int = 0

    @property
    def fn(self) -> tuple[int, ...]:
        return tuple(sorted(self.fn_seg + tuple(g for g, _ in self.fn_cls)))


def _pair_table(pred: PanopticMap, gt: PanopticMap):
    """Pixel counts for every co-occurring (pred id, gt id) pair, void (0) included."""
    offset = int(gt.ids.max()) + 1
    combined = pred.ids.ravel() * offset + gt.ids.ravel()
    keys, counts = np.unique(combined, return_counts=True)
    table = {(int(k // offset), int(k % offset)): int(c) for k, c in zip(keys, counts)}
    pred_area: dict[int, int] = {}
    gt_area: dict[int, int] = {}
    for (p, g), c in table.items():
        pred_area[p] = pred_area.get(p, 0) + c
        gt_area[g] = gt_area.get(g, 0) + c
    return table, pred_area, gt_area


def _check_pair(pred: PanopticMap, gt: PanopticMap, num_classes: int | None) -> None:
    if pred.shape != gt.shape:
        raise ValidationError(
            f"prediction is {pred.width}x{pred.height} but ground truth is {gt.width}x{gt.height}"
        )
    if num_classes is not None:
        pred.check_classes(num_classes)
        gt.check_classes(num_classes)


def pq_match(
    pred: PanopticMap,
    gt: PanopticMap,
    void_overlap_threshold: float = DEFAULT_VOID_OVERLAP,
    num_classes: int | None = None,
) -> MatchReport:
    _check_pair(pred, gt, num_classes)
    table, pred_area, gt_area = _pair_table(pred, gt)
    pred_cls = pred.class_of()
    gt_cls = gt.class_of()

    tp: list[SegmentMatch] = []
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for (p, g), inter in table.items():
        if p == 0 or g == 0 or pred_cls[p] != gt_cls[g]:
            continue
        value = inter / (pred_area[p] + gt_area[g] - inter)
        if value > MATCH_IOU:
            tp.append(SegmentMatch(p, g, value, gt_cls[g]))
            matched_pred.add(p)
            matched_gt.add(g)

    per_class: dict[int, ClassStats] = {}

    def stats(c: int) -> ClassStats:
        return per_class.setdefault(c, ClassStats())

    for m in tp:
        s = stats(m.class_id)
        s.tp += 1
        s.iou_sum += m.iou
    fp, ignored = [], []
    for p, c in sorted(pred_cls.items()):
        if p in matched_pred:
            continue
        if table.get((p, 0), 0) / pred_area[p] > void_overlap_threshold:
            ignored.append(p)
        else:
            fp.append(p)
            stats(c).fp += 1
    fn = []
    for g, c in sorted(gt_cls.items()):
        if g not in matched_gt:
            fn.append(g)
            stats(c).fn_seg += 1

    tp.sort(key=lambda m: m.gt_segment_id)
    return MatchReport(
        tp=tuple(tp),
        fp=tuple(fp),
        fn_seg=tuple(fn),
        fn_cls=(),
        per_class=dict(sorted(per_class.items())),
        ignored=tuple(ignored),
    )


def stratify_false_negatives(report: MatchReport, pred: PanopticMap, gt: PanopticMap) -> MatchReport:
    """Split false negatives into FN_cls (an overlapping mask with the wrong class exists) and FN_seg."""
    _check_pair(pred, gt, None)
    table, pred_area, gt_area = _pair_table(pred, gt)
    pred_cls = pred.class_of()
    gt_cls = gt.class_of()
    offender: dict[int, int] = {}
    for (p, g), inter in table.items():
        if p == 0 or g == 0:
            continue
        if inter / (pred_area[p] + gt_area[g] - inter) > MATCH_IOU and pred_cls[p] != gt_cls[g]:
            offender[g] = p

    fn_seg, fn_cls = [], []
    per_class = {c: replace(s) for c, s in report.per_class.items()}
    for s in per_class.values():
        s.fn_seg += s.fn_cls
        s.fn_cls = 0
    for g in report.fn:
        if g in offender:
            fn_cls.append((g, offender[g]))
            s = per_class[gt_cls[g]]
            s.fn_seg -= 1
            s.fn_cls += 1
        else:
            fn_seg.append(g)
    return replace(report, fn_seg=tuple(fn_seg), fn_cls=tuple(fn_cls), per_class=per_class, stratified=True)


def evaluate_image(
    pred: PanopticMap,
    gt: PanopticMap,
    void_overlap_threshold: float = DEFAULT_VOID_OVERLAP,
    num_classes: int | None = None,
) -> MatchReport:
    """pq_match followed by FN stratification."""
    return stratify_false_negatives(pq_match(pred, gt, void_overlap_threshold, num_classes), pred, gt)


def accumulate(reports: Iterable[MatchReport]) -> dict[int, ClassStats]:
    totals: dict[int, ClassStats] = {}
    for report in reports:
        for c, s in report.per_class.items():
            totals.setdefault(c, ClassStats()).add(s)
    return dict(sorted(totals.items()))


@dataclass(frozen=True)
class Scores:
    """Per-class stats (present classes only) and class-averaged aggregates.

    ``pq_seen``/``pq_unseen`` are None when the taxonomy carries no split or the
    subset has no present class.
    """

    per_class: Mapping[int, ClassStats]
    pq_all: float
    sq_all: float
    rq_all: float
    pq_seen: float | None = None
    pq_unseen: float | None = None
    averaging: str = field(default="present-classes")


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def pq_scores(reports: MatchReport | Iterable[MatchReport], taxonomy: Taxonomy) -> Scores:
    if isinstance(reports, MatchReport):
        reports = [reports]
    totals = accumulate(reports)
    present = {c: s for c, s in totals.items() if s.present}
    if not present:
        raise EmptyEvaluationError("no classes evaluated: ground truth and predictions are both empty")
    bad = [c for c in present if not 0 <= c < len(taxonomy)]
    if bad:
        raise ValidationError(f"class ids out of range for taxonomy of size {len(taxonomy)}: {bad}")
    ordered = sorted(present)
    pq_seen = pq_unseen = None
    if taxonomy.seen is not None:
        pq_seen = _mean([present[c].pq for c in ordered if c in taxonomy.seen])
        pq_unseen = _mean([present[c].pq for c in ordered if c not in taxonomy.seen])
    return Scores(
        per_class=present,
        pq_all=_mean([present[c].pq for c in ordered]),
        sq_all=_mean([present[c].sq for c in ordered]),
        rq_all=_mean([present[c].rq for c in ordered]),
        pq_seen=pq_seen,
        pq_unseen=pq_unseen,
    )
