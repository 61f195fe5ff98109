"""Oracle interventions: classification oracle, Hungarian mask selection, and oracles on selected masks."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .core import BinaryMask, PanopticMap, SoftMask, ValidationError, resample_nearest
from .metrics import MATCH_IOU, _pair_table
from .proposals import CandidateSet, strip_no_object_logit

NoObjectPolicy = Literal["keep", "strip"]


@dataclass(frozen=True)
class AssignmentCostParams:
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ValidationError("cost weights must be non-negative")
        if self.bce_weight == 0 and self.dice_weight == 0:
            raise ValidationError("bce_weight and dice_weight cannot both be zero")
        if not 0 < self.prob_clamp < 0.5:
            raise ValidationError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def __post_init__(self):
        rows = [r for r, _ in self.pairs]
        cols = [c for _, c in self.pairs]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValidationError("assignment indices must be unique on both sides")


def bce_dice_cost_matrix(sigmas: np.ndarray, gt_masks: np.ndarray, params: AssignmentCostParams) -> np.ndarray:
    """Cost of every (gt, candidate) pair; ``sigmas`` is (N, H, W), ``gt_masks`` is (G, H, W)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    gt_masks = np.asarray(gt_masks, dtype=np.float64)
    if sigmas.shape[1:] != gt_masks.shape[1:]:
        raise ValidationError(f"sigma shape {sigmas.shape[1:]} differs from gt mask shape {gt_masks.shape[1:]}")
    n, g = sigmas.shape[0], gt_masks.shape[0]
    if n == 0 or g == 0:
        return np.zeros((g, n))
    s = np.clip(sigmas.reshape(n, -1), params.prob_clamp, 1.0 - params.prob_clamp)
    t = gt_masks.reshape(g, -1)
    pixels = s.shape[1]
    log_p = np.log(s)
    log_q = np.log1p(-s)
    bce = -(t @ (log_p - log_q).T + log_q.sum(axis=1)[None, :]) / pixels
    inter = t @ s.T
    denom = t.sum(axis=1)[:, None] + s.sum(axis=1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = np.where(denom > 0, 1.0 - 2.0 * inter / np.where(denom > 0, denom, 1.0), 0.0)
    return params.bce_weight * bce + params.dice_weight * dice


def bce_dice_cost(sigma: SoftMask, gt_mask: BinaryMask, params: AssignmentCostParams = AssignmentCostParams()) -> float:
    if sigma.shape != gt_mask.shape:
        raise ValidationError(f"sigma is {sigma.width}x{sigma.height} but gt mask is {gt_mask.width}x{gt_mask.height}")
    return float(bce_dice_cost_matrix(sigma.values[None], gt_mask.bits[None], params)[0, 0])


def _solve_rows_le_cols(cost: np.ndarray):
    """Shortest augmenting path assignment for n <= m; returns row->col and dual potentials."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_refine(cost, row_to_col, u, v):
    """Among optimal assignments, pick the one where lower rows take lower columns.

    Pads to a square problem with zero-cost dummy rows (dual 0), restricts to
    tight edges, then fixes rows in order, trying columns in ascending order
    and accepting a column when an alternating path re-routes the displaced
    owner through unfixed rows.
    """
    n, m = cost.shape
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-10 * scale
    reduced = cost - u[:, None] - v[None, :]
    adj = [list(np.flatnonzero(reduced[i] <= tol)) for i in range(n)]
    dummy_adj = list(np.flatnonzero(v >= -tol))
    match = list(int(c) for c in row_to_col)
    col_owner = [-1] * m
    for i, c in enumerate(match):
        col_owner[c] = i
    free_cols = [c for c in range(m) if col_owner[c] == -1]
    for d, c in enumerate(free_cols):
        col_owner[c] = n + d
        match.append(c)

    def neighbours(row):
        return adj[row] if row < n else dummy_adj

    for r in range(n):
        for c in adj[r]:
            if c == match[r]:
                break
            displaced = col_owner[c]
            if displaced < r:
                continue
            target = match[r]
            visited = {c}
            state = {"dummy_done": False}
            path: list[tuple[int, int]] = []

            def reroute(row) -> bool:
                if row >= n:
                    if state["dummy_done"]:
                        return False
                    state["dummy_done"] = True
                for c2 in neighbours(row):
                    if c2 in visited:
                        continue
                    visited.add(c2)
                    if c2 == target:
                        path.append((row, c2))
                        return True
                    nxt = col_owner[c2]
                    if nxt < r or nxt == r:
                        continue
                    if reroute(nxt):
                        path.append((row, c2))
                        return True
                return False

            if reroute(displaced):
                for row, col in path:
                    match[row] = col
                    col_owner[col] = row
                match[r] = c
                col_owner[c] = r
                break
    return match[:n]


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of rows (gt) to columns (candidates); rectangular matrices allowed.

    Ties are broken lexicographically: the lowest row index claims the lowest
    column among optimal assignments. When rows outnumber columns the problem is
    solved on the transpose, so the rule then applies to candidate order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return Assignment((), 0.0)
    if cost.ndim != 2:
        raise ValidationError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValidationError("cost matrix contains non-finite entries")
    transposed = cost.shape[0] > cost.shape[1]
    work = cost.T if transposed else cost
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * work.shape[1] + 100))
    try:
        row_to_col, u, v = _solve_rows_le_cols(work)
        match = _lexicographic_refine(work, row_to_col, u, v)
    finally:
        sys.setrecursionlimit(limit)
    pairs = [(c, r) if transposed else (r, c) for r, c in enumerate(match)]
    pairs.sort()
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(tuple(pairs), total)


def gt_mask_stack(gt: PanopticMap, shape: tuple[int, int] | None = None) -> np.ndarray:
    """(G, H, W) boolean stack of gt segment masks in table order, resampled when ``shape`` differs."""
    masks = [gt.ids == sid for sid, _ in gt.segments]
    if shape is not None and shape != gt.shape:
        masks = [resample_nearest(m, shape) for m in masks]
    h, w = shape if shape is not None else gt.shape
    return np.stack(masks) if masks else np.zeros((0, h, w), dtype=bool)


@dataclass(frozen=True)
class Selection:
    """Result of oracle mask selection.

    ``assignment`` pairs index gt segments (table order) with candidates of the
    input set; ``candidates`` holds the matched candidates in ascending input
    order, each mapped to its gt segment by ``gt_of_candidate``.
    """

    candidates: CandidateSet
    assignment: Assignment
    gt_of_candidate: tuple[int, ...]
    gt_classes: tuple[int, ...]
    cost: np.ndarray = field(repr=False)
    unmatched_gt: tuple[int, ...] = ()
    no_object_matched: tuple[int, ...] = ()
    policy: str = "keep"

    @property
    def shortfall(self) -> int:
        """Gt segments that cannot receive a candidate (guaranteed FN_seg)."""
        return len(self.unmatched_gt)


def selection_oracle(
    cands: CandidateSet,
    gt: PanopticMap,
    params: AssignmentCostParams = AssignmentCostParams(),
    no_object_policy: NoObjectPolicy = "keep",
) -> Selection:
    if not cands.has_no_object:
        raise ValidationError("selection operates on the full candidate set, before no-object filtering")
    if not gt.segments:
        raise ValidationError("selection oracle needs a ground truth with at least one segment")
    if no_object_policy not in ("keep", "strip"):
        raise ValidationError(f"no-object policy must be 'keep' or 'strip', got {no_object_policy!r}")
    masks = gt_mask_stack(gt, cands.shape)
    cost = bce_dice_cost_matrix(cands.sigmas, masks, params)
    assignment = hungarian(cost)
    by_cand = sorted((c, g) for g, c in assignment.pairs)
    chosen = [c for c, _ in by_cand]
    selected = cands.subset(chosen)
    no_obj_col = cands.num_classes
    no_object = tuple(
        int(cands.source_index[c]) for c in chosen if int(np.argmax(cands.posteriors[c])) == no_obj_col
    )
    if no_object_policy == "strip":
        selected = strip_no_object_logit(selected)
    matched_gt = {g for g, _ in assignment.pairs}
    classes = tuple(c for _, c in gt.segments)
    return Selection(
        candidates=selected,
        assignment=assignment,
        gt_of_candidate=tuple(g for _, g in by_cand),
        gt_classes=classes,
        cost=cost,
        unmatched_gt=tuple(gt.segments[g][0] for g in range(len(gt.segments)) if g not in matched_gt),
        no_object_matched=no_object,
        policy=no_object_policy,
    )


def classification_oracle(pred: PanopticMap, gt: PanopticMap) -> PanopticMap:
    """Give each predicted segment overlapping a gt segment with IoU > 0.5 that segment's class."""
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction is {pred.width}x{pred.height} but ground truth is {gt.width}x{gt.height}")
    table, pred_area, gt_area = _pair_table(pred, gt)
    gt_cls = gt.class_of()
    corrected = {}
    for (p, g), inter in table.items():
        if p and g and inter / (pred_area[p] + gt_area[g] - inter) > MATCH_IOU:
            corrected[p] = gt_cls[g]
    segments = tuple((sid, corrected.get(sid, cid)) for sid, cid in pred.segments)
    return PanopticMap(pred.ids, segments)


def segmentation_oracle_on_selection(selection: Selection, gt: PanopticMap) -> Selection:
    """Replace each matched candidate's sigma by the exact indicator of its gt segment."""
    cands = selection.candidates
    masks = gt_mask_stack(gt, cands.shape).astype(np.float64)
    sigmas = masks[list(selection.gt_of_candidate)] if len(cands) else cands.sigmas
    return _replace_candidates(selection, cands.with_sigmas(sigmas))


def classification_oracle_on_selection(selection: Selection, gt: PanopticMap) -> Selection:
    """Replace each matched candidate's posterior by a one-hot at its gt class (no-object mass zero)."""
    cands = selection.candidates
    probs = np.zeros_like(cands.posteriors)
    for k, g in enumerate(selection.gt_of_candidate):
        probs[k, selection.gt_classes[g]] = 1.0
    return _replace_candidates(selection, cands.with_posteriors(probs))


def _replace_candidates(selection: Selection, cands: CandidateSet) -> Selection:
    return Selection(
        candidates=cands,
        assignment=selection.assignment,
        gt_of_candidate=selection.gt_of_candidate,
        gt_classes=selection.gt_classes,
        cost=selection.cost,
        unmatched_gt=selection.unmatched_gt,
        no_object_matched=selection.no_object_matched,
        policy=selection.policy,
    )
