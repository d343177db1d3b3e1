"""Semantic (mIoU) and panoptic (PQ, PQ†) evaluation over voxel grids.

Segments are matched per class by strict IoU > 0.5, which makes every match
unique. Cells labeled with the ignore sentinel in either grid are excluded
from all intersections and unions; classes absent from both prediction and
ground truth never enter a mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import BinaryMask, InstanceGrid, SemanticGrid, _freeze


@dataclass(frozen=True)
class ConfusionMatrix:
    """(C+1) x (C+1) integer counts over classes 0..C, rows = gt, cols = pred."""

    counts: np.ndarray = field(repr=False)
    num_classes: int = 0

    def __post_init__(self):
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        c = int(self.num_classes)
        if counts.shape != (c + 1, c + 1):
            raise ValueError(f"counts must be ({c + 1}, {c + 1}), got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", _freeze(counts))
        object.__setattr__(self, "num_classes", c)

    @classmethod
    def from_grids(
        cls, pred: SemanticGrid, gt: SemanticGrid, eval_mask: BinaryMask | None = None
    ) -> "ConfusionMatrix":
        if pred.spec != gt.spec:
            raise ValueError("prediction and ground-truth specs must match")
        if pred.num_classes != gt.num_classes:
            raise ValueError("prediction and ground-truth class counts must match")
        if eval_mask is not None and eval_mask.spec != gt.spec:
            raise ValueError("eval mask spec must match the grids")
        c = gt.num_classes
        p = pred.labels.reshape(-1).astype(np.int64)
        g = gt.labels.reshape(-1).astype(np.int64)
        keep = (p <= c) & (g <= c)
        if eval_mask is not None:
            keep &= eval_mask.bits.reshape(-1)
        if not np.any(keep):
            raise ValueError("no cells left to evaluate")
        counts = np.bincount(g[keep] * (c + 1) + p[keep], minlength=(c + 1) ** 2)
        return cls(counts.reshape(c + 1, c + 1), num_classes=c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MiouResult:
    per_class: dict[int, float]
    mean: float


def miou(
    pred: SemanticGrid,
    gt: SemanticGrid,
    eval_mask: BinaryMask | None = None,
    class_set=None,
) -> MiouResult:
    """Per-class IoU and their mean over evaluated (masked, non-ignore) cells.

    ``class_set`` defaults to the semantic classes 1..C; pass one including 0
    to score the empty class too. Classes absent from both prediction and
    ground truth are excluded from the mean.
    """
    cm = ConfusionMatrix.from_grids(pred, gt, eval_mask)
    if class_set is None:
        class_set = range(1, cm.num_classes + 1)
    class_set = [int(c) for c in class_set]
    if any(c < 0 or c > cm.num_classes for c in class_set):
        raise ValueError(f"class_set entries must lie in [0, {cm.num_classes}]")
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    per_class: dict[int, float] = {}
    for c in sorted(class_set):
        denom = int(tp[c] + fp[c] + fn[c])
        if denom == 0:
            continue  # absent from both sides
        per_class[int(c)] = float(tp[c] / denom)
    if not per_class:
        raise ValueError("no classes from class_set present in either grid")
    return MiouResult(per_class, float(np.mean(list(per_class.values()))))


@dataclass(frozen=True)
class ClassPQ:
    """Per-class matching stats: summed matched IoU and TP/FP/FN counts."""

    iou_sum: float
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if self.tp < 0 or self.fp < 0 or self.fn < 0:
            raise ValueError("TP/FP/FN must be non-negative")
        if self.iou_sum > self.tp + 1e-12:
            raise ValueError("matched IoU sum cannot exceed TP")

    @property
    def denominator(self) -> float:
        return self.tp + 0.5 * self.fp + 0.5 * self.fn

    @property
    def pq(self) -> float:
        d = self.denominator
        return self.iou_sum / d if d > 0 else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp > 0 else 0.0

    @property
    def rq(self) -> float:
        d = self.denominator
        return self.tp / d if d > 0 else 0.0


@dataclass(frozen=True)
class PQStats:
    """Per-class stats plus class-averaged PQ/SQ/RQ (0.0 when nothing present)."""

    per_class: dict[int, ClassPQ]

    def _mean(self, attr: str) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([getattr(v, attr) for v in self.per_class.values()]))

    @property
    def pq(self) -> float:
        return self._mean("pq")

    @property
    def sq(self) -> float:
        return self._mean("sq")

    @property
    def rq(self) -> float:
        return self._mean("rq")


def _validate_panoptic_inputs(pred, gt):
    pred_sem, pred_inst = pred
    gt_sem, gt_inst = gt
    for g in (pred_inst, gt_inst):
        if g.spec != gt_sem.spec:
            raise ValueError("all grids must share the spec")
    if pred_sem.spec != gt_sem.spec:
        raise ValueError("prediction and ground-truth specs must match")
    if pred_sem.num_classes != gt_sem.num_classes:
        raise ValueError("prediction and ground-truth class counts must match")
    return pred_sem, pred_inst, gt_sem, gt_inst


def _segments(sem: np.ndarray, inst: np.ndarray, things: frozenset, stuffs: frozenset):
    """Map segment key -> flat cell indices. Things segment by (class, id>=1),
    stuff forms one segment per class; other labels belong to no segment."""
    segs: dict[tuple[int, int], np.ndarray] = {}
    labels = np.unique(sem)
    for c in labels:
        c = int(c)
        cmask = sem == c
        if c in things:
            ids = np.unique(inst[cmask])
            for v in ids:
                if v == 0:
                    continue  # unclaimed thing voxels belong to no segment
                segs[(c, int(v))] = np.flatnonzero(cmask & (inst == v))
        elif c in stuffs:
            segs[(c, 0)] = np.flatnonzero(cmask)
    return segs


def _match_stats(
    pred_segs: dict, gt_segs: dict, classes: frozenset
) -> dict[int, ClassPQ]:
    """Shared matching core: IoU > 0.5 per class, summed in ascending gt-id order."""
    pred_sets = {k: frozenset(v.tolist()) for k, v in pred_segs.items()}
    gt_sets = {k: frozenset(v.tolist()) for k, v in gt_segs.items()}
    stats: dict[int, ClassPQ] = {}
    for c in sorted(classes):
        gt_keys = sorted(k for k in gt_sets if k[0] == c)
        pred_keys = sorted(k for k in pred_sets if k[0] == c)
        if not gt_keys and not pred_keys:
            continue
        matched_pred = set()
        tp = 0
        iou_sum = 0.0
        for gk in gt_keys:
            gset = gt_sets[gk]
            for pk in pred_keys:
                if pk in matched_pred:
                    continue
                pset = pred_sets[pk]
                inter = len(gset & pset)
                if inter == 0:
                    continue
                iou = inter / (len(gset) + len(pset) - inter)
                if iou > 0.5:
                    tp += 1
                    iou_sum += iou
                    matched_pred.add(pk)
                    break  # IoU > 0.5 matches are unique per gt segment
        fn = len(gt_keys) - tp
        fp = len(pred_keys) - tp
        stats[c] = ClassPQ(iou_sum=iou_sum, tp=tp, fp=fp, fn=fn)
    return stats


def _flatten_valid(pred_sem, pred_inst, gt_sem, gt_inst):
    p = pred_sem.labels.reshape(-1).astype(np.int64)
    g = gt_sem.labels.reshape(-1).astype(np.int64)
    keep = (p <= pred_sem.num_classes) & (g <= gt_sem.num_classes)
    return (
        p[keep],
        pred_inst.ids.reshape(-1).astype(np.int64)[keep],
        g[keep],
        gt_inst.ids.reshape(-1).astype(np.int64)[keep],
    )


def panoptic_quality(pred, gt, thing_classes, stuff_classes) -> PQStats:
    """Panoptic quality of (semantic, instance) grid pairs.

    Segments match iff their IoU exceeds 0.5; per class
    PQ = sum(IoU) / (TP + FP/2 + FN/2), averaged over the classes present in
    prediction or ground truth.
    """
    pred_sem, pred_inst, gt_sem, gt_inst = _validate_panoptic_inputs(pred, gt)
    things = frozenset(int(c) for c in thing_classes)
    stuffs = frozenset(int(c) for c in stuff_classes)
    if things & stuffs:
        raise ValueError("thing and stuff classes must be disjoint")
    p, pi, g, gi = _flatten_valid(pred_sem, pred_inst, gt_sem, gt_inst)
    pred_segs = _segments(p, pi, things, stuffs)
    gt_segs = _segments(g, gi, things, stuffs)
    return PQStats(_match_stats(pred_segs, gt_segs, things | stuffs))


def panoptic_quality_dagger(pred, gt, thing_classes, stuff_classes) -> PQStats:
    """PQ† variant: things keep the PQ rule, each stuff class scores as the
    plain IoU of its predicted vs ground-truth region (no matching gate)."""
    pred_sem, pred_inst, gt_sem, gt_inst = _validate_panoptic_inputs(pred, gt)
    things = frozenset(int(c) for c in thing_classes)
    stuffs = frozenset(int(c) for c in stuff_classes)
    if things & stuffs:
        raise ValueError("thing and stuff classes must be disjoint")
    p, pi, g, gi = _flatten_valid(pred_sem, pred_inst, gt_sem, gt_inst)
    pred_segs = _segments(p, pi, things, stuffs)
    gt_segs = _segments(g, gi, things, stuffs)
    stats = _match_stats(pred_segs, gt_segs, things)
    for c in sorted(stuffs):
        pmask = p == c
        gmask = g == c
        union = int(np.count_nonzero(pmask | gmask))
        if union == 0:
            continue
        inter = int(np.count_nonzero(pmask & gmask))
        stats[c] = ClassPQ(iou_sum=inter / union, tp=1, fp=0, fn=0)
    return PQStats(stats)


def brute_force_pq_oracle(pred, gt, thing_classes, stuff_classes, max_segments: int = 64) -> PQStats:
    """Slow reference PQ: enumerate all segment pairs and check match uniqueness.

    Produces stats identical to ``panoptic_quality`` on small inputs; raises
    if any segment could match more than one counterpart (impossible for
    IoU > 0.5, asserted here by construction).
    """
    pred_sem, pred_inst, gt_sem, gt_inst = _validate_panoptic_inputs(pred, gt)
    things = frozenset(int(c) for c in thing_classes)
    stuffs = frozenset(int(c) for c in stuff_classes)
    p, pi, g, gi = _flatten_valid(pred_sem, pred_inst, gt_sem, gt_inst)

    def collect(sem, inst):
        segs: dict[tuple[int, int], set] = {}
        for cell in range(sem.shape[0]):
            c = int(sem[cell])
            if c in things:
                v = int(inst[cell])
                if v == 0:
                    continue
                segs.setdefault((c, v), set()).add(cell)
            elif c in stuffs:
                segs.setdefault((c, 0), set()).add(cell)
        return segs

    pred_segs = collect(p, pi)
    gt_segs = collect(g, gi)
    if len(pred_segs) > max_segments or len(gt_segs) > max_segments:
        raise ValueError(f"oracle limited to {max_segments} segments per side")

    stats: dict[int, ClassPQ] = {}
    for c in sorted(things | stuffs):
        gt_keys = sorted(k for k in gt_segs if k[0] == c)
        pred_keys = sorted(k for k in pred_segs if k[0] == c)
        if not gt_keys and not pred_keys:
            continue
        # exhaustive pair enumeration with a uniqueness check
        candidates = []
        for gk in gt_keys:
            for pk in pred_keys:
                inter = len(gt_segs[gk] & pred_segs[pk])
                union = len(gt_segs[gk] | pred_segs[pk])
                iou = inter / union if union else 0.0
                if iou > 0.5:
                    candidates.append((gk, pk, iou))
        for side in (0, 1):
            seen = [m[side] for m in candidates]
            if len(seen) != len(set(seen)):
                raise AssertionError("IoU > 0.5 produced a non-unique matching")
        tp = len(candidates)
        iou_sum = 0.0
        for gk, _, iou in sorted(candidates, key=lambda m: m[0]):
            iou_sum += iou
        stats[c] = ClassPQ(
            iou_sum=iou_sum, tp=tp, fp=len(pred_keys) - tp, fn=len(gt_keys) - tp
        )
    return PQStats(stats)
