"""Panoptic refinement: fuse 3D detection boxes with the semantic voxel grid.

High-confidence boxes (score > tau) overwrite the labels of their interior
voxels in descending score order, then instance IDs are handed out
sequentially, skipping boxes that mostly overlap earlier instances. Stuff
and empty voxels always keep instance ID 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import InstanceGrid, SemanticGrid, VoxelGridSpec, all_cell_centers, world_to_indices
from .geometry import rotation_about_z

#: Default confidence gate for boxes entering refinement.
DEFAULT_TAU = 0.8

#: Default fraction of a box's candidate voxels that may already be claimed.
DEFAULT_OVERLAP_THRESHOLD = 0.5


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D detection box: center/size in meters, yaw about z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    label: int
    score: float

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("center and size must have length 3")
        if any(not np.isfinite(v) for v in center + size + (self.yaw,)):
            raise ValueError("box parameters must be finite")
        if any(s <= 0 for s in size):
            raise ValueError(f"box size must be positive, got {size}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"box score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "score", float(self.score))


def voxels_in_box(spec: VoxelGridSpec, box: Box3D) -> np.ndarray:
    """Indices of all voxels whose center lies inside the box, (N, 3) in
    lexicographic order.

    Centers are moved into the box frame (center shift, inverse yaw) and
    tested against the half extents with closed inequalities.
    """
    half = np.asarray(box.size) / 2.0
    # restrict the test to the cells under the box's world-space AABB
    r = rotation_about_z(box.yaw)
    radius = np.abs(r) @ half
    lo = np.asarray(box.center) - radius
    hi = np.asarray(box.center) + radius
    origin = np.asarray(spec.origin)
    cell = np.asarray(spec.cell_size)
    dims = np.asarray(spec.dims)
    first = np.clip(np.floor((lo - origin) / cell - 0.5).astype(np.int64), 0, dims - 1)
    last = np.clip(np.ceil((hi - origin) / cell - 0.5).astype(np.int64), -1, dims - 1)
    if np.any(last < first):
        return np.zeros((0, 3), dtype=np.int64)

    ranges = [np.arange(first[a], last[a] + 1) for a in range(3)]
    ii, jj, kk = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    centers = origin + (idx + 0.5) * cell
    local = (centers - np.asarray(box.center)) @ r  # rows @ R == R^T applied
    inside = np.all(np.abs(local) <= half, axis=1)
    return idx[inside]


def _confident_boxes(boxes: list[Box3D], tau: float) -> list[Box3D]:
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    gated = [b for b in boxes if b.score > tau]
    # descending score; ties keep the original input order
    return sorted(gated, key=lambda b: -b.score)


def refine_semantics(grid: SemanticGrid, boxes: list[Box3D], tau: float = DEFAULT_TAU) -> SemanticGrid:
    """Overwrite the labels inside every confident box with the box class.

    Boxes apply in descending score order and never overwrite voxels already
    claimed by a higher-scoring box in this pass.
    """
    labels = grid.labels.copy()
    claimed = np.zeros(grid.spec.dims, dtype=bool)
    for box in _confident_boxes(boxes, tau):
        idx = voxels_in_box(grid.spec, box)
        if idx.size == 0:
            continue
        free = ~claimed[idx[:, 0], idx[:, 1], idx[:, 2]]
        sel = idx[free]
        labels[sel[:, 0], sel[:, 1], sel[:, 2]] = box.label
        claimed[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return SemanticGrid(grid.spec, labels, num_classes=grid.num_classes)


def assign_instances(
    grid: SemanticGrid,
    boxes: list[Box3D],
    thing_classes,
    tau: float = DEFAULT_TAU,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> InstanceGrid:
    """Sequential instance-ID assignment from confident boxes.

    Candidates of a box are its interior voxels currently labeled with a
    thing class. A box whose candidates overlap already-assigned voxels by
    more than ``overlap_threshold`` is skipped entirely; otherwise its
    unassigned candidates receive the next ID (starting at 1). Stuff, empty,
    and unclaimed thing voxels keep ID 0.
    """
    if not (0.0 <= overlap_threshold <= 1.0):
        raise ValueError(f"overlap_threshold must be in [0, 1], got {overlap_threshold}")
    things = np.asarray(sorted(thing_classes), dtype=np.uint16)
    is_thing = np.isin(grid.labels, things)
    ids = np.zeros(grid.spec.dims, dtype=np.uint32)
    next_id = 1
    for box in _confident_boxes(boxes, tau):
        idx = voxels_in_box(grid.spec, box)
        if idx.size == 0:
            continue
        cand = idx[is_thing[idx[:, 0], idx[:, 1], idx[:, 2]]]
        if cand.shape[0] == 0:
            continue
        taken = ids[cand[:, 0], cand[:, 1], cand[:, 2]] != 0
        if taken.sum() / cand.shape[0] > overlap_threshold:
            continue
        fresh = cand[~taken]
        if fresh.shape[0] == 0:
            continue
        ids[fresh[:, 0], fresh[:, 1], fresh[:, 2]] = next_id
        next_id += 1
    return InstanceGrid(grid.spec, ids)


def export_point_labels(
    grid: SemanticGrid, inst: InstanceGrid, positions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (class, instance) read from the containing voxel.

    Out-of-range points get (0, 0).
    """
    if grid.spec != inst.spec:
        raise ValueError("semantic and instance grids must share the spec")
    idx, valid = world_to_indices(grid.spec, positions)
    labels = np.zeros(idx.shape[0], dtype=np.uint16)
    ids = np.zeros(idx.shape[0], dtype=np.uint32)
    labels[valid] = grid.labels[idx[valid, 0], idx[valid, 1], idx[valid, 2]]
    ids[valid] = inst.ids[idx[valid, 0], idx[valid, 1], idx[valid, 2]]
    return labels, ids
