"""Voxel-level training targets from labeled point clouds and visibility masks.

Each voxel takes the class with the highest point count inside it (ties go
to the smallest class index); voxels without points stay empty. Cells
outside a visibility mask are marked with the ignore sentinel ``C + 1`` so
losses and metrics skip them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import BinaryMask, SemanticGrid, VoxelGridSpec, world_to_indices, _freeze


@dataclass(frozen=True)
class LabeledPointCloud:
    """Points with semantic labels in {1..C} and optional instance ids.

    ``positions`` is (N, 3) meters, ``labels`` is (N,) uint16, ``instance_ids``
    is (N,) uint32 with 0 meaning "no instance".
    """

    positions: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    instance_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16).reshape(-1)
        if labels.shape[0] != pos.shape[0]:
            raise ValueError("labels length must match positions")
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        if labels.size and labels.min() < 1:
            raise ValueError("semantic labels must be >= 1 (0 is the empty class)")
        inst = self.instance_ids
        if inst is None:
            inst = np.zeros(pos.shape[0], dtype=np.uint32)
        inst = np.ascontiguousarray(inst, dtype=np.uint32).reshape(-1)
        if inst.shape[0] != pos.shape[0]:
            raise ValueError("instance_ids length must match positions")
        object.__setattr__(self, "positions", _freeze(pos))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "instance_ids", _freeze(inst))

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]


def voxelize_majority(
    pc: LabeledPointCloud, spec: VoxelGridSpec, num_classes: int | None = None
) -> SemanticGrid:
    """Majority-vote voxelization: each voxel gets its most frequent point label.

    Out-of-range points are ignored; empty voxels get label 0; count ties
    are broken by the smallest class index. ``num_classes`` defaults to the
    highest label present in the cloud.
    """
    if num_classes is None:
        num_classes = int(pc.labels.max()) if pc.num_points else 0
    if pc.num_points and int(pc.labels.max()) > num_classes:
        raise ValueError("cloud contains labels above num_classes")

    labels_grid = np.zeros(spec.dims, dtype=np.uint16)
    idx, valid = world_to_indices(spec, pc.positions)
    if np.any(valid):
        idx = idx[valid]
        pt_labels = pc.labels[valid].astype(np.int64)
        dims = np.asarray(spec.dims, dtype=np.int64)
        flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        # one (voxel, class) pair per occupied combination, with its count
        key = flat * (num_classes + 1) + pt_labels
        uniq, counts = np.unique(key, return_counts=True)
        vox = uniq // (num_classes + 1)
        cls = uniq % (num_classes + 1)
        # winner per voxel: highest count, then smallest class index
        order = np.lexsort((cls, -counts, vox))
        vox_sorted = vox[order]
        first = np.ones(vox_sorted.shape[0], dtype=bool)
        first[1:] = vox_sorted[1:] != vox_sorted[:-1]
        flat_out = labels_grid.reshape(-1)
        flat_out[vox_sorted[first]] = cls[order][first].astype(np.uint16)
    return SemanticGrid(spec, labels_grid, num_classes=num_classes)


def make_thing_mask(grid: SemanticGrid, thing_classes) -> BinaryMask:
    """Mask of voxels whose label is one of the foreground (thing) classes."""
    things = np.asarray(sorted(thing_classes), dtype=np.uint16)
    bits = np.isin(grid.labels, things)
    return BinaryMask(grid.spec, bits)


def apply_visibility_mask(grid: SemanticGrid, visible: BinaryMask) -> SemanticGrid:
    """Mark voxels outside the visibility mask with the ignore sentinel C+1."""
    if grid.spec != visible.spec:
        raise ValueError("grid and mask specs must match")
    labels = grid.labels.copy()
    labels[~visible.bits] = grid.ignore_label
    return SemanticGrid(grid.spec, labels, num_classes=grid.num_classes)
