"""Voxel grid coordinate system and the dense/sparse/label grid containers.

The grid convention used everywhere in this package:

- indices ``(i, j, k)`` run along the world x/y/z axes with counts
  ``(H, W, Z)``; ``H`` and ``W`` span the BEV plane, ``Z`` is height.
- cells are half-open boxes ``[origin + idx * cell, origin + (idx+1) * cell)``
  so voxelization is a partition of the covered volume.
- dense feature data is stored row-major in ``(i, j, k, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VoxelGridSpec:
    """Geometry of a voxel grid: cell counts, world origin, and cell size.

    ``dims`` are the (H, W, Z) cell counts, ``origin`` is the minimum world
    corner in meters and ``cell_size`` the per-axis cell edge lengths.
    """

    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    cell_size: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(v) for v in self.origin)
        cell = tuple(float(v) for v in self.cell_size)
        if len(dims) != 3 or len(origin) != 3 or len(cell) != 3:
            raise ValueError("dims, origin and cell_size must have length 3")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if any(not np.isfinite(v) for v in origin + cell):
            raise ValueError("origin and cell_size must be finite")
        if any(s <= 0 for s in cell):
            raise ValueError(f"all cell sizes must be > 0, got {cell}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cell_size", cell)

    @property
    def num_cells(self) -> int:
        h, w, z = self.dims
        return h * w * z

    @property
    def extent(self) -> np.ndarray:
        """Exclusive maximum world corner: origin + dims * cell_size."""
        return np.asarray(self.origin) + np.asarray(self.dims) * np.asarray(self.cell_size)

    def contains_points(self, pts: np.ndarray) -> np.ndarray:
        """Half-open in-range test for an (N, 3) array of world points."""
        pts = np.asarray(pts, dtype=np.float64)
        lo = np.asarray(self.origin)
        return np.all(pts >= lo, axis=-1) & np.all(pts < self.extent, axis=-1)

    def scaled(self, factors: tuple[int, int, int]) -> "VoxelGridSpec":
        """Spec of the same world region subdivided by integer factors."""
        f = tuple(int(v) for v in factors)
        if any(v < 1 for v in f):
            raise ValueError(f"upsample factors must be positive integers, got {factors}")
        dims = tuple(d * v for d, v in zip(self.dims, f))
        cell = tuple(s / v for s, v in zip(self.cell_size, f))
        return VoxelGridSpec(dims, self.origin, cell)


def world_to_index(spec: VoxelGridSpec, p) -> tuple[int, int, int] | None:
    """Voxel index of a world point, or None when the point is out of range.

    Points exactly on the max boundary are out of range (half-open cells).
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"point must be finite, got {p}")
    if not spec.contains_points(p):
        return None
    q = np.floor((p - np.asarray(spec.origin)) / np.asarray(spec.cell_size)).astype(np.int64)
    # in-range points can floor to dims on the last cell due to rounding
    q = np.minimum(q, np.asarray(spec.dims) - 1)
    return int(q[0]), int(q[1]), int(q[2])


def world_to_indices(spec: VoxelGridSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized world_to_index: (N, 3) int indices plus an in-range mask.

    Indices of out-of-range points are clipped into bounds and must be
    masked by the caller.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    valid = spec.contains_points(pts)
    q = np.floor((pts - np.asarray(spec.origin)) / np.asarray(spec.cell_size)).astype(np.int64)
    q = np.clip(q, 0, np.asarray(spec.dims) - 1)
    return q, valid


def index_to_center(spec: VoxelGridSpec, i: int, j: int, k: int) -> np.ndarray:
    """World position of a voxel's center: origin + (idx + 0.5) * cell_size."""
    idx = np.array([i, j, k], dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(spec.dims)):
        raise ValueError(f"index {(i, j, k)} out of bounds for dims {spec.dims}")
    return np.asarray(spec.origin) + (idx + 0.5) * np.asarray(spec.cell_size)


def all_cell_centers(spec: VoxelGridSpec) -> np.ndarray:
    """Centers of every cell as an (H, W, Z, 3) array."""
    h, w, z = spec.dims
    ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
    return np.asarray(spec.origin) + (idx + 0.5) * np.asarray(spec.cell_size)


@dataclass(frozen=True)
class DenseVolume:
    """Dense D-channel feature volume over a grid, shape (H, W, Z, D)."""

    spec: VoxelGridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        h, w, z = self.spec.dims
        if data.ndim != 4 or data.shape[:3] != (h, w, z):
            raise ValueError(f"data shape {data.shape} does not match dims {(h, w, z)} + channels")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite (no NaN/Inf)")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @classmethod
    def zeros(cls, spec: VoxelGridSpec, channels: int) -> "DenseVolume":
        h, w, z = spec.dims
        return cls(spec, np.zeros((h, w, z, channels)))


@dataclass(frozen=True)
class SparseVolume:
    """Pruned feature volume: N lexicographically sorted (i, j, k) entries.

    ``coords`` is (N, 3) int64, ``feats`` is (N, D). Coordinates are unique,
    strictly increasing in (i, j, k) order and in bounds for ``spec``.
    """

    spec: VoxelGridSpec
    coords: np.ndarray = field(repr=False)
    feats: np.ndarray = field(repr=False)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.ascontiguousarray(self.feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError(f"feats shape {feats.shape} does not match {coords.shape[0]} coords")
        if not np.all(np.isfinite(feats)):
            raise ValueError("sparse features must be finite")
        dims = np.asarray(self.spec.dims)
        if coords.size and (np.any(coords < 0) or np.any(coords >= dims)):
            raise ValueError("sparse coords out of bounds")
        if coords.shape[0] > 1:
            # strictly increasing in lexicographic (i, j, k) order ⇒ sorted and unique
            keys = self._flat_keys(coords, dims)
            if np.any(np.diff(keys) <= 0):
                raise ValueError("sparse coords must be strictly increasing lexicographically")
        object.__setattr__(self, "coords", _freeze(coords))
        object.__setattr__(self, "feats", _freeze(feats))

    @staticmethod
    def _flat_keys(coords: np.ndarray, dims: np.ndarray) -> np.ndarray:
        return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]

    @property
    def num_entries(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @classmethod
    def from_unsorted(cls, spec: VoxelGridSpec, coords: np.ndarray, feats: np.ndarray) -> "SparseVolume":
        """Sort entries lexicographically before construction (coords must be unique)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(feats, dtype=np.float64)
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        return cls(spec, coords[order], feats[order])


@dataclass(frozen=True)
class SemanticGrid:
    """Per-voxel class labels in {0..C}, shape (H, W, Z).

    Label 0 is the reserved "empty" class. The sentinel value ``C + 1``
    marks ignored cells (e.g. outside the visibility mask) and is excluded
    from losses and metrics.
    """

    spec: VoxelGridSpec
    labels: np.ndarray = field(repr=False)
    num_classes: int = 0

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if labels.shape != self.spec.dims:
            raise ValueError(f"labels shape {labels.shape} does not match dims {self.spec.dims}")
        c = int(self.num_classes)
        if c < 0:
            raise ValueError("num_classes must be >= 0")
        if labels.size and int(labels.max()) > c + 1:
            raise ValueError(f"labels exceed num_classes+1 sentinel (C={c})")
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "num_classes", c)

    @property
    def ignore_label(self) -> int:
        return self.num_classes + 1


@dataclass(frozen=True)
class InstanceGrid:
    """Per-voxel instance IDs, shape (H, W, Z).

    ID 0 marks stuff/empty; the IDs in use always form a contiguous set
    {0, 1, ..., P}.
    """

    spec: VoxelGridSpec
    ids: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        if ids.shape != self.spec.dims:
            raise ValueError(f"ids shape {ids.shape} does not match dims {self.spec.dims}")
        used = np.unique(ids)
        if used.size and not np.array_equal(used, np.arange(used[-1] + 1, dtype=ids.dtype)):
            raise ValueError("instance ids in use must form a contiguous set {0..P}")
        object.__setattr__(self, "ids", _freeze(ids))

    @property
    def num_instances(self) -> int:
        return int(self.ids.max()) if self.ids.size else 0


@dataclass(frozen=True)
class BinaryMask:
    """Per-voxel boolean mask, shape (H, W, Z)."""

    spec: VoxelGridSpec
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.shape != self.spec.dims:
            raise ValueError(f"bits shape {bits.shape} does not match dims {self.spec.dims}")
        object.__setattr__(self, "bits", _freeze(bits))

    @classmethod
    def full(cls, spec: VoxelGridSpec, value: bool = True) -> "BinaryMask":
        return cls(spec, np.full(spec.dims, value, dtype=bool))


def apply_mask_and_pool_bev(vol: DenseVolume, mask: BinaryMask) -> np.ndarray:
    """Mask a volume voxel-wise and average-pool over height: (H, W, D).

    The divisor is Z (all heights), so masked-out cells contribute zeros to
    the average rather than shrinking the denominator.
    """
    if vol.spec != mask.spec:
        raise ValueError("volume and mask specs must match")
    z = vol.spec.dims[2]
    masked = vol.data * mask.bits[..., None]
    return masked.sum(axis=2) / float(z)


def densify(sv: SparseVolume) -> DenseVolume:
    """Dense volume with zeros at all coordinates absent from the sparse one."""
    h, w, z = sv.spec.dims
    data = np.zeros((h, w, z, sv.channels))
    if sv.num_entries:
        data[sv.coords[:, 0], sv.coords[:, 1], sv.coords[:, 2]] = sv.feats
    return DenseVolume(sv.spec, data)


def sparsify_nonzero(vol: DenseVolume) -> SparseVolume:
    """Sparse volume keeping the cells whose feature vector has any nonzero entry."""
    nz = np.any(vol.data != 0.0, axis=-1)
    coords = np.argwhere(nz)  # argwhere over C-ordered array is lexicographic
    feats = vol.data[nz]
    return SparseVolume(vol.spec, coords, feats)
