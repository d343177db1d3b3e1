"""SE(3) poses, pinhole cameras, and reference-point generation.

Reference points come in two flavours matching the two attention patterns of
the view encoder: cross-attention points scattered inside each source voxel
(later projected into the camera views) and self-attention points spread on
the BEV plane at the source voxel's exact center height.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import VoxelGridSpec, all_cell_centers, _freeze

#: Depth below which a projected point counts as behind the camera.
DEPTH_EPSILON = 1e-6

#: Tolerance for the rotation-orthonormality check at Pose construction.
POSE_ORTHO_TOL = 1e-9

#: Default in-cell fractional offsets for cross-attention reference points.
DEFAULT_VCA_OFFSETS = np.array(
    [
        [0.25, 0.25, 0.25],
        [0.75, 0.75, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
    ]
)

#: Default planar offsets (in cells) for self-attention reference points.
DEFAULT_VSA_OFFSETS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform as a 4x4 homogeneous matrix with named frames.

    The matrix maps points expressed in ``src_frame`` coordinates into
    ``dst_frame`` coordinates.
    """

    matrix: np.ndarray = field(repr=False)
    src_frame: str | None = None
    dst_frame: str | None = None

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("pose matrix must be finite")
        r = m[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > POSE_ORTHO_TOL:
            raise ValueError("rotation block is not orthonormal (tolerance 1e-9)")
        if abs(np.linalg.det(r) - 1.0) > POSE_ORTHO_TOL:
            raise ValueError("rotation block must have determinant +1")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) != 0.0:
            raise ValueError("last row must be exactly (0, 0, 0, 1)")
        object.__setattr__(self, "matrix", _freeze(m))

    @classmethod
    def identity(cls, frame: str | None = None) -> "Pose":
        return cls(np.eye(4), src_frame=frame, dst_frame=frame)

    @classmethod
    def from_rot_trans(
        cls,
        rotation: np.ndarray,
        translation,
        src_frame: str | None = None,
        dst_frame: str | None = None,
    ) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return cls(m, src_frame=src_frame, dst_frame=dst_frame)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]


def rotation_about_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a`` (matrix product a @ b)."""
    return Pose(a.matrix @ b.matrix, src_frame=b.src_frame, dst_frame=a.dst_frame)


def invert(a: Pose) -> Pose:
    r = a.rotation.T
    t = -r @ a.translation
    return Pose.from_rot_trans(r, t, src_frame=a.dst_frame, dst_frame=a.src_frame)


def transform_points(a: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply a pose to a point or an (..., 3) array of points."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ a.rotation.T + a.translation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera given by its full 3x4 projection matrix.

    ``projection`` maps homogeneous ego-frame points to homogeneous pixels;
    pixel (u, v) coordinates are continuous with the origin at the top-left
    image corner and the in-image test is half-open.
    """

    projection: np.ndarray = field(repr=False)
    image_size: tuple[int, int]
    view_index: int = 0

    def __post_init__(self):
        p = np.ascontiguousarray(self.projection, dtype=np.float64)
        if p.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("projection matrix must be finite")
        w, h = (int(v) for v in self.image_size)
        if w <= 0 or h <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        object.__setattr__(self, "projection", _freeze(p))
        object.__setattr__(self, "image_size", (w, h))
        object.__setattr__(self, "view_index", int(self.view_index))


def project_point(cam: CameraModel, p) -> tuple[float, float, float] | None:
    """Project an ego-frame point; None when behind the camera or off-image."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"point must be finite, got {p}")
    hom = cam.projection @ np.append(p, 1.0)
    d = hom[2]
    if d <= DEPTH_EPSILON:
        return None
    u, v = hom[0] / d, hom[1] / d
    w, h = cam.image_size
    if not (0.0 <= u < w and 0.0 <= v < h):
        return None
    return float(u), float(v), float(d)


def project_points(cam: CameraModel, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (..., 3) points: (u, v, depth) plus a visibility mask."""
    pts = np.asarray(pts, dtype=np.float64)
    hom = pts @ cam.projection[:, :3].T + cam.projection[:, 3]
    d = hom[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[..., :2] / d[..., None]
    w, h = cam.image_size
    visible = (
        (d > DEPTH_EPSILON)
        & (uv[..., 0] >= 0.0)
        & (uv[..., 0] < w)
        & (uv[..., 1] >= 0.0)
        & (uv[..., 1] < h)
    )
    out = np.concatenate([uv, d[..., None]], axis=-1)
    return out, visible


def visible_views(cams: list[CameraModel], p) -> set[int]:
    """Indices of all views whose image the projected point falls on."""
    return {cam.view_index for cam in cams if project_point(cam, p) is not None}


@dataclass(frozen=True)
class ReferencePointSet:
    """Per-voxel sampling points, shape (H, W, Z, M, 3) in the ego frame.

    ``kind`` is "cross" for in-cell cross-attention points or "bev" for
    BEV-plane self-attention points, whose z component equals the source
    voxel's center height exactly.
    """

    spec: VoxelGridSpec
    points: np.ndarray = field(repr=False)
    kind: str = "cross"

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        h, w, z = self.spec.dims
        if pts.ndim != 5 or pts.shape[:3] != (h, w, z) or pts.shape[4] != 3:
            raise ValueError(f"points shape {pts.shape} does not match (H, W, Z, M, 3)")
        if self.kind not in ("cross", "bev"):
            raise ValueError(f"kind must be 'cross' or 'bev', got {self.kind!r}")
        if self.kind == "bev":
            center_z = all_cell_centers(self.spec)[..., 2]
            if not np.array_equal(pts[..., 2], np.broadcast_to(center_z[..., None], pts.shape[:4])):
                raise ValueError("bev reference points must share the source voxel center height")
        object.__setattr__(self, "points", _freeze(pts))

    @property
    def num_points(self) -> int:
        return self.points.shape[3]


def gen_vca_reference_points(spec: VoxelGridSpec, m1: int, offsets: np.ndarray) -> ReferencePointSet:
    """Cross-attention points: per voxel, m1 points at fractional in-cell offsets.

    ``offsets`` has shape (m1, 3) with every component in [0, 1), so each
    generated point stays inside its source cell.
    """
    if m1 < 1:
        raise ValueError("m1 must be >= 1")
    offsets = np.asarray(offsets, dtype=np.float64).reshape(m1, 3)
    if np.any(offsets < 0.0) or np.any(offsets >= 1.0):
        raise ValueError("offsets must lie in [0, 1)")
    h, w, z = spec.dims
    ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
    pts = np.asarray(spec.origin) + (idx[..., None, :] + offsets) * np.asarray(spec.cell_size)
    return ReferencePointSet(spec, pts, kind="cross")


def gen_vsa_reference_points(spec: VoxelGridSpec, m2: int, planar_offsets: np.ndarray) -> ReferencePointSet:
    """Self-attention points: per voxel, m2 BEV-plane points at the center height.

    ``planar_offsets`` has shape (m2, 2) and is expressed in cells; points
    may leave the grid (the sampling kernel clamps later).
    """
    if m2 < 1:
        raise ValueError("m2 must be >= 1")
    planar = np.asarray(planar_offsets, dtype=np.float64).reshape(m2, 2)
    centers = all_cell_centers(spec)
    pts = np.repeat(centers[..., None, :], m2, axis=3).copy()
    pts[..., 0] += planar[:, 0] * spec.cell_size[0]
    pts[..., 1] += planar[:, 1] * spec.cell_size[1]
    return ReferencePointSet(spec, pts, kind="bev")
