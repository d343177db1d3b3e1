"""Bilinear/trilinear sampling and the deformable-attention aggregation kernel.

Alignment convention: texel and cell centers sit at integer + 0.5 in
continuous coordinates, consistent with ``grid.index_to_center``. Image
sampling clamps out-of-range coordinates to the valid center range; volume
sampling defaults to reading zeros outside the grid (empty space reads as
nothing), with an optional clamp policy.

All kernels are linear in the source features and ship analytic gradients
with respect to their sampling coordinates, checked against central finite
differences by ``grad_check``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import DenseVolume, VoxelGridSpec, _freeze
from .geometry import CameraModel, ReferencePointSet, project_point


@dataclass(frozen=True)
class ImageFeatureMap:
    """Per-view image features, data shape (height, width, D) row-major."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"image feature data must be (height, width, D), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image feature data must be finite")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class DeformableSampleSpec:
    """Sampling locations and attention weights for one query.

    ``locations`` is (M, 2) for image sources or (M, 3) for volume sources
    (continuous index coordinates); ``weights`` is (M,).
    """

    locations: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        locs = np.ascontiguousarray(self.locations, dtype=np.float64)
        wts = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(-1)
        if locs.ndim != 2 or locs.shape[1] not in (2, 3):
            raise ValueError(f"locations must be (M, 2) or (M, 3), got {locs.shape}")
        if wts.shape[0] != locs.shape[0]:
            raise ValueError("weights length must match locations")
        if not (np.all(np.isfinite(locs)) and np.all(np.isfinite(wts))):
            raise ValueError("locations and weights must be finite")
        object.__setattr__(self, "locations", _freeze(locs))
        object.__setattr__(self, "weights", _freeze(wts))


def _lerp_axis(coord: np.ndarray, size: int, clamp: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split one continuous axis into (lo index, hi index, hi weight, d coord/d input)."""
    x = coord - 0.5
    dgrad = np.ones_like(x)
    if clamp:
        dgrad = ((x > 0.0) & (x < size - 1)).astype(np.float64)
        x = np.clip(x, 0.0, float(size - 1))
    lo = np.floor(x).astype(np.int64)
    w = x - lo
    return lo, lo + 1, w, dgrad


def bilinear_sample(fmap: ImageFeatureMap, u: float, v: float) -> np.ndarray:
    """Bilinear interpolation at continuous pixel (u, v); clamps at borders."""
    val, _, _ = bilinear_sample_grad(fmap, u, v)
    return val


def bilinear_sample_grad(fmap: ImageFeatureMap, u: float, v: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample value plus its analytic gradients d/du and d/dv, each shape (D,)."""
    if not (np.isfinite(u) and np.isfinite(v)):
        raise ValueError("sample coordinates must be finite")
    h, w = fmap.height, fmap.width
    x0, x1, wx, dx = _lerp_axis(np.asarray(float(u)), w, clamp=True)
    y0, y1, wy, dy = _lerp_axis(np.asarray(float(v)), h, clamp=True)
    x1 = min(int(x1), w - 1)
    y1 = min(int(y1), h - 1)
    f = fmap.data
    f00, f01 = f[int(y0), int(x0)], f[int(y0), x1]
    f10, f11 = f[y1, int(x0)], f[y1, x1]
    top = f00 * (1.0 - wx) + f01 * wx
    bot = f10 * (1.0 - wx) + f11 * wx
    val = top * (1.0 - wy) + bot * wy
    d_du = ((f01 - f00) * (1.0 - wy) + (f11 - f10) * wy) * dx
    d_dv = (bot - top) * dy
    return val, d_du, d_dv


def trilinear_sample_many(vol: DenseVolume, pts: np.ndarray, oob: str = "zeros") -> np.ndarray:
    """Trilinear interpolation of (N, 3) continuous index points -> (N, D)."""
    if oob not in ("zeros", "clamp"):
        raise ValueError(f"oob policy must be 'zeros' or 'clamp', got {oob!r}")
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(vol.spec.dims)
    clamp = oob == "clamp"
    lows, highs, fracs = [], [], []
    for a in range(3):
        lo, hi, w, _ = _lerp_axis(pts[:, a], int(dims[a]), clamp)
        lows.append(lo)
        highs.append(hi)
        fracs.append(w)
    out = np.zeros((pts.shape[0], vol.channels))
    for corner in range(8):
        sel = [(corner >> a) & 1 for a in range(3)]
        idx = [highs[a] if sel[a] else lows[a] for a in range(3)]
        weight = np.ones(pts.shape[0])
        for a in range(3):
            weight = weight * (fracs[a] if sel[a] else 1.0 - fracs[a])
        inb = np.ones(pts.shape[0], dtype=bool)
        for a in range(3):
            inb &= (idx[a] >= 0) & (idx[a] < dims[a])
        ic = [np.clip(idx[a], 0, dims[a] - 1) for a in range(3)]
        vals = vol.data[ic[0], ic[1], ic[2]]
        out += (weight * inb)[:, None] * vals
    return out


def trilinear_sample(vol: DenseVolume, p, oob: str = "zeros") -> np.ndarray:
    """Trilinear interpolation at one continuous index point, shape (D,)."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("sample point must be finite")
    return trilinear_sample_many(vol, p.reshape(1, 3), oob=oob)[0]


def trilinear_sample_grad(vol: DenseVolume, p, oob: str = "zeros") -> tuple[np.ndarray, np.ndarray]:
    """Sample value (D,) plus its analytic gradient (3, D) w.r.t. the point."""
    if oob not in ("zeros", "clamp"):
        raise ValueError(f"oob policy must be 'zeros' or 'clamp', got {oob!r}")
    p = np.asarray(p, dtype=np.float64).reshape(3)
    dims = vol.spec.dims
    clamp = oob == "clamp"
    lo, hi, w, dg = [], [], [], []
    for a in range(3):
        l, h, f, d = _lerp_axis(np.asarray(p[a]), dims[a], clamp)
        lo.append(int(l))
        hi.append(int(h))
        w.append(float(f))
        dg.append(float(d))
    val = np.zeros(vol.channels)
    grad = np.zeros((3, vol.channels))
    for corner in range(8):
        sel = [(corner >> a) & 1 for a in range(3)]
        idx = [hi[a] if sel[a] else lo[a] for a in range(3)]
        if any(idx[a] < 0 or idx[a] >= dims[a] for a in range(3)):
            continue
        f = vol.data[idx[0], idx[1], idx[2]]
        wts = [w[a] if sel[a] else 1.0 - w[a] for a in range(3)]
        val += wts[0] * wts[1] * wts[2] * f
        for a in range(3):
            others = [wts[b] for b in range(3) if b != a]
            sign = 1.0 if sel[a] else -1.0
            grad[a] += sign * others[0] * others[1] * dg[a] * f
    return val, grad


def deformable_aggregate(query_dim: int, samples: DeformableSampleSpec, source) -> np.ndarray:
    """Weighted sum of interpolated reads: sum_m weight_m * sample(source, loc_m).

    Pure aggregation — attention weights and sampling locations are inputs,
    value/output projections are model weights and stay outside this kernel.
    """
    loc_dim = samples.locations.shape[1]
    if isinstance(source, ImageFeatureMap):
        if loc_dim != 2:
            raise ValueError("image sources need 2D sample locations")
        if source.channels != query_dim:
            raise ValueError(f"source channels {source.channels} != query_dim {query_dim}")
        out = np.zeros(query_dim)
        for (u, v), wt in zip(samples.locations, samples.weights):
            out += wt * bilinear_sample(source, u, v)
        return out
    if isinstance(source, DenseVolume):
        if loc_dim != 3:
            raise ValueError("volume sources need 3D sample locations")
        if source.channels != query_dim:
            raise ValueError(f"source channels {source.channels} != query_dim {query_dim}")
        vals = trilinear_sample_many(source, samples.locations)
        return samples.weights @ vals
    raise ValueError(f"unsupported source type {type(source).__name__}")


def vca_aggregate(
    q_index: tuple[int, int, int],
    refs: ReferencePointSet,
    cams: list[CameraModel],
    feats: list[ImageFeatureMap],
    weights: np.ndarray,
) -> np.ndarray:
    """Cross-view aggregation for one voxel query.

    Projects the query's reference points into every camera, skips invisible
    points, aggregates the weighted bilinear reads per view, and divides the
    sum by |v| — the number of views where at least one of the query's points
    is visible. Returns a zero vector when no view sees any point.

    ``weights`` has shape (num_views, M).
    """
    if len(cams) != len(feats):
        raise ValueError("need one feature map per camera")
    pts = refs.points[q_index]
    m = pts.shape[0]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(cams), m):
        raise ValueError(f"weights must be (num_views, {m}), got {weights.shape}")
    channels = feats[0].channels if feats else 0
    for fm in feats:
        if fm.channels != channels:
            raise ValueError("all feature maps must share the channel count")
    acc = np.zeros(channels)
    hit_views = 0
    for n, (cam, fmap) in enumerate(zip(cams, feats)):
        view_acc = np.zeros(channels)
        any_visible = False
        for pm in range(m):
            proj = project_point(cam, pts[pm])
            if proj is None:
                continue
            any_visible = True
            u, v, _ = proj
            view_acc += weights[n, pm] * bilinear_sample(fmap, u, v)
        if any_visible:
            hit_views += 1
            acc += view_acc
    if hit_views == 0:
        return np.zeros(channels)
    return acc / hit_views


def grad_check(
    fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-finite-difference gradients.

    ``fn(x)`` returns ``(value, grad)`` where value has any shape S and grad
    has shape ``(len(x),) + S`` with ``grad[i] = d value / d x[i]``. Call it
    away from interpolation-cell boundaries, where the kernels are smooth.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    _, analytic = fn(x0)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(x0.size):
        step = np.zeros_like(x0)
        step[i] = h
        fp, _ = fn(x0 + step)
        fm, _ = fn(x0 - step)
        fd = (np.asarray(fp, dtype=np.float64) - np.asarray(fm, dtype=np.float64)) / (2.0 * h)
        denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(analytic[i])))
        worst = max(worst, float(np.max(np.abs(fd - analytic[i]) / denom)))
    return worst


def feature_map_to_volume(fmap: ImageFeatureMap) -> DenseVolume:
    """Embed an image map as a dense volume with Z=1 (for PVOX round-trips)."""
    spec = VoxelGridSpec((fmap.height, fmap.width, 1), (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    return DenseVolume(spec, fmap.data[:, :, None, :])


def volume_to_feature_map(vol: DenseVolume) -> ImageFeatureMap:
    if vol.spec.dims[2] != 1:
        raise ValueError("feature-map volumes must have Z=1")
    return ImageFeatureMap(vol.data[:, :, 0, :])
