"""Occupancy-driven pruning and the coarse-to-fine upsampling scaffold.

Pruning keeps exactly ceil(keep_ratio * candidates) top-scoring cells, with
ties broken toward the lexicographically smaller coordinate so results are
reproducible bit-for-bit. Sparse upsampling dilates every kept coarse cell
into all of its children; the learned deconvolution weights are replaced by
caller-supplied per-child linear maps (default: copy the parent features for
the sparse path, trilinear resampling for the dense path).
"""

from __future__ import annotations

import math

import numpy as np

from .grid import DenseVolume, SparseVolume, VoxelGridSpec
from .sampling import trilinear_sample_many


def feature_norm_scores(vol: DenseVolume | SparseVolume) -> np.ndarray:
    """Per-cell L2 feature norm as a dense (H, W, Z) score grid.

    The default occupancy-score stand-in when no learned scores are supplied;
    cells absent from a sparse volume score zero.
    """
    if isinstance(vol, DenseVolume):
        return np.linalg.norm(vol.data, axis=-1)
    scores = np.zeros(vol.spec.dims)
    if vol.num_entries:
        c = vol.coords
        scores[c[:, 0], c[:, 1], c[:, 2]] = np.linalg.norm(vol.feats, axis=-1)
    return scores


def prune_topk(vol: DenseVolume | SparseVolume, scores: np.ndarray, keep_ratio: float) -> SparseVolume:
    """Keep the ceil(keep_ratio * candidates) highest-scoring cells.

    Candidates are all H*W*Z cells for dense input or the current entries for
    sparse input. Score ties are broken by lexicographic coordinate order
    (lower coordinate wins).
    """
    if not (0.0 < keep_ratio <= 1.0):
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != vol.spec.dims:
        raise ValueError(f"scores shape {scores.shape} does not match dims {vol.spec.dims}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")

    if isinstance(vol, DenseVolume):
        h, w, z = vol.spec.dims
        ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
        coords = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        feats = vol.data.reshape(-1, vol.channels)
        cell_scores = scores.ravel()
    else:
        coords = vol.coords
        feats = vol.feats
        cell_scores = scores[coords[:, 0], coords[:, 1], coords[:, 2]]

    n_keep = math.ceil(keep_ratio * coords.shape[0])
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], -cell_scores))
    kept = order[:n_keep]
    return SparseVolume.from_unsorted(vol.spec, coords[kept], feats[kept])


def _check_child_maps(maps: np.ndarray, factors: tuple[int, int, int], channels: int) -> np.ndarray:
    maps = np.asarray(maps, dtype=np.float64)
    fh, fw, fz = factors
    if maps.ndim != 5 or maps.shape[:3] != (fh, fw, fz) or maps.shape[3] != channels:
        raise ValueError(
            f"child maps must have shape ({fh}, {fw}, {fz}, {channels}, out), got {maps.shape}"
        )
    return maps


def sparse_upsample(
    sv: SparseVolume,
    factors: tuple[int, int, int],
    child_maps: np.ndarray | None = None,
) -> SparseVolume:
    """Dilate every kept coarse cell into all f_h*f_w*f_z child cells.

    The children of a coarse cell partition its world extent exactly. Child
    features default to a copy of the parent's; ``child_maps`` of shape
    (f_h, f_w, f_z, D, D_out) applies one linear map per child offset.
    """
    fine_spec = sv.spec.scaled(factors)
    fh, fw, fz = (int(f) for f in factors)
    if child_maps is not None:
        child_maps = _check_child_maps(child_maps, (fh, fw, fz), sv.channels)
        out_channels = child_maps.shape[4]
    else:
        out_channels = sv.channels
    n = sv.num_entries
    if n == 0:
        return SparseVolume(fine_spec, np.zeros((0, 3), dtype=np.int64), np.zeros((0, out_channels)))

    offsets = np.stack(
        np.meshgrid(np.arange(fh), np.arange(fw), np.arange(fz), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    base = sv.coords * np.array([fh, fw, fz])
    child_coords = (base[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    if child_maps is None:
        child_feats = np.repeat(sv.feats, offsets.shape[0], axis=0)
    else:
        flat_maps = child_maps.reshape(-1, sv.channels, out_channels)
        # (n, offs, out) from (n, d) x (offs, d, out)
        child_feats = np.einsum("nd,odk->nok", sv.feats, flat_maps).reshape(-1, out_channels)
    return SparseVolume.from_unsorted(fine_spec, child_coords, child_feats)


def _trilinear_upsample(vol: DenseVolume, factors: tuple[int, int, int]) -> DenseVolume:
    fine_spec = vol.spec.scaled(factors)
    h, w, z = fine_spec.dims
    axes = [(np.arange(d) + 0.5) / f for d, f in zip(fine_spec.dims, factors)]
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    sampled = trilinear_sample_many(vol, pts, oob="clamp")
    return DenseVolume(fine_spec, sampled.reshape(h, w, z, vol.channels))


def _childmap_upsample(vol: DenseVolume, factors: tuple[int, int, int], child_maps: np.ndarray) -> DenseVolume:
    fh, fw, fz = (int(f) for f in factors)
    child_maps = _check_child_maps(child_maps, (fh, fw, fz), vol.channels)
    out_channels = child_maps.shape[4]
    fine_spec = vol.spec.scaled(factors)
    h, w, z = fine_spec.dims
    out = np.empty((h, w, z, out_channels))
    for a in range(fh):
        for b in range(fw):
            for c in range(fz):
                out[a::fh, b::fw, c::fz] = vol.data @ child_maps[a, b, c]
    return DenseVolume(fine_spec, out)


def coarse_to_fine(
    vol: DenseVolume,
    stage_factors: list[tuple[int, int, int]],
    stage_maps: list[np.ndarray | None] | None = None,
) -> DenseVolume:
    """Chained dense upsampling through the given per-stage factors.

    Each stage either resamples trilinearly (map ``None``, the default) or
    applies a supplied per-child linear map, matching ``sparse_upsample`` so
    the dense and sparse pipelines agree when fed the same maps.
    """
    if len(stage_factors) < 1:
        raise ValueError("need at least one upsampling stage")
    if stage_maps is None:
        stage_maps = [None] * len(stage_factors)
    if len(stage_maps) != len(stage_factors):
        raise ValueError("stage_maps length must match stage_factors")
    current = vol
    for factors, cmap in zip(stage_factors, stage_maps):
        if cmap is None:
            current = _trilinear_upsample(current, factors)
        else:
            current = _childmap_upsample(current, factors, cmap)
    return current


def sparse_coarse_to_fine(
    vol: DenseVolume,
    stage_factors: list[tuple[int, int, int]],
    keep_ratios: list[float],
    scores_per_stage: list[np.ndarray | None] | None = None,
    stage_maps: list[np.ndarray | None] | None = None,
) -> SparseVolume:
    """Sparse pipeline: per stage, prune to the keep ratio then dilate.

    With ratios (0.2, 0.5, 0.5) the final kept fraction of the fine grid is
    their product, 5%, since dilation emits every child of a kept cell.
    Missing stage scores fall back to the per-cell feature norm.
    """
    if len(keep_ratios) != len(stage_factors):
        raise ValueError("need exactly one keep ratio per stage")
    if scores_per_stage is None:
        scores_per_stage = [None] * len(stage_factors)
    if stage_maps is None:
        stage_maps = [None] * len(stage_factors)
    if len(scores_per_stage) != len(stage_factors) or len(stage_maps) != len(stage_factors):
        raise ValueError("scores_per_stage and stage_maps lengths must match stage_factors")

    current: DenseVolume | SparseVolume = vol
    for factors, ratio, scores, cmap in zip(stage_factors, keep_ratios, scores_per_stage, stage_maps):
        if scores is None:
            scores = feature_norm_scores(current)
        pruned = prune_topk(current, scores, ratio)
        current = sparse_upsample(pruned, factors, child_maps=cmap)
    return current


def sparsity(sv: SparseVolume) -> float:
    """Kept fraction of the grid: N / (H * W * Z)."""
    return sv.num_entries / sv.spec.num_cells
