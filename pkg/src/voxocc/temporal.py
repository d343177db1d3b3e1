"""Temporal alignment and fusion of history voxel feature volumes.

A history volume is resampled into the current ego frame by mapping every
current voxel center through the current-to-history rigid transform and
trilinearly sampling the history features there (full SE(3), no BEV-plane
flattening). Aligned frames are then channel-concatenated with the current
frame; the learned residual fuse is replaced by a caller-supplied linear mix.
"""

from __future__ import annotations

import numpy as np

from .grid import DenseVolume, all_cell_centers
from .geometry import Pose, transform_points
from .sampling import trilinear_sample_many


def align_volume(history: DenseVolume, t_cur_to_hist: Pose) -> DenseVolume:
    """Resample a history volume onto the current grid.

    Every current voxel center g is mapped to g' = T * g in the history
    frame and the history features are trilinearly sampled there; reads
    outside the history coverage are zeros (unseen space is featureless).
    """
    spec = history.spec
    centers = all_cell_centers(spec).reshape(-1, 3)
    mapped = transform_points(t_cur_to_hist, centers)
    cont = (mapped - np.asarray(spec.origin)) / np.asarray(spec.cell_size)
    sampled = trilinear_sample_many(history, cont, oob="zeros")
    h, w, z = spec.dims
    return DenseVolume(spec, sampled.reshape(h, w, z, history.channels))


def fuse_concat(current: DenseVolume, aligned_history: list[DenseVolume]) -> DenseVolume:
    """Channel concatenation in [oldest, ..., newest, current] order."""
    for vol in aligned_history:
        if vol.spec != current.spec:
            raise ValueError("all volumes must share the grid spec")
        if vol.channels != current.channels:
            raise ValueError("all volumes must share the channel count")
    if not aligned_history:
        return current
    data = np.concatenate([v.data for v in aligned_history] + [current.data], axis=-1)
    return DenseVolume(current.spec, data)


def linear_fuse(concatenated: DenseVolume, mix: np.ndarray) -> DenseVolume:
    """Per-voxel linear mix of concatenated frame channels.

    ``mix`` has shape (in_channels, out_channels); a deterministic stand-in
    for the learned temporal fuse so the pipeline runs end-to-end.
    """
    mix = np.asarray(mix, dtype=np.float64)
    if mix.ndim != 2 or mix.shape[0] != concatenated.channels:
        raise ValueError(f"mix shape {mix.shape} does not match {concatenated.channels} input channels")
    return DenseVolume(concatenated.spec, concatenated.data @ mix)


def select_current_mix(num_frames: int, channels: int) -> np.ndarray:
    """Mix matrix selecting the current frame's slice from a concat of num_frames."""
    mix = np.zeros((num_frames * channels, channels))
    mix[(num_frames - 1) * channels :, :] = np.eye(channels)
    return mix


def average_frames_mix(num_frames: int, channels: int) -> np.ndarray:
    """Mix matrix averaging the per-frame slices of a concat of num_frames."""
    return np.tile(np.eye(channels) / num_frames, (num_frames, 1))
