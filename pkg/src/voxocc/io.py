"""Binary and JSON file formats.

PVOX grid files (little-endian throughout):
    magic ``PVOX`` | version u32 | payload kind u32 | H, W, Z, D (4 x u32)
    | origin x/y/z + cell size x/y/z (6 x f64) | payload, row-major.
    Kinds: 0 = dense f32 features (D channels), 1 = semantic u16 (D holds
    the class count C), 2 = instance u32 (D = 1), 3 = mask u8 (D = 1).

PPTS point files: magic ``PPTS`` | version u32 | count u32 | packed records
    of 3 x f32 position, u16 label, u32 instance id (18 bytes each).

Cameras, poses and boxes travel as small JSON documents; boxes as JSON lines.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import BinaryMask, DenseVolume, InstanceGrid, SemanticGrid, VoxelGridSpec
from .geometry import CameraModel, Pose
from .refine import Box3D
from .supervision import LabeledPointCloud

PVOX_MAGIC = b"PVOX"
PPTS_MAGIC = b"PPTS"
FORMAT_VERSION = 1

KIND_DENSE = 0
KIND_SEMANTIC = 1
KIND_INSTANCE = 2
KIND_MASK = 3

_HEADER = struct.Struct("<4sIIIIII6d")
_PPTS_HEADER = struct.Struct("<4sII")
_PPTS_RECORD = np.dtype([("pos", "<f4", 3), ("label", "<u2"), ("inst", "<u4")])


def _pack_header(kind: int, spec: VoxelGridSpec, d: int) -> bytes:
    h, w, z = spec.dims
    return _HEADER.pack(
        PVOX_MAGIC, FORMAT_VERSION, kind, h, w, z, d, *spec.origin, *spec.cell_size
    )


def write_pvox(path, grid) -> None:
    """Write a DenseVolume, SemanticGrid, InstanceGrid or BinaryMask."""
    path = Path(path)
    if isinstance(grid, DenseVolume):
        header = _pack_header(KIND_DENSE, grid.spec, grid.channels)
        payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    elif isinstance(grid, SemanticGrid):
        header = _pack_header(KIND_SEMANTIC, grid.spec, grid.num_classes)
        payload = np.ascontiguousarray(grid.labels, dtype="<u2").tobytes()
    elif isinstance(grid, InstanceGrid):
        header = _pack_header(KIND_INSTANCE, grid.spec, 1)
        payload = np.ascontiguousarray(grid.ids, dtype="<u4").tobytes()
    elif isinstance(grid, BinaryMask):
        header = _pack_header(KIND_MASK, grid.spec, 1)
        payload = np.ascontiguousarray(grid.bits, dtype="<u1").tobytes()
    else:
        raise ValueError(f"cannot write {type(grid).__name__} as PVOX")
    path.write_bytes(header + payload)


def read_pvox(path):
    """Read a PVOX file back into the grid type its payload kind names."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated PVOX header")
    magic, version, kind, h, w, z, d, *geom = _HEADER.unpack_from(raw)
    if magic != PVOX_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    spec = VoxelGridSpec((h, w, z), tuple(geom[:3]), tuple(geom[3:]))
    body = raw[_HEADER.size :]

    def payload(dtype, count):
        arr = np.frombuffer(body, dtype=dtype)
        if arr.size != count:
            raise ValueError(f"{path}: payload has {arr.size} values, expected {count}")
        return arr

    cells = h * w * z
    if kind == KIND_DENSE:
        data = payload("<f4", cells * d).astype(np.float64).reshape(h, w, z, d)
        return DenseVolume(spec, data)
    if kind == KIND_SEMANTIC:
        labels = payload("<u2", cells).reshape(h, w, z)
        return SemanticGrid(spec, labels, num_classes=d)
    if kind == KIND_INSTANCE:
        ids = payload("<u4", cells).reshape(h, w, z)
        return InstanceGrid(spec, ids)
    if kind == KIND_MASK:
        bits = payload("<u1", cells).astype(bool).reshape(h, w, z)
        return BinaryMask(spec, bits)
    raise ValueError(f"{path}: unknown payload kind {kind}")


def write_ppts(path, pc: LabeledPointCloud) -> None:
    records = np.zeros(pc.num_points, dtype=_PPTS_RECORD)
    records["pos"] = pc.positions.astype("<f4")
    records["label"] = pc.labels
    records["inst"] = pc.instance_ids
    header = _PPTS_HEADER.pack(PPTS_MAGIC, FORMAT_VERSION, pc.num_points)
    Path(path).write_bytes(header + records.tobytes())


def read_ppts(path) -> LabeledPointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < _PPTS_HEADER.size:
        raise ValueError(f"{path}: truncated PPTS header")
    magic, version, count = _PPTS_HEADER.unpack_from(raw)
    if magic != PPTS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    records = np.frombuffer(raw, dtype=_PPTS_RECORD, offset=_PPTS_HEADER.size)
    if records.size != count:
        raise ValueError(f"{path}: {records.size} records, header says {count}")
    return LabeledPointCloud(
        records["pos"].astype(np.float64),
        records["label"].copy(),
        records["inst"].copy(),
    )


def write_camera_json(path, cam: CameraModel) -> None:
    doc = {
        "projection": [float(v) for v in cam.projection.reshape(-1)],
        "image_size": list(cam.image_size),
        "view_index": cam.view_index,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_camera_json(path) -> CameraModel:
    doc = json.loads(Path(path).read_text())
    proj = np.asarray(doc["projection"], dtype=np.float64).reshape(3, 4)
    return CameraModel(proj, tuple(doc["image_size"]), doc.get("view_index", 0))


def write_pose_json(path, pose: Pose) -> None:
    doc = {
        "matrix": [float(v) for v in pose.matrix.reshape(-1)],
        "src_frame": pose.src_frame,
        "dst_frame": pose.dst_frame,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_pose_json(path) -> Pose:
    doc = json.loads(Path(path).read_text())
    m = np.asarray(doc["matrix"], dtype=np.float64).reshape(4, 4)
    return Pose(m, src_frame=doc.get("src_frame"), dst_frame=doc.get("dst_frame"))


def box_to_dict(box: Box3D) -> dict:
    return {
        "center": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "class": box.label,
        "score": box.score,
    }


def box_from_dict(doc: dict) -> Box3D:
    return Box3D(
        tuple(doc["center"]), tuple(doc["size"]), doc["yaw"], doc["class"], doc["score"]
    )


def write_boxes_jsonl(path, boxes: list[Box3D]) -> None:
    lines = [json.dumps(box_to_dict(b)) for b in boxes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_boxes_jsonl(path) -> list[Box3D]:
    boxes = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            boxes.append(box_from_dict(json.loads(line)))
    return boxes


def write_spec_json(path, spec: VoxelGridSpec) -> None:
    doc = {"dims": list(spec.dims), "origin": list(spec.origin), "cell_size": list(spec.cell_size)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_spec_json(path) -> VoxelGridSpec:
    doc = json.loads(Path(path).read_text())
    return VoxelGridSpec(tuple(doc["dims"]), tuple(doc["origin"]), tuple(doc["cell_size"]))


def write_classes_json(path, num_classes: int, things, stuffs) -> None:
    doc = {
        "num_classes": int(num_classes),
        "things": sorted(int(c) for c in things),
        "stuff": sorted(int(c) for c in stuffs),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_classes_json(path) -> tuple[int, list[int], list[int]]:
    doc = json.loads(Path(path).read_text())
    return int(doc["num_classes"]), list(doc["things"]), list(doc["stuff"])
