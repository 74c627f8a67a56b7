"""On-disk formats.

Binary formats are little-endian with a 4-byte ASCII magic:

* checkpoint ("OMCK"): u32 tensor count, then per tensor a u16 name byte
  length, the UTF-8 name, u8 ndim, u32 dims, and the f32 payload.
* range image ("OMRV"): u32 h, u32 w, f32 r_max, then h*w f32 ranges in
  row-major order with -1.0 marking pixels without a return.
* descriptor database ("OMDB"): u32 count, u32 dim, then per entry a u32
  scan id and dim f32 values.

Text formats:

* scan files: raw f32 quadruples (x, y, z, intensity), no header.
* pose files: one scan per line, 12 floats, row-major 3x4 [R|t].
* overlap labels: lines "query_idx cand_idx overlap".
* configs: "key=value" lines, "#" comments.
"""

from __future__ import annotations

import struct
from typing import Dict, Iterable, List, Tuple

import numpy as np

from .errors import ContractError
from .rangeview import OverlapLabel, Pose, RangeImage
from .tensor import Tensor

MAGIC_CKPT = b"OMCK"
MAGIC_RANGE = b"OMRV"
MAGIC_DB = b"OMDB"


def _expect_magic(raw: bytes, magic: bytes, path) -> None:
    if raw[:4] != magic:
        raise ContractError(
            f"{path}: expected magic {magic.decode()!r}, found {raw[:4]!r}"
        )


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params) -> None:
    """Write named tensors (Tensor or ndarray values); names are sorted so
    output is byte-deterministic."""
    chunks = [MAGIC_CKPT, struct.pack("<I", len(params))]
    for name in sorted(params):
        value = params[name]
        data = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name[:32]}...")
        if data.ndim > 0xFF:
            raise ContractError(f"tensor {name} has too many dims: {data.ndim}")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    _expect_magic(raw, MAGIC_CKPT, path)
    off = 4
    out: Dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ContractError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc
    if off != len(raw):
        raise ContractError(f"{path}: {len(raw) - off} trailing bytes after {count} tensors")
    return out


# --------------------------------------------------------------------------
# range images


def save_range_image(path, ri: RangeImage) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_RANGE)
        f.write(struct.pack("<IIf", ri.h, ri.w, ri.r_max))
        f.write(np.asarray(ri.ranges, dtype="<f4").tobytes())


def load_range_image(path) -> RangeImage:
    with open(path, "rb") as f:
        raw = f.read()
    _expect_magic(raw, MAGIC_RANGE, path)
    h, w, r_max = struct.unpack_from("<IIf", raw, 4)
    n = h * w
    if len(raw) != 16 + 4 * n:
        raise ContractError(f"{path}: size does not match {h}x{w} header")
    ranges = np.frombuffer(raw, dtype="<f4", count=n, offset=16).reshape(h, w)
    return RangeImage(ranges=ranges.astype(np.float64), r_max=float(r_max))


# --------------------------------------------------------------------------
# descriptor databases


def save_descriptor_db(path, ids: Iterable[int], descriptors: np.ndarray) -> None:
    ids = list(ids)
    desc = np.asarray(descriptors, dtype="<f4")
    if desc.ndim != 2 or len(ids) != desc.shape[0]:
        raise ContractError(
            f"descriptor table {desc.shape} does not match {len(ids)} ids"
        )
    if len(set(ids)) != len(ids):
        raise ContractError("descriptor ids must be unique")
    with open(path, "wb") as f:
        f.write(MAGIC_DB)
        f.write(struct.pack("<II", desc.shape[0], desc.shape[1]))
        for i, row in zip(ids, desc):
            f.write(struct.pack("<I", i))
            f.write(row.tobytes())


def load_descriptor_db(path) -> Tuple[List[int], np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    _expect_magic(raw, MAGIC_DB, path)
    count, dim = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + count * (4 + 4 * dim):
        raise ContractError(f"{path}: size does not match {count}x{dim} header")
    ids: List[int] = []
    desc = np.empty((count, dim))
    off = 12
    for i in range(count):
        (scan_id,) = struct.unpack_from("<I", raw, off)
        off += 4
        ids.append(scan_id)
        desc[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off)
        off += 4 * dim
    return ids, desc


# --------------------------------------------------------------------------
# scans, poses, labels


def save_scan(path, points: np.ndarray) -> None:
    """Raw f32 quadruples; a missing intensity column is stored as zeros."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ContractError(f"scan must be (N, 3) or (N, 4), got {pts.shape}")
    if pts.shape[1] == 3:
        pts = np.concatenate([pts, np.zeros((pts.shape[0], 1))], axis=1)
    with open(path, "wb") as f:
        f.write(pts.astype("<f4").tobytes())


def load_scan(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise ContractError(f"{path}: byte length is not a multiple of 16")
    return raw.reshape(-1, 4).astype(np.float64)


def save_poses(path, poses: Iterable[Pose]) -> None:
    lines = []
    for p in poses:
        m = np.concatenate([p.rotation, p.translation[:, None]], axis=1)
        lines.append(" ".join(repr(float(x)) for x in m.reshape(-1)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_poses(path) -> List[Pose]:
    poses = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            vals = [float(t) for t in line.split()]
            if len(vals) != 12:
                raise ContractError(f"{path}:{ln}: expected 12 floats, got {len(vals)}")
            m = np.array(vals).reshape(3, 4)
            poses.append(Pose(rotation=m[:, :3], translation=m[:, 3]))
    return poses


def save_labels(path, labels: Iterable[OverlapLabel]) -> None:
    with open(path, "w") as f:
        for lab in labels:
            f.write(f"{lab.query} {lab.cand} {lab.overlap!r}\n")


def load_labels(path) -> List[OverlapLabel]:
    labels = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ContractError(f"{path}:{ln}: expected 'query cand overlap'")
            labels.append(
                OverlapLabel(query=int(parts[0]), cand=int(parts[1]), overlap=float(parts[2]))
            )
    return labels


def save_place_ids(path, place_ids: Iterable[int]) -> None:
    with open(path, "w") as f:
        for i, pid in enumerate(place_ids):
            f.write(f"{i} {pid}\n")


def load_place_ids(path) -> List[int]:
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            idx, pid = line.split()
            pairs.append((int(idx), int(pid)))
    pairs.sort()
    return [pid for _, pid in pairs]


# --------------------------------------------------------------------------
# key=value configs


def parse_kv_pairs(text: str) -> List[Tuple[str, str]]:
    """Ordered (key, value) pairs; keys may repeat (e.g. one stage per line)."""
    out: List[Tuple[str, str]] = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"line {ln}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out.append((key.strip(), val.strip()))
    return out


def parse_kv(text: str) -> Dict[str, str]:
    return dict(parse_kv_pairs(text))


def load_kv_pairs(path) -> List[Tuple[str, str]]:
    with open(path) as f:
        return parse_kv_pairs(f.read())


def load_kv(path) -> Dict[str, str]:
    return dict(load_kv_pairs(path))


def save_kv(path, entries) -> None:
    """entries: a mapping or an iterable of (key, value) pairs."""
    pairs = entries.items() if hasattr(entries, "items") else entries
    with open(path, "w") as f:
        for key, val in pairs:
            f.write(f"{key}={val}\n")
