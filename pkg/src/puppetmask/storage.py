"""Binary file formats and JSON manifests.

Three little-endian formats share one style:

* weight checkpoints ``NWT1``: u32 tensor count, then per tensor a u16
  name length, UTF-8 name, u8 rank, u32 extents, f32 data;
* mask sets ``CPYC``: u16 version=1, u16 action count, u32 height, u32
  width, f32 epsilon, f32 alpha, then per action the f32 row-major mask;
  a ``<path>.json`` sidecar carries provenance;
* episode traces ``EPTR``: u16 version=1, u32 height, u32 width, u32
  record count, then per record u32 t, u16 action, f32 reward, u8 done,
  and the f32 row-major frame.
"""

import json
import struct
from pathlib import Path

import numpy as np

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F32 = struct.Struct("<f")


def save_checkpoint(path, tensors):
    """Write named float arrays to an NWT1 file (insertion order kept)."""
    out = bytearray(b"NWT1")
    out += _U32.pack(len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        out += _U16.pack(len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            out += _U32.pack(extent)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != b"NWT1":
        raise ValueError(f"{path}: not an NWT1 checkpoint")
    off = 4
    (count,) = _U32.unpack_from(raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = _U16.unpack_from(raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        rank = raw[off]
        off += 1
        shape = []
        for _ in range(rank):
            (extent,) = _U32.unpack_from(raw, off)
            off += 4
            shape.append(extent)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = arr.copy()
    return tensors


def save_masks(path, masks, epsilon, alpha, provenance=None):
    """Write a CPYC mask file plus its JSON provenance sidecar."""
    masks = np.ascontiguousarray(masks, dtype="<f4")
    if masks.ndim != 3:
        raise ValueError(f"masks must be (actions, H, W), got shape {masks.shape}")
    a, h, w = masks.shape
    out = bytearray(b"CPYC")
    out += _U16.pack(1)
    out += _U16.pack(a)
    out += _U32.pack(h)
    out += _U32.pack(w)
    out += _F32.pack(float(epsilon))
    out += _F32.pack(float(alpha))
    out += masks.tobytes()
    path = Path(path)
    path.write_bytes(bytes(out))
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(provenance or {}, indent=2, sort_keys=True))


def load_masks(path):
    """Read a CPYC file. Returns (masks, epsilon, alpha, provenance)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != b"CPYC":
        raise ValueError(f"{path}: not a CPYC mask file")
    (version,) = _U16.unpack_from(raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported CPYC version {version}")
    (a,) = _U16.unpack_from(raw, 6)
    (h,) = _U32.unpack_from(raw, 8)
    (w,) = _U32.unpack_from(raw, 12)
    (epsilon,) = _F32.unpack_from(raw, 16)
    (alpha,) = _F32.unpack_from(raw, 20)
    masks = (
        np.frombuffer(raw, dtype="<f4", count=a * h * w, offset=24)
        .reshape(a, h, w)
        .copy()
    )
    sidecar = path.with_suffix(path.suffix + ".json")
    provenance = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return masks, float(epsilon), float(alpha), provenance


def save_trace(path, episodes):
    """Write episodes to an EPTR file.

    ``episodes`` is a list of per-episode record lists; each record is
    (t, action, reward, done, frame).
    """
    records = [rec for ep in episodes for rec in ep]
    if not records:
        raise ValueError("save_trace: no records")
    h, w = np.asarray(records[0][4]).shape
    out = bytearray(b"EPTR")
    out += _U16.pack(1)
    out += _U32.pack(h)
    out += _U32.pack(w)
    out += _U32.pack(len(records))
    for t, action, reward, done, frame in records:
        frame = np.ascontiguousarray(frame, dtype="<f4")
        if frame.shape != (h, w):
            raise ValueError(f"save_trace: frame shape {frame.shape} != ({h},{w})")
        out += _U32.pack(int(t))
        out += _U16.pack(int(action))
        out += _F32.pack(float(reward))
        out += struct.pack("<B", 1 if done else 0)
        out += frame.tobytes()
    Path(path).write_bytes(bytes(out))


def load_trace(path):
    """Read an EPTR file back into per-episode record lists."""
    raw = Path(path).read_bytes()
    if raw[:4] != b"EPTR":
        raise ValueError(f"{path}: not an EPTR trace")
    (version,) = _U16.unpack_from(raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported EPTR version {version}")
    (h,) = _U32.unpack_from(raw, 6)
    (w,) = _U32.unpack_from(raw, 10)
    (count,) = _U32.unpack_from(raw, 14)
    off = 18
    episodes = [[]]
    for _ in range(count):
        (t,) = _U32.unpack_from(raw, off)
        (action,) = _U16.unpack_from(raw, off + 4)
        (reward,) = _F32.unpack_from(raw, off + 6)
        done = raw[off + 10] != 0
        off += 11
        frame = (
            np.frombuffer(raw, dtype="<f4", count=h * w, offset=off)
            .reshape(h, w)
            .copy()
        )
        off += 4 * h * w
        if t == 0 and episodes[-1]:
            episodes.append([])
        episodes[-1].append((t, action, reward, done, frame))
    return episodes


def save_manifest(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_manifest(path):
    return json.loads(Path(path).read_text())
