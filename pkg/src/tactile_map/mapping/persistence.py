"""Binary map container.

Layout (all little-endian)::

    b"TMAP"  u32 version  u32 manifest_len  manifest (UTF-8 JSON)
    per entry:
        image       float32[3, H, W]
        depths      float32[H, W]
        mask        uint8[H, W]
        descriptor  float64[D]
        rotation    float64[9]  (row-major)
        translation float64[3]
        opening     float64
        est_rmse    float64     (NaN when unknown)
    u32 CRC-32 of every preceding byte

The manifest carries object_id, intrinsics, entry_count and
descriptor_length; its entry_count fixes the expected file size, so a short
file is reported as truncated before the checksum is even read.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..descriptor import Descriptor
from ..errors import BadMagicError, ChecksumError, MapFormatError, TruncatedFileError, VersionMismatchError
from ..geometry import Heightmap, RigidTransform, SensorIntrinsics, TactileImage
from .core import FORMAT_VERSION, TactileMap, TactileMapEntry

MAGIC = b"TMAP"
_HEAD = struct.Struct("<4sII")


def _entry_size(h, w, d):
    return 4 * 3 * h * w + 4 * h * w + h * w + 8 * d + 8 * 14


def map_to_bytes(tmap: TactileMap, extra: dict | None = None) -> bytes:
    H, W = tmap.intrinsics.shape
    D = tmap.descriptors.shape[1] if len(tmap) else 0
    manifest = {
        "object_id": tmap.object_id,
        "intrinsics": tmap.intrinsics.to_dict(),
        "entry_count": len(tmap),
        "descriptor_length": int(D),
    }
    if extra:
        manifest["extra"] = extra
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, tmap.format_version, len(mbytes)), mbytes]
    for e in tmap.entries:
        parts.append(np.ascontiguousarray(e.image.channels, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(e.heightmap.depths, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(e.heightmap.mask, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(e.descriptor.values, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(e.sensor_pose_world.rotation, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(e.sensor_pose_world.translation, dtype="<f8").tobytes())
        parts.append(np.array([e.gripper_opening, e.estimation_rmse], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_map(tmap: TactileMap, path, extra: dict | None = None) -> None:
    """Write ``tmap``; ``extra`` (JSON-able) is kept in the manifest, e.g. the build config."""
    data = map_to_bytes(tmap, extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_manifest(data: bytes) -> tuple[int, dict, int]:
    """Validate the header; returns (version, manifest, offset of the first entry)."""
    if len(data) < 4:
        raise TruncatedFileError("file too short for a map header")
    if data[:4] != MAGIC:
        raise BadMagicError("not a tactile map file (bad magic)")
    if len(data) < _HEAD.size:
        raise TruncatedFileError("file too short for a map header")
    _, version, mlen = _HEAD.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"map format version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < _HEAD.size + mlen:
        raise TruncatedFileError("manifest is cut short")
    try:
        manifest = json.loads(data[_HEAD.size : _HEAD.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ChecksumError("manifest is corrupt") from None
    return version, manifest, _HEAD.size + mlen


def map_from_bytes(data: bytes) -> tuple[TactileMap, dict]:
    version, manifest, off = read_manifest(data)
    try:
        intr = SensorIntrinsics.from_dict(manifest["intrinsics"])
        n = int(manifest["entry_count"])
        D = int(manifest["descriptor_length"])
        object_id = str(manifest["object_id"])
    except (KeyError, TypeError, ValueError) as e:
        raise MapFormatError(f"manifest is missing or has a bad field: {e}") from None
    H, W = intr.shape
    expected = off + n * _entry_size(H, W, D) + 4
    if len(data) < expected:
        raise TruncatedFileError(f"map file is truncated ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise ChecksumError(f"map file has {len(data) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise ChecksumError("map file checksum mismatch")

    def take(count, dtype):
        nonlocal off
        a = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += a.nbytes
        return a

    entries = []
    for _ in range(n):
        img = TactileImage(take(3 * H * W, "<f4").reshape(3, H, W).astype(np.float32))
        depths = take(H * W, "<f4").reshape(H, W).astype(np.float32)
        mask = take(H * W, np.uint8).reshape(H, W).astype(bool)
        desc = Descriptor(take(D, "<f8").astype(np.float64))
        R = take(9, "<f8").reshape(3, 3).astype(np.float64)
        t = take(3, "<f8").astype(np.float64)
        opening, est = take(2, "<f8")
        hm = Heightmap(depths, mask, intr.pixel_pitch, intr.gel_max_indentation)
        entries.append(TactileMapEntry(img, hm, desc, RigidTransform(R, t), float(opening), intr, float(est)))
    return TactileMap(object_id, intr, entries, version), manifest.get("extra", {})


def load_map(path) -> TactileMap:
    return map_from_bytes(Path(path).read_bytes())[0]


def load_map_with_extra(path) -> tuple[TactileMap, dict]:
    return map_from_bytes(Path(path).read_bytes())
