"""``.mot`` motion files and the corpus manifest.

Layout: ``b"MOT1"``, little-endian u32 T, J, d, then T*J*d little-endian
float32 values in (frame, joint, feature) order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .motion import MotionSequence
from .skeleton import SkeletonTopology, toy_skeleton

MAGIC = b"MOT1"
_HEADER = struct.Struct("<4sIII")


class MotionFileError(ValueError):
    """Base class for unreadable ``.mot`` files."""


class BadMagicError(MotionFileError):
    pass


class TruncatedPayloadError(MotionFileError):
    pass


class ShapeMismatchError(MotionFileError):
    pass


def encode_motion(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected T x J x d, got shape {data.shape}")
    t, j, d = data.shape
    return _HEADER.pack(MAGIC, t, j, d) + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_motion(raw: bytes) -> np.ndarray:
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError("not a MOT1 file")
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, t, j, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    payload = raw[_HEADER.size:]
    expected = t * j * d * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"header declares {t}x{j}x{d} floats ({expected} bytes), payload has {len(payload)}")
    if len(payload) > expected:
        raise ShapeMismatchError(f"payload has {len(payload) - expected} bytes beyond the declared {t}x{j}x{d}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, j, d).astype(np.float32)


def write_motion_file(m: MotionSequence | np.ndarray, path: str | Path) -> None:
    data = m.data if isinstance(m, MotionSequence) else m
    Path(path).write_bytes(encode_motion(data))


def read_motion_file(path: str | Path, topology: SkeletonTopology | None = None) -> MotionSequence:
    data = decode_motion(Path(path).read_bytes())
    topology = topology or toy_skeleton()
    if data.shape[1] != topology.joint_count:
        raise ShapeMismatchError(f"file has {data.shape[1]} joints, topology expects {topology.joint_count}")
    if data.shape[2] != 12:
        raise ShapeMismatchError(f"file has feature width {data.shape[2]}, expected 12")
    return MotionSequence(data, topology)


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
