"""Motion containers and the flat (T, J*d) layout used by the latent models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .skeleton import SkeletonTopology, toy_skeleton

FEATURE_DIM = 12
POS = slice(0, 3)
VEL = slice(3, 6)
ROT = slice(6, 12)


@dataclass(frozen=True)
class MotionSequence:
    """T x J x 12 per-joint features: global position, global velocity, local 6D rotation."""

    data: np.ndarray
    topology: SkeletonTopology = field(default_factory=toy_skeleton, compare=False)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != FEATURE_DIM:
            raise ValueError(f"motion must be T x J x {FEATURE_DIM}, got {d.shape}")
        if d.shape[1] != self.topology.joint_count:
            raise ValueError(f"motion has {d.shape[1]} joints, topology has {self.topology.joint_count}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def pos(self) -> np.ndarray:
        return self.data[..., POS]

    @property
    def vel(self) -> np.ndarray:
        return self.data[..., VEL]

    @property
    def rot(self) -> np.ndarray:
        return self.data[..., ROT]

    def __eq__(self, other):
        return isinstance(other, MotionSequence) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class TextCondition:
    tokens: tuple[int, ...]
    embedding: np.ndarray | None = None


@dataclass(frozen=True)
class InteractionSample:
    motion_a: MotionSequence
    motion_b: MotionSequence
    text: TextCondition
    family: str = ""
    sample_id: str = ""

    def __post_init__(self):
        if self.motion_a.frames != self.motion_b.frames:
            raise ValueError("both persons must have the same number of frames")
        if self.motion_a.topology != self.motion_b.topology:
            raise ValueError("both persons must share a topology")


def flatten_joints(m: MotionSequence | np.ndarray) -> np.ndarray:
    """(T, J, d) -> (T, J*d); row t concatenates the joints of frame t in order."""
    data = m.data if isinstance(m, MotionSequence) else np.asarray(m)
    return data.reshape(*data.shape[:-2], data.shape[-2] * data.shape[-1]).copy()


def unflatten_joints(flat: np.ndarray, joints: int, dim: int = FEATURE_DIM) -> np.ndarray:
    flat = np.asarray(flat)
    if flat.shape[-1] != joints * dim:
        raise ValueError(f"last axis {flat.shape[-1]} != {joints} * {dim}")
    return flat.reshape(*flat.shape[:-1], joints, dim).copy()


@dataclass
class Normalizer:
    """Per-channel standardisation over the flattened (J*d) features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, motions: np.ndarray, floor: float = 1e-3) -> "Normalizer":
        """``motions`` is (..., J, d); statistics pool every leading axis."""
        flat = motions.reshape(-1, motions.shape[-2] * motions.shape[-1]).astype(np.float64)
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), floor))

    def _shape(self, x: np.ndarray):
        return self.mean.reshape(x.shape[-2], x.shape[-1]), self.std.reshape(x.shape[-2], x.shape[-1])

    def normalize(self, x: np.ndarray) -> np.ndarray:
        mu, sd = self._shape(x)
        return ((x - mu) / sd).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        mu, sd = self._shape(x)
        return (x * sd + mu).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))
