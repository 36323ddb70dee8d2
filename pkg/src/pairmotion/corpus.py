"""Synthetic two-person interaction corpus.

Four parametric families (approach, circle-around, mirror-dance,
push-retreat) are rendered through forward kinematics on the skeleton tree.
Each joint's local rotation turns the bone from its parent to it, so the
6D rotation channels and the positions stay consistent. Every description
is built from the family's template words, so text carries the variant.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .motion import InteractionSample, MotionSequence, Normalizer, TextCondition
from .motion_io import read_manifest, read_motion_file, write_manifest, write_motion_file
from .skeleton import TOY_OFFSETS, SkeletonTopology, toy_skeleton
from .text import tokenize

FAMILIES = ("approach", "circle-around", "mirror-dance", "push-retreat")
HIP_HEIGHT = 0.95
MIRROR_PLANE_NORMAL = np.array([1.0, 0.0, 0.0])


def rot_x(a):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def rot_y(a):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def rot_z(a):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def to_6d(r: np.ndarray) -> np.ndarray:
    """First two columns of each rotation matrix, column-major: (..., 6)."""
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def from_6d(six: np.ndarray) -> np.ndarray:
    """Gram-Schmidt back to a rotation matrix."""
    a, b = six[..., :3], six[..., 3:]
    x = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b - (x * b).sum(-1, keepdims=True) * x
    y = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.stack([x, y, np.cross(x, y)], axis=-1)


def _offsets(topology: SkeletonTopology) -> np.ndarray:
    if topology == toy_skeleton():
        return TOY_OFFSETS.copy()
    # generic bodies: bones of 0.15 m fanned out by child index
    offs = np.zeros((topology.joint_count, 3))
    for p, c in topology.edges:
        ang = 2 * np.pi * c / topology.joint_count
        offs[c] = 0.15 * np.array([np.cos(ang), -0.5 if p else 0.6, np.sin(ang)]) / np.sqrt(1.25)
    return offs


def _parents(topology: SkeletonTopology) -> list[int]:
    parent = [-1] * topology.joint_count
    for p, c in topology.edges:
        parent[c] = p
    return parent


def _topo_order(topology: SkeletonTopology) -> list[int]:
    parent = _parents(topology)
    order, seen = [0], {0}
    while len(order) < topology.joint_count:
        for j in range(topology.joint_count):
            if j not in seen and parent[j] in seen:
                order.append(j)
                seen.add(j)
    return order


def forward_kinematics(topology: SkeletonTopology, root_pos: np.ndarray, local_rot: np.ndarray) -> np.ndarray:
    """Assemble T x J x 12 features from a root path and per-joint local rotations.

    ``local_rot`` is (T, J, 3, 3); joint 0's entry is its global orientation.
    """
    t_len, j_len = local_rot.shape[:2]
    offsets = _offsets(topology)
    parent = _parents(topology)
    glob = np.zeros_like(local_rot)
    pos = np.zeros((t_len, j_len, 3))
    for j in _topo_order(topology):
        if j == 0:
            glob[:, 0] = local_rot[:, 0]
            pos[:, 0] = root_pos
        else:
            p = parent[j]
            glob[:, j] = glob[:, p] @ local_rot[:, j]
            pos[:, j] = pos[:, p] + np.einsum("tab,b->ta", glob[:, j], offsets[j])
    vel = np.zeros_like(pos)
    vel[1:] = pos[1:] - pos[:-1]
    return np.concatenate([pos, vel, to_6d(local_rot)], axis=-1)


def _limb_rotations(topology: SkeletonTopology, yaw: np.ndarray, phase: np.ndarray,
                    walk: float, arm_raise: np.ndarray | float = 0.0, arm_wave: np.ndarray | float = 0.0,
                    sway: np.ndarray | float = 0.0) -> np.ndarray:
    """(T, J, 3, 3) local rotations: root yaw plus gait/arm animation."""
    t_len, j_len = len(yaw), topology.joint_count
    rot = np.broadcast_to(np.eye(3), (t_len, j_len, 3, 3)).copy()
    rot[:, 0] = rot_y(yaw) @ rot_z(np.broadcast_to(sway, yaw.shape))
    raise_ = np.broadcast_to(arm_raise, yaw.shape)
    wave = np.broadcast_to(arm_wave, yaw.shape)
    if topology == toy_skeleton():
        swing = walk * np.sin(phase)
        rot[:, 1] = rot_x(0.08 * walk * np.cos(2 * phase))
        rot[:, 3] = rot_x(-0.5 * swing - raise_) @ rot_z(wave)
        rot[:, 5] = rot_x(0.5 * swing - raise_) @ rot_z(-wave)
        rot[:, 4] = rot_x(-0.2 * walk * (1 + np.sin(phase)) - 0.3 * raise_)
        rot[:, 6] = rot_x(-0.2 * walk * (1 - np.sin(phase)) - 0.3 * raise_)
        rot[:, 7] = rot_x(0.4 * swing)
        rot[:, 8] = rot_x(-0.4 * swing)
    else:
        for j in range(1, j_len):
            sign = 1.0 if j % 2 else -1.0
            rot[:, j] = rot_x(sign * 0.3 * walk * np.sin(phase + j) - 0.2 * raise_) @ rot_z(0.2 * wave)
    return rot


def _smoothstep(u):
    return u * u * (3 - 2 * u)


def _scene_transform(features: np.ndarray, yaw: float, shift: np.ndarray) -> np.ndarray:
    """Rotate a whole person about the vertical axis and translate it."""
    r = rot_y(yaw)
    out = features.copy()
    out[..., 0:3] = features[..., 0:3] @ r.T + shift
    out[..., 3:6] = features[..., 3:6] @ r.T
    root_rot = from_6d(features[:, 0, 6:12])
    out[:, 0, 6:12] = to_6d(r @ root_rot)
    return out


def reflect_motion(features: np.ndarray, normal: np.ndarray = MIRROR_PLANE_NORMAL) -> np.ndarray:
    """Reflect a motion about the plane through the origin with unit ``normal``.

    Positions and velocities are reflected; rotations are conjugated by the
    reflection so they remain proper rotations.
    """
    f = np.eye(3) - 2.0 * np.outer(normal, normal)
    out = features.copy()
    out[..., 0:3] = features[..., 0:3] @ f.T
    out[..., 3:6] = features[..., 3:6] @ f.T
    rots = from_6d(features[..., 6:12])
    out[..., 6:12] = to_6d(f @ rots @ f)
    return out


def _facing_yaw(direction: np.ndarray) -> np.ndarray:
    # body faces +z at yaw 0
    return np.arctan2(direction[..., 0], direction[..., 2])


def _approach(rng, t):
    mutual = rng.random() < 0.5
    quick = rng.random() < 0.5
    travel = (1.9 if quick else 1.0) + rng.uniform(-0.1, 0.1)
    d1 = rng.uniform(0.7, 0.9)
    d0 = d1 + travel
    u = _smoothstep(t / t[-1])
    dist = d0 - travel * u
    if mutual:
        xa, xb = -dist / 2, dist / 2
        walk_a = walk_b = 0.6 if quick else 0.35
        text = f"two people walk toward each other {'quickly' if quick else 'slowly'}"
    else:
        xb = np.full_like(t, d0 / 2)
        xa = xb - dist
        walk_a, walk_b = (0.8 if quick else 0.45), 0.0
        text = f"one person approaches the other {'quickly' if quick else 'slowly'} while the other stands still"
    pa = np.stack([xa, np.full_like(t, HIP_HEIGHT), np.zeros_like(t)], -1)
    pb = np.stack([xb, np.full_like(t, HIP_HEIGHT), np.zeros_like(t)], -1)
    ya = np.full_like(t, np.pi / 2)
    yb = np.full_like(t, -np.pi / 2)
    speed = 2 * np.pi / 22.0
    return (pa, ya, dict(walk=walk_a, phase=speed * t + rng.uniform(0, 2 * np.pi))), \
           (pb, yb, dict(walk=walk_b, phase=speed * t + rng.uniform(0, 2 * np.pi))), text


def _circle(rng, t):
    clockwise = rng.random() < 0.5
    wide = rng.random() < 0.5
    radius = (1.6 if wide else 1.0) + rng.uniform(-0.05, 0.05)
    sweep = 0.75 * np.pi * (0.75 if wide else 1.0)
    sign = -1.0 if clockwise else 1.0
    phi = rng.uniform(0, 2 * np.pi) + sign * sweep * t / t[-1]
    pa = np.stack([radius * np.sin(phi), np.full_like(t, HIP_HEIGHT), radius * np.cos(phi)], -1)
    pb = np.stack([np.zeros_like(t), np.full_like(t, HIP_HEIGHT), np.zeros_like(t)], -1)
    tangent = np.stack([np.cos(phi), np.zeros_like(t), -np.sin(phi)], -1) * sign
    ya = _facing_yaw(tangent)
    yb = _facing_yaw(pa - pb)
    text = (f"one person circles around the other {'clockwise' if clockwise else 'counterclockwise'}"
            f" in a {'wide' if wide else 'tight'} circle")
    speed = 2 * np.pi / 22.0
    return (pa, ya, dict(walk=0.5, phase=speed * t + rng.uniform(0, 2 * np.pi))), \
           (pb, yb, dict(walk=0.0, phase=np.zeros_like(t))), text


def _push(rng, t):
    hard = rng.random() < 0.5
    lead_first = rng.random() < 0.5
    gap = rng.uniform(1.1, 1.3)
    push = (0.55 if hard else 0.3) + rng.uniform(-0.03, 0.03)
    retreat = (0.9 if hard else 0.4) + rng.uniform(-0.03, 0.03)
    u = t / t[-1]
    step_a = push * _smoothstep(np.clip(u / 0.5, 0, 1))
    step_b = retreat * _smoothstep(np.clip((u - 0.25) / 0.6, 0, 1))
    xa = -gap / 2 + step_a
    xb = gap / 2 + step_b
    pa = np.stack([xa, np.full_like(t, HIP_HEIGHT), np.zeros_like(t)], -1)
    pb = np.stack([xb, np.full_like(t, HIP_HEIGHT), np.zeros_like(t)], -1)
    ya = np.full_like(t, np.pi / 2)
    yb = np.full_like(t, -np.pi / 2)
    reach = 1.1 * np.sin(np.pi * np.clip(u / 0.8, 0, 1))
    strength = "hard" if hard else "gently"
    text = (f"one person pushes the other {strength} and the other retreats" if lead_first
            else f"the first person steps forward and pushes the second {strength} who steps back")
    speed = 2 * np.pi / 22.0
    return (pa, ya, dict(walk=0.3, phase=speed * t, arm_raise=reach)), \
           (pb, yb, dict(walk=0.35, phase=speed * t + np.pi, arm_raise=0.3 * reach)), text


def _mirror_dance(rng, t):
    quick = rng.random() < 0.5
    waving = rng.random() < 0.5
    omega = 2 * np.pi / (16.0 if quick else 24.0)
    ph = rng.uniform(0, 2 * np.pi)
    z0 = rng.uniform(-0.5, 0.5)
    sway = 0.06 * np.sin(omega * t + ph)
    pa = np.stack([np.full_like(t, -1.0) + 0.1 * np.sin(0.5 * omega * t),
                   HIP_HEIGHT + 0.04 * np.sin(2 * omega * t + ph),
                   z0 + 0.15 * np.sin(omega * t + ph)], -1)
    ya = np.full_like(t, np.pi / 2) + 0.15 * np.sin(omega * t)
    if waving:
        kw = dict(walk=0.15, phase=omega * t, arm_raise=1.2, arm_wave=0.25 * np.sin(omega * t + ph), sway=sway)
    else:
        kw = dict(walk=0.15, phase=omega * t, arm_raise=0.8 * (1 + np.sin(omega * t + ph)) / 2, sway=sway)
    text = f"two people dance {'quickly' if quick else 'slowly'} mirroring each other {'waving' if waving else 'raising'} arms"
    return (pa, ya, kw), None, text


_BUILDERS = {"approach": _approach, "circle-around": _circle, "mirror-dance": _mirror_dance, "push-retreat": _push}


def generate_sample(rng: np.random.Generator, family: str, topology: SkeletonTopology, frames: int,
                    sample_id: str = "") -> InteractionSample:
    t = np.arange(frames, dtype=np.float64)
    person_a, person_b, text = _BUILDERS[family](rng, t)
    pa, ya, kwa = person_a
    fa = forward_kinematics(topology, pa, _limb_rotations(topology, ya, **kwa))
    if person_b is None:
        fb = reflect_motion(fa)
    else:
        pb, yb, kwb = person_b
        fb = forward_kinematics(topology, pb, _limb_rotations(topology, yb, **kwb))
        yaw = rng.uniform(-np.pi, np.pi)
        shift = np.array([rng.uniform(-1, 1), 0.0, rng.uniform(-1, 1)])
        fa = _scene_transform(fa, yaw, shift)
        fb = _scene_transform(fb, yaw, shift)
    return InteractionSample(
        MotionSequence(fa.astype(np.float32), topology),
        MotionSequence(fb.astype(np.float32), topology),
        TextCondition(tokenize(text)),
        family,
        sample_id,
    )


def generate_synthetic_corpus(seed: int, n_samples: int, toy_topology: SkeletonTopology | None = None,
                              frames: int = 32) -> list[InteractionSample]:
    """Deterministic corpus; families cycle so every family is equally represented."""
    if n_samples <= 0:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    topology = toy_topology or toy_skeleton()
    if not 5 <= topology.joint_count <= 24:
        raise ValueError(f"topology must have 5..24 joints, got {topology.joint_count}")
    if frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_samples) % len(FAMILIES)
    return [generate_sample(rng, FAMILIES[k], topology, frames, f"s{seed}_{i:05d}") for i, k in enumerate(order)]


def stack_corpus(samples: list[InteractionSample]) -> tuple[np.ndarray, np.ndarray]:
    """Return (N, T, J, 12) arrays for person a and person b."""
    a = np.stack([s.motion_a.data for s in samples])
    b = np.stack([s.motion_b.data for s in samples])
    return a, b


def fit_normalizer(samples: list[InteractionSample]) -> Normalizer:
    a, b = stack_corpus(samples)
    return Normalizer.fit(np.concatenate([a, b]))


def save_corpus(samples: list[InteractionSample], out_dir: str | Path, normalizer: Normalizer | None = None,
                extra: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    (out_dir / "motions").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        pa = Path("motions") / f"{s.sample_id}_a.mot"
        pb = Path("motions") / f"{s.sample_id}_b.mot"
        write_motion_file(s.motion_a, out_dir / pa)
        write_motion_file(s.motion_b, out_dir / pb)
        entries.append({"id": s.sample_id, "family": s.family, "tokens": list(s.text.tokens),
                        "motion_a": str(pa), "motion_b": str(pb)})
    topology = samples[0].motion_a.topology
    manifest = {"samples": entries, "topology": topology.to_dict(), "frames": samples[0].motion_a.frames}
    if normalizer is not None:
        manifest["normalizer"] = normalizer.to_dict()
    if extra:
        manifest.update(extra)
    write_manifest(out_dir / "manifest.json", manifest)
    return manifest


def load_corpus(directory: str | Path) -> tuple[list[InteractionSample], dict]:
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.json")
    topology = SkeletonTopology.from_dict(manifest["topology"])
    samples = [
        InteractionSample(read_motion_file(directory / e["motion_a"], topology),
                          read_motion_file(directory / e["motion_b"], topology),
                          TextCondition(tuple(e["tokens"])), e["family"], e["id"])
        for e in manifest["samples"]
    ]
    return samples, manifest
