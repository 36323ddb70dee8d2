"""Checkpoint files: a JSON header plus one little-endian float32 blob.

Layout::

    b"PMCK" | u64 header_bytes | header (UTF-8 JSON) | float32 blob

The header carries the model configuration, normaliser statistics, and a
``tensors`` manifest of ``{name, offset, shape, dtype}`` entries, offsets counted in
float32 elements from the start of the blob. Parameters are float32; the few
float64 or int64 buffers (the expert biases) keep their bits and span two
elements per value, so a restored model samples bit-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .csvae import CausalSkeletalAutoencoder, MotionVAE, VaeLossWeights
from .denoiser import CooperativeDenoiser, InteractionDiffusion
from .diffusion import DiffusionConfig, NoiseSchedule
from .motion import Normalizer
from .skeleton import SkeletonTopology

MAGIC = b"PMCK"
FORMAT_VERSION = 1
WORD = 4
STORED_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        code = STORED_DTYPES.get(arr.dtype.name)
        if code is None:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=code)
        manifest.append({"name": name, "offset": offset, "shape": list(arr.shape), "dtype": code})
        chunks.append(arr.tobytes())
        offset += arr.nbytes // WORD
    head = json.dumps({**header, "format_version": FORMAT_VERSION, "tensors": manifest},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')}, expected {FORMAT_VERSION}")
    blob = raw[12 + n:]
    tensors = {}
    for entry in header["tensors"]:
        code = entry.get("dtype", "<f4")
        if code not in STORED_DTYPES.values():
            raise CheckpointError(f"{path}: tensor {entry['name']} has unknown dtype {code!r}")
        dtype = np.dtype(code)
        size = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"] * WORD
        hi = lo + size * dtype.itemsize
        if hi > len(blob):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype=dtype, count=size, offset=lo).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def _load_state(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing[:5]}")
    module.load_state_dict({k: tensors[prefix + k].to(v.dtype) for k, v in state.items()})


def _vae_params(vae: MotionVAE) -> dict:
    params = vae.get_params(deep=False)
    topo = params.pop("topology")
    weights = params.pop("weights")
    params["topology"] = (topo or vae.model_.topologies[0]).to_dict()
    params["weights"] = None if weights is None else vars(weights)
    return params


def _vae_from_params(params: dict) -> MotionVAE:
    params = dict(params)
    params["topology"] = SkeletonTopology.from_dict(params["topology"])
    if params.get("weights") is not None:
        params["weights"] = VaeLossWeights(**params["weights"])
    return MotionVAE(**params)


def vae_state(vae: MotionVAE, prefix: str = "vae.") -> tuple[dict, dict[str, torch.Tensor]]:
    header = {"vae_params": _vae_params(vae), "normalizer": vae.normalizer_.to_dict()}
    return header, {prefix + k: v for k, v in vae.model_.state_dict().items()}


def restore_vae(header: dict, tensors: dict[str, torch.Tensor], prefix: str = "vae.") -> MotionVAE:
    vae = _vae_from_params(header["vae_params"])
    vae.model_ = CausalSkeletalAutoencoder(vae._config())
    _load_state(vae.model_, tensors, prefix)
    vae.model_.eval()
    vae.normalizer_ = Normalizer.from_dict(header["normalizer"])
    return vae


def save_vae(path: str | Path, vae: MotionVAE, extra: dict | None = None) -> None:
    header, tensors = vae_state(vae)
    write_checkpoint(path, tensors, {"kind": "vae", **header, **(extra or {})})


def load_vae(path: str | Path) -> MotionVAE:
    header, tensors = read_checkpoint(path)
    if header.get("kind") not in ("vae", "diffusion"):
        raise CheckpointError(f"{path}: no VAE inside (kind={header.get('kind')!r})")
    return restore_vae(header, tensors)


def save_diffusion(path: str | Path, model: InteractionDiffusion, extra: dict | None = None) -> None:
    """The VAE is embedded so a denoiser checkpoint is self-contained."""
    vae_header, tensors = vae_state(model.vae)
    params = {k: v for k, v in model.get_params(deep=False).items() if k != "vae"}
    tensors.update({"denoiser." + k: v for k, v in model.model_.state_dict().items()})
    tensors["latent.mean"] = model.latent_mean_
    tensors["latent.std"] = model.latent_std_
    header = {"kind": "diffusion", **vae_header, "diffusion_params": params,
              "latent_len": model.latent_len_, "latent_dim": model.latent_dim_,
              "x0_bound": model.x0_bound_, **(extra or {})}
    write_checkpoint(path, tensors, header)


def load_diffusion(path: str | Path) -> InteractionDiffusion:
    header, tensors = read_checkpoint(path)
    if header.get("kind") != "diffusion":
        raise CheckpointError(f"{path}: not a denoiser checkpoint (kind={header.get('kind')!r})")
    model = InteractionDiffusion(vae=restore_vae(header, tensors), **header["diffusion_params"])
    model.latent_len_ = header["latent_len"]
    model.latent_dim_ = header["latent_dim"]
    model.x0_bound_ = header["x0_bound"]
    model.latent_mean_ = tensors["latent.mean"]
    model.latent_std_ = tensors["latent.std"]
    model.model_ = CooperativeDenoiser(model._config(model.latent_dim_))
    _load_state(model.model_, tensors, "denoiser.")
    model.model_.eval()
    model.schedule_ = NoiseSchedule(DiffusionConfig(model.train_steps))
    return model
