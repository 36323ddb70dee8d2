"""Run configuration: one JSON document, dotted-key overrides, and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    seed: int = 0
    n_samples: int = 512
    n_test: int = 128
    frames: int = 32


@dataclass
class VaeSection:
    channels: int = 32
    latent_dim: int = 32
    levels: int = 2
    skeletal_pool_levels: int = 1
    kernel: int = 3
    n_steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 100
    seed: int = 0


@dataclass
class DenoiserSection:
    dim: int = 128
    depth: int = 4
    heads: int = 4
    text_dim: int = 64
    n_experts: int = 8
    c_exp: float = 1.0
    mode: str = "dts"
    top_k: int = 1
    alpha: float = 0.5
    routing_scope: str = "batch_level"
    n_steps: int = 10000
    batch_size: int = 16
    lr: float = 5e-4
    warmup_steps: int = 200
    cond_drop: float = 0.1
    train_steps: int = 1000
    ddim_steps: int = 50
    cfg_weight: float = 3.5
    telemetry_every: int = 50
    clip_denoised: bool = True
    noise_skip: bool = True
    seed: int = 0


@dataclass
class EvalSection:
    n_repeats: int = 20
    diversity_size: int = 300
    mm_size: int = 100
    r_pool: int = 32
    mm_texts: int = 8
    mm_generations: int = 10
    feature_dim: int = 32
    feature_seed: int = 1234
    seed: int = 0


@dataclass
class AblationSection:
    n_steps: int = 3000
    n_repeats: int = 20


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    vae: VaeSection = field(default_factory=VaeSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    seed: int = 0
    precision: str = "float32"
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        """Hash of everything that determines artifacts; the output location is excluded."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def override(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON, falling back to strings."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node, parts = d, key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        path = f"{where}.{name}" if where else name
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        else:
            if isinstance(default, bool) or default is None:
                ok = isinstance(value, type(default)) or default is None
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                value = float(value) if ok else value
            else:
                ok = isinstance(value, type(default)) and not isinstance(value, bool)
            if not ok:
                raise ConfigError(f"{path} expects {type(default).__name__}, got {value!r}")
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)
