"""Configuration records for the model, training and sampling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidArgumentError


@dataclass
class ModelConfig:
    resolution: tuple[int, int] = (64, 32)
    latent_channels: int = 4
    downsample: int = 4
    patch: int = 2
    d: int = 128
    heads: int = 4
    depth: int = 8
    mlp_ratio: int = 4
    text_max_len: int = 16
    positional: str = "rope"            # rope | sinusoidal
    rope_base: float = 10000.0
    skip: bool = True
    shared_cross_attention: bool = True
    person_branch: tuple[str, ...] = ("prm.",)

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        self.person_branch = tuple(self.person_branch)
        if self.positional not in ("rope", "sinusoidal"):
            raise InvalidArgumentError(f"unknown positional encoding {self.positional!r}")
        if self.depth % 2:
            raise InvalidArgumentError("depth must be even so skip pairs are complete")
        if self.d % self.heads or (self.d // self.heads) % 4:
            raise InvalidArgumentError("head width must be a multiple of 4 for 2-D rotary pairs")
        f = self.downsample * self.patch
        if self.resolution[0] % f or self.resolution[1] % f:
            raise InvalidArgumentError(f"resolution {self.resolution} not divisible by f*p={f}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.resolution[0] // self.downsample, self.resolution[1] // self.downsample

    @property
    def grid_hw(self) -> tuple[int, int]:
        h, w = self.latent_hw
        return h // self.patch, w // self.patch

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class TrainingConfig:
    stage: int = 1
    steps: int = 6000
    batch_size: int = 16
    lr_floor: float = 1e-6
    lr_peak: float = 3e-4
    warmup_steps: int = 200
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    cond_dropout: float = 0.10
    coarse_mask_prob: float = 0.5
    num_timesteps: int = 1000
    seed: int = 0
    val_every: int = 100
    val_size: int = 128
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise InvalidArgumentError(f"stage must be 1 or 2, got {self.stage}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise InvalidArgumentError("cond_dropout must lie in [0, 1]")


def _stage2_defaults() -> "TrainingConfig":
    return TrainingConfig(stage=2, steps=500, warmup_steps=50)


@dataclass
class DataConfig:
    n_train: int = 2000
    n_codec: int = 1000
    n_val: int = 128
    seed: int = 0


@dataclass
class CodecConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    width: int = 64
    blocks: int = 1
    seed: int = 0


@dataclass
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise InvalidArgumentError("guidance_scale must be >= 0")
        if self.num_steps < 1:
            raise InvalidArgumentError("num_steps must be >= 1")


@dataclass
class EvalConfig:
    transfer_threshold: float = 0.15
    identity_ssim_gate: float = 0.80
    marker_distance: float = 0.4       # 0.2 in [0, 1] RGB units
    marker_fraction: float = 0.5
    min_transfer_rate: float = 0.80
    min_identity_rate: float = 0.80
    min_prompt_flip_rate: float = 0.70


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    stage2: TrainingConfig = field(default_factory=_stage2_defaults)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        parts = {}
        for f in fields(cls):
            sub = data.get(f.name, {})
            known = {k.name for k in fields(f.default_factory())}
            unknown = set(sub) - known
            if unknown:
                raise InvalidArgumentError(f"unknown {f.name} keys: {sorted(unknown)}")
            base = asdict(f.default_factory())
            parts[f.name] = f.default_factory().__class__(**{**base, **sub})
        return cls(**parts)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return cls.from_dict(tomllib.loads(path.read_text()))
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
