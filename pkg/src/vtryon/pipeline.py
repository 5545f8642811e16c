"""End-to-end try-on: codec + conditioning encoders + fusion backbone + sampler."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .adit import TryOnModel, Vocabulary, count_parameters
from .codec import LatentCodec, images_to_tensor, load_codec, save_codec
from .config import ModelConfig, SamplerConfig
from .diffusion import make_schedule, sample
from .errors import InvalidArgumentError
from .grm import GarmentSet

MODEL_VERSION = "vtryon-adit/1"


def save_model(model: TryOnModel, directory: str | Path, name: str = "model") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save({"version": MODEL_VERSION, "state_dict": model.state_dict()}, directory / f"{name}.pt")
    cfg = asdict(model.cfg)
    meta = {
        "version": MODEL_VERSION,
        "config": cfg,
        "d": cfg["d"], "L": cfg["depth"], "heads": cfg["heads"], "p": cfg["patch"],
        "f": cfg["downsample"], "c": cfg["latent_channels"],
        "positional": cfg["positional"], "skip": cfg["skip"],
        "vocab": model.vocab.itos,
        "vocab_hash": model.vocab.hash,
        "parameters": count_parameters(model),
    }
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=2))
    return directory / f"{name}.pt"


def lock_values(cfg: ModelConfig) -> dict:
    """Build-time constants frozen in a config lockfile and checked by the test suite."""
    model = TryOnModel(cfg)
    return {
        "parameters_all": count_parameters(model, "all"),
        "parameters_person_branch": count_parameters(model, "person_branch"),
        "vocab_hash": model.vocab.hash,
        "vocab_size": len(model.vocab.itos),
    }


def load_model(directory: str | Path, name: str = "model") -> TryOnModel:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text())
    blob = torch.load(directory / f"{name}.pt", map_location="cpu", weights_only=True)
    if meta.get("version") != MODEL_VERSION or blob.get("version") != MODEL_VERSION:
        raise InvalidArgumentError(f"unsupported model checkpoint version {meta.get('version')!r}")
    vocab = Vocabulary(meta["vocab"][2:])
    if vocab.hash != meta["vocab_hash"]:
        raise InvalidArgumentError("vocabulary hash mismatch in checkpoint")
    model = TryOnModel(ModelConfig(**meta["config"]), vocab)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


class TryOnSystem:
    def __init__(self, codec: LatentCodec, model: TryOnModel, num_timesteps: int = 1000):
        self.codec = codec
        self.model = model
        self.sched = make_schedule(num_timesteps)

    @classmethod
    def load(cls, directory: str | Path) -> "TryOnSystem":
        return cls(load_codec(directory), load_model(directory))

    def save(self, directory: str | Path):
        save_codec(self.codec, directory)
        save_model(self.model, directory)

    @property
    def resolution(self):
        return self.model.cfg.resolution

    @torch.no_grad()
    def encode(self, images) -> torch.Tensor:
        return self.codec.encode(images_to_tensor(images))

    @torch.no_grad()
    def tryon_latents(self, agnostic: torch.Tensor, pose: torch.Tensor, garments: torch.Tensor,
                      prompts: list[str], scfg: SamplerConfig) -> torch.Tensor:
        ids, mask = self.model.tokenize(prompts)
        cond = self.model.condition(agnostic, pose, garments, ids, mask, torch.zeros(len(prompts)))
        return sample(self.model, cond, self.sched, scfg, tuple(agnostic.shape))

    @torch.no_grad()
    def tryon(self, agnostic: list[np.ndarray], pose: list[np.ndarray], garments: list[GarmentSet],
              prompts: list[str], scfg: SamplerConfig | None = None,
              batch_size: int = 32) -> list[np.ndarray]:
        """Generate try-on images (``H x W x 3`` in [-1, 1]) for a batch of requests."""
        scfg = scfg or SamplerConfig()
        res = self.resolution
        out = []
        for i in range(0, len(agnostic), batch_size):
            sl = slice(i, i + batch_size)
            za = self.encode(agnostic[sl])
            zp = self.encode(pose[sl])
            g = [img for gs in garments[sl] for img in gs.images(res)]
            zg = self.encode(g).reshape(len(za), 3, *za.shape[1:])
            z0 = self.tryon_latents(za, zp, zg, prompts[sl], scfg)
            imgs = self.codec.decode(z0)
            out.extend(imgs.permute(0, 2, 3, 1).cpu().numpy())
        return out
