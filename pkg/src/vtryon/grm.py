"""Garment branch: per-slot garment images -> slot-tagged garment tokens."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .codec import LatentCodec
from .config import ModelConfig
from .errors import ShapeError
from .positional import cipe_coords
from .tokens import TokenSequence, patchify

log = logging.getLogger(__name__)

SLOTS = ("upper", "lower", "full")


def blank_garment(resolution) -> np.ndarray:
    """Uniform mid-grey image standing in for an absent garment."""
    H, W = resolution
    return np.zeros((H, W, 3), dtype=np.float32)


@dataclass
class GarmentSet:
    upper: np.ndarray | None = None
    lower: np.ndarray | None = None
    full: np.ndarray | None = None

    def images(self, resolution) -> list[np.ndarray]:
        """Slot images in fixed (upper, lower, full) order, blanks filled in."""
        out = []
        for slot in SLOTS:
            img = getattr(self, slot)
            if img is None:
                img = blank_garment(resolution)
            elif img.shape[:2] != tuple(resolution):
                raise ShapeError(f"{slot} garment is {img.shape[:2]}, expected {tuple(resolution)}")
            out.append(img)
        if all(getattr(self, s) is None for s in SLOTS):
            log.warning("garment set has no garments; every slot is blank")
        return out


@dataclass
class GarmentTokens(TokenSequence):
    slot_tags: torch.Tensor = field(default=None)


class GarmentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch
        self.proj = nn.Linear(cfg.latent_channels * cfg.patch ** 2, cfg.d)
        self.slot_embed = nn.Parameter(torch.randn(len(SLOTS), cfg.d) * 0.02)
        gh, gw = cfg.grid_hw
        self.tokens_per_slot = gh * gw
        pos = cipe_coords(gh, gw, gh, gw).float()
        self.register_buffer("positions", pos.repeat(len(SLOTS), 1), persistent=False)
        self.register_buffer("slot_tags", torch.arange(len(SLOTS)).repeat_interleave(gh * gw),
                             persistent=False)

    def forward(self, garment_latents: torch.Tensor) -> torch.Tensor:
        """``(B, 3, c, h, w)`` slot latents -> ``(B, 3 * N, d)`` tokens."""
        B, S = garment_latents.shape[:2]
        if S != len(SLOTS):
            raise ShapeError(f"expected {len(SLOTS)} garment slots, got {S}")
        flat = garment_latents.reshape(B * S, *garment_latents.shape[2:])
        tok = self.proj(patchify(flat, self.patch)).reshape(B, S, self.tokens_per_slot, -1)
        tok = tok + self.slot_embed[None, :, None, :]
        return tok.reshape(B, S * self.tokens_per_slot, -1)


def encode_garments(garments: GarmentSet, codec: LatentCodec, grm: GarmentEncoder,
                    resolution=(64, 32)) -> GarmentTokens:
    imgs = np.stack(garments.images(resolution))
    dtype = grm.proj.weight.dtype
    x = torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))).to(dtype)
    with torch.no_grad():
        z = codec.encode(x)
    tokens = grm(z[None])
    return GarmentTokens(tokens=tokens, positions=grm.positions.to(dtype), stream="garment",
                         slot_tags=grm.slot_tags)
