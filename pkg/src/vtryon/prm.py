"""Person branch: agnostic image + pose map -> person tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .codec import LatentCodec
from .config import ModelConfig
from .errors import InvalidArgumentError
from .positional import cipe_coords
from .tokens import TokenSequence, patchify


@dataclass
class PersonInputs:
    agnostic: np.ndarray | torch.Tensor   # H x W x 3, or (B, 3, H, W)
    pose_map: np.ndarray | torch.Tensor


class PersonEncoder(nn.Module):
    """Projection head over codec latents of the agnostic image and the pose map.

    The two latents are stacked on the channel axis (2c channels), cut into
    p x p patches, projected to width d and tagged with a learned stream vector.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch
        self.proj = nn.Linear(2 * cfg.latent_channels * cfg.patch ** 2, cfg.d)
        self.stream_embed = nn.Parameter(torch.randn(cfg.d) * 0.02)
        gh, gw = cfg.grid_hw
        self.register_buffer("positions", cipe_coords(gh, gw, gh, gw).float(), persistent=False)

    def forward(self, agnostic_latent: torch.Tensor, pose_latent: torch.Tensor) -> torch.Tensor:
        if agnostic_latent.shape != pose_latent.shape:
            raise InvalidArgumentError(
                f"agnostic {tuple(agnostic_latent.shape)} and pose {tuple(pose_latent.shape)} differ")
        x = torch.cat([agnostic_latent, pose_latent], dim=1)
        return self.proj(patchify(x, self.patch)) + self.stream_embed


def _as_batch(img) -> torch.Tensor:
    if isinstance(img, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()
    return img


def encode_person(inputs: PersonInputs, codec: LatentCodec, prm: PersonEncoder) -> TokenSequence:
    agn, pose = _as_batch(inputs.agnostic), _as_batch(inputs.pose_map)
    if agn.shape != pose.shape:
        raise InvalidArgumentError(f"agnostic {tuple(agn.shape)} and pose map {tuple(pose.shape)} differ")
    dtype = prm.proj.weight.dtype
    with torch.no_grad():
        za = codec.encode(agn.to(dtype))
        zp = codec.encode(pose.to(dtype))
    tokens = prm(za, zp)
    return TokenSequence(tokens=tokens, positions=prm.positions.to(dtype), stream="person")
