"""Latent-space training data built once from rendered samples and a frozen codec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adit import TryOnModel
from .codec import LatentCodec, images_to_tensor
from .diffusion import LatentBatch
from .grm import SLOTS, blank_garment
from .harness.synthetic import COARSE_LABELS, SyntheticSample
from .preprocessing import make_agnostic, refine_mask


@torch.no_grad()
def _encode(codec: LatentCodec, images, batch_size: int = 256) -> torch.Tensor:
    x = images_to_tensor(images)
    return torch.cat([codec.encode(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def coarse_agnostic(sample, kernel: int = 3) -> np.ndarray:
    """Agnostic image whose mask also hides the arms (sleeve shape not revealed).

    ``sample`` is anything with ``person`` and ``seg`` arrays.
    """
    return make_agnostic(sample.person, refine_mask(sample.seg, COARSE_LABELS, kernel)).pixels


@dataclass
class LatentData:
    z0: torch.Tensor
    agnostic: torch.Tensor
    agnostic_coarse: torch.Tensor
    pose: torch.Tensor
    garments: torch.Tensor
    text_ids: torch.Tensor
    text_mask: torch.Tensor

    def __len__(self):
        return self.z0.shape[0]

    @classmethod
    def from_samples(cls, samples: list[SyntheticSample], codec: LatentCodec, model: TryOnModel,
                     zero_pose: bool = False) -> "LatentData":
        """Encode every image once. Works for rendered samples and records read from disk."""
        res = samples[0].person.shape[:2]
        person = _encode(codec, [s.person for s in samples])
        agn = _encode(codec, [s.agnostic for s in samples])
        agn_c = _encode(codec, [coarse_agnostic(s) for s in samples])
        poses = [np.zeros_like(s.pose) if zero_pose else s.pose for s in samples]
        pose = _encode(codec, poses)
        gimgs = [s.garments[k] if s.garments[k] is not None else blank_garment(res)
                 for s in samples for k in SLOTS]
        garments = _encode(codec, gimgs).reshape(len(samples), len(SLOTS), *person.shape[1:])
        ids, mask = model.tokenize([s.prompt for s in samples])
        return cls(person, agn, agn_c, pose, garments, ids, mask)

    def batch(self, idx, coarse: torch.Tensor | None = None) -> LatentBatch:
        agn = self.agnostic[idx]
        if coarse is not None:
            agn = torch.where(coarse[:, None, None, None], self.agnostic_coarse[idx], agn)
        return LatentBatch(self.z0[idx], agn, self.pose[idx], self.garments[idx],
                           self.text_ids[idx], self.text_mask[idx])

    def fine(self) -> LatentBatch:
        return self.batch(slice(None))

    def sampler(self, coarse_prob: float):
        def draw(gen: torch.Generator, batch_size: int) -> LatentBatch:
            idx = torch.randint(len(self), (batch_size,), generator=gen)
            coarse = torch.rand(batch_size, generator=gen) < coarse_prob
            return self.batch(idx, coarse)
        return draw
