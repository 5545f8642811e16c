"""Patch tokenisation shared by the person, garment and latent streams."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, C, h, w) -> (B, (h/p)*(w/p), C*p*p)``, row-major over the patch grid."""
    B, C, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"latent {h}x{w} not divisible by patch size {p}")
    x = x.reshape(B, C, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, (h // p) * (w // p), C * p * p)


def unpatchify(tokens: torch.Tensor, p: int, channels: int, h: int, w: int) -> torch.Tensor:
    B, N, _ = tokens.shape
    gh, gw = h // p, w // p
    if N != gh * gw:
        raise ShapeError(f"{N} tokens cannot tile a {gh}x{gw} grid")
    x = tokens.reshape(B, gh, gw, channels, p, p)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(B, channels, h, w)


@dataclass
class TokenSequence:
    tokens: torch.Tensor      # (B, N, d)
    positions: torch.Tensor   # (N, 2) centred grid coordinates
    stream: str

    def __len__(self):
        return self.tokens.shape[1]
