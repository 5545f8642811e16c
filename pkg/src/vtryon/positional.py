"""2-D rotary embeddings over a centred, resolution-independent coordinate frame."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidArgumentError, ShapeError


def cipe_coords(h: int, w: int, base_h: int, base_w: int) -> torch.Tensor:
    """Centred interpolated coordinates for an ``h x w`` token grid, row-major.

    Token (i, j) maps to ``((i - (h-1)/2) * base_h/h, (j - (w-1)/2) * base_w/w)``
    so every resolution spans the same extent of the base grid and is centred
    on the origin. Returns a float64 tensor of shape ``(h*w, 2)``.
    """
    if min(h, w, base_h, base_w) < 1:
        raise InvalidArgumentError("grid and base dimensions must be >= 1")
    rows = (torch.arange(h, dtype=torch.float64) - (h - 1) / 2) * (base_h / h)
    cols = (torch.arange(w, dtype=torch.float64) - (w - 1) / 2) * (base_w / w)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=-1)


@dataclass(frozen=True)
class RoPEConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 4:
            raise InvalidArgumentError(
                f"head_dim must be a positive multiple of 4, got {self.head_dim}")


def rope_frequencies(cfg: RoPEConfig, dtype=torch.float64) -> torch.Tensor:
    # head_dim/4 rotary pairs per axis, geometric spacing within each axis
    n = cfg.head_dim // 4
    return cfg.base ** (-torch.arange(n, dtype=dtype) / n)


def rope_angles(positions: torch.Tensor, cfg: RoPEConfig) -> torch.Tensor:
    """Per-pair rotation angles, shape ``(..., N, head_dim/2)``: rows first, then columns."""
    freqs = rope_frequencies(cfg, dtype=positions.dtype).to(positions.device)
    row = positions[..., 0:1] * freqs
    col = positions[..., 1:2] * freqs
    return torch.cat([row, col], dim=-1)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, cfg: RoPEConfig) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` (``(..., N, head_dim)``) by position."""
    if x.shape[-1] % 2:
        raise InvalidArgumentError(f"odd head_dim {x.shape[-1]}")
    if x.shape[-1] != cfg.head_dim:
        raise ShapeError(f"head_dim {x.shape[-1]} != config {cfg.head_dim}")
    if positions.shape[-2] != x.shape[-2] or positions.shape[-1] != 2:
        raise ShapeError(f"positions {tuple(positions.shape)} do not match tokens {x.shape[-2]}")
    ang = rope_angles(positions.to(x.dtype), cfg)
    return apply_rotary(x, torch.cos(ang), torch.sin(ang))


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def sinusoidal_embed(t, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Interleaved ``[sin(t f0), cos(t f0), sin(t f1), ...]`` with ``f_k = base^(-2k/dim)``.

    ``t`` may be a scalar or a tensor; the embedding is appended as a last axis.
    """
    if dim <= 0 or dim % 2:
        raise InvalidArgumentError(f"dim must be a positive even integer, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
    dtype = t.dtype if t.is_floating_point() else torch.float64
    freqs = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    ang = t.to(torch.float64)[..., None] * freqs.to(t.device)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    return out.to(dtype)


def sinusoidal_2d(positions: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Absolute 2-D sinusoidal embedding: half the channels for rows, half for columns."""
    if dim % 4:
        raise InvalidArgumentError(f"dim must be a multiple of 4, got {dim}")
    row = sinusoidal_embed(positions[..., 0], dim // 2, base)
    col = sinusoidal_embed(positions[..., 1], dim // 2, base)
    return torch.cat([row, col], dim=-1)

