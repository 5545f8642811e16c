"""Small deterministic convolutional autoencoder that defines the latent space.

Images are ``(B, 3, H, W)`` tensors in [-1, 1]; latents are ``(B, c, H/f, W/f)``.
Encoded latents are standardised per channel with a stored shift/scale so the
diffusion process sees roughly unit-variance inputs; ``decode`` undoes it.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError, ShapeError

log = logging.getLogger(__name__)

CODEC_VERSION = "vtryon-codec/1"


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


def _stage_down(cin, cout, blocks):
    return [nn.SiLU(), nn.Conv2d(cin, cout, 4, stride=2, padding=1)] + [ResBlock(cout) for _ in range(blocks)]


def _stage_up(cin, cout, blocks):
    # nearest upsampling + conv avoids the checkerboard of strided transposed convs
    return [ResBlock(cin) for _ in range(blocks)] + [nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"),
                                                     nn.Conv2d(cin, cout, 3, padding=1)]


class LatentCodec(nn.Module):
    def __init__(self, latent_channels: int = 4, downsample: int = 4, width: int = 64, seed: int = 0,
                 blocks: int = 1):
        super().__init__()
        stages = int(np.log2(downsample))
        if 2 ** stages != downsample or stages < 1:
            raise InvalidArgumentError(f"downsample must be a power of two >= 2, got {downsample}")
        self.f = downsample
        self.c = latent_channels
        self.width = width
        self.blocks = blocks
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            widths = [width // 2] + [width] * stages
            enc = [nn.Conv2d(3, widths[0], 3, padding=1)]
            for i in range(stages):
                enc += _stage_down(widths[i], widths[i + 1], blocks)
            enc += [nn.SiLU(), nn.Conv2d(widths[-1], latent_channels, 1)]
            self.encoder = nn.Sequential(*enc)

            dec = [nn.Conv2d(latent_channels, widths[-1], 3, padding=1)]
            for i in reversed(range(stages)):
                dec += _stage_up(widths[i + 1], widths[i], blocks)
            dec += [ResBlock(widths[0]) for _ in range(blocks)]
            dec += [nn.SiLU(), nn.Conv2d(widths[0], 3, 3, padding=1)]
            self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_shift", torch.zeros(latent_channels))
        self.register_buffer("latent_scale", torch.ones(latent_channels))

    def _check_image(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[2] % self.f or x.shape[3] % self.f:
            raise ShapeError(f"image size {tuple(x.shape[2:])} not divisible by f={self.f}")

    def encode_raw(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self.encoder(x)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raw = self.encode_raw(x)
        return (raw - self.latent_shift[:, None, None]) / self.latent_scale[:, None, None]

    def _check_latent(self, z: torch.Tensor):
        if z.ndim != 4 or z.shape[1] != self.c:
            raise ShapeError(f"expected (B, {self.c}, h, w) latents, got {tuple(z.shape)}")

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z)
        return self.decoder(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z)
        raw = z * self.latent_scale[:, None, None] + self.latent_shift[:, None, None]
        return self.decode_raw(raw).clamp(-1.0, 1.0)

    @torch.no_grad()
    def calibrate(self, images: torch.Tensor, batch_size: int = 128):
        """Set the per-channel shift/scale from the statistics of encoded ``images``."""
        raw = torch.cat([self.encode_raw(images[i:i + batch_size])
                         for i in range(0, len(images), batch_size)])
        self.latent_shift.copy_(raw.mean(dim=(0, 2, 3)))
        self.latent_scale.copy_(raw.std(dim=(0, 2, 3)).clamp_min(1e-6))

    def weights(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("latent_")}


def _to_batch(image) -> tuple[torch.Tensor, bool]:
    """Accept an ``H x W x 3`` array or a ``(B, 3, H, W)`` tensor."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected H x W x 3 image, got {image.shape}")
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].float(), True
    return image, False


def encode(image, codec: LatentCodec):
    """Encode an image (array ``H x W x 3`` or batch tensor) into scaled latents."""
    x, single = _to_batch(image)
    with torch.no_grad():
        z = codec.encode(x.to(next(codec.parameters()).dtype))
    return z[0] if single else z


def decode(latent, codec: LatentCodec):
    """Decode latents; a single ``c x h x w`` latent comes back as an ``H x W x 3`` array."""
    single = latent.ndim == 3
    z = latent[None] if single else latent
    with torch.no_grad():
        x = codec.decode(z.to(next(codec.parameters()).dtype))
    if single:
        return x[0].permute(1, 2, 0).cpu().numpy()
    return x


def images_to_tensor(images) -> torch.Tensor:
    """Stack ``N x H x W x 3`` arrays into a float32 ``(N, 3, H, W)`` tensor."""
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def train_codec(dataset, steps: int, seed: int = 0, *, batch_size: int = 32, lr: float = 2e-3,
                latent_channels: int = 4, downsample: int = 4, width: int = 64, blocks: int = 1,
                log_every: int = 0) -> LatentCodec:
    """Fit the autoencoder with plain L2 reconstruction, then calibrate latent statistics.

    ``dataset`` is an ``N x H x W x 3`` array (or list of images). The per-step
    losses are kept on ``codec.train_losses``.
    """
    data = dataset if torch.is_tensor(dataset) else images_to_tensor(dataset)
    if len(data) == 0:
        raise InvalidArgumentError("codec training needs a non-empty dataset")
    codec = LatentCodec(latent_channels, downsample, width, seed=seed, blocks=blocks)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 100) * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * s / max(steps, 1)))))
    losses = []
    for step in range(steps):
        idx = torch.randint(len(data), (min(batch_size, len(data)),), generator=gen)
        x = data[idx]
        loss = F.mse_loss(codec.decode_raw(codec.encode_raw(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("codec step %d loss %.5f", step + 1, np.mean(losses[-log_every:]))
    if steps > 0:
        codec.calibrate(data)
    codec.train_losses = losses
    codec.eval()
    return codec


def save_codec(codec: LatentCodec, directory: str | Path, name: str = "codec") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save({"version": CODEC_VERSION, "state_dict": codec.state_dict()}, directory / f"{name}.pt")
    meta = {
        "version": CODEC_VERSION,
        "f": codec.f,
        "c": codec.c,
        "width": codec.width,
        "blocks": codec.blocks,
        "latent_shift": codec.latent_shift.tolist(),
        "latent_scale": codec.latent_scale.tolist(),
    }
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=2))
    return directory / f"{name}.pt"


def load_codec(directory: str | Path, name: str = "codec") -> LatentCodec:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text())
    blob = torch.load(directory / f"{name}.pt", map_location="cpu", weights_only=True)
    if blob.get("version") != CODEC_VERSION or meta.get("version") != CODEC_VERSION:
        raise InvalidArgumentError(f"unsupported codec checkpoint version {blob.get('version')!r}")
    codec = LatentCodec(meta["c"], meta["f"], meta["width"], blocks=meta["blocks"])
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    return codec
