"""Noise schedule, velocity parameterisation, guided sampling and training loops.

With ``delta_t^2 + eta_t^2 = 1`` the forward process ``z_t = delta z0 + eta eps``
and the velocity ``v = delta eps - eta z0`` form an orthogonal change of basis,
so ``z0 = delta z_t - eta v`` and ``eps = eta z_t + delta v`` invert it exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .adit import ConditioningBundle, TryOnModel
from .config import SamplerConfig, TrainingConfig
from .errors import InvalidArgumentError, PreconditionError, ShapeError

log = logging.getLogger(__name__)

CLIP = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    delta: torch.Tensor  # (T+1,) float64
    eta: torch.Tensor

    def coefficients(self, t, like: torch.Tensor | None = None):
        """``(delta_t, eta_t)`` shaped to broadcast against ``like`` (batch-first)."""
        t = torch.as_tensor(t)
        if t.is_floating_point():
            t = t.round()
        t = t.long()
        d, e = self.delta[t], self.eta[t]
        if like is not None:
            if t.ndim == 0:
                return d.to(like.dtype), e.to(like.dtype)
            shape = (-1,) + (1,) * (like.ndim - 1)
            return d.reshape(shape).to(like.dtype), e.reshape(shape).to(like.dtype)
        return d, e


def make_schedule(T: int = 1000) -> NoiseSchedule:
    """Cosine schedule ``delta_t = cos(pi/2 * t/T)`` clipped into ``[1e-3, 1 - 1e-3]``."""
    if T < 2:
        raise InvalidArgumentError(f"T must be >= 2, got {T}")
    t = torch.arange(T + 1, dtype=torch.float64)
    delta = torch.cos(0.5 * math.pi * t / T).clamp(CLIP, 1 - CLIP)
    eta = torch.sqrt(1 - delta ** 2)
    return NoiseSchedule(T=T, delta=delta, eta=eta)


def _same_shape(*xs):
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def q_sample(z0, t, eps, sched: NoiseSchedule):
    _same_shape(z0, eps)
    d, e = sched.coefficients(t, z0)
    return d * z0 + e * eps


def v_target(z0, eps, t, sched: NoiseSchedule):
    _same_shape(z0, eps)
    d, e = sched.coefficients(t, z0)
    return d * eps - e * z0


def reconstruct_x0(z_t, v_hat, t, sched: NoiseSchedule):
    _same_shape(z_t, v_hat)
    d, e = sched.coefficients(t, z_t)
    return d * z_t - e * v_hat


def eps_from_v(z_t, v_hat, t, sched: NoiseSchedule):
    _same_shape(z_t, v_hat)
    d, e = sched.coefficients(t, z_t)
    return e * z_t + d * v_hat


def cfg_combine(v_cond, v_uncond, g: float):
    _same_shape(v_cond, v_uncond)
    if g < 0:
        raise InvalidArgumentError("guidance scale must be >= 0")
    if g == 1:
        return v_cond.clone()
    if g == 0:
        return v_uncond.clone()
    return v_uncond + g * (v_cond - v_uncond)


def lr_at(step: int, cfg: TrainingConfig) -> float:
    """Linear warm-up from ``lr_floor`` to ``lr_peak`` over ``warmup_steps``, then flat."""
    if cfg.warmup_steps <= 0 or step >= cfg.warmup_steps:
        return cfg.lr_peak
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * step / cfg.warmup_steps


# --- training ----------------------------------------------------------------

@dataclass
class LatentBatch:
    """Pre-encoded training tuples; the codec is frozen so latents are computed once."""
    z0: torch.Tensor            # (B, c, h, w) target person latent
    agnostic: torch.Tensor      # (B, c, h, w)
    pose: torch.Tensor          # (B, c, h, w)
    garments: torch.Tensor      # (B, 3, c, h, w)
    text_ids: torch.Tensor      # (B, L)
    text_mask: torch.Tensor     # (B, L) bool

    def __len__(self):
        return self.z0.shape[0]

    def index(self, idx) -> "LatentBatch":
        return LatentBatch(*(getattr(self, f)[idx] for f in
                             ("z0", "agnostic", "pose", "garments", "text_ids", "text_mask")))

    def to(self, dtype) -> "LatentBatch":
        return LatentBatch(self.z0.to(dtype), self.agnostic.to(dtype), self.pose.to(dtype),
                           self.garments.to(dtype), self.text_ids, self.text_mask)


def draw_drop_flags(batch_size: int, p: float, gen: torch.Generator) -> torch.Tensor:
    """Per-item flags; a dropped item loses all three conditioning streams together."""
    if p >= 1.0:
        hit = torch.ones(batch_size, dtype=torch.bool)
    elif p <= 0.0:
        hit = torch.zeros(batch_size, dtype=torch.bool)
    else:
        hit = torch.rand(batch_size, generator=gen) < p
    return hit[:, None].expand(batch_size, 3).clone()


def epsilon_loss(model: TryOnModel, batch: LatentBatch, t: torch.Tensor, eps: torch.Tensor,
                 sched: NoiseSchedule, drop_flags: torch.Tensor | None = None):
    """Mean squared error between predicted and true noise, prediction made in v-space."""
    z_t = q_sample(batch.z0, t, eps, sched)
    cond = model.condition(batch.agnostic, batch.pose, batch.garments, batch.text_ids,
                           batch.text_mask, t)
    if drop_flags is not None:
        cond = cond.with_drops(drop_flags)
    v_hat = model(z_t, cond)
    eps_hat = eps_from_v(z_t, v_hat, t, sched)
    return ((eps_hat - eps) ** 2).mean(), cond


def train_step(batch: LatentBatch, model: TryOnModel, optimizer: torch.optim.Optimizer,
               cfg: TrainingConfig, sched: NoiseSchedule, gen: torch.Generator, step: int):
    """One optimiser update; returns ``(loss, drop_flags)``."""
    B = len(batch)
    if B == 0:
        raise InvalidArgumentError("empty batch")
    t = torch.randint(1, sched.T + 1, (B,), generator=gen)
    eps = torch.randn(batch.z0.shape, generator=gen, dtype=batch.z0.dtype)
    flags = draw_drop_flags(B, cfg.cond_dropout, gen)
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    loss, _ = epsilon_loss(model, batch, t, eps, sched, flags)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    optimizer.step()
    return loss.item(), flags


@torch.no_grad()
def validation_loss(model: TryOnModel, data: LatentBatch, sched: NoiseSchedule, seed: int = 1234,
                    batch_size: int = 64) -> float:
    """Epsilon-loss on fixed ``(t, eps)`` draws so successive evaluations are comparable."""
    gen = torch.Generator().manual_seed(seed)
    n = len(data)
    t = torch.randint(1, sched.T + 1, (n,), generator=gen)
    eps = torch.randn(data.z0.shape, generator=gen, dtype=data.z0.dtype)
    total = 0.0
    was_training = model.training
    model.eval()
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        loss, _ = epsilon_loss(model, data.index(sl), t[sl], eps[sl], sched)
        total += loss.item() * len(t[sl])
    model.train(was_training)
    return total / n


@dataclass
class TrainingLog:
    steps: list
    losses: list
    lrs: list
    val_steps: list
    val_losses: list

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return np.cumsum(x) / np.arange(1, len(x) + 1)
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[window:] - c[:-window]) / window

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for s, l, r in zip(self.steps, self.losses, self.lrs):
                w.writerow([s, f"{l:.8g}", f"{r:.8g}"])


def snapshot(model: TryOnModel, names=None) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()
            if names is None or n in names}


def run_training(stage: int, cfg: TrainingConfig, data: LatentBatch, *,
                 model: TryOnModel | None = None, checkpoint: TryOnModel | None = None,
                 val_data: LatentBatch | None = None, out_dir: str | Path | None = None,
                 sampler: Callable[[torch.Generator, int], LatentBatch] | None = None,
                 ) -> tuple[TryOnModel, TrainingLog]:
    """Train stage 1 (all parameters) or stage 2 (person branch only).

    Stage 2 starts from ``checkpoint`` and verifies afterwards that every
    parameter outside the person branch is bit-identical to it. ``sampler``
    may replace uniform minibatch draws from ``data`` (used for mask
    augmentation).
    """
    if stage == 2:
        if checkpoint is None:
            raise PreconditionError("stage 2 needs a stage-1 checkpoint")
        model = checkpoint
    elif model is None:
        raise InvalidArgumentError("stage 1 needs an initialised model")
    sched = make_schedule(cfg.num_timesteps)
    gen = torch.Generator().manual_seed(cfg.seed)

    person = set(model.parameter_groups()["person_branch"])
    for n, p in model.named_parameters():
        p.requires_grad_(stage == 1 or n in person)
    trainable = [p for p in model.parameters() if p.requires_grad]
    frozen_before = snapshot(model, {n for n, _ in model.named_parameters()} - person) if stage == 2 else None
    if not trainable and cfg.steps > 0:
        raise PreconditionError("no trainable parameters in the selected group")

    optimizer = torch.optim.AdamW(trainable, lr=cfg.lr_floor, weight_decay=cfg.weight_decay) if trainable else None
    tlog = TrainingLog([], [], [], [], [])
    model.train()
    for step in range(cfg.steps):
        if sampler is not None:
            batch = sampler(gen, cfg.batch_size)
        else:
            idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
            batch = data.index(idx)
        loss, _ = train_step(batch, model, optimizer, cfg, sched, gen, step)
        tlog.steps.append(step)
        tlog.losses.append(loss)
        tlog.lrs.append(lr_at(step, cfg))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("stage %d step %d loss %.4f", stage, step + 1, np.mean(tlog.losses[-cfg.log_every:]))
        if val_data is not None and cfg.val_every and (step + 1) % cfg.val_every == 0:
            tlog.val_steps.append(step + 1)
            tlog.val_losses.append(validation_loss(model, val_data, sched))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)

    if frozen_before is not None:
        after = snapshot(model, frozen_before.keys())
        changed = [n for n in frozen_before if not torch.equal(frozen_before[n], after[n])]
        if changed:
            raise RuntimeError(f"stage 2 modified frozen parameters: {changed[:5]}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tlog.write_csv(out_dir / f"train_stage{stage}.csv")
    return model, tlog


# --- sampling ----------------------------------------------------------------

def sampling_times(sched: NoiseSchedule, num_steps: int) -> list[int]:
    if num_steps > sched.T:
        raise InvalidArgumentError(f"num_steps {num_steps} exceeds T={sched.T}")
    return [int(round(x)) for x in np.linspace(sched.T, 0, num_steps + 1)]


@torch.no_grad()
def sample(network: Callable[[torch.Tensor, ConditioningBundle], torch.Tensor],
           cond: ConditioningBundle, sched: NoiseSchedule, scfg: SamplerConfig,
           shape: tuple[int, ...], dtype=torch.float32) -> torch.Tensor:
    """Deterministic guided sampler; returns the final clean-latent estimate.

    Each step evaluates the network with full conditioning and with every
    stream dropped, blends them with ``cfg_combine``, reconstructs ``x0`` and
    ``eps`` and re-noises to the next (lower) time.
    """
    times = sampling_times(sched, scfg.num_steps)
    gen = torch.Generator().manual_seed(scfg.seed)
    z = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    B = shape[0]
    uncond = cond.unconditional()
    both = _stack_bundles(cond, uncond)
    x0 = z
    for k in range(scfg.num_steps):
        t, t_next = times[k], times[k + 1]
        tt = torch.full((2 * B,), t, dtype=torch.long)
        v = network(torch.cat([z, z]), replace(both, timestep=tt))
        v = cfg_combine(v[:B], v[B:], scfg.guidance_scale)
        x0 = reconstruct_x0(z, v, t, sched)
        eps = eps_from_v(z, v, t, sched)
        if k + 1 < scfg.num_steps:
            z = q_sample(x0, t_next, eps, sched)
    return x0


def _stack_bundles(a: ConditioningBundle, b: ConditioningBundle) -> ConditioningBundle:
    return replace(a, person=torch.cat([a.person, b.person]), garments=torch.cat([a.garments, b.garments]),
                   text=torch.cat([a.text, b.text]), text_mask=torch.cat([a.text_mask, b.text_mask]),
                   timestep=torch.cat([a.timestep, b.timestep]),
                   drop_flags=torch.cat([a.drop_flags, b.drop_flags]))
