"""Fusion diffusion transformer.

The joint token stream is ``[noisy-latent tokens | person tokens]``. Each block
runs self-attention over the joint stream, cross-attention from the joint
stream into ``[garment tokens | text tokens]``, and a feed-forward layer, all
modulated by the timestep embedding. Blocks ``i`` and ``L-1-i`` are linked by
concatenate-and-project skip fusions. Only the latent-stream tokens are
unpatchified into the velocity prediction.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import InvalidArgumentError, ShapeError
from .grm import GarmentEncoder
from .positional import RoPEConfig, apply_rotary, cipe_coords, rope_angles, sinusoidal_2d, sinusoidal_embed
from .preprocessing import TEMPLATE_FIELDS, SleeveLength, YesNo
from .prm import PersonEncoder
from .tokens import patchify, unpatchify

PAD, UNK = "<pad>", "<unk>"
EDIT_PHRASES = (
    "roll up the shirt",
    "roll up the sleeves",
    "tuck in the shirt",
    "tuck in the top",
    "open the outer top",
)
FIT_WORDS = ("tight", "loose", "regular")
STREAMS = ("person", "garment", "text")


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9\-]+", text.lower())


class Vocabulary:
    """Closed word-level vocabulary over editing phrases and annotation terms."""

    def __init__(self, words=None):
        if words is None:
            pool = set()
            for phrase in EDIT_PHRASES:
                pool.update(_words(phrase))
            for name in TEMPLATE_FIELDS.values():
                pool.update(_words(name))
            pool.update(v.value for v in SleeveLength)
            pool.update(v.value for v in YesNo)
            pool.update(FIT_WORDS)
            pool.add("and")
            words = sorted(pool)
        self.itos = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def encode(self, prompt: str, max_len: int) -> tuple[list[int], list[bool]]:
        ids = [self.stoi.get(w, 1) for w in _words(prompt)][:max_len]
        mask = [True] * len(ids) + [False] * (max_len - len(ids))
        return ids + [0] * (max_len - len(ids)), mask


class TextEmbedder(nn.Module):
    def __init__(self, vocab_size: int, d: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.randn(max_len, d) * 0.02)
        self.mlp = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        return x + self.mlp(x)


@dataclass
class TextTokens:
    tokens: torch.Tensor   # (B, L, d)
    mask: torch.Tensor     # (B, L) bool, True where a real token sits
    ids: torch.Tensor


def embed_text(prompt: str, vocab: Vocabulary, params: TextEmbedder) -> TextTokens:
    ids, mask = vocab.encode(prompt, params.max_len)
    ids_t = torch.tensor([ids])
    return TextTokens(tokens=params(ids_t), mask=torch.tensor([mask]), ids=ids_t)


@dataclass
class ConditioningBundle:
    person: torch.Tensor            # (B, Np, d)
    person_positions: torch.Tensor  # (Np, 2)
    garments: torch.Tensor          # (B, Ng, d)
    garment_positions: torch.Tensor  # (Ng, 2)
    text: torch.Tensor              # (B, Nt, d)
    text_mask: torch.Tensor         # (B, Nt) bool
    timestep: torch.Tensor          # (B,)
    drop_flags: torch.Tensor        # (B, 3) bool over (person, garment, text)

    @property
    def batch_size(self) -> int:
        return self.person.shape[0]

    def with_drops(self, flags) -> "ConditioningBundle":
        """Zero the flagged streams per item; ``flags`` is (B, 3) or (3,) booleans."""
        flags = torch.as_tensor(flags, dtype=torch.bool, device=self.person.device)
        if flags.ndim == 1:
            flags = flags.expand(self.batch_size, len(STREAMS))
        flags = flags | self.drop_flags
        keep = (~flags).to(self.person.dtype)
        return replace(
            self,
            person=self.person * keep[:, 0, None, None],
            garments=self.garments * keep[:, 1, None, None],
            text=self.text * keep[:, 2, None, None],
            drop_flags=flags,
        )

    def unconditional(self) -> "ConditioningBundle":
        return self.with_drops([True, True, True])

    def index(self, idx) -> "ConditioningBundle":
        return replace(self, person=self.person[idx], garments=self.garments[idx],
                       text=self.text[idx], text_mask=self.text_mask[idx],
                       timestep=self.timestep[idx], drop_flags=self.drop_flags[idx])

    def repeat(self, n: int) -> "ConditioningBundle":
        return replace(self, person=self.person.repeat(n, 1, 1),
                       garments=self.garments.repeat(n, 1, 1), text=self.text.repeat(n, 1, 1),
                       text_mask=self.text_mask.repeat(n, 1), timestep=self.timestep.repeat(n),
                       drop_flags=self.drop_flags.repeat(n, 1))


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, cross: bool):
        super().__init__()
        self.heads = heads
        self.cross = cross
        if cross:
            self.q = nn.Linear(d, d)
            self.kv = nn.Linear(d, 2 * d)
        else:
            self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def _split(self, x):
        B, N, D = x.shape
        return x.reshape(B, N, self.heads, D // self.heads).transpose(1, 2)

    def forward(self, x, rot_q=None, context=None, rot_k=None, key_mask=None):
        if self.cross:
            q = self._split(self.q(x))
            k, v = self.kv(context).chunk(2, dim=-1)
            k, v = self._split(k), self._split(v)
        else:
            q, k, v = (self._split(t) for t in self.qkv(x).chunk(3, dim=-1))
            rot_k = rot_q
        if rot_q is not None:
            q = apply_rotary(q, *rot_q)
            k = apply_rotary(k, *rot_k)
        attn_mask = None
        empty = None
        if key_mask is not None:
            empty = ~key_mask.any(dim=-1)
            km = key_mask | empty[:, None]
            attn_mask = km[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.transpose(1, 2).reshape(x.shape)
        out = self.out(out)
        if empty is not None and empty.any():
            out = out * (~empty).to(out.dtype)[:, None, None]
        return out


class ADiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d
        self.shared_cross = cfg.shared_cross_attention
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.norm_ctx = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.heads, cross=False)
        self.cross_attn = Attention(d, cfg.heads, cross=True)
        if not self.shared_cross:
            self.text_attn = Attention(d, cfg.heads, cross=True)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(approximate="tanh"),
                                 nn.Linear(cfg.mlp_ratio * d, d))
        self.modulation = nn.Linear(d, 9 * d)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, c, rot_q, ctx, rot_k, ctx_mask, n_garment):
        (sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3) = self.modulation(F.silu(c)).chunk(9, dim=-1)
        x = x + g1[:, None] * self.self_attn(_modulate(self.norm1(x), sh1, sc1), rot_q)
        h = _modulate(self.norm2(x), sh2, sc2)
        ctx = self.norm_ctx(ctx)
        if self.shared_cross:
            ca = self.cross_attn(h, rot_q, ctx, rot_k, ctx_mask)
        else:
            rk_g = tuple(r[:n_garment] for r in rot_k) if rot_k is not None else None
            rk_t = tuple(r[n_garment:] for r in rot_k) if rot_k is not None else None
            ca = self.cross_attn(h, rot_q, ctx[:, :n_garment], rk_g)
            ca = ca + self.text_attn(h, rot_q, ctx[:, n_garment:], rk_t, ctx_mask[:, n_garment:])
        x = x + g2[:, None] * ca
        x = x + g3[:, None] * self.mlp(_modulate(self.norm3(x), sh3, sc3))
        return x


class TimestepEmbedder(nn.Module):
    def __init__(self, d: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, d), nn.SiLU(), nn.Linear(d, d))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embed(t.to(torch.float64), self.freq_dim).to(dtype))


class ADiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p, c = cfg.d, cfg.patch, cfg.latent_channels
        self.x_embed = nn.Linear(c * p * p, d)
        self.t_embed = TimestepEmbedder(d)
        self.blocks = nn.ModuleList(ADiTBlock(cfg) for _ in range(cfg.depth))
        if cfg.skip:
            self.skip_fuse = nn.ModuleList(nn.Linear(2 * d, d) for _ in range(cfg.depth // 2))
            for lin in self.skip_fuse:
                # start as pass-through of the main path
                with torch.no_grad():
                    lin.weight.zero_()
                    lin.weight[:, :d].copy_(torch.eye(d))
                    lin.bias.zero_()
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_mod = nn.Linear(d, 2 * d)
        self.final = nn.Linear(d, c * p * p)
        for lin in (self.final_mod, self.final):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        gh, gw = cfg.grid_hw
        self.register_buffer("latent_positions", cipe_coords(gh, gw, gh, gw).float(), persistent=False)
        self.rope = RoPEConfig(cfg.head_dim, cfg.rope_base)

    def _rotation(self, positions, dtype):
        ang = rope_angles(positions.to(torch.float64), self.rope)
        return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)

    def forward(self, z_t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        cfg = self.cfg
        h, w = cfg.latent_hw
        if z_t.ndim != 4 or tuple(z_t.shape[1:]) != (cfg.latent_channels, h, w):
            raise ShapeError(f"z_t shape {tuple(z_t.shape)} != (B, {cfg.latent_channels}, {h}, {w})")
        for name in ("person", "garments", "text"):
            t = getattr(cond, name)
            if t.shape[-1] != cfg.d or t.shape[0] != z_t.shape[0]:
                raise ShapeError(f"{name} tokens {tuple(t.shape)} do not match width {cfg.d}")
        dtype = z_t.dtype
        x = self.x_embed(patchify(z_t, cfg.patch))
        n_latent = x.shape[1]
        x = torch.cat([x, cond.person.to(dtype)], dim=1)
        q_pos = torch.cat([self.latent_positions.to(dtype), cond.person_positions.to(dtype)])
        n_garment = cond.garments.shape[1]
        ctx = torch.cat([cond.garments.to(dtype), cond.text.to(dtype)], dim=1)
        k_pos = torch.cat([cond.garment_positions.to(dtype),
                           torch.zeros(cond.text.shape[1], 2, dtype=dtype, device=z_t.device)])
        ctx_mask = torch.cat([torch.ones(z_t.shape[0], n_garment, dtype=torch.bool, device=z_t.device),
                              cond.text_mask.to(torch.bool)], dim=1)

        if cfg.positional == "rope":
            rot_q, rot_k = self._rotation(q_pos, dtype), self._rotation(k_pos, dtype)
        else:
            rot_q = rot_k = None
            x = x + sinusoidal_2d(q_pos, cfg.d).to(dtype)
            pos_g = sinusoidal_2d(k_pos[:n_garment], cfg.d).to(dtype)
            ctx = torch.cat([ctx[:, :n_garment] + pos_g, ctx[:, n_garment:]], dim=1)

        c = self.t_embed(cond.timestep)
        half = cfg.depth // 2
        saved = []
        for i, block in enumerate(self.blocks):
            if cfg.skip and i >= half:
                x = self.skip_fuse[i - half](torch.cat([x, saved[cfg.depth - 1 - i]], dim=-1))
            x = block(x, c, rot_q, ctx, rot_k, ctx_mask, n_garment)
            if i < half:
                saved.append(x)
        shift, scale = self.final_mod(F.silu(c)).chunk(2, dim=-1)
        out = self.final(_modulate(self.final_norm(x[:, :n_latent]), shift, scale))
        return unpatchify(out, cfg.patch, cfg.latent_channels, h, w)


class TryOnModel(nn.Module):
    """Person branch, garment branch, text embedder and fusion backbone in one module."""

    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.vocab = vocab or Vocabulary()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.prm = PersonEncoder(self.cfg)
            self.grm = GarmentEncoder(self.cfg)
            self.text = TextEmbedder(len(self.vocab), self.cfg.d, self.cfg.text_max_len)
            self.backbone = ADiT(self.cfg)

    def tokenize(self, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        enc = [self.vocab.encode(p, self.cfg.text_max_len) for p in prompts]
        return torch.tensor([e[0] for e in enc]), torch.tensor([e[1] for e in enc])

    def condition(self, agnostic_latent, pose_latent, garment_latents, text_ids, text_mask,
                  timestep) -> ConditioningBundle:
        B = agnostic_latent.shape[0]
        dtype = self.prm.proj.weight.dtype
        return ConditioningBundle(
            person=self.prm(agnostic_latent.to(dtype), pose_latent.to(dtype)),
            person_positions=self.prm.positions,
            garments=self.grm(garment_latents.to(dtype)),
            garment_positions=self.grm.positions,
            text=self.text(text_ids),
            text_mask=text_mask.to(torch.bool),
            timestep=torch.as_tensor(timestep).expand(B) if torch.as_tensor(timestep).ndim == 0
            else torch.as_tensor(timestep),
            drop_flags=torch.zeros(B, len(STREAMS), dtype=torch.bool),
        )

    def forward(self, z_t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        return self.backbone(z_t, cond)

    def parameter_groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        person = [n for n in names if any(n.startswith(pfx) for pfx in self.cfg.person_branch)]
        return {"all": names, "person_branch": person}


def count_parameters(model: TryOnModel, group: str = "all") -> int:
    groups = model.parameter_groups()
    if group not in groups:
        raise InvalidArgumentError(f"unknown parameter group {group!r}; expected one of {sorted(groups)}")
    wanted = set(groups[group])
    return sum(p.numel() for n, p in model.named_parameters() if n in wanted)
