"""Style branch building blocks: the width-concat spatial attention fusion,
cross-attention over semantic tokens, and the semantic encoder.

The reference branch is the same UNet as the denoiser run in feature-export
mode; `refnet_forward` wraps that and returns the per-site feature cache used
by every denoising step of one stylization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffusion import timestep_embedding


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class SpatialAttention(nn.Module):
    """Multi-head attention over flattened spatial positions.

    `attend` is the pure attention core (projections in, projection out, no
    residual); the module forward adds the pre-norm / residual wiring and
    width-concat fusion with a reference feature map.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)

    def attend(self, fmap: torch.Tensor) -> torch.Tensor:
        """Self-attention over all h*w positions of [B, C, H, W]."""
        b, c, h, w = fmap.shape
        tokens = fmap.reshape(b, c, h * w).transpose(1, 2)  # [B, HW, C]
        q = self._split(self.to_q(tokens))
        k = self._split(self.to_k(tokens))
        v = self._split(self.to_v(tokens))
        scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
        out = torch.softmax(scores, dim=-1) @ v
        out = self.proj(self._merge(out))
        return out.transpose(1, 2).reshape(b, c, h, w)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def _merge(self, t: torch.Tensor) -> torch.Tensor:
        b, _, n, _ = t.shape
        return t.transpose(1, 2).reshape(b, n, self.channels)

    def forward(self, x: torch.Tensor, ref: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm(x)
        if ref is None:
            return x + self.attend(h)
        if ref.shape[0] != h.shape[0]:
            ref = ref.expand(h.shape[0], -1, -1, -1)
        return x + fuse_spatial(h, ref, self)


def fuse_spatial(x1: torch.Tensor, x2: torch.Tensor, attn: SpatialAttention) -> torch.Tensor:
    """Concat x2 to x1 along width, self-attend over all 2*h*w positions,
    return the first (x1) half. Pure attention: no residual, no norm."""
    if x1.shape != x2.shape:
        raise ValueError(f"fusion inputs differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    w = x1.shape[-1]
    fused = attn.attend(torch.cat([x1, x2], dim=-1))
    return fused[..., :w]


class CrossAttention(nn.Module):
    """Attention from spatial positions onto semantic tokens."""

    def __init__(self, channels: int, d_model: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(d_model, channels)
        self.to_v = nn.Linear(d_model, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if tokens.ndim == 2:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[0] != b:
            tokens = tokens.expand(b, -1, -1)
        q = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self._split(self.to_q(q))
        k = self._split(self.to_k(tokens))
        v = self._split(self.to_v(tokens))
        scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
        out = torch.softmax(scores, dim=-1) @ v
        out = self.proj(self._merge(out))
        return x + out.transpose(1, 2).reshape(b, c, h, w)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def _merge(self, t: torch.Tensor) -> torch.Tensor:
        b, _, n, _ = t.shape
        return t.transpose(1, 2).reshape(b, n, self.channels)


@dataclass(frozen=True)
class SemanticConfig:
    latent_channels: int = 4
    hidden_channels: int = 32
    token_grid: tuple[int, int] = (2, 4)
    d_model: int = 64

    @property
    def n_tokens(self) -> int:
        return self.token_grid[0] * self.token_grid[1]


class SemanticEncoder(nn.Module):
    """Token producer over codec latents, standing in for a frozen semantic
    backbone: conv stack, pooled to a fixed token grid, projected to d_model."""

    def __init__(self, config: SemanticConfig = SemanticConfig()):
        super().__init__()
        self.config = config
        h = config.hidden_channels
        self.net = nn.Sequential(
            nn.Conv2d(config.latent_channels, h, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(h, h, 3, padding=1),
            nn.SiLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(config.token_grid)
        self.out = nn.Linear(h, config.d_model)

    def forward(self, z_ref: torch.Tensor) -> torch.Tensor:
        squeeze = z_ref.ndim == 3
        if squeeze:
            z_ref = z_ref.unsqueeze(0)
        feats = self.pool(self.net(z_ref))  # [B, h, gh, gw]
        b, c = feats.shape[:2]
        tokens = self.out(feats.reshape(b, c, -1).transpose(1, 2))  # [B, n_tokens, d_model]
        return tokens.squeeze(0) if squeeze else tokens


def semantic_encode(x_ref: torch.Tensor, codec, encoder: SemanticEncoder) -> torch.Tensor:
    """Tokens for a reference image: encode to the latent space, then run the
    semantic encoder over the latent."""
    return encoder(codec.encode(x_ref))


def refnet_forward(refnet, z_ref: torch.Tensor, t, tokens: torch.Tensor) -> dict[str, torch.Tensor]:
    """Run the reference branch once and export its attention-site features.

    Returns {site_id: feature map}; computed once per (reference, session)
    and reused read-only by every denoising step.
    """
    if isinstance(t, int):
        t = torch.zeros(z_ref.shape[0] if z_ref.ndim == 4 else 1, dtype=torch.long) + t
    _, sites = refnet(z_ref, t, tokens=tokens, export_sites=True)
    return sites


def time_mlp(time_dim: int, embed_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(time_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim))


__all__ = [
    "SpatialAttention",
    "CrossAttention",
    "SemanticConfig",
    "SemanticEncoder",
    "fuse_spatial",
    "semantic_encode",
    "refnet_forward",
    "timestep_embedding",
    "time_mlp",
]
