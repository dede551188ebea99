"""Noise-prediction UNet with three conditioning paths: structure features
added after the input convolution, reference features fused at every spatial
attention site, and semantic tokens consumed by cross-attention. An optional
temporal attention layer (identity at initialization) sits after each
cross-attention for video batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffusion import timestep_embedding
from .stylenet import CrossAttention, SpatialAttention, _norm_groups, time_mlp


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    base_width: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    n_res_blocks: int = 1
    attention_levels: tuple[int, ...] = (1,)
    heads: int = 4
    d_model: int = 64
    time_dim: int = 64
    temporal_enabled: bool = False
    temporal_max_len: int = 32

    def __post_init__(self):
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")
        for lvl in self.attention_levels:
            if not 0 <= lvl < len(self.channel_mult):
                raise ValueError(f"attention level {lvl} outside channel_mult range")


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, embed_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(embed_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb(torch.nn.functional.silu(emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


def temporal_reshape(x: torch.Tensor) -> torch.Tensor:
    """[b, t, h, w, c] -> [(b*h*w), t, c] view for frame-axis attention."""
    if x.ndim != 5:
        raise ValueError(f"expected [b, t, h, w, c], got {tuple(x.shape)}")
    b, t, h, w, c = x.shape
    return x.permute(0, 2, 3, 1, 4).reshape(b * h * w, t, c)


def temporal_unreshape(seq: torch.Tensor, shape: tuple[int, int, int, int, int]) -> torch.Tensor:
    """Inverse of temporal_reshape; `shape` is the original [b, t, h, w, c]."""
    b, t, h, w, c = shape
    return seq.reshape(b, h, w, t, c).permute(0, 3, 1, 2, 4)


class TemporalAttention(nn.Module):
    """Frame-axis attention per spatial location. The output projection is
    zero-initialized, so an untrained layer is an exact identity."""

    def __init__(self, channels: int, heads: int, max_len: int = 32):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.max_len = max_len
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        dim = channels if channels % 2 == 0 else channels + 1
        pe = timestep_embedding(torch.arange(max_len), dim, dtype=torch.float32)
        self.register_buffer("pos_enc", pe[:, :channels])

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        n, t, c = seq.shape
        if t > self.max_len:
            raise ValueError(f"clip length {t} exceeds positional table {self.max_len}")
        h = self.norm(seq) + self.pos_enc[:t].to(seq.dtype)
        q = self._split(self.to_q(h))
        k = self._split(self.to_k(h))
        v = self._split(self.to_v(h))
        scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
        out = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(n, t, c)
        return seq + self.proj(out)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, t, c = x.shape
        return x.reshape(n, t, self.heads, c // self.heads).transpose(1, 2)


class TransformerSite(nn.Module):
    """Res-Trans attention stack: spatial (with optional reference fusion),
    cross-attention over tokens, optional temporal attention."""

    def __init__(self, site_id: str, channels: int, heads: int, d_model: int, temporal: bool, max_len: int):
        super().__init__()
        self.site_id = site_id
        self.spatial = SpatialAttention(channels, heads)
        self.cross = CrossAttention(channels, d_model, heads)
        self.temporal = TemporalAttention(channels, heads, max_len) if temporal else None

    def forward(self, x, tokens=None, ref_feats=None, export=None, video_bt=None):
        if export is not None:
            export[self.site_id] = self.spatial.norm(x)
            x = self.spatial(x)
        elif ref_feats is not None:
            if self.site_id not in ref_feats:
                raise KeyError(f"reference features missing fusion site {self.site_id!r}")
            x = self.spatial(x, ref=ref_feats[self.site_id])
        else:
            x = self.spatial(x)
        if tokens is not None:
            x = self.cross(x, tokens)
        if video_bt is not None:
            if self.temporal is None:
                raise RuntimeError("temporal attention invoked on a non-temporal model")
            b, t = video_bt
            bt, c, h, w = x.shape
            if bt != b * t:
                raise ValueError(f"batch {bt} does not factor into frames {video_bt}")
            vf = x.reshape(b, t, c, h, w).permute(0, 1, 3, 4, 2)
            seq = self.temporal(temporal_reshape(vf))
            vf = temporal_unreshape(seq, (b, t, h, w, c))
            x = vf.permute(0, 1, 4, 2, 3).reshape(bt, c, h, w)
        return x


class DenoisingUNet(nn.Module):
    """Two-level-style UNet over latents; also serves as the reference branch
    when run with export_sites=True."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        cfg = config
        embed_dim = cfg.base_width * 4
        self.time_embed = time_mlp(cfg.time_dim, embed_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_width, 3, padding=1)

        widths = [cfg.base_width * m for m in cfg.channel_mult]
        self.down_blocks = nn.ModuleList()
        self.down_sites = nn.ModuleDict()
        self.downsamples = nn.ModuleList()
        ch = cfg.base_width
        self.skip_channels = [ch]
        for lvl, width in enumerate(widths):
            blocks = nn.ModuleList()
            for j in range(cfg.n_res_blocks):
                blocks.append(ResBlock(ch, width, embed_dim))
                ch = width
                if lvl in cfg.attention_levels:
                    self.down_sites[f"down{lvl}.{j}"] = self._site(f"down{lvl}.{j}", ch)
                self.skip_channels.append(ch)
            self.down_blocks.append(blocks)
            if lvl < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                self.skip_channels.append(ch)

        self.mid_block1 = ResBlock(ch, ch, embed_dim)
        self.mid_site = self._site("mid", ch)
        self.mid_block2 = ResBlock(ch, ch, embed_dim)

        self.up_blocks = nn.ModuleList()
        self.up_sites = nn.ModuleDict()
        self.upsamples = nn.ModuleList()
        skip_stack = list(self.skip_channels)
        for lvl in reversed(range(len(widths))):
            width = widths[lvl]
            blocks = nn.ModuleList()
            for j in range(cfg.n_res_blocks + 1):
                blocks.append(ResBlock(ch + skip_stack.pop(), width, embed_dim))
                ch = width
                if lvl in cfg.attention_levels:
                    self.up_sites[f"up{lvl}.{j}"] = self._site(f"up{lvl}.{j}", ch)
            self.up_blocks.append(blocks)
            if lvl > 0:
                self.upsamples.append(
                    nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch, 3, padding=1))
                )

        self.norm_out = nn.GroupNorm(_norm_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def _site(self, site_id: str, channels: int) -> TransformerSite:
        cfg = self.config
        return TransformerSite(site_id, channels, cfg.heads, cfg.d_model, cfg.temporal_enabled, cfg.temporal_max_len)

    def site_ids(self) -> list[str]:
        ids = list(self.down_sites.keys()) + ["mid"] + list(self.up_sites.keys())
        return ids

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor | None = None,
        guider_feat: torch.Tensor | None = None,
        ref_feats: dict[str, torch.Tensor] | None = None,
        export_sites: bool = False,
        video_bt: tuple[int, int] | None = None,
    ):
        squeeze = z.ndim == 3
        if squeeze:
            z = z.unsqueeze(0)
        if isinstance(t, int):
            t = torch.full((z.shape[0],), t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        dtype = self.conv_in.weight.dtype
        emb = self.time_embed(timestep_embedding(t, self.config.time_dim, dtype=dtype))
        export: dict[str, torch.Tensor] | None = {} if export_sites else None

        x = self.conv_in(z)
        if guider_feat is not None:
            if guider_feat.ndim == 3:
                guider_feat = guider_feat.unsqueeze(0)
            if guider_feat.shape[-2:] != x.shape[-2:] or guider_feat.shape[1] != x.shape[1]:
                raise ValueError(
                    f"guider features {tuple(guider_feat.shape[1:])} do not match "
                    f"post-input-conv features {tuple(x.shape[1:])}"
                )
            x = x + guider_feat

        site_kwargs = dict(tokens=tokens, ref_feats=ref_feats, export=export, video_bt=video_bt)
        skips = [x]
        for lvl, blocks in enumerate(self.down_blocks):
            for j, block in enumerate(blocks):
                x = block(x, emb)
                key = f"down{lvl}.{j}"
                if key in self.down_sites:
                    x = self.down_sites[key](x, **site_kwargs)
                skips.append(x)
            if lvl < len(self.down_blocks) - 1:
                x = self.downsamples[lvl](x)
                skips.append(x)

        x = self.mid_block1(x, emb)
        x = self.mid_site(x, **site_kwargs)
        x = self.mid_block2(x, emb)

        n_levels = len(self.down_blocks)
        for i, blocks in enumerate(self.up_blocks):
            lvl = n_levels - 1 - i
            for j, block in enumerate(blocks):
                x = block(torch.cat([x, skips.pop()], dim=1), emb)
                key = f"up{lvl}.{j}"
                if key in self.up_sites:
                    x = self.up_sites[key](x, **site_kwargs)
            if lvl > 0:
                x = self.upsamples[i](x)

        out = self.conv_out(torch.nn.functional.silu(self.norm_out(x)))
        if squeeze:
            out = out.squeeze(0)
        if export_sites:
            return out, export
        return out


def unet_forward(model: DenoisingUNet, z_t, t, guider_feat=None, ref_feats=None, tokens=None, video_bt=None):
    """Noise prediction with the full conditioning set."""
    return model(z_t, t, tokens=tokens, guider_feat=guider_feat, ref_feats=ref_feats, video_bt=video_bt)


def architecture_manifest(model: DenoisingUNet, image_hw: tuple[int, int] = (64, 64), latent_factor: int = 4) -> dict:
    """Deterministic dump of attention sites (ids, shapes at the given image
    size), cross/temporal wiring, and parameter counts."""
    cfg = model.config
    lh, lw = image_hw[0] // latent_factor, image_hw[1] // latent_factor
    sites = []

    def site_entry(site_id: str, level: int, channels: int):
        h, w = lh // (2**level), lw // (2**level)
        sites.append(
            {
                "site_id": site_id,
                "channels": channels,
                "height": h,
                "width": w,
                "heads": cfg.heads,
                "cross_attention": True,
                "temporal": cfg.temporal_enabled,
            }
        )

    widths = [cfg.base_width * m for m in cfg.channel_mult]
    for lvl, width in enumerate(widths):
        if lvl in cfg.attention_levels:
            for j in range(cfg.n_res_blocks):
                site_entry(f"down{lvl}.{j}", lvl, width)
    site_entry("mid", len(widths) - 1, widths[-1])
    for lvl in reversed(range(len(widths))):
        if lvl in cfg.attention_levels:
            for j in range(cfg.n_res_blocks + 1):
                site_entry(f"up{lvl}.{j}", lvl, widths[lvl])

    return {
        "format_version": 1,
        "latent_shape": [cfg.in_channels, lh, lw],
        "image_size": list(image_hw),
        "attention_sites": sites,
        "site_ids": [s["site_id"] for s in sites],
        "param_count": sum(p.numel() for p in model.parameters()),
    }
