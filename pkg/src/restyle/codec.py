"""Latent codec: a small convolutional autoencoder mapping images to the
latent space the diffusion model operates in.

Encoding is deterministic (mean latent only). Weights are pretrained once on
a corpus by plain reconstruction MSE and stay frozen during stylization
training. A weight-free bypass codec (pool down / nearest up) exists so the
diffusion stack can be exercised without a pretraining run.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

CODEC_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CodecConfig:
    spatial_factor: int = 4
    latent_channels: int = 4
    hidden_channels: int = 32

    def __post_init__(self):
        f = self.spatial_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValueError(f"spatial_factor must be a power of 2, got {f}")


class ImageCodec(nn.Module):
    """Strided conv encoder + upsampling decoder, tanh-bounded output."""

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config
        h = config.hidden_channels
        n_down = int(math.log2(config.spatial_factor))

        enc = [nn.Conv2d(3, h, 3, padding=1), nn.SiLU()]
        ch = h
        for _ in range(n_down):
            enc += [nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1), nn.SiLU()]
            ch *= 2
        enc += [nn.Conv2d(ch, config.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(config.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1),
                nn.SiLU(),
            ]
            ch //= 2
        dec += [nn.Conv2d(ch, 3, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        f = self.config.spatial_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"image dims {tuple(x.shape[-2:])} not divisible by {f}")
        if x.shape[-3] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[-3]}")
        z = self.encoder(x)
        return z.squeeze(0) if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[-3] != self.config.latent_channels:
            raise ValueError(
                f"expected {self.config.latent_channels} latent channels, got {z.shape[-3]}"
            )
        x = self.decoder(z)
        return x.squeeze(0) if squeeze else x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


class BypassCodec(nn.Module):
    """Weight-free stand-in: average-pool down, nearest-neighbor up.

    Extra latent channels beyond RGB are zero-filled on encode and dropped
    on decode.
    """

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        f = self.config.spatial_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"image dims {tuple(x.shape[-2:])} not divisible by {f}")
        z = torch.nn.functional.avg_pool2d(x, f)
        c = self.config.latent_channels
        if c > 3:
            pad = torch.zeros(z.shape[0], c - 3, *z.shape[-2:], dtype=z.dtype)
            z = torch.cat([z, pad], dim=1)
        else:
            z = z[:, :c]
        return z.squeeze(0) if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = z.unsqueeze(0)
        x = z[:, :3]
        if x.shape[1] < 3:
            x = torch.cat([x, x[:, -1:].expand(-1, 3 - x.shape[1], -1, -1)], dim=1)
        x = torch.nn.functional.interpolate(x, scale_factor=self.config.spatial_factor, mode="nearest")
        x = x.clamp(-1.0, 1.0)
        return x.squeeze(0) if squeeze else x


class CodecDiverged(RuntimeError):
    pass


def pretrain_codec(
    corpus: list[torch.Tensor],
    config: CodecConfig = CodecConfig(),
    seed: int = 0,
    steps: int = 1500,
    batch_size: int = 16,
    lr: float = 2e-3,
    log_path: str | Path | None = None,
) -> ImageCodec:
    """Train a codec by reconstruction MSE on a list of [3, H, W] tensors."""
    if not corpus:
        raise ValueError("corpus is empty")
    torch.manual_seed(seed)
    codec = ImageCodec(config)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    images = torch.stack(corpus)
    gen = torch.Generator().manual_seed(seed)
    rows = []
    codec.train()
    for step in range(steps):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
        batch = images[idx]
        recon = codec(batch)
        loss = torch.mean((recon - batch) ** 2)
        if not torch.isfinite(loss):
            raise CodecDiverged(f"codec pretraining diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((step, loss.item()))
    codec.eval()
    codec.requires_grad_(False)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(rows)
    return codec


def reconstruction_mse(codec, images: list[torch.Tensor]) -> float:
    total, count = 0.0, 0
    for img in images:
        recon = codec.decode(codec.encode(img))
        total += torch.mean((recon - img) ** 2).item() * img.numel()
        count += img.numel()
    return total / count


def save_codec(codec: ImageCodec, path: str | Path) -> None:
    payload = {
        "format_version": CODEC_FORMAT_VERSION,
        "kind": "conv-autoencoder",
        "config": asdict(codec.config),
        "state_dict": codec.state_dict(),
    }
    _atomic_save(payload, path)


def load_codec(path: str | Path) -> ImageCodec:
    if not Path(path).exists():
        raise FileNotFoundError(f"codec checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CODEC_FORMAT_VERSION:
        raise ValueError(
            f"unsupported codec checkpoint version {payload.get('format_version')!r}, "
            f"expected {CODEC_FORMAT_VERSION}"
        )
    codec = ImageCodec(CodecConfig(**payload["config"]))
    codec.load_state_dict(payload["state_dict"])
    codec.eval()
    codec.requires_grad_(False)
    return codec


def _atomic_save(payload: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
