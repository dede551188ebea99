"""Structure representation and the structure-guidance branch.

A structure map is the content image converted to grayscale and passed
through a randomly ordered chain of three blurs (min / gaussian / box), which
strips color and texture while keeping layout. The StructureGuider encodes
that map into a feature grid at latent resolution; its final projection is
zero-initialized so a fresh guider is an exact no-op on the denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

# ITU-R BT.601 luma weights.
LUMA = (0.299, 0.587, 0.114)

MIN_FILTER = "min"
GAUSSIAN_BLUR = "gaussian"
BOX_BLUR = "box"
BLUR_KINDS = (MIN_FILTER, GAUSSIAN_BLUR, BOX_BLUR)


def to_grayscale(x: torch.Tensor) -> torch.Tensor:
    """Luma grayscale replicated back to 3 identical channels."""
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {tuple(x.shape)}")
    gray = LUMA[0] * x[0] + LUMA[1] * x[1] + LUMA[2] * x[2]
    return gray.unsqueeze(0).expand(3, -1, -1).contiguous()


@dataclass(frozen=True)
class BlurStage:
    kind: str
    size: int  # odd kernel width; gaussian sigma is size / 4

    def __post_init__(self):
        if self.kind not in BLUR_KINDS:
            raise ValueError(f"unknown blur kind {self.kind!r}")
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.size}")


@dataclass(frozen=True)
class BlurChain:
    stages: tuple[BlurStage, ...]
    seed: int | None = None

    def __post_init__(self):
        kinds = [s.kind for s in self.stages]
        if sorted(kinds) != sorted(BLUR_KINDS):
            raise ValueError(f"chain must use each of {BLUR_KINDS} exactly once, got {kinds}")

    def spec_string(self) -> str:
        return ",".join(f"{s.kind}:{s.size}" for s in self.stages)

    @staticmethod
    def parse(spec: str) -> "BlurChain":
        stages = []
        for part in spec.split(","):
            kind, _, size = part.partition(":")
            stages.append(BlurStage(kind.strip(), int(size)))
        return BlurChain(tuple(stages))


def sample_blur_chain(seed: int, size_range: tuple[int, int] = (3, 9)) -> BlurChain:
    """Random permutation of the three blur kinds with odd sizes in range."""
    lo, hi = size_range
    if lo % 2 == 0 or hi % 2 == 0 or lo < 1 or hi < lo:
        raise ValueError(f"size range must be odd bounds with lo <= hi, got {size_range}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(BLUR_KINDS))
    sizes = rng.integers(0, (hi - lo) // 2 + 1, size=len(BLUR_KINDS)) * 2 + lo
    stages = tuple(BlurStage(BLUR_KINDS[k], int(sz)) for k, sz in zip(order, sizes))
    return BlurChain(stages, seed=seed)


def _apply_stage(plane: np.ndarray, stage: BlurStage) -> np.ndarray:
    # Edge replication ("nearest") keeps every output a convex combination /
    # minimum of in-range input values.
    if stage.kind == MIN_FILTER:
        return ndimage.minimum_filter(plane, size=stage.size, mode="nearest")
    if stage.kind == BOX_BLUR:
        return ndimage.uniform_filter(plane, size=stage.size, mode="nearest")
    sigma = stage.size / 4.0
    radius = stage.size // 2
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = ndimage.correlate1d(plane, kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def extract_structure(x: torch.Tensor, chain: BlurChain) -> torch.Tensor:
    """Grayscale + nested blur; returns a [3, H, W] map with equal channels."""
    gray = to_grayscale(x)
    plane = gray[0].detach().cpu().numpy().astype(np.float64)
    for stage in chain.stages:
        plane = _apply_stage(plane, stage)
    out = torch.from_numpy(plane.astype(np.float32))
    return out.unsqueeze(0).expand(3, -1, -1).contiguous()


@dataclass(frozen=True)
class GuiderConfig:
    """Four conv layers (4x4 kernels) plus an alignment/projection stage.

    The stride product sets the conv downsampling; when it exceeds the codec
    factor the feature grid is nearest-upsampled back to latent resolution
    before the zero-initialized projection.
    """

    channels: tuple[int, int, int, int] = (16, 32, 64, 256)
    kernel: int = 4
    strides: tuple[int, int, int, int] = (2, 2, 2, 2)
    out_channels: int = 32
    latent_factor: int = 4  # codec spatial_factor the output must align to
    init_std: float = 0.02

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.strides) != 4:
            raise ValueError("guider uses exactly four conv layers")
        total = int(np.prod(self.strides))
        if total % self.latent_factor != 0:
            raise ValueError(
                f"stride product {total} must be a multiple of latent factor {self.latent_factor}"
            )

    @property
    def stride_product(self) -> int:
        return int(np.prod(self.strides))

    @property
    def align_scale(self) -> int:
        return self.stride_product // self.latent_factor


class StructureGuider(nn.Module):
    """Structure encoder whose output is added to the denoiser after its
    input convolution. Gaussian-initialized except the zero final projection."""

    def __init__(self, config: GuiderConfig = GuiderConfig()):
        super().__init__()
        self.config = config
        layers = []
        in_ch = 3
        for ch, stride in zip(config.channels, config.strides):
            if stride not in (1, 2):
                raise ValueError(f"guider strides must be 1 or 2, got {stride}")
            pad = 1 if stride == 2 else 0  # stride-1 layers pad asymmetrically in forward
            layers.append(nn.Conv2d(in_ch, ch, config.kernel, stride=stride, padding=pad))
            layers.append(nn.SiLU())
            in_ch = ch
        self.convs = nn.ModuleList(layers)
        self.proj = nn.Conv2d(in_ch, config.out_channels, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.convs:
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=self.config.init_std)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        squeeze = s.ndim == 3
        if squeeze:
            s = s.unsqueeze(0)
        total = self.config.stride_product
        if s.shape[-1] % total or s.shape[-2] % total:
            raise ValueError(f"structure dims {tuple(s.shape[-2:])} not divisible by {total}")
        x = s
        for layer in self.convs:
            if isinstance(layer, nn.Conv2d) and layer.stride[0] == 1:
                # even kernel at stride 1: pad (left 1, right 2) keeps the size
                x = torch.nn.functional.pad(x, (1, 2, 1, 2), mode="replicate")
                x = torch.nn.functional.conv2d(x, layer.weight, layer.bias)
            else:
                x = layer(x)
        if self.config.align_scale > 1:
            x = torch.nn.functional.interpolate(x, scale_factor=self.config.align_scale, mode="nearest")
        x = self.proj(x)
        return x.squeeze(0) if squeeze else x
