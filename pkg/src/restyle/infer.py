"""Stylization pipelines: single image, strength-controlled blend, video.

A request is deterministic given its seed: initial noise, any stochastic
DDIM noise, and the structure blur chain are all derived from it. Strength
control runs a second pass conditioned on the content itself (same noise,
same chain) and linearly interpolates the two final latents before decoding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from . import diffusion
from .images import load_image
from .seeding import derive_seed
from .structure import BlurChain, extract_structure, sample_blur_chain
from .stylenet import refnet_forward
from .train import Components, Conditioning, TrainConfig, load_checkpoint

log = logging.getLogger(__name__)


@dataclass
class StylizationRequest:
    content: torch.Tensor | str | Path
    reference: torch.Tensor | str | Path
    strength: float = 1.0
    steps: int = 30
    eta: float = 0.0
    seed: int = 0
    blur_seed: int | None = None
    blur_chain: BlurChain | None = None
    init_from_content: bool = False
    init_t: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.strength <= 1.0):
            raise ValueError(f"strength must be in [0, 1], got {self.strength}")


@dataclass
class Bundle:
    components: Components
    config: TrainConfig


def load_bundle(path: str | Path, allow_untrained: bool = False) -> Bundle:
    state = load_checkpoint(path)
    if state.step == 0 and not allow_untrained:
        raise ValueError(f"checkpoint {path} has no training steps")
    for module in (
        state.components.denoiser,
        state.components.refnet,
        state.components.guider,
        state.components.semantic,
    ):
        module.eval()
        module.requires_grad_(False)
    return Bundle(components=state.components, config=state.config)


def _as_image(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else load_image(x)


def _resolve_chain(req: StylizationRequest, config: TrainConfig) -> BlurChain:
    if req.blur_chain is not None:
        return req.blur_chain
    seed = req.blur_seed if req.blur_seed is not None else derive_seed(req.seed, "blur")
    return sample_blur_chain(seed, (config.blur_size_min, config.blur_size_max))


def _check_dims(image: torch.Tensor, components: Components, config: TrainConfig) -> None:
    factor = components.codec.config.spatial_factor
    granule = max(config.guider.stride_product, factor)
    if image.shape[-1] % granule or image.shape[-2] % granule:
        raise ValueError(
            f"image dims {tuple(image.shape[-2:])} must be divisible by {granule}"
        )


def _sample_latent(
    components: Components,
    config: TrainConfig,
    content: torch.Tensor,
    reference: torch.Tensor,
    chain: BlurChain,
    steps: int,
    eta: float,
    seed: int,
    init_from_content: bool = False,
    init_t: int | None = None,
) -> torch.Tensor:
    """One full DDIM pass; returns the final latent [C, h, w]."""
    comp = components
    sched = comp.schedule
    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    content = content.to(dtype)
    reference = reference.to(dtype)

    structure = extract_structure(content, chain).to(dtype)
    with torch.no_grad():
        z_ref = comp.codec.encode(reference.unsqueeze(0))
        tokens = comp.semantic(z_ref)
        ref_feats = refnet_forward(comp.refnet, z_ref, 0, tokens)
        guider_feat = comp.guider(structure.unsqueeze(0))

        factor = comp.codec.config.spatial_factor
        shape = (1, comp.codec.config.latent_channels, content.shape[-2] // factor, content.shape[-1] // factor)
        t_start = sched.T
        if init_from_content:
            t_start = init_t if init_t is not None else sched.T
            eps = torch.randn(shape, generator=_gen(seed, "init-noise"), dtype=dtype)
            z = diffusion.q_sample(comp.codec.encode(content.unsqueeze(0)), t_start, eps, sched)
        else:
            z = torch.randn(shape, generator=_gen(seed, "init-noise"), dtype=dtype)

        ladder = diffusion.ddim_timesteps(t_start, steps)
        for t, t_prev in zip(reversed(ladder[1:]), reversed(ladder[:-1])):
            eps_pred = comp.denoiser(
                z, t, tokens=tokens, guider_feat=guider_feat, ref_feats=ref_feats
            )
            noise = None
            if eta > 0.0:
                noise = torch.randn(shape, generator=_gen(seed, "ddim-noise", t), dtype=dtype)
            z = diffusion.ddim_step(z, eps_pred, t, t_prev, eta, sched, noise=noise)
    return z.squeeze(0)


def _gen(seed: int, *labels) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *labels))
    return gen


def stylize_tensors(req: StylizationRequest, components: Components, config: TrainConfig) -> torch.Tensor:
    """Tensor-level stylization used by both the CLI path and training-time
    sample grids."""
    content = _as_image(req.content)
    reference = _as_image(req.reference)
    _check_dims(content, components, config)
    _check_dims(reference, components, config)
    chain = _resolve_chain(req, config)
    latent = _sample_latent(
        components, config, content, reference, chain,
        req.steps, req.eta, req.seed, req.init_from_content, req.init_t,
    )
    with torch.no_grad():
        return components.codec.decode(latent.unsqueeze(0)).squeeze(0).to(torch.float32)


def stylize(req: StylizationRequest, bundle: Bundle) -> torch.Tensor:
    """Full-strength stylization of the request's content by its reference."""
    return stylize_tensors(req, bundle.components, bundle.config)


def stylize_with_strength(req: StylizationRequest, bundle: Bundle) -> torch.Tensor:
    """Interpolate the stylized final latent against a content-self pass that
    shares the same initial noise and blur chain, then decode."""
    components, config = bundle.components, bundle.config
    content = _as_image(req.content)
    reference = _as_image(req.reference)
    _check_dims(content, components, config)
    _check_dims(reference, components, config)
    chain = _resolve_chain(req, config)

    common = dict(steps=req.steps, eta=req.eta, seed=req.seed,
                  init_from_content=req.init_from_content, init_t=req.init_t)
    latent_s = _sample_latent(components, config, content, reference, chain, **common)
    if req.strength == 1.0:
        latent = latent_s
    else:
        latent_c = _sample_latent(components, config, content, content, chain, **common)
        latent = latent_c if req.strength == 0.0 else (
            req.strength * latent_s + (1.0 - req.strength) * latent_c
        )
    with torch.no_grad():
        return components.codec.decode(latent.unsqueeze(0)).squeeze(0).to(torch.float32)


def stylize_video(
    frames: list[torch.Tensor],
    reference: torch.Tensor | str | Path,
    req: StylizationRequest,
    bundle: Bundle,
) -> list[torch.Tensor]:
    """Stylize a clip with one shared reference. Frame k's noise matches a
    single-image request seeded with derive_seed(req.seed, "frame", k); with
    identity temporal layers the two paths agree frame by frame."""
    components, config = bundle.components, bundle.config
    comp = components
    if not frames:
        raise ValueError("empty frame list")
    frames = [_as_image(f) for f in frames]
    if any(f.shape != frames[0].shape for f in frames):
        raise ValueError("ragged frame sizes: all frames must share dimensions")
    reference = _as_image(reference)
    _check_dims(frames[0], components, config)
    _check_dims(reference, components, config)

    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    sched = comp.schedule
    chain = _resolve_chain(req, config)
    n = len(frames)
    video_bt = (1, n) if config.unet.temporal_enabled else None

    with torch.no_grad():
        z_ref = comp.codec.encode(reference.unsqueeze(0).to(dtype))
        tokens = comp.semantic(z_ref)
        ref_feats = refnet_forward(comp.refnet, z_ref, 0, tokens)
        structures = torch.stack([extract_structure(f, chain) for f in frames]).to(dtype)
        guider_feat = comp.guider(structures)

        factor = comp.codec.config.spatial_factor
        shape = (1, comp.codec.config.latent_channels, frames[0].shape[-2] // factor, frames[0].shape[-1] // factor)
        frame_seeds = [derive_seed(req.seed, "frame", k) for k in range(n)]
        z = torch.cat([
            torch.randn(shape, generator=_gen(s, "init-noise"), dtype=dtype) for s in frame_seeds
        ])

        ladder = diffusion.ddim_timesteps(sched.T, req.steps)
        for t, t_prev in zip(reversed(ladder[1:]), reversed(ladder[:-1])):
            eps_pred = comp.denoiser(
                z, t, tokens=tokens, guider_feat=guider_feat, ref_feats=ref_feats, video_bt=video_bt
            )
            noise = None
            if req.eta > 0.0:
                noise = torch.cat([
                    torch.randn(shape, generator=_gen(s, "ddim-noise", t), dtype=dtype)
                    for s in frame_seeds
                ])
            z = diffusion.ddim_step(z, eps_pred, t, t_prev, req.eta, sched, noise=noise)
        out = comp.codec.decode(z).to(torch.float32)
    return [out[i] for i in range(n)]
