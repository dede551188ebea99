"""Stylization training: frozen codec, trainable denoiser / reference branch /
structure guider / semantic encoder, noise-prediction MSE objective.

All randomness is derived statelessly from (master seed, step index), so an
interrupted run resumed from a checkpoint reproduces the loss trajectory of
an uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .codec import BypassCodec, CodecConfig, ImageCodec, _atomic_save, load_codec
from .data import DatasetManifest, build_training_pair, corpus_images
from .denoiser import DenoisingUNet, UNetConfig
from .seeding import derive_seed
from .structure import GuiderConfig, StructureGuider
from .stylenet import SemanticConfig, SemanticEncoder, refnet_forward

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_eval_steps: int = 30
    crop_fraction: float = 0.5
    blur_size_min: int = 3
    blur_size_max: int = 9
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 1000
    sample_every: int = 0
    ema_window: int = 100
    manifest: str = ""
    codec_checkpoint: str = ""  # empty selects the weight-free bypass codec
    freeze_codec: bool = True
    freeze_denoiser: bool = False
    freeze_refnet: bool = False
    freeze_guider: bool = False
    freeze_semantic: bool = False
    unet: UNetConfig = field(default_factory=UNetConfig)
    guider: GuiderConfig = field(default_factory=GuiderConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)

    def __post_init__(self):
        for name in ("steps", "batch_size", "T", "ddim_eval_steps", "ema_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or not (0.0 < self.crop_fraction <= 1.0):
            raise ValueError("lr must be positive and crop_fraction in (0, 1]")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


def config_from_dict(cls, data: dict):
    """Build a (possibly nested) config dataclass, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        ftype = fields[key].type
        if isinstance(value, dict):
            sub = {"unet": UNetConfig, "guider": GuiderConfig, "semantic": SemanticConfig}[key]
            kwargs[key] = config_from_dict(sub, value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


@dataclass
class Components:
    denoiser: DenoisingUNet
    refnet: DenoisingUNet
    guider: StructureGuider
    semantic: SemanticEncoder
    codec: ImageCodec | BypassCodec
    schedule: diffusion.NoiseSchedule

    def trainable(self, config: TrainConfig) -> dict[str, torch.nn.Module]:
        groups = {}
        for name, frozen in (
            ("denoiser", config.freeze_denoiser),
            ("refnet", config.freeze_refnet),
            ("guider", config.freeze_guider),
            ("semantic", config.freeze_semantic),
        ):
            if not frozen:
                groups[name] = getattr(self, name)
        return groups


@dataclass
class Conditioning:
    guider_feat: torch.Tensor | None = None
    ref_feats: dict[str, torch.Tensor] | None = None
    tokens: torch.Tensor | None = None
    video_bt: tuple[int, int] | None = None


def weights_checksum(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().to(torch.float64).numpy().tobytes())
    return digest.hexdigest()


def init_components(config: TrainConfig) -> Components:
    """Build all networks. Denoiser and reference branch share one random
    initialization; guider gets Gaussian weights with a zero projection; the
    codec comes frozen from its checkpoint (or the bypass stand-in)."""
    seed = config.seed
    torch.manual_seed(derive_seed(seed, "init", "shared-unet"))
    denoiser = DenoisingUNet(config.unet)
    torch.manual_seed(derive_seed(seed, "init", "shared-unet"))
    refnet = DenoisingUNet(config.unet)
    torch.manual_seed(derive_seed(seed, "init", "guider"))
    guider = StructureGuider(config.guider)
    torch.manual_seed(derive_seed(seed, "init", "semantic"))
    semantic = SemanticEncoder(config.semantic)

    if config.codec_checkpoint:
        codec = load_codec(config.codec_checkpoint)
    else:
        log.info("no codec checkpoint configured; using the bypass codec")
        codec = BypassCodec(CodecConfig(latent_channels=config.unet.in_channels))
    codec.requires_grad_(False)

    components = Components(
        denoiser=denoiser,
        refnet=refnet,
        guider=guider,
        semantic=semantic,
        codec=codec,
        schedule=diffusion.make_linear_schedule(config.T, config.beta_start, config.beta_end),
    )
    if config.dtype == "float64":
        for module in (denoiser, refnet, guider, semantic, codec):
            module.double()
    return components


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    components: Components
    optimizer: torch.optim.Optimizer
    step: int = 0
    ema: float | None = None
    initial_loss: float | None = None

    @property
    def master_seed(self) -> int:
        return self.config.seed


def make_state(config: TrainConfig) -> TrainState:
    components = init_components(config)
    params = []
    for module in components.trainable(config).values():
        params.extend(module.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))
    return TrainState(config=config, components=components, optimizer=optimizer)


def prepare_batch(state: TrainState, images: list[torch.Tensor]) -> list:
    """Deterministic batch of training pairs for the current step."""
    cfg = state.config
    step_seed = derive_seed(state.master_seed, "train-step", state.step)
    rng = np.random.Generator(np.random.PCG64(step_seed))
    idx = rng.integers(0, len(images), size=cfg.batch_size)
    crop_px = crop_size_px(images[0].shape[-1], cfg)
    pairs = []
    for k, i in enumerate(idx):
        pairs.append(
            build_training_pair(
                images[int(i)],
                (crop_px, crop_px),
                seed=derive_seed(step_seed, "pair", k),
                source_id=str(int(i)),
                blur_size_range=(cfg.blur_size_min, cfg.blur_size_max),
            )
        )
    return pairs


def crop_size_px(image_size: int, cfg: TrainConfig) -> int:
    granule = max(cfg.guider.stride_product, 2 * cfg.guider.latent_factor)
    px = int(round(image_size * cfg.crop_fraction / granule)) * granule
    if px < granule:
        raise ValueError(
            f"crop_fraction {cfg.crop_fraction} of {image_size}px is below the "
            f"minimum working size {granule}px"
        )
    return min(px, image_size)


def train_step(state: TrainState, pairs: list) -> float:
    """One optimizer update; returns the scalar loss."""
    cfg = state.config
    comp = state.components
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    step_seed = derive_seed(state.master_seed, "train-step", state.step)

    content = torch.stack([p.ground_truth for p in pairs]).to(dtype)
    reference = torch.stack([p.reference for p in pairs]).to(dtype)
    structure = torch.stack([p.structure for p in pairs]).to(dtype)

    with torch.no_grad():
        z0 = comp.codec.encode(content)
        z_ref = comp.codec.encode(reference)

    gen = torch.Generator().manual_seed(derive_seed(step_seed, "noise"))
    t = torch.randint(1, cfg.T + 1, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=dtype)

    tokens = comp.semantic(z_ref)
    ref_feats = refnet_forward(comp.refnet, z_ref, 0, tokens)
    guider_feat = comp.guider(structure)
    cond = Conditioning(guider_feat=guider_feat, ref_feats=ref_feats, tokens=tokens)

    def denoiser_fn(z_t, t_vec, c: Conditioning):
        return comp.denoiser(
            z_t, t_vec, tokens=c.tokens, guider_feat=c.guider_feat, ref_feats=c.ref_feats
        )

    try:
        loss = diffusion.training_loss(denoiser_fn, z0, t, eps, comp.schedule, cond)
    except FloatingPointError as exc:
        raise TrainingDiverged(
            f"non-finite loss at step {state.step} (step seed {step_seed}, "
            f"pair seeds {[p.crop_seed for p in pairs]}): {exc}"
        ) from exc
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step} (step seed {step_seed}, "
            f"pair seeds {[p.crop_seed for p in pairs]})"
        )

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()

    value = float(loss.item())
    if state.ema is None:
        state.ema = value
        state.initial_loss = value
    else:
        w = state.config.ema_window
        state.ema = (1.0 - 1.0 / w) * state.ema + value / w
    state.step += 1
    return value


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    comp = state.components
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config_to_dict(state.config),
        "step": state.step,
        "ema": state.ema,
        "initial_loss": state.initial_loss,
        "models": {
            "denoiser": comp.denoiser.state_dict(),
            "refnet": comp.refnet.state_dict(),
            "guider": comp.guider.state_dict(),
            "semantic": comp.semantic.state_dict(),
        },
        "codec": {
            "kind": "bypass" if isinstance(comp.codec, BypassCodec) else "trained",
            "config": dataclasses.asdict(comp.codec.config),
            "state_dict": comp.codec.state_dict() if isinstance(comp.codec, ImageCodec) else {},
            "source_checkpoint": state.config.codec_checkpoint,
        },
        "schedule": {"T": state.config.T, "beta_start": state.config.beta_start, "beta_end": state.config.beta_end},
        "optimizer": state.optimizer.state_dict(),
    }
    _atomic_save(payload, path)


def load_checkpoint(path: str | Path) -> TrainState:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {version!r}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    config = config_from_dict(TrainConfig, payload["config"])
    state = make_state(config)
    comp = state.components
    comp.denoiser.load_state_dict(payload["models"]["denoiser"])
    comp.refnet.load_state_dict(payload["models"]["refnet"])
    comp.guider.load_state_dict(payload["models"]["guider"])
    comp.semantic.load_state_dict(payload["models"]["semantic"])
    if payload["codec"]["kind"] == "trained":
        codec = ImageCodec(CodecConfig(**payload["codec"]["config"]))
        codec.load_state_dict(payload["codec"]["state_dict"])
        codec.eval()
        codec.requires_grad_(False)
        comp.codec = codec
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = payload["step"]
    state.ema = payload["ema"]
    state.initial_loss = payload["initial_loss"]
    return state


def run_training(config: TrainConfig, out_dir: str | Path, resume: str | Path | None = None) -> dict:
    """Full training run: loss CSV, periodic checkpoints, optional sample
    grids. Returns a summary dict (also written to run_summary.json)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(config.manifest)
    images = corpus_images(manifest, split="train")
    if not images:
        raise ValueError("training manifest has no train-split images")

    state = load_checkpoint(resume) if resume else make_state(config)
    if resume:
        state.config = config  # resumed run keeps going under the same config

    loss_path = out_dir / "loss.csv"
    new_log = not (resume and loss_path.exists())
    loss_file = open(loss_path, "w" if new_log else "a", newline="")
    writer = csv.writer(loss_file)
    if new_log:
        writer.writerow(["step", "loss", "ema"])

    started = time.monotonic()
    initial_ema = None
    try:
        while state.step < config.steps:
            pairs = prepare_batch(state, images)
            loss = train_step(state, pairs)
            if initial_ema is None:
                initial_ema = state.ema
            writer.writerow([state.step, f"{loss:.6f}", f"{state.ema:.6f}"])
            if config.sample_every and state.step % config.sample_every == 0:
                _write_sample_grid(state, pairs, out_dir / "samples" / f"step{state.step:06d}.png")
            if state.step % config.checkpoint_every == 0 or state.step == config.steps:
                save_checkpoint(state, out_dir / "checkpoints" / f"step{state.step:06d}.pt")
    finally:
        loss_file.close()

    final_path = out_dir / "checkpoint.pt"
    save_checkpoint(state, final_path)
    summary = {
        "steps": state.step,
        "initial_loss": state.initial_loss,
        "initial_ema": initial_ema if initial_ema is not None else state.initial_loss,
        "final_ema": state.ema,
        "seconds": time.monotonic() - started,
        "checkpoint": str(final_path),
    }
    (out_dir / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _write_sample_grid(state: TrainState, pairs: list, path: Path) -> None:
    from .images import image_grid, save_image
    from .infer import StylizationRequest, stylize_tensors

    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for pair in pairs[:4]:
        req = StylizationRequest(
            content=pair.content,
            reference=pair.reference,
            steps=min(10, state.config.ddim_eval_steps),
            seed=derive_seed(state.master_seed, "sample", state.step),
        )
        with torch.no_grad():
            out = stylize_tensors(req, state.components, state.config)
        rows.append([pair.content, pair.reference, pair.structure, out])
    save_image(image_grid(rows), path)
