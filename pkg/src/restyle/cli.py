"""Command-line entry point.

Subcommands: gen-corpus, make-pairs, extract-structure, pretrain-codec,
train, stylize, stylize-video, evaluate, manifest. Every run writes an
effective-config snapshot plus a seeds record, so any output is reproducible
from its run record alone.

Exit codes: 0 success, 2 usage/config errors, 1 runtime failures; failures
print one line "error: <category>: <message>" to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from . import data, metrics, structure
from .codec import CodecConfig, pretrain_codec, save_codec
from .images import image_grid, load_image, save_image
from .seeding import derive_seed

log = logging.getLogger(__name__)

SEED_SCHEME = "sha256(master/label0/label1/...) -> first 8 bytes, 63-bit"


class UsageError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _strength(value: str) -> float:
    v = float(value)
    if not (0.0 <= v <= 1.0):
        raise argparse.ArgumentTypeError(f"strength must be in [0, 1], got {v}")
    return v


def _odd_pair(value: str) -> tuple[int, int]:
    lo, _, hi = value.partition(",")
    return int(lo), int(hi)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restyle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a procedural toy corpus")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--palettes", type=int, default=8)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-pairs", help="preview training pairs from a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--crop-fraction", type=float, default=0.5)
    p.add_argument("--blur-range", type=_odd_pair, default=(3, 9))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract-structure", help="structure map for one image")
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chain", default=None, help="explicit chain, e.g. 'min:5,gaussian:7,box:3'")
    p.add_argument("--blur-range", type=_odd_pair, default=(3, 9))
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain-codec", help="pretrain the latent codec on a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--spatial-factor", type=int, default=4)
    p.add_argument("--latent-channels", type=int, default=4)
    p.add_argument("--hidden-channels", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="codec checkpoint path")

    p = sub.add_parser("train", help="run stylization training")
    p.add_argument("--config", required=True, help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted paths for nested keys)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("stylize", help="stylize one image with one reference")
    _stylize_args(p)
    p.add_argument("--content", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stylize-video", help="stylize a directory of PNG frames")
    _stylize_args(p)
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", help="score results against styles and contents")
    p.add_argument("--results", required=True)
    p.add_argument("--styles", required=True)
    p.add_argument("--contents", required=True)
    p.add_argument("--extractor", default="pixels", help="'pixels' or 'codec:<checkpoint>'")
    p.add_argument("--out", required=True)

    p = sub.add_parser("manifest", help="dump the architecture manifest as JSON")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None, help="train config YAML (fresh model)")
    p.add_argument("--size", type=int, default=64)
    return parser


def _stylize_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--strength", type=_strength, default=1.0)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blur-seed", type=int, default=None)
    p.add_argument("--chain", default=None)
    p.add_argument("--init-from-content", action="store_true")
    p.add_argument("--init-t", type=int, default=None)


def write_run_record(target: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    """Effective-config snapshot + seeds record next to the run output."""
    record = {
        "command": command,
        "seed_scheme": SEED_SCHEME,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "command" and v is not None},
    }
    if extra:
        record.update(extra)
    if target.suffix:  # file output: write a sidecar
        path = target.with_suffix(target.suffix + ".run.yaml")
    else:
        target.mkdir(parents=True, exist_ok=True)
        path = target / "run_record.yaml"
    path.write_text(yaml.safe_dump(record, sort_keys=True))


def cmd_gen_corpus(args) -> int:
    out = Path(args.out)
    data.generate_toy_corpus(
        args.n, args.size, args.seed, out,
        n_palettes=args.palettes, test_fraction=args.test_fraction,
    )
    write_run_record(out, "gen-corpus", args)
    print(f"wrote {args.n} images to {out}/images and {out}/manifest.txt")
    return 0


def cmd_make_pairs(args) -> int:
    manifest = data.DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = manifest.paths("train") or manifest.paths(None)
    seeds_log = []
    for k in range(args.count):
        source = load_image(paths[k % len(paths)])
        crop_px = int(source.shape[-1] * args.crop_fraction) // 16 * 16
        pair_seed = derive_seed(args.seed, "preview-pair", k)
        pair = data.build_training_pair(
            source, (crop_px, crop_px), pair_seed,
            source_id=str(paths[k % len(paths)]), blur_size_range=args.blur_range,
        )
        grid = image_grid([[pair.content, pair.reference, pair.structure, pair.ground_truth]])
        save_image(grid, out / f"pair{k:03d}.png")
        seeds_log.append(
            {"pair": k, "seed": pair_seed, "crop_seed": pair.crop_seed, "blur_seed": pair.blur_seed}
        )
    (out / "seeds.json").write_text(json.dumps(seeds_log, indent=2) + "\n")
    write_run_record(out, "make-pairs", args)
    print(f"wrote {args.count} pair previews to {out}")
    return 0


def cmd_extract_structure(args) -> int:
    image = load_image(args.input)
    if args.chain:
        chain = structure.BlurChain.parse(args.chain)
    else:
        chain = structure.sample_blur_chain(derive_seed(args.seed, "blur"), args.blur_range)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(structure.extract_structure(image, chain), out)
    sidecar = {"input": args.input, "seed": args.seed, "chain": chain.spec_string()}
    out.with_suffix(".chain.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    write_run_record(out, "extract-structure", args, {"chain": chain.spec_string()})
    print(f"wrote structure map to {out} (chain {chain.spec_string()})")
    return 0


def cmd_pretrain_codec(args) -> int:
    manifest = data.DatasetManifest.load(args.manifest)
    images = data.corpus_images(manifest, split="train") or data.corpus_images(manifest, None)
    config = CodecConfig(
        spatial_factor=args.spatial_factor,
        latent_channels=args.latent_channels,
        hidden_channels=args.hidden_channels,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    codec = pretrain_codec(
        images, config, seed=args.seed, steps=args.steps, batch_size=args.batch_size,
        lr=args.lr, log_path=out.with_suffix(".loss.csv"),
    )
    save_codec(codec, out)
    from .codec import reconstruction_mse

    mse = reconstruction_mse(codec, images[: min(64, len(images))])
    write_run_record(out, "pretrain-codec", args, {"train_mse": mse})
    print(f"wrote codec checkpoint to {out} (train reconstruction MSE {mse:.6f})")
    return 0


def _parse_override(spec: str):
    key, sep, raw = spec.partition("=")
    if not sep:
        raise UsageError("bad-override", f"--set expects KEY=VALUE, got {spec!r}")
    return key.strip(), yaml.safe_load(raw)


def _nested_set(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise UsageError("bad-override", f"cannot override through scalar key {part!r}")
    node[parts[-1]] = value


def cmd_train(args) -> int:
    from .train import TrainConfig, config_from_dict, config_to_dict, run_training

    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise UsageError("config-not-found", f"config not found: {cfg_path}")
    tree = yaml.safe_load(cfg_path.read_text()) or {}
    if not isinstance(tree, dict):
        raise UsageError("bad-config", f"config root must be a mapping: {cfg_path}")
    for spec in args.set:
        key, value = _parse_override(spec)
        _nested_set(tree, key, value)
    try:
        config = config_from_dict(TrainConfig, tree)
    except (ValueError, TypeError) as exc:
        raise UsageError("bad-config", str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True))
    write_run_record(out, "train", args, {"master_seed": config.seed})
    summary = run_training(config, out, resume=args.resume)
    print(
        f"trained {summary['steps']} steps in {summary['seconds']:.1f}s; "
        f"loss EMA {summary['initial_ema']:.4f} -> {summary['final_ema']:.4f}"
    )
    return 0


def _load_bundle(args):
    from .infer import load_bundle

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError("checkpoint-not-found", f"checkpoint not found: {ckpt}")
    return load_bundle(ckpt)


def _request(args, content) -> "object":
    from .infer import StylizationRequest
    from .structure import BlurChain

    return StylizationRequest(
        content=content,
        reference=args.reference,
        strength=args.strength,
        steps=args.steps,
        eta=args.eta,
        seed=args.seed,
        blur_seed=args.blur_seed,
        blur_chain=BlurChain.parse(args.chain) if args.chain else None,
        init_from_content=args.init_from_content,
        init_t=args.init_t,
    )


def cmd_stylize(args) -> int:
    from .infer import stylize_with_strength

    bundle = _load_bundle(args)
    req = _request(args, args.content)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(stylize_with_strength(req, bundle), out)
    write_run_record(out, "stylize", args)
    print(f"wrote stylized image to {out}")
    return 0


def cmd_stylize_video(args) -> int:
    from .infer import stylize_video

    bundle = _load_bundle(args)
    frames_dir = Path(args.frames_dir)
    frame_paths = sorted(frames_dir.glob("*.png"))
    if not frame_paths:
        raise UsageError("io-error", f"no PNG frames in {frames_dir}")
    frames = [load_image(p) for p in frame_paths]
    req = _request(args, frames[0])
    outputs = stylize_video(frames, args.reference, req, bundle)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path, frame in zip(frame_paths, outputs):
        save_image(frame, out_dir / path.name)
    write_run_record(out_dir, "stylize-video", args, {"frames": len(outputs)})
    print(f"wrote {len(outputs)} stylized frames to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    try:
        extractor = metrics.make_extractor(args.extractor)
    except ValueError as exc:
        raise UsageError("bad-extractor", str(exc)) from exc
    report = metrics.evaluate(args.results, args.styles, args.contents, extractor)
    out = Path(args.out)
    metrics.write_report(report, out)
    write_run_record(out, "evaluate", args)
    print(
        f"fid={report.fid:.4f} perceptual={report.lpips_mean:.4f} "
        f"artfid={report.artfid:.4f} ({report.n_pairs} pairs, extractor {report.extractor_id})"
    )
    return 0


def cmd_manifest(args) -> int:
    from .denoiser import DenoisingUNet, UNetConfig, architecture_manifest

    if args.checkpoint:
        from .train import load_checkpoint

        state = load_checkpoint(args.checkpoint)
        model = state.components.denoiser
        factor = state.components.codec.config.spatial_factor
    elif args.config:
        from .train import TrainConfig, config_from_dict

        tree = yaml.safe_load(Path(args.config).read_text()) or {}
        config = config_from_dict(TrainConfig, tree)
        model = DenoisingUNet(config.unet)
        factor = config.guider.latent_factor
    else:
        model = DenoisingUNet(UNetConfig())
        factor = 4
    print(json.dumps(architecture_manifest(model, (args.size, args.size), factor), indent=2))
    return 0


_HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "make-pairs": cmd_make_pairs,
    "extract-structure": cmd_extract_structure,
    "pretrain-codec": cmd_pretrain_codec,
    "train": cmd_train,
    "stylize": cmd_stylize,
    "stylize-video": cmd_stylize_video,
    "evaluate": cmd_evaluate,
    "manifest": cmd_manifest,
}


def dispatch(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file-not-found: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: bad-value: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
