"""Self-supervised pair construction and the procedural toy corpus.

A training pair is built from one source image: five candidate crop centers
are drawn, the two with the largest center distance become the content and
reference crops, and the content crop doubles as ground truth. Structure maps
are recomputed per sample from a derived blur seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .images import load_image, save_image
from .seeding import derive_seed
from .structure import extract_structure, sample_blur_chain

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# corpus-manifest v1"


@dataclass(frozen=True)
class CropSpec:
    center: tuple[int, int]  # (cx, cy) pixel coordinates
    size: tuple[int, int]  # (w, h)

    @property
    def left(self) -> int:
        return self.center[0] - self.size[0] // 2

    @property
    def top(self) -> int:
        return self.center[1] - self.size[1] // 2

    def validate(self, image_size: tuple[int, int]) -> None:
        w, h = image_size
        if self.left < 0 or self.top < 0 or self.left + self.size[0] > w or self.top + self.size[1] > h:
            raise ValueError(f"crop {self} not inside image {image_size}")


def crop(image: torch.Tensor, spec: CropSpec) -> torch.Tensor:
    spec.validate((image.shape[2], image.shape[1]))
    return image[:, spec.top : spec.top + spec.size[1], spec.left : spec.left + spec.size[0]].clone()


def sample_crop_pair(
    image_size: tuple[int, int], crop_size: tuple[int, int], seed: int, attempts: int = 5
) -> tuple[CropSpec, CropSpec]:
    """Draw candidate centers uniformly and keep the most distant pair.

    Ties resolve to the lexicographically first candidate index pair; the
    first crop of the returned pair is the content crop.
    """
    iw, ih = image_size
    cw, ch = crop_size
    if cw > iw or ch > ih:
        raise ValueError(f"crop {crop_size} larger than image {image_size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    lefts = rng.integers(0, iw - cw + 1, size=attempts)
    tops = rng.integers(0, ih - ch + 1, size=attempts)
    centers = [(int(l) + cw // 2, int(t) + ch // 2) for l, t in zip(lefts, tops)]

    best, best_d2 = (0, 1), -1.0
    for i in range(attempts):
        for j in range(i + 1, attempts):
            d2 = (centers[i][0] - centers[j][0]) ** 2 + (centers[i][1] - centers[j][1]) ** 2
            if d2 > best_d2:
                best, best_d2 = (i, j), d2
    if best_d2 == 0.0:
        log.warning("all crop candidates coincide (seed=%s); returning a degenerate pair", seed)
    i, j = best
    return (
        CropSpec(centers[i], (cw, ch)),
        CropSpec(centers[j], (cw, ch)),
    )


@dataclass(frozen=True)
class TrainingPair:
    content: torch.Tensor
    reference: torch.Tensor
    structure: torch.Tensor
    ground_truth: torch.Tensor  # always the content crop
    source_id: str
    crop_seed: int
    blur_seed: int


def build_training_pair(
    source: torch.Tensor,
    crop_size: tuple[int, int],
    seed: int,
    source_id: str = "",
    blur_size_range: tuple[int, int] = (3, 9),
) -> TrainingPair:
    crop_seed = derive_seed(seed, "crop")
    blur_seed = derive_seed(seed, "blur")
    spec_content, spec_reference = sample_crop_pair(
        (source.shape[2], source.shape[1]), crop_size, crop_seed
    )
    content = crop(source, spec_content)
    reference = crop(source, spec_reference)
    structure = extract_structure(content, sample_blur_chain(blur_seed, blur_size_range))
    return TrainingPair(
        content=content,
        reference=reference,
        structure=structure,
        ground_truth=content.clone(),
        source_id=source_id,
        crop_seed=crop_seed,
        blur_seed=blur_seed,
    )


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    split: str = "train"
    score: float | None = None
    palette: int | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = Path(".")

    def paths(self, split: str | None = None) -> list[Path]:
        return [self.root / r.path for r in self.records if split is None or r.split == split]

    def save(self, path: str | Path) -> None:
        lines = [MANIFEST_HEADER]
        for r in self.records:
            fields = [f"path={r.path}", f"split={r.split}"]
            if r.score is not None:
                fields.append(f"score={r.score:.6f}")
            if r.palette is not None:
                fields.append(f"palette={r.palette}")
            lines.append("\t".join(fields))
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path: str | Path, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise ValueError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
        records = []
        for line in lines[1:]:
            if not line.strip():
                continue
            kv = dict(part.split("=", 1) for part in line.split("\t"))
            records.append(
                ManifestRecord(
                    path=kv["path"],
                    split=kv.get("split", "train"),
                    score=float(kv["score"]) if "score" in kv else None,
                    palette=int(kv["palette"]) if "palette" in kv else None,
                )
            )
        manifest = DatasetManifest(records, root=path.parent)
        if check_paths:
            for rec in records:
                if not (manifest.root / rec.path).exists():
                    raise FileNotFoundError(f"manifest entry missing on disk: {rec.path}")
        return manifest


def _palette_anchors(n_palettes: int, seed: int) -> np.ndarray:
    """Evenly spaced hue anchors; fixed per corpus seed."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "palette-anchors")))
    offset = rng.uniform(0.0, 1.0)
    return (offset + np.arange(n_palettes) / max(n_palettes, 1)) % 1.0


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.asarray(rgb)


def render_toy_image(size: int, palette_hue: float, rng: np.random.Generator) -> np.ndarray:
    """One toy image: palette-colored background with a stroke-like texture
    field (uniform style) plus a few shapes (varying content). Returns HxWx3
    floats in [0, 1]."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    hue = lambda d: (palette_hue + d) % 1.0

    base = _hsv_to_rgb(hue(rng.uniform(-0.03, 0.03)), rng.uniform(0.55, 0.75), rng.uniform(0.45, 0.65))
    img = np.ones((size, size, 3)) * base

    # stroke-like texture: oriented sinusoid field, same parameters everywhere
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(0.35, 0.8)
    phase = rng.uniform(0.0, 2 * np.pi)
    stroke = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
    stroke_color = _hsv_to_rgb(hue(rng.uniform(-0.05, 0.05)), rng.uniform(0.6, 0.85), rng.uniform(0.75, 0.95))
    img = img * (1 - 0.35 * stroke[..., None]) + stroke_color * (0.35 * stroke[..., None])

    accents = [
        _hsv_to_rgb(hue(rng.uniform(-0.06, 0.06)), rng.uniform(0.5, 0.9), rng.uniform(0.3, 0.95))
        for _ in range(3)
    ]
    for _ in range(rng.integers(3, 7)):
        color = accents[rng.integers(0, len(accents))]
        cx, cy = rng.uniform(0, size, size=2)
        if rng.integers(0, 2) == 0:
            r = rng.uniform(size * 0.06, size * 0.2)
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        else:
            hw, hh = rng.uniform(size * 0.05, size * 0.18, size=2)
            mask = (np.abs(xs - cx) <= hw) & (np.abs(ys - cy) <= hh)
        img[mask] = 0.75 * color + 0.25 * img[mask]
    return np.clip(img, 0.0, 1.0)


def generate_toy_corpus(
    n: int,
    size: int,
    seed: int,
    out_dir: str | Path,
    n_palettes: int = 8,
    test_fraction: float = 0.0,
) -> DatasetManifest:
    """Write n PNG images plus manifest.txt and palettes.json to out_dir."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    anchors = _palette_anchors(n_palettes, seed)

    records = []
    palette_sums = np.zeros((n_palettes, 3))
    palette_counts = np.zeros(n_palettes, dtype=int)
    n_test = int(round(n * test_fraction))
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "image", i)))
        palette = int(rng.integers(0, n_palettes))
        arr = render_toy_image(size, float(anchors[palette]), rng)
        rel = f"images/{i:05d}.png"
        tensor = torch.from_numpy((arr * 2.0 - 1.0).astype(np.float32)).permute(2, 0, 1)
        save_image(tensor, out_dir / rel)
        palette_sums[palette] += arr.reshape(-1, 3).mean(axis=0)
        palette_counts[palette] += 1
        split = "test" if i >= n - n_test else "train"
        records.append(ManifestRecord(path=rel, split=split, palette=palette))

    manifest = DatasetManifest(records, root=out_dir)
    manifest.save(out_dir / "manifest.txt")
    stats = {
        "n_palettes": n_palettes,
        "hue_anchors": [float(a) for a in anchors],
        "mean_rgb": [
            [float(v) for v in (palette_sums[p] / max(palette_counts[p], 1))]
            for p in range(n_palettes)
        ],
        "image_counts": [int(c) for c in palette_counts],
    }
    (out_dir / "palettes.json").write_text(json.dumps(stats, indent=2) + "\n")
    return manifest


def corpus_images(manifest: DatasetManifest, split: str | None = "train") -> list[torch.Tensor]:
    return [load_image(p) for p in manifest.paths(split)]


def constant_scorer(value: float = 5.0):
    """Stand-in aesthetic scorer: every image gets the same score."""

    def scorer(path: Path) -> float:
        return value

    return scorer


def aesthetic_filter(manifest: DatasetManifest, scorer, threshold: float) -> DatasetManifest:
    """Drop records scoring below threshold; persist scores on the rest.

    A scorer failure skips (drops) that file with a logged warning.
    """
    kept = []
    for rec in manifest.records:
        try:
            score = float(scorer(manifest.root / rec.path))
        except Exception as exc:
            log.warning("aesthetic scorer failed on %s (%s); skipping file", rec.path, exc)
            continue
        if score >= threshold:
            kept.append(replace(rec, score=score))
    if not kept:
        log.warning("aesthetic filter removed every record (threshold=%s)", threshold)
    return DatasetManifest(kept, root=manifest.root)
