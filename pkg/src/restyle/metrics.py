"""Evaluation metrics: Fréchet feature distance, a pluggable perceptual
distance, and their composite score (1 + fid) * (1 + perceptual).

The feature extractors here are desk-scale surrogates (codec encoder
activations or raw pixel pyramids); absolute values are NOT comparable to
numbers computed with pretrained backbones, and reports say which extractor
produced them.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import ImageCodec, load_codec
from .images import load_image

log = logging.getLogger(__name__)

EIG_RAISE_TOL = -1e-8


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # [n_samples, d]
    extractor_id: str = "unknown"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("feature set must be [n >= 2, d]")
        if not np.isfinite(feats).all():
            raise ValueError("feature set contains non-finite values")
        object.__setattr__(self, "features", feats)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mu = self.features.mean(axis=0)
        sigma = np.cov(self.features, rowvar=False, ddof=1)
        return mu, np.atleast_2d(sigma)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    sym = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < EIG_RAISE_TOL:
        raise ValueError(f"{what} is not PSD: eigenvalue {vals.min():.3e} below tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """Squared Fréchet distance between two Gaussians given their moments."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ValueError("moment dimension mismatch")

    root2 = _psd_sqrt(sigma2, "covariance")
    _psd_sqrt(sigma1, "covariance")  # validate PSD-ness of the other input too
    inner = root2 @ sigma1 @ root2
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < EIG_RAISE_TOL * max(1.0, float(np.abs(inner).max())):
        raise ValueError(f"covariance product not PSD: eigenvalue {vals.min():.3e}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()

    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    if a.features.shape[1] != b.features.shape[1]:
        raise ValueError(
            f"feature dims differ: {a.features.shape[1]} vs {b.features.shape[1]}"
        )
    mu1, s1 = a.moments()
    mu2, s2 = b.moments()
    return frechet_from_moments(mu1, s1, mu2, s2)


class PixelExtractor:
    """Weight-free extractor: raw image plus 2x/4x average-pooled pyramids."""

    extractor_id = "pixels"

    def maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = x.unsqueeze(0)
        return [
            x,
            torch.nn.functional.avg_pool2d(x, 2),
            torch.nn.functional.avg_pool2d(x, 4),
        ]

    def vector(self, x: torch.Tensor) -> np.ndarray:
        parts = []
        for fmap in self.maps(x):
            parts.append(fmap.mean(dim=(0, 2, 3)).numpy())
            parts.append(fmap.std(dim=(0, 2, 3), unbiased=False).numpy())
        return np.concatenate(parts)


class CodecExtractor:
    """Default extractor: activations of the pretrained codec encoder, plus
    the raw image as scale zero."""

    def __init__(self, codec: ImageCodec, extractor_id: str = "codec"):
        self.codec = codec
        self.extractor_id = extractor_id

    @staticmethod
    def from_checkpoint(path: str | Path) -> "CodecExtractor":
        return CodecExtractor(load_codec(path), extractor_id=f"codec:{Path(path).name}")

    def maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = x.unsqueeze(0)
        maps = [x]
        with torch.no_grad():
            h = x
            for layer in self.codec.encoder:
                h = layer(h)
                if isinstance(layer, torch.nn.SiLU):
                    maps.append(h)
            maps.append(h)  # latent head
        return maps

    def vector(self, x: torch.Tensor) -> np.ndarray:
        parts = []
        for fmap in self.maps(x):
            parts.append(fmap.mean(dim=(0, 2, 3)).numpy())
            parts.append(fmap.std(dim=(0, 2, 3), unbiased=False).numpy())
        return np.concatenate(parts)


def make_extractor(spec: str):
    """Extractor from a CLI spec: "pixels" or "codec:<checkpoint path>"."""
    if spec == "pixels":
        return PixelExtractor()
    if spec.startswith("codec:"):
        return CodecExtractor.from_checkpoint(spec.split(":", 1)[1])
    raise ValueError(f"unknown extractor spec {spec!r}")


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, extractor) -> float:
    """Multi-scale feature distance; scale zero is a plain pixel MSE, deeper
    scales compare channel-normalized activations."""
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    maps_x = extractor.maps(x)
    maps_y = extractor.maps(y)
    total = 0.0
    for i, (fx, fy) in enumerate(zip(maps_x, maps_y)):
        if i > 0:
            fx = fx / fx.norm(dim=1, keepdim=True).clamp_min(1e-8)
            fy = fy / fy.norm(dim=1, keepdim=True).clamp_min(1e-8)
        total += float(torch.mean((fx - fy) ** 2))
    return total / len(maps_x)


def artfid(fid: float, lpips_mean: float) -> float:
    """Composite score (1 + fid) * (1 + lpips_mean)."""
    if fid < 0 or lpips_mean < 0:
        raise ValueError("metric inputs must be non-negative")
    return (1.0 + fid) * (1.0 + lpips_mean)


@dataclass(frozen=True)
class MetricReport:
    fid: float
    lpips_mean: float
    artfid: float
    n_pairs: int
    extractor_id: str
    notes: str = "surrogate extractor; values not comparable to pretrained-backbone metrics"


def evaluate(
    results_dir: str | Path,
    styles_dir: str | Path,
    contents_dir: str | Path,
    extractor,
) -> MetricReport:
    """Score a directory of stylization results against their style and
    content counterparts, matched by filename."""
    results_dir, styles_dir, contents_dir = Path(results_dir), Path(styles_dir), Path(contents_dir)
    names = sorted(p.name for p in results_dir.glob("*.png"))
    if not names:
        raise ValueError(f"no result images in {results_dir}")
    for d in (styles_dir, contents_dir):
        missing = [n for n in names if not (d / n).exists()]
        if missing:
            raise ValueError(f"{d} is missing counterparts for: {missing[:5]}")

    result_vecs, style_vecs, dists = [], [], []
    for name in names:
        result = load_image(results_dir / name)
        style = load_image(styles_dir / name)
        content = load_image(contents_dir / name)
        result_vecs.append(extractor.vector(result))
        style_vecs.append(extractor.vector(style))
        dists.append(perceptual_distance(result, content, extractor))

    fid = frechet_distance(
        FeatureSet(np.stack(result_vecs), extractor.extractor_id),
        FeatureSet(np.stack(style_vecs), extractor.extractor_id),
    )
    lpips_mean = float(np.mean(dists))
    return MetricReport(
        fid=fid,
        lpips_mean=lpips_mean,
        artfid=artfid(fid, lpips_mean),
        n_pairs=len(names),
        extractor_id=extractor.extractor_id,
    )


def write_report(report: MetricReport, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = (
        f"pairs:      {report.n_pairs}\n"
        f"extractor:  {report.extractor_id}\n"
        f"fid:        {report.fid:.6f}\n"
        f"perceptual: {report.lpips_mean:.6f}\n"
        f"artfid:     {report.artfid:.6f}\n"
        f"note:       {report.notes}\n"
    )
    (out_dir / "report.txt").write_text(text)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["extractor_id", "n_pairs", "fid", "perceptual_mean", "artfid"])
        writer.writerow([report.extractor_id, report.n_pairs, report.fid, report.lpips_mean, report.artfid])
