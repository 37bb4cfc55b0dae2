"""Alpha blending with background crops, the speckle baseline and generation manifests."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DEFAULT_RESOLUTION, FingerprintRecord, GrayImage, Kind, RandomSource, _rel, bilinear_resize_array, load_image
from .errors import (
    AlphaOutOfRange,
    EmptyBackgroundLibrary,
    LayoutError,
    MissingFile,
    ShapeMismatch,
    SourceTooSmall,
    UnknownBackground,
    WriteFailure,
)

ALPHA_MIN = 0.3
ALPHA_MAX = 0.8
DEFAULT_SPECKLE_VARIANCE = 0.05
DEFAULT_CROP = 320
STYLE_TAGS = ("plain", "textured")
GENERATION_HEADER = ("synthetic_path", "content_path", "style_path", "background_id", "alpha", "seed", "set_tag")


@dataclass(frozen=True)
class BackgroundLibrary:
    crops: tuple[GrayImage, ...]
    ids: tuple[str, ...]
    source_ids: tuple[str, ...]
    style_tag: str

    def __post_init__(self):
        if not self.crops:
            raise EmptyBackgroundLibrary(f"{self.style_tag} background library is empty")
        if not len(self.crops) == len(self.ids) == len(self.source_ids):
            raise ValueError("crops, ids and source_ids must be parallel")
        if self.style_tag not in STYLE_TAGS:
            raise ValueError(f"style_tag must be one of {STYLE_TAGS}")
        if len({c.shape for c in self.crops}) != 1:
            raise ShapeMismatch("background crops must share the pipeline resolution")

    def __len__(self) -> int:
        return len(self.crops)

    def __getitem__(self, background_id: str) -> GrayImage:
        try:
            return self.crops[self.ids.index(background_id)]
        except ValueError:
            raise UnknownBackground(f"no background {background_id!r} in the {self.style_tag} library") from None


@dataclass(frozen=True)
class BlendSpec:
    alpha: float
    background_id: str
    seed: int = 0
    # a pipeline config may narrow or widen the sampling range inside [0, 1]
    low: float = field(default=ALPHA_MIN, compare=False)
    high: float = field(default=ALPHA_MAX, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise AlphaOutOfRange(f"bad alpha range [{self.low}, {self.high}]")
        if not self.low <= self.alpha <= self.high:
            raise AlphaOutOfRange(f"alpha {self.alpha} outside [{self.low}, {self.high}]")


def sample_alpha(rng: RandomSource, low: float = ALPHA_MIN, high: float = ALPHA_MAX) -> float:
    return float(rng.uniform(low, high))


def blend(F: GrayImage, noise: GrayImage, alpha: float) -> GrayImage:
    """``alpha * F + (1 - alpha) * noise``, elementwise."""
    if F.shape != noise.shape:
        raise ShapeMismatch(f"cannot blend {F.shape} with {noise.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha {alpha} outside [0, 1]")
    if alpha == 1.0:
        return F
    if alpha == 0.0:
        return noise
    out = alpha * F.pixels + (1.0 - alpha) * noise.pixels
    return GrayImage(np.clip(out, 0.0, 1.0))


def make_background_library(
    records: Sequence[FingerprintRecord],
    n_crops: int,
    rng: RandomSource,
    style_tag: str,
    crop: int = DEFAULT_CROP,
    resolution: int = DEFAULT_RESOLUTION,
) -> BackgroundLibrary:
    """Random square crops of ``crop`` source pixels, each resized to ``resolution``."""
    if not records:
        raise EmptyBackgroundLibrary(f"no {style_tag} background sources")
    sources = []
    for r in records:
        img = load_image(r.image_path)
        if min(img.shape) < crop:
            raise SourceTooSmall(f"{r.image_path}: {img.width}x{img.height} is smaller than crop {crop}")
        sources.append(img)
    crops, ids, source_ids = [], [], []
    for k in range(n_crops):
        i = int(rng.integers(0, len(sources)))
        src = sources[i]
        y = int(rng.integers(0, src.height - crop + 1))
        x = int(rng.integers(0, src.width - crop + 1))
        patch = bilinear_resize_array(src.pixels[y : y + crop, x : x + crop], resolution, resolution)
        crops.append(GrayImage(np.clip(patch, 0.0, 1.0)))
        ids.append(f"{style_tag}-{k:04d}")
        source_ids.append(records[i].image_path.name)
    return BackgroundLibrary(tuple(crops), tuple(ids), tuple(source_ids), style_tag)


def draw_blend_spec(lib: BackgroundLibrary, rng: RandomSource, low: float = ALPHA_MIN, high: float = ALPHA_MAX) -> BlendSpec:
    background_id = lib.ids[int(rng.integers(0, len(lib)))]
    # the manifest prints alpha to 6 decimals; generating with the printed value keeps rows exact
    alpha = round(sample_alpha(rng, low, high), 6)
    return BlendSpec(min(max(alpha, low), high), background_id, rng.seed, low, high)


def apply_speckle(F: GrayImage, variance: float, rng: RandomSource) -> GrayImage:
    """Multiplicative Gaussian noise ``F + F * n`` clamped to [0, 1]."""
    if variance < 0:
        raise ValueError(f"speckle variance must be >= 0, got {variance}")
    if variance == 0:
        return F
    n = rng.normal(0.0, np.sqrt(variance), F.shape)
    return GrayImage(np.clip(F.pixels + F.pixels * n, 0.0, 1.0))


def speckle_baseline_with_spec(
    F: GrayImage, lib: BackgroundLibrary, variance: float, rng: RandomSource, low: float = ALPHA_MIN, high: float = ALPHA_MAX
) -> tuple[GrayImage, BlendSpec]:
    spec = draw_blend_spec(lib, rng, low, high)
    noisy = apply_speckle(F, variance, rng)
    return blend(noisy, lib[spec.background_id], spec.alpha), spec


def speckle_baseline(F: GrayImage, lib: BackgroundLibrary, variance: float, rng: RandomSource) -> GrayImage:
    return speckle_baseline_with_spec(F, lib, variance, rng)[0]


def generate_latent(model, F_c: GrayImage, F_s: GrayImage, lib: BackgroundLibrary, spec: BlendSpec) -> GrayImage:
    from .style_transfer import stylize

    background = lib[spec.background_id]
    return blend(stylize(model, F_c, F_s), background, spec.alpha)


@dataclass(frozen=True)
class GenerationRow:
    synthetic_path: Path
    content_path: Path
    style_path: Path | None
    background_id: str
    alpha: float
    seed: int
    set_tag: str


def write_generation_manifest(rows: Iterable[GenerationRow], path: os.PathLike | str) -> Path:
    path = Path(path)
    base = path.parent
    lines = [",".join(GENERATION_HEADER)]
    for r in rows:
        lines.append(
            ",".join(
                [
                    _rel(r.synthetic_path, base),
                    _rel(r.content_path, base),
                    _rel(r.style_path, base) if r.style_path else "",
                    r.background_id,
                    f"{r.alpha:.6f}",
                    str(r.seed),
                    r.set_tag,
                ]
            )
        )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_generation_manifest(path: os.PathLike | str) -> list[GenerationRow]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"generation manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != GENERATION_HEADER:
            raise LayoutError(f"{path}: bad generation manifest header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(GENERATION_HEADER):
                raise LayoutError(f"{path}:{lineno}: expected {len(GENERATION_HEADER)} fields, got {len(row)}")
            synth, content, style, bg, alpha, seed, tag = row
            rows.append(
                GenerationRow(
                    path.parent / synth,
                    path.parent / content,
                    path.parent / style if style else None,
                    bg,
                    float(alpha),
                    int(seed),
                    tag,
                )
            )
    return rows


def library_from_records(
    records: Sequence[FingerprintRecord],
    style_tag: str,
    n_crops: int,
    rng: RandomSource,
    crop: int,
    resolution: int,
) -> BackgroundLibrary:
    """Background library over records of kind=background tagged with ``style_tag`` as surface.

    Crops larger than the smallest source are shrunk to fit so small desk-scale
    corpora still work.
    """
    chosen = [r for r in records if r.kind is Kind.BACKGROUND and (r.surface or "plain") == style_tag]
    if not chosen:
        raise EmptyBackgroundLibrary(f"no background records with surface {style_tag!r}")
    smallest = min(min(load_image(r.image_path).shape) for r in chosen)
    return make_background_library(chosen, n_crops, rng, style_tag, min(crop, smallest), resolution)
