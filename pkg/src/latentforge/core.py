"""Domain types, image I/O, seeded randomness and the corpus manifest format."""

from __future__ import annotations

import csv
import enum
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (
    LayoutError,
    MissingFile,
    ShapeError,
    TooSmall,
    UnsupportedFormat,
    WriteFailure,
)

MIN_SIDE = 32
DEFAULT_RESOLUTION = 256
MANIFEST_HEADER = ("path", "subject_id", "finger_id", "kind", "surface")


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel image with intensities in [0, 1].

    Pixels are stored as a read-only float64 array. The 32 px minimum side is
    enforced where images enter the pipeline (``load_image``, ``resize_bilinear``),
    not here, so small arrays can still be wrapped for tests.
    """

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("GrayImage pixels must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"GrayImage pixels outside [0,1]: [{arr.min()}, {arr.max()}]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @classmethod
    def constant(cls, value: float, height: int, width: int) -> "GrayImage":
        return cls(np.full((height, width), float(value)))

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Return a ``(1, 1, H, W)`` tensor."""
        return torch.from_numpy(np.array(self.pixels, dtype=np.float64)).to(dtype)[None, None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "GrayImage":
        arr = t.detach().to(torch.float64).cpu().numpy().reshape(t.shape[-2], t.shape[-1])
        return cls(np.clip(arr, 0.0, 1.0))


def quantize(pixels: np.ndarray) -> np.ndarray:
    # round half away from zero; all inputs are non-negative
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def load_image(path: os.PathLike | str, min_side: int = MIN_SIDE) -> GrayImage:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "P", "RGB", "RGBA", "LA"):
                if im.mode == "P":
                    im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64)
            else:
                raise UnsupportedFormat(f"{path}: unsupported mode {im.mode}")
    except UnidentifiedImageError as exc:
        raise UnsupportedFormat(f"{path}: not a decodable raster") from exc
    if arr.ndim == 3:
        # ITU-R BT.601 luma; alpha is ignored
        rgb = arr[..., :3] if arr.shape[2] >= 3 else np.repeat(arr[..., :1], 3, axis=2)
        arr = rgb @ np.array([0.299, 0.587, 0.114])
    if min(arr.shape) < min_side:
        raise TooSmall(f"{path}: {arr.shape[1]}x{arr.shape[0]} is below {min_side}px")
    return GrayImage(np.clip(arr / 255.0, 0.0, 1.0))


def save_image(img: GrayImage, path: os.PathLike | str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantize(img.pixels), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc


def bilinear_resize_array(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resampling of a 2-D array with half-pixel centres (no corner alignment)."""
    if arr.shape == (h, w):
        return np.array(arr, dtype=np.float64, copy=True)
    t = torch.from_numpy(np.array(arr, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=False)
    return out[0, 0].numpy()


def resize_bilinear(img: GrayImage, h: int, w: int) -> GrayImage:
    if h < MIN_SIDE or w < MIN_SIDE:
        raise TooSmall(f"target size {w}x{h} is below {MIN_SIDE}px")
    if img.shape == (h, w):
        return img
    out = bilinear_resize_array(img.pixels, h, w)
    return GrayImage(np.clip(out, 0.0, 1.0))


def load_at(path: os.PathLike | str, resolution: int) -> GrayImage:
    img = load_image(path)
    return resize_bilinear(img, resolution, resolution)


def _derive_seed(seed: int, keys: Sequence[object]) -> int:
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, (int, np.integer)):
            words.append(int(key) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
            words.append(int.from_bytes(digest, "little"))
    state = np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)
    return int(state[0])


class RandomSource:
    """Seeded PCG64 stream. Single owner; use ``fork`` for independent children."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def fork(self, *keys: object) -> "RandomSource":
        return RandomSource(_derive_seed(self.seed, keys))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, options):
        return options[int(self.gen.integers(0, len(options)))]

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.integers(0, 2**63 - 1)))
        return g

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed})"


class Kind(str, enum.Enum):
    SENSOR = "sensor"
    LATENT = "latent"
    BACKGROUND = "background"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class FingerprintRecord:
    image_path: Path
    subject_id: str
    finger_id: str
    kind: Kind
    surface: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "image_path", Path(self.image_path))
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.BACKGROUND and (self.subject_id or self.finger_id):
            raise ValueError("background records carry no subject/finger")
        for value in (self.subject_id, self.finger_id, self.surface or ""):
            if "," in value or "\n" in value:
                raise ValueError(f"manifest fields may not contain commas: {value!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject_id, self.finger_id)


@dataclass(frozen=True)
class PairSample:
    content: FingerprintRecord
    style: FingerprintRecord

    def __post_init__(self):
        if self.content.kind is not Kind.SENSOR or self.style.kind is not Kind.LATENT:
            raise ValueError("pairs are (sensor content, latent style)")
        if self.content.key != self.style.key:
            raise ValueError(f"unmated pair {self.content.key} vs {self.style.key}")


def _rel(path: Path, base: Path) -> str:
    try:
        return Path(os.path.relpath(path.resolve(), base.resolve())).as_posix()
    except ValueError:
        return path.resolve().as_posix()


def write_manifest(records: Iterable[FingerprintRecord], path: os.PathLike | str) -> Path:
    """Write the corpus CSV; image paths are stored relative to the manifest's directory."""
    path = Path(path)
    records = list(records)
    seen: set = set()
    for r in records:
        ident = (r.subject_id, r.finger_id, r.image_path.resolve())
        if ident in seen:
            raise LayoutError(f"duplicate manifest entry: {r.image_path}")
        seen.add(ident)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    lines = [",".join(MANIFEST_HEADER)]
    for r in records:
        lines.append(",".join([_rel(r.image_path, base), r.subject_id, r.finger_id, r.kind.value, r.surface or ""]))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_manifest(path: os.PathLike | str) -> list[FingerprintRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise LayoutError(f"{path}: bad manifest header {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise LayoutError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            rel, subject, finger, kind, surface = row
            try:
                records.append(FingerprintRecord(path.parent / rel, subject, finger, Kind(kind), surface or None))
            except ValueError as exc:
                raise LayoutError(f"{path}:{lineno}: {exc}") from exc
    return records


def records_of(records: Iterable[FingerprintRecord], kind: Kind | str) -> list[FingerprintRecord]:
    kind = Kind(kind)
    return [r for r in records if r.kind is kind]


@dataclass
class ImageCache:
    """Loads images at a fixed resolution once per path."""

    resolution: int
    _store: dict = field(default_factory=dict)

    def get(self, path: os.PathLike | str) -> GrayImage:
        key = Path(path).resolve()
        if key not in self._store:
            self._store[key] = load_at(key, self.resolution)
        return self._store[key]
