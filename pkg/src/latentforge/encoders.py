"""Perceptual pyramid encoder and the identity (matching) encoder.

The perceptual encoder exposes five rectified stages with channel counts
64/128/256/512/512, stage ``s`` sitting at 1/2**(s-1) of the input size. Two
layouts share that geometry: ``compact`` (one convolution per stage, used at
desk scale) and ``vgg19`` (the relu1_1..relu5_1 prefix of VGG-19, parameter
names compatible with torchvision's ``features`` state dict).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FingerprintRecord, GrayImage, ImageCache, RandomSource
from .errors import InsufficientClasses, ShapeError

STAGE_CHANNELS = (64, 128, 256, 512, 512)
EMBED_DIM = 512
TRIPLET_MARGIN = 0.2

# entries: int = 3x3 conv to that width, "P" = 2x2 max pool
_LAYOUTS = {
    "compact": [[64], ["P", 128], ["P", 256], ["P", 512], ["P", 512]],
    "vgg19": [[64], [64, "P", 128], [128, "P", 256], [256, 256, 256, "P", 512], [512, 512, 512, "P", 512]],
}
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def _seeded_init(module: nn.Module, rng: RandomSource) -> None:
    gen = rng.torch_generator()
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


class FrozenMixin:
    frozen: bool = False

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # a frozen encoder never leaves eval mode
        return super().train(False if self.frozen else mode)


class PerceptualEncoder(FrozenMixin, nn.Module):
    def __init__(self, layout: str = "compact", rng: RandomSource | None = None):
        super().__init__()
        if layout not in _LAYOUTS:
            raise ValueError(f"unknown encoder layout {layout!r}")
        self.layout = layout
        self.in_channels = 3 if layout == "vgg19" else 1
        layers: list[nn.Module] = []
        self.taps: list[int] = []
        width = self.in_channels
        for stage in _LAYOUTS[layout]:
            for item in stage:
                if item == "P":
                    layers.append(nn.MaxPool2d(2, 2))
                else:
                    layers.append(nn.Conv2d(width, item, 3, padding=1, padding_mode="reflect"))
                    layers.append(nn.ReLU())
                    width = item
            self.taps.append(len(layers) - 1)
        self.features = nn.Sequential(*layers)
        _seeded_init(self, rng or RandomSource(0))
        if layout == "vgg19":
            self.register_buffer("_mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("_std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``x`` is ``(N, 1, H, W)`` in [0,1]; returns the five stage activations."""
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (N,1,H,W), got {tuple(x.shape)}")
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ShapeError(f"input {x.shape[-2]}x{x.shape[-1]} is not divisible by 16")
        if self.in_channels == 3:
            x = (x.expand(-1, 3, -1, -1) - self._mean) / self._std
        out = []
        taps = iter(self.taps)
        tap = next(taps)
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i == tap:
                out.append(x)
                tap = next(taps, None)
                if tap is None:
                    break
        return out


def load_vgg19_features(enc: PerceptualEncoder, path: os.PathLike | str) -> PerceptualEncoder:
    """Load torchvision-style VGG-19 weights (``features.N.*`` keys) saved with ``torch.save``."""
    if enc.layout != "vgg19":
        raise ValueError("pretrained VGG-19 weights need the vgg19 layout")
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = enc.state_dict()
    wanted = {k: v for k, v in state.items() if k in own and k.startswith("features.")}
    missing = [k for k in own if k.startswith("features.") and k not in wanted]
    if missing:
        raise ShapeError(f"pretrained file lacks {missing[:3]}...")
    enc.load_state_dict({**own, **wanted})
    return enc


def _as_batch(img: GrayImage | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    if isinstance(img, GrayImage):
        return img.to_tensor(dtype)
    t = torch.as_tensor(img)
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def encode_pyramid(enc: PerceptualEncoder, img: GrayImage | torch.Tensor) -> list[torch.Tensor]:
    """Single-image pyramid: five ``(C, h, w)`` tensors."""
    dtype = next(enc.parameters()).dtype
    with torch.no_grad():
        return [f[0] for f in enc(_as_batch(img, dtype))]


class IdentityEncoder(FrozenMixin, nn.Module):
    """Conv trunk, average pooling to a coarse ``grid x grid`` layout, linear projection to a unit 512-vector.

    Keeping a coarse spatial layout lets the embedding tell apart fingers whose
    ridge statistics match but whose minutiae sit in different places; fully
    global pooling collapses those. SiLU keeps the map smooth, which the finite-difference checks on the
    identity loss rely on.
    """

    def __init__(self, width: int = 32, grid: int = 4, rng: RandomSource | None = None):
        super().__init__()
        w = width
        self.grid = grid
        self.trunk = nn.Sequential(
            nn.Conv2d(1, w, 5, stride=2, padding=2), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(4 * w, 8 * w, 3, stride=1, padding=1), nn.SiLU(),
        )
        self.project = nn.Linear(8 * w * grid * grid, EMBED_DIM)
        _seeded_init(self, rng or RandomSource(1))
        self.report: PretrainReport | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (N,1,H,W), got {tuple(x.shape)}")
        h = F.adaptive_avg_pool2d(self.trunk(x), self.grid).flatten(1)
        return F.normalize(self.project(h), dim=1, eps=1e-12)


def embed_identity(v: IdentityEncoder, img: GrayImage | torch.Tensor) -> np.ndarray:
    dtype = next(v.parameters()).dtype
    with torch.no_grad():
        return v(_as_batch(img, dtype))[0].to(torch.float64).numpy()


def embed_batch(v: IdentityEncoder, images: Sequence[GrayImage], chunk: int = 32) -> np.ndarray:
    dtype = next(v.parameters()).dtype
    rows = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            x = torch.cat([im.to_tensor(dtype) for im in images[i : i + chunk]])
            rows.append(v(x).to(torch.float64).numpy())
    return np.concatenate(rows) if rows else np.zeros((0, EMBED_DIM))


def augment(x: torch.Tensor, gen: torch.Generator, strength: float = 1.0) -> torch.Tensor:
    """Random rotation/translation/scale plus contrast, noise and an occluding patch."""
    n, _, h, w = x.shape
    u = lambda *s: torch.rand(*s, generator=gen, dtype=x.dtype)  # noqa: E731
    angle = (u(n) - 0.5) * math.radians(40) * strength
    scale = 1.0 + (u(n) - 0.5) * 0.2 * strength
    shift = (u(n, 2) - 0.5) * 0.16 * strength
    cos, sin = torch.cos(angle) / scale, torch.sin(angle) / scale
    theta = torch.stack([torch.stack([cos, -sin, shift[:, 0]], 1), torch.stack([sin, cos, shift[:, 1]], 1)], 1)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    contrast = 1.0 - u(n, 1, 1, 1) * 0.6 * strength
    y = (y - 0.5) * contrast + 0.5 + (u(n, 1, 1, 1) - 0.5) * 0.2 * strength
    y = y + torch.randn(y.shape, generator=gen, dtype=x.dtype) * 0.05 * strength * u(n, 1, 1, 1)
    # one rectangular occluder per image covering up to a quarter of each side
    ph, pw = max(1, h // 4), max(1, w // 4)
    ys = (u(n) * (h - ph)).long()
    xs = (u(n) * (w - pw)).long()
    fill = u(n)
    occlude = u(n) < 0.5 * strength
    for i in range(n):
        if occlude[i]:
            y[i, :, ys[i] : ys[i] + ph, xs[i] : xs[i] + pw] = fill[i]
    return y.clamp(0.0, 1.0)


@dataclass
class PretrainReport:
    train_losses: list = field(default_factory=list)
    heldout_initial: float = float("nan")
    heldout_final: float = float("nan")


def _class_groups(images: Sequence[GrayImage], labels: Sequence[object]):
    groups: dict = {}
    for img, lab in zip(images, labels):
        groups.setdefault(lab, []).append(img.to_tensor())
    return [torch.cat(g) for g in groups.values()]


def _triplets(groups, gen: torch.Generator, batch: int):
    n_cls = len(groups)
    a_cls = torch.randint(0, n_cls, (batch,), generator=gen)
    off = torch.randint(1, n_cls, (batch,), generator=gen)
    n_cls_idx = (a_cls + off) % n_cls
    anchors, positives, negatives = [], [], []
    for a, b in zip(a_cls.tolist(), n_cls_idx.tolist()):
        ga, gb = groups[a], groups[b]
        i, j = torch.randint(0, len(ga), (2,), generator=gen).tolist()
        k = int(torch.randint(0, len(gb), (1,), generator=gen))
        anchors.append(ga[i])
        positives.append(ga[j])
        negatives.append(gb[k])
    return torch.stack(anchors), torch.stack(positives), torch.stack(negatives)


def _triplet_loss(v, a, p, n, gen):
    ea, ep, en = v(augment(a, gen)), v(augment(p, gen)), v(augment(n, gen))
    return F.triplet_margin_loss(ea, ep, en, margin=TRIPLET_MARGIN)


def pretrain_identity(
    v: IdentityEncoder,
    corpus: Sequence[FingerprintRecord],
    rng: RandomSource,
    steps: int,
    resolution: int,
    **kwargs,
) -> IdentityEncoder:
    """Load sensor records at ``resolution`` and run ``fit_identity`` keyed by (subject, finger)."""
    cache = ImageCache(resolution)
    images = [cache.get(r.image_path) for r in corpus]
    return fit_identity(v, images, [r.key for r in corpus], rng, steps, **kwargs)


def fit_identity(
    v: IdentityEncoder,
    images: Sequence[GrayImage],
    labels: Sequence[object],
    rng: RandomSource,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    heldout_batches: int = 4,
) -> IdentityEncoder:
    """Triplet-margin training over (subject, finger) classes, then freeze.

    Positives are two independently augmented views drawn from the same class,
    so a class with a single image still yields valid triplets.
    ``v.report`` records the per-step loss and a held-out loss measured on
    augmentations drawn from a separate stream before and after training.
    """
    groups = _class_groups(images, labels)
    if len(groups) < 2:
        raise InsufficientClasses(f"need >= 2 classes, got {len(groups)}")
    report = PretrainReport()
    eval_rng = rng.fork("heldout")

    def heldout() -> float:
        gen = eval_rng.fork("fixed").torch_generator()
        with torch.no_grad():
            vals = [float(_triplet_loss(v, *_triplets(groups, gen, batch_size), gen)) for _ in range(heldout_batches)]
        return float(np.mean(vals))

    v.frozen = False
    for p in v.parameters():
        p.requires_grad_(True)
    if steps > 0:
        report.heldout_initial = heldout()
        gen = rng.fork("train").torch_generator()
        opt = torch.optim.Adam(v.parameters(), lr=lr)
        v.train()
        for _ in range(steps):
            loss = _triplet_loss(v, *_triplets(groups, gen, batch_size), gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            report.train_losses.append(float(loss.detach()))
        v.eval()
        report.heldout_final = heldout()
    v.report = report
    return v.freeze()
