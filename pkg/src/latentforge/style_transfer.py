"""Attention-weighted adaptive normalization and the stylizing generator.

Feature maps are plain tensors, either ``(C, h, w)`` or batched ``(N, C, h, w)``;
every function here accepts both and returns the same rank it was given.
"""

from __future__ import annotations

import configparser
import os
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_tensors, save_tensors
from .core import GrayImage, RandomSource
from .encoders import STAGE_CHANNELS, PerceptualEncoder, _as_batch, _seeded_init
from .errors import ChannelMismatch, EmptyMap, MissingFile, ShapeError

EPS = 1e-5
FUSION_STAGES = (3, 4, 5)


class InstanceStats(NamedTuple):
    mean: torch.Tensor
    std: torch.Tensor


class AttnStats(NamedTuple):
    mean_map: torch.Tensor
    std_map: torch.Tensor


def _batched(f: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if f.dim() == 3:
        return f.unsqueeze(0), True
    if f.dim() == 4:
        return f, False
    raise ShapeError(f"feature map must be (C,h,w) or (N,C,h,w), got {tuple(f.shape)}")


def _floor_sqrt(var: torch.Tensor, eps: float) -> torch.Tensor:
    # sqrt(max(var, eps^2)) == max(eps, sqrt(max(var, 0))) and keeps a finite gradient at 0
    return torch.sqrt(torch.clamp(var, min=eps * eps))


def instance_stats(f: torch.Tensor, eps: float = EPS) -> InstanceStats:
    """Per-channel spatial mean and population std (floored at ``eps``)."""
    x, squeeze = _batched(f)
    if x.shape[-1] * x.shape[-2] == 0:
        raise EmptyMap("feature map has no spatial positions")
    flat = x.flatten(2)
    mean = flat.mean(dim=2)
    var = (flat - mean.unsqueeze(2)).pow(2).mean(dim=2)
    std = _floor_sqrt(var, eps)
    if squeeze:
        return InstanceStats(mean[0], std[0])
    return InstanceStats(mean, std)


def instance_normalize(f: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    mean, std = instance_stats(f, eps)
    return (f - mean[..., None, None]) / std[..., None, None]


def adain(content: torch.Tensor, target: InstanceStats, eps: float = EPS) -> torch.Tensor:
    if content.shape[-3] != target.mean.shape[-1] or target.mean.shape != target.std.shape:
        raise ChannelMismatch(f"content has {content.shape[-3]} channels, target {tuple(target.mean.shape)}")
    return target.std[..., None, None] * instance_normalize(content, eps) + target.mean[..., None, None]


def _channel_normalize(x: torch.Tensor, eps: float) -> torch.Tensor:
    """Normalize each spatial position's channel vector to zero mean, unit std."""
    mean = x.mean(dim=1, keepdim=True)
    var = (x - mean).pow(2).mean(dim=1, keepdim=True)
    return (x - mean) / _floor_sqrt(var, eps)


def attention_matrix(content_feat: torch.Tensor, style_feat: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Row-stochastic ``(N, n_c, n_s)`` attention of content positions over style positions."""
    c, _ = _batched(content_feat)
    s, _ = _batched(style_feat)
    q = _channel_normalize(c, eps).flatten(2).transpose(1, 2)
    k = _channel_normalize(s, eps).flatten(2)
    return torch.softmax(torch.bmm(q, k), dim=-1)


def attention_weighted_stats(content_feat: torch.Tensor, style_feat: torch.Tensor, eps: float = EPS) -> AttnStats:
    c, squeeze = _batched(content_feat)
    s, _ = _batched(style_feat)
    if c.shape[1] != s.shape[1] or c.shape[0] != s.shape[0]:
        raise ChannelMismatch(f"content {tuple(c.shape)} vs style {tuple(s.shape)}")
    if c.shape[-1] * c.shape[-2] == 0 or s.shape[-1] * s.shape[-2] == 0:
        raise EmptyMap("attention needs non-empty content and style maps")
    attn = attention_matrix(c, s, eps)
    values = s.flatten(2).transpose(1, 2)  # (N, n_s, C)
    mean = torch.bmm(attn, values)
    var = torch.bmm(attn, values * values) - mean * mean
    std = _floor_sqrt(var, eps)
    shape = c.shape
    mean_map = mean.transpose(1, 2).reshape(shape)
    std_map = std.transpose(1, 2).reshape(shape)
    if squeeze:
        return AttnStats(mean_map[0], std_map[0])
    return AttnStats(mean_map, std_map)


def adaattn_block(content_feat: torch.Tensor, style_feat: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    stats = attention_weighted_stats(content_feat, style_feat, eps)
    return stats.std_map * instance_normalize(content_feat, eps) + stats.mean_map


def _conv(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")


class Decoder(nn.Module):
    """Mirror of encoder stages 5 -> 1 with skip inputs at stages 4 and 3.

    Nearest-neighbour upsampling between stages; the sigmoid head bounds the
    output to [0, 1].
    """

    def __init__(self, width: int = 64, rng: RandomSource | None = None):
        super().__init__()
        c3, c4, c5 = (STAGE_CHANNELS[s - 1] for s in FUSION_STAGES)
        w = width
        self.width = width
        self.from5 = nn.Sequential(_conv(c5, 4 * w), nn.ReLU())
        self.at4 = nn.Sequential(_conv(4 * w + c4, 4 * w), nn.ReLU())
        self.at3 = nn.Sequential(_conv(4 * w + c3, 2 * w), nn.ReLU())
        self.at2 = nn.Sequential(_conv(2 * w, w), nn.ReLU())
        self.head = nn.Sequential(_conv(w, w // 2), nn.ReLU(), _conv(w // 2, 1))
        _seeded_init(self, rng or RandomSource(2))
        with torch.no_grad():
            # start near mid-grey, away from the flat ends of the sigmoid
            self.head[-1].weight.mul_(0.01)

    def forward(self, fused: Sequence[torch.Tensor]) -> torch.Tensor:
        f3, f4, f5 = fused
        h5, w5 = f5.shape[-2:]
        if f4.shape[-2:] != (2 * h5, 2 * w5) or f3.shape[-2:] != (4 * h5, 4 * w5):
            raise ShapeError(f"inconsistent stage shapes {[tuple(f.shape) for f in fused]}")
        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")  # noqa: E731
        x = up(self.from5(f5))
        x = up(self.at4(torch.cat([x, f4], dim=1)))
        x = up(self.at3(torch.cat([x, f3], dim=1)))
        x = up(self.at2(x))
        return torch.sigmoid(self.head(x))


def decode(dec: Decoder, fused: Sequence[torch.Tensor]) -> GrayImage:
    batch = [_batched(f)[0] for f in fused]
    with torch.no_grad():
        return GrayImage.from_tensor(dec(batch)[0, 0])


class StyleTransferModel(nn.Module):
    """Frozen perceptual encoder, parameter-free attention fusion at stages 3-5, trainable decoder."""

    def __init__(self, encoder: PerceptualEncoder, decoder: Decoder, eps: float = EPS):
        super().__init__()
        if not encoder.frozen:
            encoder.freeze()
        self.encoder = encoder
        self.decoder = decoder
        self.eps = eps

    def fuse(self, pyr_c: Sequence[torch.Tensor], pyr_s: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return [adaattn_block(pyr_c[s - 1], pyr_s[s - 1], self.eps) for s in FUSION_STAGES]

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        pyr_c = self.encoder(content)
        pyr_s = self.encoder(style)
        return self.decoder(self.fuse(pyr_c, pyr_s))

    def trainable_parameters(self):
        return list(self.decoder.parameters())


def build_model(layout: str = "compact", decoder_width: int = 64, rng: RandomSource | None = None) -> StyleTransferModel:
    rng = rng or RandomSource(0)
    enc = PerceptualEncoder(layout, rng.fork("encoder")).freeze()
    return StyleTransferModel(enc, Decoder(decoder_width, rng.fork("decoder")))


def stylize(model: StyleTransferModel, F_c: GrayImage, F_s: GrayImage) -> GrayImage:
    if F_c.shape != F_s.shape:
        raise ShapeError(f"content {F_c.shape} and style {F_s.shape} must share the pipeline resolution")
    dtype = next(model.decoder.parameters()).dtype
    with torch.no_grad():
        out = model(_as_batch(F_c, dtype), _as_batch(F_s, dtype))
    return GrayImage.from_tensor(out[0, 0])


def save_model(model: StyleTransferModel, directory: os.PathLike | str) -> Path:
    directory = Path(directory)
    save_tensors(model.state_dict(), directory)
    meta = configparser.ConfigParser()
    meta["model"] = {
        "encoder_layout": model.encoder.layout,
        "decoder_width": str(model.decoder.width),
        "fusion_stages": ",".join(str(s) for s in FUSION_STAGES),
        "stage_channels": ",".join(str(c) for c in STAGE_CHANNELS),
        "eps": repr(model.eps),
    }
    with open(directory / "model.txt", "w", encoding="utf-8") as fh:
        meta.write(fh)
    return directory


def load_model(directory: os.PathLike | str) -> StyleTransferModel:
    directory = Path(directory)
    meta = configparser.ConfigParser()
    if not meta.read(directory / "model.txt"):
        raise MissingFile(f"no model.txt in {directory}")
    sec = meta["model"]
    model = StyleTransferModel(
        PerceptualEncoder(sec["encoder_layout"]).freeze(),
        Decoder(int(sec["decoder_width"])),
        eps=float(sec["eps"]),
    )
    model.load_state_dict(load_tensors(directory))
    return model
