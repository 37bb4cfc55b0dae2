"""Global style, local feature and identity losses and their weighted sum.

MSE is always the mean over elements, so values do not scale with resolution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

from .encoders import IdentityEncoder, _as_batch
from .errors import NegativeLoss, ShapeError, StageMismatch
from .style_transfer import EPS, adaattn_block, instance_stats

GLOBAL_STAGES = (2, 3, 4, 5)
LOCAL_STAGES = (3, 4, 5)
LOG_HEADER = "step,gs,lf,id,total"


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 3.0
    lambda_l: float = 10.0
    lambda_i: float = 1.0

    def __post_init__(self):
        if min(self.lambda_g, self.lambda_l, self.lambda_i) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    gs: float
    lf: float
    id: float
    total: float

    def csv_row(self, step: int) -> str:
        return f"{step},{self.gs!r},{self.lf!r},{self.id!r},{self.total!r}"


def _check_stages(pyrs: Sequence[Sequence[torch.Tensor]], stages: Iterable[int]) -> None:
    for s in stages:
        shapes = []
        for p in pyrs:
            if len(p) < s:
                raise StageMismatch(f"pyramid has {len(p)} stages, stage {s} requested")
            shapes.append(p[s - 1].shape[-3])
        if len(set(shapes)) != 1:
            raise StageMismatch(f"stage {s} channel counts differ: {shapes}")


def global_style_loss(pyr_cs, pyr_s, stages: Sequence[int] = GLOBAL_STAGES, eps: float = EPS) -> torch.Tensor:
    _check_stages([pyr_cs, pyr_s], stages)
    loss = torch.zeros((), dtype=pyr_cs[stages[0] - 1].dtype)
    for s in stages:
        m_cs, sd_cs = instance_stats(pyr_cs[s - 1], eps)
        m_s, sd_s = instance_stats(pyr_s[s - 1], eps)
        loss = loss + F.mse_loss(m_cs, m_s) + F.mse_loss(sd_cs, sd_s)
    return loss


def local_feature_loss(pyr_cs, pyr_c, pyr_s, stages: Sequence[int] = LOCAL_STAGES, eps: float = EPS) -> torch.Tensor:
    """MSE between the stylized features and the attention-fused content/style target."""
    _check_stages([pyr_cs, pyr_c, pyr_s], stages)
    loss = torch.zeros((), dtype=pyr_cs[stages[0] - 1].dtype)
    for s in stages:
        if pyr_cs[s - 1].shape != pyr_c[s - 1].shape:
            raise StageMismatch(f"stage {s}: {tuple(pyr_cs[s - 1].shape)} vs {tuple(pyr_c[s - 1].shape)}")
        target = adaattn_block(pyr_c[s - 1], pyr_s[s - 1], eps)
        loss = loss + F.mse_loss(pyr_cs[s - 1], target)
    return loss


def embedding_mse(e_cs: torch.Tensor, e_c: torch.Tensor) -> torch.Tensor:
    if e_cs.shape != e_c.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(e_cs.shape)} vs {tuple(e_c.shape)}")
    return F.mse_loss(e_cs, e_c)


def identity_loss(v: IdentityEncoder, F_cs, F_c) -> torch.Tensor:
    """MSE over the 512 components of V(F_cs) and V(F_c); accepts GrayImages or batched tensors."""
    dtype = next(v.parameters()).dtype
    x_cs = _as_batch(F_cs, dtype)
    x_c = _as_batch(F_c, dtype)
    if x_cs.shape != x_c.shape:
        raise ShapeError(f"image shapes differ: {tuple(x_cs.shape)} vs {tuple(x_c.shape)}")
    return embedding_mse(v(x_cs), v(x_c))


def weighted_sum(gs, lf, id_, w: LossWeights):
    return w.lambda_g * gs + w.lambda_l * lf + w.lambda_i * id_


def total_loss(parts: tuple[float, float, float], w: LossWeights = LossWeights()) -> LossBreakdown:
    gs, lf, id_ = (float(p) for p in parts)
    if min(gs, lf, id_) < 0:
        raise NegativeLoss(f"loss parts must be >= 0, got {(gs, lf, id_)}")
    return LossBreakdown(gs, lf, id_, weighted_sum(gs, lf, id_, w))


def append_log(path: os.PathLike | str, step: int, parts: LossBreakdown) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", encoding="utf-8") as fh:
        if new:
            fh.write(LOG_HEADER + "\n")
        fh.write(parts.csv_row(step) + "\n")


def read_log(path: os.PathLike | str) -> list[LossBreakdown]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError(f"{path}: not a loss log")
    out = []
    for line in lines[1:]:
        if line:
            _, gs, lf, id_, total = line.split(",")
            out.append(LossBreakdown(float(gs), float(lf), float(id_), float(total)))
    return out
