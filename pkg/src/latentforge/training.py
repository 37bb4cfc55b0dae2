"""Content/style pairing, the decoder training loop, checkpoints and the toy ridge corpus."""

from __future__ import annotations

import configparser
import logging
import math
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .checkpoint import checksum, load_tensors, save_tensors
from .core import FingerprintRecord, GrayImage, ImageCache, Kind, PairSample, RandomSource, save_image
from .encoders import IdentityEncoder, PerceptualEncoder, fit_identity, load_vgg19_features
from .errors import MissingFile, NoMatedPairs, TrainingDiverged
from .losses import (
    LossBreakdown,
    LossWeights,
    append_log,
    global_style_loss,
    identity_loss,
    local_feature_loss,
    read_log,
    weighted_sum,
)
from .style_transfer import Decoder, StyleTransferModel, build_model, load_model, save_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    learning_rate: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    resolution: int = 256
    seed: int = 0
    checkpoint_every: int = 100
    encoder_layout: str = "compact"
    decoder_width: int = 64
    identity_width: int = 32
    identity_grid: int = 4
    identity_steps: int = 300
    identity_lr: float = 1e-3
    encoder_pretrain_steps: int = 300
    encoder_weights: str | None = None

    def __post_init__(self):
        if self.resolution % 16:
            raise ValueError(f"resolution {self.resolution} must be divisible by 16")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.steps < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class TrainState:
    model: StyleTransferModel
    identity: IdentityEncoder
    optimizer: torch.optim.Optimizer
    pairs: list
    step: int = 0
    loss_history: list = field(default_factory=list)

    def frozen_checksums(self) -> tuple[str, str]:
        return checksum(self.model.encoder), checksum(self.identity)


# ---------------------------------------------------------------------------
# pairing


def build_pairs(corpus: Sequence[FingerprintRecord], rng: RandomSource) -> list[PairSample]:
    """Mate every latent with a sensor print of the same (subject, finger).

    When a finger has several sensor prints, its latents take them round-robin
    in corpus order. The result is shuffled by ``rng``.
    """
    sensors: dict = {}
    for r in corpus:
        if r.kind is Kind.SENSOR:
            sensors.setdefault(r.key, []).append(r)
    pairs = []
    seen: dict = {}
    for r in corpus:
        if r.kind is Kind.LATENT and r.key in sensors:
            j = seen.get(r.key, 0)
            mates = sensors[r.key]
            pairs.append(PairSample(mates[j % len(mates)], r))
            seen[r.key] = j + 1
    if not pairs:
        raise NoMatedPairs("no (subject, finger) has both sensor and latent records")
    return [pairs[i] for i in rng.permutation(len(pairs))]


# ---------------------------------------------------------------------------
# model setup


def pretrain_perceptual(
    enc: PerceptualEncoder, images: Sequence[GrayImage], rng: RandomSource, steps: int, lr: float = 1e-3, batch_size: int = 4
) -> PerceptualEncoder:
    """Autoencoder pretraining of the perceptual encoder through a throwaway decoder, then freeze."""
    enc.frozen = False
    for p in enc.parameters():
        p.requires_grad_(True)
    enc.train()
    dec = Decoder(rng=rng.fork("ae-decoder"))
    opt = torch.optim.Adam(list(enc.parameters()) + list(dec.parameters()), lr=lr)
    data = torch.cat([im.to_tensor() for im in images])
    order = rng.fork("ae-order")
    for _ in range(steps):
        idx = torch.as_tensor(order.integers(0, len(data), batch_size))
        x = data[idx]
        pyr = enc(x)
        loss = torch.nn.functional.mse_loss(dec([pyr[2], pyr[3], pyr[4]]), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return enc.freeze()


def new_state(pairs: list, cfg: TrainConfig, identity: IdentityEncoder, model: StyleTransferModel | None = None) -> TrainState:
    rng = RandomSource(cfg.seed)
    if model is None:
        model = build_model(cfg.encoder_layout, cfg.decoder_width, rng.fork("model"))
    identity.freeze()
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate)
    return TrainState(model=model, identity=identity, optimizer=opt, pairs=pairs)


def prepare_model(corpus: Sequence[FingerprintRecord], cfg: TrainConfig, cache: ImageCache | None = None) -> StyleTransferModel:
    """Build the model with a usable frozen encoder.

    Given ``encoder_weights`` the vgg19 prefix is loaded from disk; otherwise the
    encoder is autoencoder-pretrained on the sensor prints for
    ``encoder_pretrain_steps`` steps. A randomly initialised encoder gives
    features that ignore ridge phase, and the decoder then learns blobs.
    """
    cache = cache or ImageCache(cfg.resolution)
    rng = RandomSource(cfg.seed).fork("model")
    enc = PerceptualEncoder(cfg.encoder_layout, rng.fork("encoder"))
    if cfg.encoder_weights:
        load_vgg19_features(enc, cfg.encoder_weights)
    elif cfg.encoder_pretrain_steps > 0:
        sensors = [cache.get(r.image_path) for r in corpus if r.kind is Kind.SENSOR]
        pretrain_perceptual(enc, sensors, rng.fork("ae"), cfg.encoder_pretrain_steps)
    return StyleTransferModel(enc.freeze(), Decoder(cfg.decoder_width, rng.fork("decoder")))


def prepare_identity(corpus: Sequence[FingerprintRecord], cfg: TrainConfig, cache: ImageCache | None = None) -> IdentityEncoder:
    cache = cache or ImageCache(cfg.resolution)
    rng = RandomSource(cfg.seed).fork("identity")
    sensors = [r for r in corpus if r.kind is Kind.SENSOR]
    v = IdentityEncoder(cfg.identity_width, cfg.identity_grid, rng.fork("init"))
    return fit_identity(v, [cache.get(r.image_path) for r in sensors], [r.key for r in sensors], rng, cfg.identity_steps, lr=cfg.identity_lr)


# ---------------------------------------------------------------------------
# optimisation


def batch_for_step(pairs: Sequence[PairSample], step: int, batch_size: int) -> list[PairSample]:
    n = len(pairs)
    return [pairs[(step * batch_size + i) % n] for i in range(batch_size)]


def compute_losses(model: StyleTransferModel, identity: IdentityEncoder, content: torch.Tensor, style: torch.Tensor, weights: LossWeights):
    with torch.no_grad():
        pyr_c = model.encoder(content)
        pyr_s = model.encoder(style)
        fused = model.fuse(pyr_c, pyr_s)
    cs = model.decoder(fused)
    pyr_cs = model.encoder(cs)
    gs = global_style_loss(pyr_cs, pyr_s)
    lf = local_feature_loss(pyr_cs, pyr_c, pyr_s)
    id_ = identity_loss(identity, cs, content)
    return weighted_sum(gs, lf, id_, weights), (gs, lf, id_)


def train_step(state: TrainState, batch: Sequence[PairSample], cfg: TrainConfig, cache: ImageCache | None = None) -> TrainState:
    """One optimizer update of the decoder; encoder and identity network stay frozen."""
    if not batch:
        raise ValueError("empty batch")
    cache = cache or ImageCache(cfg.resolution)
    content = torch.cat([cache.get(p.content.image_path).to_tensor() for p in batch])
    style = torch.cat([cache.get(p.style.image_path).to_tensor() for p in batch])
    state.model.decoder.train()
    total, (gs, lf, id_) = compute_losses(state.model, state.identity, content, style, cfg.weights)
    parts = LossBreakdown(*(float(x.detach()) for x in (gs, lf, id_, total)))
    if not all(math.isfinite(x) for x in (parts.gs, parts.lf, parts.id, parts.total)):
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {parts}", batch=list(batch))
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.loss_history.append(parts)
    state.step += 1
    return state


def train(
    corpus: Sequence[FingerprintRecord],
    cfg: TrainConfig,
    out_dir: os.PathLike | str | None = None,
    identity: IdentityEncoder | None = None,
    resume: TrainState | None = None,
    cache: ImageCache | None = None,
) -> TrainState:
    """Run ``cfg.steps`` total steps, checkpointing under ``out_dir`` when given.

    ``resume`` continues a state restored with ``load_checkpoint``; steps
    already taken count towards ``cfg.steps``.
    """
    cache = cache or ImageCache(cfg.resolution)
    if resume is not None:
        state = resume
    else:
        pairs = build_pairs(corpus, RandomSource(cfg.seed).fork("pairs"))
        if identity is None:
            identity = prepare_identity(corpus, cfg, cache)
        state = new_state(pairs, cfg, identity, prepare_model(corpus, cfg, cache))
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "losses.csv" if out else None
    if out is not None and resume is None:
        out.mkdir(parents=True, exist_ok=True)
        if log_path.exists():
            log_path.unlink()
        save_checkpoint(state, cfg, out / f"step_{state.step}")
    while state.step < cfg.steps:
        batch = batch_for_step(state.pairs, state.step, cfg.batch_size)
        train_step(state, batch, cfg, cache)
        if log_path is not None:
            append_log(log_path, state.step, state.loss_history[-1])
        if out is not None and (state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps):
            save_checkpoint(state, cfg, out / f"step_{state.step}")
        if state.step % 50 == 0:
            log.info("step %d total %.5f", state.step, state.loss_history[-1].total)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_tensors(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for idx, slots in opt.state_dict()["state"].items():
        for key, value in slots.items():
            out[f"{idx}.{key}"] = torch.as_tensor(value)
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    state: dict = {}
    for name, t in tensors.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = t
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def save_identity(v: IdentityEncoder, directory: os.PathLike | str) -> Path:
    directory = Path(directory)
    save_tensors(v.state_dict(), directory)
    (directory / "identity.txt").write_text(
        f"[identity]\nwidth = {v.trunk[0].out_channels}\ngrid = {v.grid}\n", encoding="utf-8"
    )
    return directory


def load_identity(directory: os.PathLike | str) -> IdentityEncoder:
    directory = Path(directory)
    meta = configparser.ConfigParser()
    if not meta.read(directory / "identity.txt"):
        raise MissingFile(f"no identity.txt in {directory}")
    v = IdentityEncoder(int(meta["identity"]["width"]), int(meta["identity"]["grid"]))
    v.load_state_dict(load_tensors(directory))
    return v.freeze()


def save_checkpoint(state: TrainState, cfg: TrainConfig, directory: os.PathLike | str) -> Path:
    directory = Path(directory)
    if directory.exists():
        shutil.rmtree(directory)
    save_model(state.model, directory / "model")
    save_identity(state.identity, directory / "identity")
    save_tensors(_optimizer_tensors(state.optimizer), directory / "optimizer")
    with open(directory / "losses.csv", "w", encoding="utf-8") as fh:
        fh.write("step,gs,lf,id,total\n")
        for i, parts in enumerate(state.loss_history, start=1):
            fh.write(parts.csv_row(i) + "\n")
    pairs = "\n".join(f"{p.content.image_path.as_posix()}|{p.style.image_path.as_posix()}" for p in state.pairs)
    (directory / "pairs.txt").write_text(pairs + "\n", encoding="utf-8")
    (directory / "state.txt").write_text(f"step = {state.step}\nseed = {cfg.seed}\n", encoding="utf-8")
    return directory


def read_state_file(directory: os.PathLike | str) -> dict[str, int]:
    path = Path(directory) / "state.txt"
    if not path.is_file():
        raise MissingFile(f"no state.txt in {directory}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = int(v)
    return out


def load_checkpoint(directory: os.PathLike | str, cfg: TrainConfig, corpus: Sequence[FingerprintRecord]) -> TrainState:
    """Restore a training state; pairs are matched back to ``corpus`` records by path."""
    directory = Path(directory)
    meta = read_state_file(directory)
    model = load_model(directory / "model")
    identity = load_identity(directory / "identity")
    by_path = {r.image_path.as_posix(): r for r in corpus}
    pairs = []
    for line in (directory / "pairs.txt").read_text(encoding="utf-8").splitlines():
        if line:
            c, s = line.split("|")
            pairs.append(PairSample(by_path[c], by_path[s]))
    state = new_state(pairs, cfg, identity, model)
    _restore_optimizer(state.optimizer, load_tensors(directory / "optimizer"))
    state.step = meta["step"]
    state.loss_history = read_log(directory / "losses.csv")
    return state


def latest_checkpoint(out_dir: os.PathLike | str) -> Path:
    steps = sorted(Path(out_dir).glob("step_*"), key=lambda p: int(p.name.split("_")[1]))
    if not steps:
        raise MissingFile(f"no step_<N> checkpoints under {out_dir}")
    return steps[-1]


# ---------------------------------------------------------------------------
# toy ridge corpus


def ridge_field(resolution: int, rng: RandomSource) -> np.ndarray:
    """Ridge pattern from a warped planar phase, values in [0, 1].

    The warp is kept gentle enough that the local ridge period never falls
    below about half its base value, so nothing aliases at 64 px. Spiral phase
    terms ``+-atan2`` at random points create ridge endings/bifurcations, which
    give every finger its own minutiae layout.
    """
    n = resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(0.11, 0.14)
    phase = 2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period
    budget = 0.5 * 2 * np.pi / period
    for _ in range(2):
        k = rng.uniform(0.5, 1.5)
        direction = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0) * budget / (2 * 2 * np.pi * k)
        phase = phase + amp * np.sin(2 * np.pi * k * (xx * np.cos(direction) + yy * np.sin(direction)) + rng.uniform(0, 2 * np.pi))
    for _ in range(int(rng.integers(4, 9))):
        mx, my = rng.uniform(0.2, 0.8, 2)
        phase = phase + rng.choice([-1.0, 1.0]) * np.arctan2(yy - my, xx - mx)
    ridges = 0.5 + 0.5 * np.cos(phase + rng.uniform(0, 2 * np.pi))
    # elliptical fingertip mask with soft edge; outside is white paper
    rx, ry = rng.uniform(0.38, 0.46), rng.uniform(0.42, 0.49)
    r = np.sqrt(((xx - 0.5) / rx) ** 2 + ((yy - 0.5) / ry) ** 2)
    mask = np.clip((1.0 - r) * 8.0, 0.0, 1.0)
    img = mask * (0.1 + 0.8 * ridges) + (1 - mask) * 0.95
    return np.clip(img, 0.0, 1.0)


def degrade_latent(clean: np.ndarray, rng: RandomSource) -> np.ndarray:
    """Contrast loss, smooth stains, occluding patches and grain."""
    n = clean.shape[0]
    c = rng.uniform(0.3, 0.6)
    out = 0.5 + c * (clean - 0.5) + rng.uniform(-0.1, 0.1)
    stain = gaussian_filter(rng.normal(0, 1, clean.shape), n / 8)
    out = out + 0.15 * stain / (np.abs(stain).max() + 1e-12)
    for _ in range(int(rng.integers(1, 4))):
        h, w = (rng.uniform(0.15, 0.35, 2) * n).astype(int)
        y, x = int(rng.integers(0, n - h)), int(rng.integers(0, n - w))
        out[y : y + h, x : x + w] = rng.uniform(0.3, 0.9)
    out = out + rng.normal(0, 0.03, clean.shape)
    return np.clip(out, 0.0, 1.0)


def make_toy_corpus(
    n_fingers: int, per_finger: int, resolution: int, rng: RandomSource, root: os.PathLike | str
) -> list[FingerprintRecord]:
    """Write ``n_fingers * per_finger`` images under ``root`` in the ingest layout.

    Each finger gets one clean sensor print (index 0) and ``per_finger - 1``
    degraded latent variants.
    """
    if n_fingers < 2:
        raise ValueError("toy corpus needs at least 2 fingers")
    if per_finger < 1:
        raise ValueError("per_finger must be >= 1")
    root = Path(root)
    records = []
    for i in range(n_fingers):
        frng = rng.fork("finger", i)
        clean = ridge_field(resolution, frng.fork("ridges"))
        subject, finger = f"S{i:03d}", "F1"
        sensor = clean + frng.fork("grain").normal(0, 0.01, clean.shape)
        path = root / "sensor" / f"{subject}_{finger}_0.png"
        save_image(GrayImage(np.clip(sensor, 0, 1)), path)
        records.append(FingerprintRecord(path, subject, finger, Kind.SENSOR))
        for j in range(1, per_finger):
            path = root / "latent" / f"{subject}_{finger}_{j}.png"
            save_image(GrayImage(degrade_latent(clean, frng.fork("latent", j))), path)
            records.append(FingerprintRecord(path, subject, finger, Kind.LATENT))
    return sorted(records, key=lambda r: (r.kind.value, r.image_path.as_posix()))


def make_toy_backgrounds(
    n_per_style: int, size: int, rng: RandomSource, root: os.PathLike | str
) -> dict[str, list[Path]]:
    """Plain (smooth surface) and textured (surface with printed glyph rows) backgrounds."""
    root = Path(root)
    out: dict[str, list[Path]] = {"plain": [], "textured": []}
    for style in out:
        for k in range(n_per_style):
            brng = rng.fork("background", style, k)
            base = gaussian_filter(brng.normal(0, 1, (size, size)), size / 10)
            base = 0.75 + 0.12 * base / (np.abs(base).max() + 1e-12)
            base = base + brng.normal(0, 0.02, base.shape)
            if style == "textured":
                line_h = max(4, size // 12)
                for top in range(line_h // 2, size - line_h, int(line_h * 1.6)):
                    x = int(brng.integers(0, line_h))
                    while x < size - line_h:
                        gw = int(brng.integers(max(2, line_h // 3), line_h))
                        if brng.uniform() < 0.85:
                            base[top : top + line_h - 1, x : x + gw] -= brng.uniform(0.35, 0.6)
                        x += gw + int(brng.integers(1, max(2, line_h // 2)))
            path = root / style / f"{style}_{k:02d}.png"
            save_image(GrayImage(np.clip(base, 0, 1)), path)
            out[style].append(path)
    return out


def loss_drop(history: Sequence[LossBreakdown], window: int = 10) -> float:
    """Fractional decrease of the mean total loss, last ``window`` steps vs the first."""
    totals = np.array([h.total for h in history])
    first, last = totals[:window].mean(), totals[-window:].mean()
    return float(1.0 - last / first)


def with_steps(cfg: TrainConfig, steps: int) -> TrainConfig:
    return replace(cfg, steps=steps)
