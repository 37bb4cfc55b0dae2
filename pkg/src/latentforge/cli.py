"""``latentforge`` command-line entry point.

Every subcommand reads one ini-style config file (``--config``), applies the
``LATENTFORGE_SEED`` environment variable and then explicit flags on top, and
writes into ``output_dir`` under a lock file.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import os
import re
import shutil
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import filelock

from .blending import (
    ALPHA_MAX,
    ALPHA_MIN,
    DEFAULT_CROP,
    DEFAULT_SPECKLE_VARIANCE,
    STYLE_TAGS,
    GenerationRow,
    draw_blend_spec,
    generate_latent,
    library_from_records,
    read_generation_manifest,
    speckle_baseline_with_spec,
    write_generation_manifest,
)
from .core import (
    FingerprintRecord,
    ImageCache,
    Kind,
    RandomSource,
    read_manifest,
    records_of,
    save_image,
    write_manifest,
)
from .errors import ConfigError, LatentForgeError, LayoutError, UsageError
from .style_transfer import load_model
from .training import (
    TrainConfig,
    build_pairs,
    latest_checkpoint,
    load_identity,
    make_toy_backgrounds,
    make_toy_corpus,
    train,
)

log = logging.getLogger("latentforge")

SEED_ENV = "LATENTFORGE_SEED"
LOCK_NAME = ".latentforge.lock"
SET_TAGS = {"synthetic1": "plain", "synthetic2": "textured"}
_NAME_RE = re.compile(r"^([A-Za-z0-9-]+)_([A-Za-z0-9-]+)_(\d+)\.png$")

# config keys of the [train] section, in TrainConfig order
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("weights", "resolution", "seed")]


@dataclass
class PipelineConfig:
    resolution: int = 256
    seed: int = 0
    output_dir: Path = Path("latentforge_out")
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    speckle_variance: float = DEFAULT_SPECKLE_VARIANCE
    background_crop: int = DEFAULT_CROP
    background_crops: int = 16
    background_dirs: dict = field(default_factory=dict)
    quality_exe: Optional[str] = None
    matcher_exe: Optional[str] = None
    tool_pool: int = 4
    tool_timeout: float = 60.0
    histogram_bins: int = 20
    tsne_iter: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise ConfigError(f"need 0 <= alpha_min <= alpha_max <= 1, got {self.alpha_min}, {self.alpha_max}")
        if self.resolution % 16 or self.resolution < 32:
            raise ConfigError(f"resolution {self.resolution} must be >= 32 and divisible by 16")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed {self.seed} is not an unsigned 64-bit integer")
        if self.speckle_variance < 0:
            raise ConfigError("speckle_variance must be >= 0")
        unknown = set(self.background_dirs) - set(STYLE_TAGS)
        if unknown:
            raise ConfigError(f"unknown background styles {sorted(unknown)}; use {STYLE_TAGS}")

    def background_dir(self, style: str) -> Path:
        return Path(self.background_dirs.get(style, self.output_dir / "backgrounds" / style))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["pipeline"] = {
            "resolution": str(self.resolution),
            "seed": str(self.seed),
            "output_dir": str(self.output_dir),
            "alpha_min": repr(self.alpha_min),
            "alpha_max": repr(self.alpha_max),
            "speckle_variance": repr(self.speckle_variance),
            "background_crop": str(self.background_crop),
            "background_crops": str(self.background_crops),
        }
        cp["backgrounds"] = {s: str(self.background_dir(s)) for s in STYLE_TAGS}
        cp["tools"] = {
            "quality_exe": self.quality_exe or "",
            "matcher_exe": self.matcher_exe or "",
            "pool_size": str(self.tool_pool),
            "timeout": repr(self.tool_timeout),
        }
        cp["evaluate"] = {"histogram_bins": str(self.histogram_bins), "tsne_iter": str(self.tsne_iter)}
        t = self.train
        cp["train"] = {k: "" if getattr(t, k) is None else str(getattr(t, k)) for k in _TRAIN_KEYS}
        cp["train"].update(
            lambda_g=repr(t.weights.lambda_g), lambda_l=repr(t.weights.lambda_l), lambda_i=repr(t.weights.lambda_i)
        )
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _is_path_key(sec: str, key: str, value: str) -> bool:
    if sec == "backgrounds" or (sec, key) in (("pipeline", "output_dir"), ("train", "encoder_weights")):
        return True
    # a bare executable name is looked up on PATH, anything with a slash is a path
    return key.endswith("_exe") and "/" in value


def _flatten(cp: configparser.ConfigParser, base: Path) -> dict[str, str]:
    """Config file to ``section.key -> raw string``; relative paths resolve against the file."""
    out = {}
    for sec in cp.sections():
        for k, v in cp[sec].items():
            if v and _is_path_key(sec, k, v) and not Path(v).is_absolute():
                v = str(base / v)
            out[f"{sec}.{k}"] = v
    return out


_KNOWN = {
    "pipeline": {"resolution", "seed", "output_dir", "alpha_min", "alpha_max", "speckle_variance", "background_crop", "background_crops"},
    "tools": {"quality_exe", "matcher_exe", "pool_size", "timeout"},
    "evaluate": {"histogram_bins", "tsne_iter"},
    "train": set(_TRAIN_KEYS) | {"lambda_g", "lambda_l", "lambda_i"},
}


def build_config(values: dict[str, str]) -> PipelineConfig:
    for key in values:
        sec, _, name = key.partition(".")
        if sec == "backgrounds":
            continue
        if sec not in _KNOWN or name not in _KNOWN[sec]:
            raise ConfigError(f"unknown config key {key}")
    d = PipelineConfig.__dataclass_fields__
    p = {}
    for name in _KNOWN["pipeline"]:
        raw = values.get(f"pipeline.{name}")
        if raw is None:
            continue
        if name == "output_dir":
            p[name] = Path(raw)
        else:
            p[name] = _coerce(raw, d[name].default, f"pipeline.{name}")
    tool_map = {"quality_exe": "quality_exe", "matcher_exe": "matcher_exe", "pool_size": "tool_pool", "timeout": "tool_timeout"}
    for key, attr in tool_map.items():
        raw = values.get(f"tools.{key}")
        if raw is None:
            continue
        p[attr] = (raw or None) if key.endswith("_exe") else _coerce(raw, d[attr].default, f"tools.{key}")
    for name in _KNOWN["evaluate"]:
        if f"evaluate.{name}" in values:
            p[name] = _coerce(values[f"evaluate.{name}"], d[name].default, f"evaluate.{name}")
    p["background_dirs"] = {k.split(".", 1)[1]: Path(v) for k, v in values.items() if k.startswith("backgrounds.") and v}

    base = TrainConfig()
    t = {}
    for name in _TRAIN_KEYS:
        raw = values.get(f"train.{name}")
        if raw is None:
            continue
        default = getattr(base, name)
        t[name] = (raw or None) if default is None else _coerce(raw, default, f"train.{name}")
    lam = {k: _coerce(values[f"train.{k}"], 1.0, f"train.{k}") for k in ("lambda_g", "lambda_l", "lambda_i") if f"train.{k}" in values}
    try:
        weights = replace(base.weights, **lam)
        cfg = PipelineConfig(**p)
        cfg.train = replace(base, **t, weights=weights, resolution=cfg.resolution, seed=cfg.seed)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, LatentForgeError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: Optional[str], overrides: Sequence[str] = (), env: Optional[dict] = None) -> PipelineConfig:
    """Effective configuration: file, then ``LATENTFORGE_SEED``, then ``--set`` style overrides."""
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        cp = configparser.ConfigParser()
        try:
            cp.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        values.update(_flatten(cp, p.parent))
    if env.get(SEED_ENV):
        values["pipeline.seed"] = env[SEED_ENV]
    for item in overrides:
        key, eq, raw = item.partition("=")
        if not eq or "." not in key:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        values[key.strip()] = raw.strip()
    return build_config(values)


# ---------------------------------------------------------------------------
# commands


def parse_layout_path(path: Path, root: Path) -> FingerprintRecord:
    rel = path.relative_to(root)
    parts = rel.parts
    if len(parts) < 2:
        raise LayoutError(f"{path}: files must live under <kind>/")
    try:
        kind = Kind(parts[0])
    except ValueError:
        raise LayoutError(f"{path}: unknown kind directory {parts[0]!r}") from None
    if path.suffix.lower() != ".png":
        raise LayoutError(f"{path}: only .png images are ingested")
    if kind is Kind.BACKGROUND:
        if len(parts) > 3:
            raise LayoutError(f"{path}: background images nest at most one surface directory")
        surface = parts[1] if len(parts) == 3 else None
        if surface and "," in surface:
            raise LayoutError(f"{path}: surface name may not contain commas")
        return FingerprintRecord(path, "", "", kind, surface)
    m = _NAME_RE.match(parts[-1])
    if len(parts) != 2 or not m:
        raise LayoutError(f"{path}: expected {kind.value}/<subject>_<finger>_<idx>.png")
    return FingerprintRecord(path, m.group(1), m.group(2), kind)


def _sort_key(r: FingerprintRecord):
    return (r.kind.value, r.image_path.as_posix())


def cmd_ingest(directory: Path, out_manifest: Path) -> Path:
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    files = [p for p in sorted(root.rglob("*")) if p.is_file() and not p.name.startswith(".")]
    # a manifest kept next to the kind directories is not an image
    files = [p for p in files if not (p.parent == root and p.suffix.lower() == ".csv")]
    records = [parse_layout_path(p, root) for p in files]
    records.sort(key=_sort_key)
    write_manifest(records, out_manifest)
    counts = {k.value: len(records_of(records, k)) for k in Kind}
    print(" ".join(f"{k}={n}" for k, n in counts.items()))
    return Path(out_manifest)


def cmd_toycorpus(cfg: PipelineConfig, n_fingers: int, per_finger: int, n_backgrounds: int = 4) -> Path:
    """Toy corpus plus plain/textured background directories under ``output_dir``."""
    out = cfg.output_dir
    root = out / "toycorpus"
    for d in (root, out / "backgrounds"):
        if d.exists():
            shutil.rmtree(d)
    rng = RandomSource(cfg.seed)
    records = make_toy_corpus(n_fingers, per_finger, cfg.resolution, rng.fork("toycorpus"), root)
    # backgrounds twice the pipeline size so crops have room to move
    make_toy_backgrounds(n_backgrounds, 2 * cfg.resolution, rng.fork("backgrounds"), out / "backgrounds")
    return write_manifest(sorted(records, key=_sort_key), root / "manifest.csv")


def _corpus(manifest: Path) -> list[FingerprintRecord]:
    if not Path(manifest).is_file():
        raise UsageError(f"manifest not found: {manifest}")
    return read_manifest(manifest)


def cmd_train(cfg: PipelineConfig, manifest: Path) -> Path:
    corpus = _corpus(manifest)
    out = cfg.output_dir / "train"
    if out.exists():
        shutil.rmtree(out)
    state = train(corpus, cfg.train, out_dir=out, cache=ImageCache(cfg.resolution))
    final = out / f"step_{state.step}"
    log.info("trained %d steps, checkpoint %s", state.step, final)
    return final


def _checkpoint(cfg: PipelineConfig, checkpoint: Optional[Path]) -> Path:
    ck = Path(checkpoint) if checkpoint else latest_checkpoint(cfg.output_dir / "train")
    if not (ck / "model").is_dir():
        raise UsageError(f"not a checkpoint directory: {ck}")
    return ck


def _background_library(cfg: PipelineConfig, style: str, rng: RandomSource):
    d = cfg.background_dir(style)
    files = sorted(d.glob("*.png")) if d.is_dir() else []
    records = [FingerprintRecord(p, "", "", Kind.BACKGROUND, style) for p in files]
    return library_from_records(records, style, cfg.background_crops, rng, cfg.background_crop, cfg.resolution)


def _fresh_set_dir(cfg: PipelineConfig, tag: str) -> Path:
    # regenerating a set replaces it wholesale so no image outlives its manifest row
    d = cfg.output_dir / tag
    if d.exists():
        shutil.rmtree(d)
    (d / "images").mkdir(parents=True)
    return d


def cmd_generate(cfg: PipelineConfig, checkpoint: Optional[Path], manifest: Path, set_tag: str, count: int) -> Path:
    if set_tag not in SET_TAGS:
        raise UsageError(f"set_tag must be one of {sorted(SET_TAGS)}")
    if count < 0:
        raise UsageError("count must be >= 0")
    corpus = _corpus(manifest)
    model = load_model(_checkpoint(cfg, checkpoint) / "model")
    rng = RandomSource(cfg.seed).fork("generate", set_tag)
    lib = _background_library(cfg, SET_TAGS[set_tag], rng.fork("library"))
    pairs = build_pairs(corpus, rng.fork("pairs"))
    cache = ImageCache(cfg.resolution)
    out = _fresh_set_dir(cfg, set_tag)
    rows = []
    for i in range(count):
        pair = pairs[i % len(pairs)]
        spec = draw_blend_spec(lib, rng.fork("image", i), cfg.alpha_min, cfg.alpha_max)
        img = generate_latent(model, cache.get(pair.content.image_path), cache.get(pair.style.image_path), lib, spec)
        path = out / "images" / f"{set_tag}_{i:05d}.png"
        save_image(img, path)
        rows.append(GenerationRow(path, pair.content.image_path, pair.style.image_path, spec.background_id, spec.alpha, spec.seed, set_tag))
    return write_generation_manifest(rows, out / "manifest.csv")


def cmd_baseline(cfg: PipelineConfig, manifest: Path, count: int, style: str = "plain") -> Path:
    """Speckle + blend set with no style transfer; backgrounds come from ``style``."""
    if count < 0:
        raise UsageError("count must be >= 0")
    corpus = _corpus(manifest)
    rng = RandomSource(cfg.seed).fork("generate", "baseline")
    lib = _background_library(cfg, style, rng.fork("library"))
    pairs = build_pairs(corpus, rng.fork("pairs"))
    cache = ImageCache(cfg.resolution)
    out = _fresh_set_dir(cfg, "baseline")
    rows = []
    for i in range(count):
        pair = pairs[i % len(pairs)]
        img, spec = speckle_baseline_with_spec(
            cache.get(pair.content.image_path), lib, cfg.speckle_variance, rng.fork("image", i), cfg.alpha_min, cfg.alpha_max
        )
        path = out / "images" / f"baseline_{i:05d}.png"
        save_image(img, path)
        rows.append(GenerationRow(path, pair.content.image_path, None, spec.background_id, spec.alpha, spec.seed, "baseline"))
    return write_generation_manifest(rows, out / "manifest.csv")


def cmd_evaluate(
    cfg: PipelineConfig,
    manifests: Sequence[Path],
    real_manifest: Optional[Path] = None,
    checkpoint: Optional[Path] = None,
    plot: bool = False,
) -> Path:
    from .evaluation import (
        DatasetEvaluation,
        EmbeddingMatcher,
        ExternalMatcher,
        embed_dataset,
        evaluation_report,
        genuine_pair_scores,
        make_quality_client,
        quality_scores,
    )

    if not manifests and real_manifest is None:
        raise UsageError("evaluate needs at least one manifest")
    for m in list(manifests) + ([real_manifest] if real_manifest else []):
        if not Path(m).is_file():
            raise UsageError(f"manifest not found: {m}")
    v = load_identity(_checkpoint(cfg, checkpoint) / "identity")
    cache = ImageCache(cfg.resolution)
    qclient = make_quality_client(cfg.quality_exe, use_proxy=cfg.quality_exe is None, pool_size=cfg.tool_pool)
    matcher = ExternalMatcher(cfg.matcher_exe, cfg.tool_timeout) if cfg.matcher_exe else EmbeddingMatcher(v, cfg.resolution)

    sets = []
    names: set = set()
    for m in manifests:
        rows = read_generation_manifest(m)
        name = rows[0].set_tag if rows else Path(m).parent.name
        while name in names:
            name += "_"
        names.add(name)
        images = [cache.get(r.synthetic_path) for r in rows]
        sets.append(
            DatasetEvaluation(
                name,
                quality=quality_scores(images, qclient),
                matches=genuine_pair_scores(rows, matcher),
                embeddings=embed_dataset(images, v),
            )
        )
    if real_manifest is not None:
        corpus = read_manifest(real_manifest)
        # real latents matched against a sensor print of the same finger
        sensors = {}
        for r in records_of(corpus, Kind.SENSOR):
            sensors.setdefault(r.key, r)
        latents = records_of(corpus, Kind.LATENT)
        rows = [GenerationRow(r.image_path, sensors[r.key].image_path, None, "", 1.0, 0, "real") for r in latents if r.key in sensors]
        images = [cache.get(r.image_path) for r in latents]
        sets.append(
            DatasetEvaluation(
                "real",
                quality=quality_scores(images, qclient),
                matches=genuine_pair_scores(rows, matcher),
                embeddings=embed_dataset(images, v),
                real=True,
            )
        )
    out = cfg.output_dir / "evaluation"
    if out.exists():
        shutil.rmtree(out)
    report = evaluation_report(sets, out, seed=cfg.seed, bins=cfg.histogram_bins, tsne_iter=cfg.tsne_iter)
    if plot:
        render_plots(out)
    return report


def render_plots(report_dir: Path) -> list[Path]:
    """PNG renderings of the quality histograms and the joint projection."""
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import read_report

    rep = read_report(report_dir / "report.txt")
    written = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in rep["report"]["sets"].split(","):
        hist = rep[f"set:{name}"].get("histogram_file", "none")
        if hist == "none":
            continue
        with open(report_dir / hist, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        centres = [(float(r["bin_low"]) + float(r["bin_high"])) / 2 for r in rows]
        ax.plot(centres, [float(r["mass"]) for r in rows], marker="o", label=name)
    ax.set_xlabel("quality score")
    ax.set_ylabel("fraction of images")
    ax.legend()
    fig.tight_layout()
    fig.savefig(report_dir / "quality.png", dpi=100)
    plt.close(fig)
    written.append(report_dir / "quality.png")
    if rep["report"].get("projection_file", "none") != "none":
        with open(report_dir / "projection.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(5, 5))
        for name in dict.fromkeys(r["label"] for r in rows):
            pts = [(float(r["x"]), float(r["y"])) for r in rows if r["label"] == name]
            ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=8, label=name)
        ax.legend()
        fig.tight_layout()
        fig.savefig(report_dir / "projection.png", dpi=100)
        plt.close(fig)
        written.append(report_dir / "projection.png")
    return written


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="ini-style config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--resolution", type=int)
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="latentforge", description="Synthetic latent fingerprint toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="index a directory laid out as <kind>/<subject>_<finger>_<idx>.png")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", help="manifest path (default <output_dir>/manifest.csv)")

    p = sub.add_parser("toycorpus", parents=[common], help="write a synthetic ridge corpus and toy backgrounds")
    p.add_argument("--n-fingers", type=int, default=8)
    p.add_argument("--per-finger", type=int, default=4)
    p.add_argument("--n-backgrounds", type=int, default=4)

    p = sub.add_parser("train", parents=[common], help="train the decoder on mated pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("generate", parents=[common], help="style transfer + background blending")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="step_<N> directory (default: latest under <output_dir>/train)")
    p.add_argument("--set-tag", choices=sorted(SET_TAGS), default="synthetic1")
    p.add_argument("--count", type=int, default=10)

    p = sub.add_parser("baseline", parents=[common], help="speckle noise + blending, no style transfer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--background-style", choices=STYLE_TAGS, default="plain")

    p = sub.add_parser("evaluate", parents=[common], help="quality, embedding and genuine-pair report")
    p.add_argument("--manifests", nargs="*", default=[], help="generation manifests")
    p.add_argument("--real", help="corpus manifest whose latents form the real reference set")
    p.add_argument("--checkpoint", help="checkpoint providing the identity encoder")
    p.add_argument("--plot", action="store_true", help="also render PNG plots")
    return ap


def _flag_overrides(args: argparse.Namespace) -> list[str]:
    out = []
    if args.seed is not None:
        out.append(f"pipeline.seed={args.seed}")
    if args.output_dir is not None:
        out.append(f"pipeline.output_dir={args.output_dir}")
    if args.resolution is not None:
        out.append(f"pipeline.resolution={args.resolution}")
    for flag, key in (("steps", "steps"), ("learning_rate", "learning_rate"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            out.append(f"train.{key}={getattr(args, flag)}")
    return out


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, list(args.overrides) + _flag_overrides(args))
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
        return 0
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(cfg.output_dir / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout:
        raise UsageError(f"{cfg.output_dir} is locked by another latentforge command") from None
    try:
        if args.command == "ingest":
            result = cmd_ingest(Path(args.dir), Path(args.out) if args.out else cfg.output_dir / "manifest.csv")
        elif args.command == "toycorpus":
            result = cmd_toycorpus(cfg, args.n_fingers, args.per_finger, args.n_backgrounds)
        elif args.command == "train":
            result = cmd_train(cfg, Path(args.manifest))
        elif args.command == "generate":
            result = cmd_generate(cfg, args.checkpoint, Path(args.manifest), args.set_tag, args.count)
        elif args.command == "baseline":
            result = cmd_baseline(cfg, Path(args.manifest), args.count, args.background_style)
        else:
            result = cmd_evaluate(cfg, [Path(m) for m in args.manifests], Path(args.real) if args.real else None, args.checkpoint, args.plot)
    finally:
        lock.release()
    print(result)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except LatentForgeError as exc:
        print(f"latentforge: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
