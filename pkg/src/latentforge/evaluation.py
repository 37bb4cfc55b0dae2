"""Quality distributions, embedding projections and genuine-pair match statistics.

External tools (an NFIQ 2.0 style quality scorer and a fingerprint matcher)
are driven as subprocesses; the internal proxies let everything run without
licensed software. Per-image tool failures are recorded on the score
objects, never raised.
"""

from __future__ import annotations

import configparser
import hashlib
import os
import shutil
import statistics
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import wasserstein_distance

from .blending import GenerationRow
from .core import GrayImage, ImageCache, save_image
from .encoders import IdentityEncoder, embed_batch
from .errors import (
    BadPerplexity,
    EmptyInput,
    MissingMate,
    ShapeError,
    ToolParseError,
    ToolUnavailable,
    TooFewPoints,
)

EXTERNAL_NFIQ2 = "external_nfiq2"
INTERNAL_PROXY = "internal_proxy"
EXTERNAL_MATCHER = "external_matcher"
EMBEDDING_PROXY = "embedding_proxy"

# a clean toy print at 64 px (ridge period ~8 px) scores around 75
QUALITY_SCALE = 800.0


@dataclass(frozen=True)
class QualityScore:
    value: Optional[int]
    source: str
    error: Optional[str] = None

    def __post_init__(self):
        if self.value is not None and not 0 <= self.value <= 100:
            raise ValueError(f"quality {self.value} outside 0..100")

    @property
    def ok(self) -> bool:
        return self.value is not None


@dataclass(frozen=True)
class MatchScore:
    value: Optional[float]
    source: str
    error: Optional[str] = None

    def __post_init__(self):
        if self.value is not None and not (np.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"match score must be finite and >= 0, got {self.value}")

    @property
    def ok(self) -> bool:
        return self.value is not None


@dataclass(frozen=True)
class ScoreSummary:
    mean: float
    std: float
    median: float
    n: int

    def row(self, name: str) -> str:
        """Table row ``name, mean, std, median`` with values rounded to 4 decimals."""
        return f"{name}, {round(self.mean, 4)}, {round(self.std, 4)}, {round(self.median, 4)}"


@dataclass(frozen=True)
class Projection2D:
    points: np.ndarray
    labels: tuple
    seed: int


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    masses: np.ndarray


# ---------------------------------------------------------------------------
# quality


def ridge_quality(img: GrayImage, sigma: float = 2.0) -> int:
    """Proxy quality: mean of gradient magnitude times local orientation coherence, mapped to 0..100."""
    x = img.pixels
    gx = ndimage.sobel(x, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(x, axis=0, mode="reflect") / 8.0
    jxx = ndimage.gaussian_filter(gx * gx, sigma)
    jyy = ndimage.gaussian_filter(gy * gy, sigma)
    jxy = ndimage.gaussian_filter(gx * gy, sigma)
    energy = jxx + jyy
    coherence = np.sqrt((jxx - jyy) ** 2 + 4 * jxy**2) / np.maximum(energy, 1e-12)
    coherence[energy < 1e-12] = 0.0
    value = float(np.mean(np.hypot(gx, gy) * coherence))
    return int(np.clip(np.floor(value * QUALITY_SCALE + 0.5), 0, 100))


def _run_tool(argv: Sequence[str], timeout: float) -> str:
    try:
        proc = subprocess.run(list(argv), capture_output=True, text=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise ToolParseError(f"{argv[0]} failed: {exc}") from exc
    if proc.returncode != 0:
        raise ToolParseError(f"{argv[0]} exited {proc.returncode}: {proc.stderr.strip()[:200]}")
    return proc.stdout.strip()


def _resolve_exe(exe: str) -> str:
    found = shutil.which(exe) or (exe if os.access(exe, os.X_OK) and Path(exe).is_file() else None)
    if found is None:
        raise ToolUnavailable(f"external tool not found or not executable: {exe}")
    return found


class QualityClient:
    source = INTERNAL_PROXY

    def score_files(self, paths: Sequence[os.PathLike | str]) -> list[QualityScore]:
        raise NotImplementedError

    def score_images(self, images: Sequence[GrayImage]) -> list[QualityScore]:
        with tempfile.TemporaryDirectory(prefix="lf-quality-") as tmp:
            paths = []
            for i, img in enumerate(images):
                p = Path(tmp) / f"{i:06d}.png"
                save_image(img, p)
                paths.append(p)
            return self.score_files(paths)


class ProxyQuality(QualityClient):
    source = INTERNAL_PROXY

    def score_images(self, images):
        return [QualityScore(ridge_quality(img), self.source) for img in images]

    def score_files(self, paths):
        from .core import load_image

        out = []
        for p in paths:
            try:
                out.append(QualityScore(ridge_quality(load_image(p)), self.source))
            except Exception as exc:  # per-image failure is data, not a crash
                out.append(QualityScore(None, self.source, str(exc)))
        return out


class ExternalQuality(QualityClient):
    """Runs ``<exe> <image_path>``; stdout must be a single integer 0..100."""

    source = EXTERNAL_NFIQ2

    def __init__(self, exe: str, pool_size: int = 4, timeout: float = 60.0):
        self.exe = _resolve_exe(exe)
        self.pool_size = pool_size
        self.timeout = timeout

    def _one(self, path) -> QualityScore:
        try:
            out = _run_tool([self.exe, str(path)], self.timeout)
            try:
                value = int(out)
            except ValueError:
                raise ToolParseError(f"expected an integer, got {out[:40]!r}") from None
            if not 0 <= value <= 100:
                raise ToolParseError(f"quality {value} outside 0..100")
            return QualityScore(value, self.source)
        except ToolParseError as exc:
            return QualityScore(None, self.source, str(exc))

    def score_files(self, paths):
        with ThreadPoolExecutor(max_workers=self.pool_size) as pool:
            return list(pool.map(self._one, paths))


def make_quality_client(exe: Optional[str] = None, use_proxy: bool = True, pool_size: int = 4) -> QualityClient:
    if exe:
        return ExternalQuality(exe, pool_size)
    if use_proxy:
        return ProxyQuality()
    raise ToolUnavailable("no external quality tool configured and the proxy is disabled")


def quality_scores(images: Sequence[GrayImage], client: QualityClient) -> list[QualityScore]:
    return client.score_images(images)


# ---------------------------------------------------------------------------
# matching


class Matcher:
    source = EMBEDDING_PROXY

    def match(self, probe: os.PathLike | str, gallery: os.PathLike | str) -> MatchScore:
        raise NotImplementedError


def proxy_score(e_a: np.ndarray, e_b: np.ndarray) -> float:
    cos = float(np.dot(e_a, e_b) / (np.linalg.norm(e_a) * np.linalg.norm(e_b)))
    return 1000.0 * max(0.0, cos)


class EmbeddingMatcher(Matcher):
    """1000 x max(0, cosine) between identity embeddings of the two images."""

    source = EMBEDDING_PROXY

    def __init__(self, v: IdentityEncoder, resolution: int):
        self.v = v
        self.cache = ImageCache(resolution)
        self._emb: dict = {}

    def embedding(self, path) -> np.ndarray:
        key = Path(path).resolve()
        if key not in self._emb:
            self._emb[key] = embed_batch(self.v, [self.cache.get(key)])[0]
        return self._emb[key]

    def match(self, probe, gallery) -> MatchScore:
        return MatchScore(proxy_score(self.embedding(probe), self.embedding(gallery)), self.source)


class ExternalMatcher(Matcher):
    """Runs ``<exe> <probe_path> <gallery_path>``; stdout is one non-negative decimal."""

    source = EXTERNAL_MATCHER

    def __init__(self, exe: str, timeout: float = 60.0):
        self.exe = _resolve_exe(exe)
        self.timeout = timeout

    def match(self, probe, gallery) -> MatchScore:
        try:
            out = _run_tool([self.exe, str(probe), str(gallery)], self.timeout)
            try:
                value = float(out)
            except ValueError:
                raise ToolParseError(f"expected a decimal score, got {out[:40]!r}") from None
            if not np.isfinite(value) or value < 0:
                raise ToolParseError(f"match score {value} is not a finite non-negative number")
            return MatchScore(value, self.source)
        except ToolParseError as exc:
            return MatchScore(None, self.source, str(exc))


def genuine_pair_scores(rows: Sequence[GenerationRow], matcher: Matcher) -> list[MatchScore]:
    """Score each synthetic latent against the sensor print it was generated from."""
    for r in rows:
        if not Path(r.content_path).is_file():
            raise MissingMate(f"mated print missing for {r.synthetic_path}: {r.content_path}")
    return [matcher.match(r.synthetic_path, r.content_path) for r in rows]


# ---------------------------------------------------------------------------
# statistics


def score_summary(scores: Sequence[float]) -> ScoreSummary:
    values = [float(s) for s in scores]
    if not values:
        raise EmptyInput("score_summary needs at least one score")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return ScoreSummary(statistics.fmean(values), std, statistics.median(values), len(values))


def quality_histogram(scores: Sequence[QualityScore | int | float], bins: int = 20) -> Histogram:
    if bins < 2:
        raise ValueError("need at least 2 bins")
    values = np.array([s.value if isinstance(s, QualityScore) else s for s in scores if not isinstance(s, QualityScore) or s.ok], dtype=float)
    if values.size == 0:
        raise EmptyInput("no valid quality scores to histogram")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 100.0))
    return Histogram(edges, counts / counts.sum())


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    return float(wasserstein_distance(np.asarray(a, float), np.asarray(b, float)))


# ---------------------------------------------------------------------------
# embeddings and t-SNE


def embed_dataset(images: Sequence[GrayImage], v: IdentityEncoder) -> np.ndarray:
    """``(n, 512)`` unit-norm embeddings, in input order."""
    if not v.frozen:
        raise ValueError("embed_dataset needs a frozen identity encoder")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ShapeError(f"images must share a resolution, got {sorted(shapes)}")
    return embed_batch(v, list(images))


def _row_key(row: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(row, dtype=np.float64).tobytes(), digest_size=16).digest()


def _conditional_p(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity), by bisection on beta."""
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-(d - d.min()) * beta)
            s = w.sum()
            h = np.log(s) + beta * np.sum((d - d.min()) * w) / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = w / s
    return p


def tsne_project(
    embs: np.ndarray,
    labels: Sequence[object],
    seed: int = 0,
    perplexity: Optional[float] = None,
    n_iter: int = 1000,
    learning_rate: float = 200.0,
) -> Projection2D:
    """Exact t-SNE to two dimensions.

    Each point's initial position is drawn from a stream keyed by ``seed`` and a
    hash of the point's own coordinates, and the optimisation runs over rows in
    hash order. The result is therefore a function of the point set alone: a
    permuted input yields the same rows, permuted.
    """
    x = np.asarray(embs, dtype=np.float64)
    n = x.shape[0]
    if n < 5:
        raise TooFewPoints(f"t-SNE needs at least 5 points, got {n}")
    if len(labels) != n:
        raise ValueError("labels must be parallel to embeddings")
    limit = (n - 1) / 3
    if perplexity is None:
        perplexity = min(30.0, 0.9 * limit)
    if not 0 < perplexity < limit:
        raise BadPerplexity(f"perplexity {perplexity} must be in (0, {limit:.3f}) for n={n}")

    keys = [_row_key(r) for r in x]
    order = sorted(range(n), key=lambda i: keys[i])
    xs = x[order]
    sq = np.sum(xs * xs, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * xs @ xs.T, 0.0)
    p = _conditional_p(d2, perplexity)
    p = (p + p.T) / (2 * n)
    p = np.maximum(p, 1e-12)

    y = np.empty((n, 2))
    for row, i in enumerate(order):
        init = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *np.frombuffer(keys[i], dtype=np.uint32)])))
        y[row] = init.normal(0.0, 1e-4, 2)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    exaggeration_until = min(250, n_iter // 4)
    for it in range(n_iter):
        pp = p * 12.0 if it < exaggeration_until else p
        momentum = 0.5 if it < exaggeration_until else 0.8
        sy = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(sy[:, None] + sy[None, :] - 2 * y @ y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (pp - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2).clip(min=0.01)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    out = np.empty_like(y)
    out[order] = y
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("t-SNE diverged")
    return Projection2D(out, tuple(labels), seed)


# ---------------------------------------------------------------------------
# report


@dataclass
class DatasetEvaluation:
    name: str
    quality: list = field(default_factory=list)
    matches: list = field(default_factory=list)
    embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, 512)))
    real: bool = False


def _fmt(x: float) -> str:
    return repr(float(x))


def evaluation_report(
    sets: Sequence[DatasetEvaluation],
    out_dir: os.PathLike | str,
    seed: int = 0,
    bins: int = 20,
    tsne_iter: int = 1000,
) -> Path:
    """Write ``report.txt`` plus histogram/projection CSV sidecars into ``out_dir``."""
    if not sets:
        raise EmptyInput("evaluation_report needs at least one dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    real = next((s for s in sets if s.real), None)
    rep = configparser.ConfigParser()
    rep.optionxform = str  # keep key case
    rep["report"] = {"sets": ",".join(s.name for s in sets), "real": real.name if real else "none", "seed": str(seed)}

    projection = None
    all_emb = [s.embeddings for s in sets if len(s.embeddings)]
    if all_emb:
        stacked = np.concatenate(all_emb)
        labels = [s.name for s in sets for _ in range(len(s.embeddings))]
        if len(stacked) >= 5:
            projection = tsne_project(stacked, labels, seed=seed, n_iter=tsne_iter)
            with open(out / "projection.csv", "w", encoding="utf-8") as fh:
                fh.write("x,y,label\n")
                for (px, py), lab in zip(projection.points, labels):
                    fh.write(f"{_fmt(px)},{_fmt(py)},{lab}\n")
    rep["report"]["projection_file"] = "projection.csv" if projection is not None else "none"

    valid_quality = {s.name: [q.value for q in s.quality if q.ok] for s in sets}
    offset = 0
    for s in sets:
        sec: dict[str, str] = {}
        scores = [m.value for m in s.matches if m.ok]
        if scores:
            summ = score_summary(scores)
            sec.update(n=str(summ.n), mean=_fmt(summ.mean), std=_fmt(summ.std), median=_fmt(summ.median))
        else:
            sec.update(n="0", mean="n/a", std="n/a", median="n/a")
        sec["match_failures"] = str(sum(not m.ok for m in s.matches))
        q = valid_quality[s.name]
        sec["quality_n"] = str(len(q))
        sec["quality_failures"] = str(sum(not x.ok for x in s.quality))
        if q:
            qs = score_summary(q)
            sec["quality_mean"] = _fmt(qs.mean)
            sec["quality_median"] = _fmt(qs.median)
            hist = quality_histogram(q, bins)
            name = f"{s.name}_quality_hist.csv"
            with open(out / name, "w", encoding="utf-8") as fh:
                fh.write("bin_low,bin_high,mass\n")
                for lo, hi, m in zip(hist.edges[:-1], hist.edges[1:], hist.masses):
                    fh.write(f"{_fmt(lo)},{_fmt(hi)},{_fmt(m)}\n")
            sec["histogram_file"] = name
        else:
            sec["histogram_file"] = "none"
        k = len(s.embeddings)
        if projection is not None and k:
            name = f"{s.name}_projection.csv"
            with open(out / name, "w", encoding="utf-8") as fh:
                fh.write("x,y\n")
                for px, py in projection.points[offset : offset + k]:
                    fh.write(f"{_fmt(px)},{_fmt(py)}\n")
            sec["projection_file"] = name
        else:
            sec["projection_file"] = "none"
        offset += k
        if real is not None and real is not s and q and valid_quality[real.name]:
            sec["wasserstein_vs_real"] = _fmt(wasserstein_1d(q, valid_quality[real.name]))
        else:
            sec["wasserstein_vs_real"] = "n/a"
        rep[f"set:{s.name}"] = sec

    pairs: dict[str, str] = {}
    names = [s.name for s in sets]
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            if valid_quality[a] and valid_quality[b]:
                pairs[f"{a}|{b}"] = _fmt(wasserstein_1d(valid_quality[a], valid_quality[b]))
    rep["wasserstein"] = pairs
    path = out / "report.txt"
    with open(path, "w", encoding="utf-8") as fh:
        rep.write(fh)
    return path


def read_report(path: os.PathLike | str) -> configparser.ConfigParser:
    rep = configparser.ConfigParser()
    rep.optionxform = str
    rep.read(path, encoding="utf-8")
    return rep


def match_values(scores: Sequence[MatchScore]) -> list[float]:
    return [m.value for m in scores if m.ok]


def summarize_sets(sets: Mapping[str, Sequence[float]]) -> dict[str, ScoreSummary]:
    return {name: score_summary(v) for name, v in sets.items()}
