from __future__ import annotations

import stat
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from latentforge.blending import GenerationRow
from latentforge.core import GrayImage, ImageCache, RandomSource, save_image
from latentforge.encoders import IdentityEncoder
from latentforge.errors import BadPerplexity, EmptyInput, MissingMate, ToolUnavailable, TooFewPoints
from latentforge.evaluation import (
    EMBEDDING_PROXY,
    EXTERNAL_NFIQ2,
    DatasetEvaluation,
    EmbeddingMatcher,
    ExternalMatcher,
    MatchScore,
    QualityScore,
    ScoreSummary,
    embed_dataset,
    evaluation_report,
    genuine_pair_scores,
    make_quality_client,
    proxy_score,
    quality_histogram,
    quality_scores,
    read_report,
    ridge_quality,
    score_summary,
    tsne_project,
    wasserstein_1d,
)
from latentforge.training import make_toy_corpus


def script(tmp_path, name, body):
    p = tmp_path / name
    p.write_text("#!/bin/sh\n" + body + "\n")
    p.chmod(p.stat().st_mode | stat.S_IXUSR)
    return str(p)


def test_summary_example():
    s = score_summary([50, 60, 70, 80, 90])
    assert s.mean == 70.0 and s.median == 70.0 and s.n == 5
    assert s.std == pytest.approx(250**0.5, abs=1e-9)


def test_summary_singleton_and_empty():
    assert score_summary([5]) == ScoreSummary(5.0, 0.0, 5.0, 1)
    with pytest.raises(EmptyInput):
        score_summary([])


def test_summary_row_format():
    assert ScoreSummary(89.1046, 101.1472, 43.5, 600).row("Ours") == "Ours, 89.1046, 101.1472, 43.5"


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=1000))
def test_summary_matches_sort_oracle(xs):
    s = score_summary(xs)
    n = len(xs)
    srt = sorted(xs)
    mean = sum(xs) / n
    med = srt[n // 2] if n % 2 else (srt[n // 2 - 1] + srt[n // 2]) / 2
    assert s.mean == pytest.approx(mean, rel=1e-12, abs=1e-9)
    assert s.median == med
    if n > 1:
        var = sum((x - mean) ** 2 for x in xs) / (n - 1)
        assert s.std == pytest.approx(var**0.5, rel=1e-9, abs=1e-9)
    assert min(xs) <= s.median <= max(xs) and s.std >= 0


def test_histogram_examples():
    h = quality_histogram([50] * 7, bins=10)
    assert h.masses.tolist().count(1.0) == 1 and h.masses.sum() == 1.0
    h = quality_histogram([0] * 10 + [99] * 10, bins=2)
    assert h.masses.tolist() == [0.5, 0.5]
    np.testing.assert_allclose(h.edges, [0, 50, 100])
    with pytest.raises(EmptyInput):
        quality_histogram([], bins=4)
    with pytest.raises(EmptyInput):
        quality_histogram([QualityScore(None, EXTERNAL_NFIQ2, "boom")])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=1, max_size=300), st.sampled_from([2, 4, 5, 10, 20, 25]))
def test_histogram_matches_counting_loop(scores, bins):
    h = quality_histogram(scores, bins)
    assert h.masses.tolist() == oracles.histogram(scores, bins)
    assert abs(h.masses.sum() - 1.0) <= 1e-9


def test_wasserstein():
    assert wasserstein_1d([0, 0, 0], [1, 1, 1]) == 1.0
    assert wasserstein_1d([3, 7, 9], [3, 7, 9]) == 0.0
    # sorted-sample oracle for equal sizes
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 100, 50), rng.integers(0, 100, 50)
    assert wasserstein_1d(a, b) == pytest.approx(np.mean(np.abs(np.sort(a) - np.sort(b))), abs=1e-12)


def test_proxy_quality_constant_and_ordering(tmp_path):
    client = make_quality_client()
    assert quality_scores([GrayImage.constant(0.4, 64, 64)], client)[0] == QualityScore(0, "internal_proxy")
    recs = make_toy_corpus(6, 3, 64, RandomSource(2), tmp_path)
    cache = ImageCache(64)
    clean = [ridge_quality(cache.get(r.image_path)) for r in recs if r.kind.value == "sensor"]
    latent = [ridge_quality(cache.get(r.image_path)) for r in recs if r.kind.value == "latent"]
    assert statistics.median(clean) > statistics.median(latent)


def test_external_quality_contract(tmp_path):
    ok = script(tmp_path, "nfiq_ok", 'echo "87"')
    client = make_quality_client(ok)
    scores = quality_scores([GrayImage.constant(0.5, 32, 32)] * 3, client)
    assert scores == [QualityScore(87, EXTERNAL_NFIQ2)] * 3


def test_external_quality_failures_are_per_image(tmp_path):
    # fails only for the second image
    flaky = script(tmp_path, "nfiq_flaky", 'case "$1" in *000001.png) exit 3;; *000002.png) echo "n/a";; *) echo 42;; esac')
    scores = quality_scores([GrayImage.constant(0.5, 32, 32)] * 3, make_quality_client(flaky, pool_size=2))
    assert scores[0].value == 42
    assert scores[1].value is None and "exited 3" in scores[1].error
    assert scores[2].value is None and "integer" in scores[2].error


def test_missing_tool():
    with pytest.raises(ToolUnavailable):
        make_quality_client("/nonexistent/nfiq2")
    with pytest.raises(ToolUnavailable):
        make_quality_client(None, use_proxy=False)
    with pytest.raises(ToolUnavailable):
        ExternalMatcher("/nonexistent/matcher")


@pytest.fixture(scope="module")
def v():
    return IdentityEncoder(8, rng=RandomSource(1)).freeze()


def test_proxy_matcher_examples(tmp_path, v):
    img = GrayImage(np.random.default_rng(0).uniform(size=(64, 64)))
    save_image(img, tmp_path / "a.png")
    save_image(img, tmp_path / "copy.png")
    save_image(GrayImage(np.random.default_rng(1).uniform(size=(64, 64))), tmp_path / "b.png")
    m = EmbeddingMatcher(v, 64)
    assert m.match(tmp_path / "copy.png", tmp_path / "a.png").value == pytest.approx(1000.0, abs=0.1)
    ab, ba = m.match(tmp_path / "a.png", tmp_path / "b.png"), m.match(tmp_path / "b.png", tmp_path / "a.png")
    assert abs(ab.value - ba.value) <= 1e-9 and ab.source == EMBEDDING_PROXY
    e = np.zeros(512)
    f = np.zeros(512)
    e[0], f[1] = 1.0, 1.0
    assert proxy_score(e, f) == 0.0
    assert proxy_score(e, -e) == 0.0


def test_genuine_pairs_and_missing_mate(tmp_path, v):
    save_image(GrayImage.constant(0.3, 64, 64), tmp_path / "s.png")
    save_image(GrayImage.constant(0.3, 64, 64), tmp_path / "c.png")
    row = GenerationRow(tmp_path / "s.png", tmp_path / "c.png", None, "plain-0000", 0.5, 0, "x")
    assert genuine_pair_scores([row], EmbeddingMatcher(v, 64))[0].value == pytest.approx(1000.0, abs=0.1)
    bad = GenerationRow(tmp_path / "s.png", tmp_path / "gone.png", None, "plain-0000", 0.5, 0, "x")
    with pytest.raises(MissingMate):
        genuine_pair_scores([bad], EmbeddingMatcher(v, 64))


def test_external_matcher_contract(tmp_path):
    m = ExternalMatcher(script(tmp_path, "match", 'echo "612.5"'))
    assert m.match("a", "b") == MatchScore(612.5, "external_matcher")
    neg = ExternalMatcher(script(tmp_path, "match_neg", 'echo "-3"'))
    assert neg.match("a", "b").value is None


def test_embed_dataset(tmp_path, v):
    rng = np.random.default_rng(5)
    a, b = GrayImage(rng.uniform(size=(64, 64))), GrayImage(rng.uniform(size=(64, 64)))
    e = embed_dataset([a, b, a], v)
    assert e.shape == (3, 512)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(e[0], e[2])
    with pytest.raises(ValueError):
        embed_dataset([a], IdentityEncoder(8))


def test_toy_fingers_embed_differently(tmp_path, v):
    recs = make_toy_corpus(2, 1, 64, RandomSource(3), tmp_path)
    e = embed_dataset([ImageCache(64).get(r.image_path) for r in recs], v)
    assert float(e[0] @ e[1]) < 1 - 1e-4


def clusters(n=60, seed=0):
    rng = np.random.default_rng(seed)
    centre = rng.normal(size=512)
    centre /= np.linalg.norm(centre)
    a = rng.normal(0, 0.05, (n // 2, 512)) + 2 * centre
    b = rng.normal(0, 0.05, (n // 2, 512)) - 2 * centre
    return np.vstack([a, b]), ["a"] * (n // 2) + ["b"] * (n // 2)


def test_tsne_contract():
    x, labels = clusters()
    p = tsne_project(x, labels, seed=4, n_iter=400)
    assert p.points.shape == (60, 2) and np.all(np.isfinite(p.points))
    assert np.array_equal(p.points, tsne_project(x, labels, seed=4, n_iter=400).points)
    assert oracles.silhouette(p.points, labels) > 0.5
    with pytest.raises(TooFewPoints):
        tsne_project(x[:4], labels[:4])
    with pytest.raises(BadPerplexity):
        tsne_project(x[:10], labels[:10], perplexity=3.0)


def test_tsne_permutation_equivariant():
    x = np.random.default_rng(1).normal(size=(12, 16))
    labels = list(range(12))
    perm = np.random.default_rng(2).permutation(12)
    a = tsne_project(x, labels, seed=9, n_iter=150).points
    b = tsne_project(x[perm], [labels[i] for i in perm], seed=9, n_iter=150).points
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def _set(name, scores, quality, embs=None, real=False):
    return DatasetEvaluation(
        name,
        quality=[QualityScore(q, "internal_proxy") for q in quality],
        matches=[MatchScore(s, EMBEDDING_PROXY) for s in scores],
        embeddings=np.zeros((0, 512)) if embs is None else embs,
        real=real,
    )


def test_report_one_score(tmp_path):
    path = evaluation_report([_set("only", [12.0], [40])], tmp_path, tsne_iter=50)
    rep = read_report(path)
    sec = rep["set:only"]
    assert (sec["n"], float(sec["std"]), float(sec["mean"])) == ("1", 0.0, 12.0)
    assert sec["projection_file"] == "none" and sec["histogram_file"] == "only_quality_hist.csv"


def test_report_wasserstein_and_sidecars(tmp_path):
    x, _ = clusters(12)
    sets = [
        _set("s1", [500.0, 700.0], [0, 0, 0], x[:6]),
        _set("s2", [100.0, 200.0], [0, 0, 0], x[6:]),
        _set("real", [900.0], [1, 1, 1], real=True),
    ]
    rep = read_report(evaluation_report(sets, tmp_path, seed=3, tsne_iter=50))
    assert float(rep["wasserstein"]["s1|s2"]) == 0.0
    assert float(rep["wasserstein"]["s1|real"]) == 1.0
    assert float(rep["set:s1"]["wasserstein_vs_real"]) == 1.0
    assert rep["set:real"]["wasserstein_vs_real"] == "n/a"
    for sec in ("s1", "s2"):
        name = rep[f"set:{sec}"]["projection_file"]
        assert len((tmp_path / name).read_text().splitlines()) == 7
    hist = (tmp_path / rep["set:real"]["histogram_file"]).read_text().splitlines()
    assert hist[0] == "bin_low,bin_high,mass" and len(hist) == 21


def test_report_counts_tool_failures(tmp_path):
    s = DatasetEvaluation(
        "x",
        quality=[QualityScore(None, EXTERNAL_NFIQ2, "bad"), QualityScore(30, EXTERNAL_NFIQ2)],
        matches=[MatchScore(None, "external_matcher", "bad"), MatchScore(5.0, "external_matcher")],
    )
    sec = read_report(evaluation_report([s], tmp_path))["set:x"]
    assert (sec["quality_failures"], sec["match_failures"], sec["n"]) == ("1", "1", "1")
