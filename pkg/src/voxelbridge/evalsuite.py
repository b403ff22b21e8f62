"""Metrics and protocols: pixel correlation, SSIM, two-way identification,
BLEU-1..4, ROUGE-L, and deterministic report assembly.

Text metrics tokenize by lowercasing and splitting on non-alphanumerics;
values are therefore only comparable within this artifact (stated in every
report's protocol block).
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .embedders import EmbedderSpec, embed_image
from .errors import ValidationError
from .imaging import read_image, resize_image, to_grayscale

PROTOCOL_RESOLUTION = (425, 425)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; degenerate (zero-variance) inputs score 0."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValidationError(f"correlation inputs disagree: {x.shape} vs {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum()) * np.sqrt((yc * yc).sum())
    if denom == 0.0:
        return 0.0, True
    return float((xc * yc).sum() / denom), False


def pixcorr(recon: np.ndarray, truth: np.ndarray,
            resolution: tuple[int, int] | None = PROTOCOL_RESOLUTION) -> float:
    """Pearson correlation over co-resized flattened pixels. Pass
    resolution=None to compare at native (equal) size."""
    a = np.asarray(recon, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if resolution is not None:
        a = resize_image(a, resolution)
        b = resize_image(b, resolution)
    elif a.shape != b.shape:
        raise ValidationError("images differ in shape and no protocol resolution given")
    r, _ = _pearson(a, b)
    return r


def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = len(kernel)
    a = sliding_window_view(img, k, axis=0) @ kernel
    return sliding_window_view(a, k, axis=1) @ kernel


def ssim(recon: np.ndarray, truth: np.ndarray,
         resolution: tuple[int, int] | None = None,
         data_range: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, population covariances, mean over valid windows."""
    a = to_grayscale(np.asarray(recon, dtype=np.float64))
    b = to_grayscale(np.asarray(truth, dtype=np.float64))
    if resolution is not None:
        a = resize_image(a, resolution)
        b = resize_image(b, resolution)
    if a.shape != b.shape:
        raise ValidationError("ssim inputs must share a shape (or pass a resolution)")
    if min(a.shape) < SSIM_WINDOW:
        raise ValidationError(
            f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )
    kernel = _gaussian_kernel(SSIM_SIGMA, (SSIM_WINDOW - 1) // 2)
    ux = _filter_valid(a, kernel)
    uy = _filter_valid(b, kernel)
    uxx = _filter_valid(a * a, kernel)
    uyy = _filter_valid(b * b, kernel)
    uxy = _filter_valid(a * b, kernel)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# Identification


def _standardize_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    centered = mat - mat.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1, keepdims=True))
    norms[norms == 0] = 1.0
    return centered / norms


def two_way_identification_vectors(truth_vecs, recon_vecs) -> float:
    """For each item, the percent of distractors whose correlation with the
    item's truth is beaten by its own reconstruction (ties score half);
    averaged per item, then overall. Returns a percentage."""
    t = np.asarray(truth_vecs, dtype=np.float64)
    r = np.asarray(recon_vecs, dtype=np.float64)
    if t.ndim != 2 or t.shape != r.shape:
        raise ValidationError("identification needs matching (n, d) vector lists")
    n = t.shape[0]
    if n < 2:
        raise ValidationError("identification needs at least two items")
    corr = _standardize_rows(t) @ _standardize_rows(r).T  # corr[i, j] = r(truth_i, recon_j)
    own = corr.diagonal()[:, None]
    wins = (own > corr).sum(axis=1)
    ties = (own == corr).sum(axis=1) - 1  # drop the self-comparison
    per_item = (wins + 0.5 * ties) / (n - 1)
    return float(per_item.mean() * 100.0)


def two_way_identification(spec: EmbedderSpec, recon_images, truth_images,
                           seed: int = 0) -> float:
    """Embed both image lists and run the vector identification protocol. The
    seed is protocol metadata (stand-in embedders are deterministic)."""
    if len(recon_images) != len(truth_images):
        raise ValidationError("need one reconstruction per truth image")
    truth_vecs = np.stack([embed_image(spec, im) for im in truth_images])
    recon_vecs = np.stack([embed_image(spec, im) for im in recon_images])
    return two_way_identification_vectors(truth_vecs, recon_vecs)


# ---------------------------------------------------------------------------
# Text metrics

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, references: list[str], max_n: int = 4) -> tuple[float, ...]:
    """Cumulative BLEU-1..max_n: clipped modified n-gram precision under a
    geometric mean, times the brevity penalty (closest reference length, ties
    to the shorter)."""
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not refs:
        raise ValidationError("bleu needs at least one reference")
    if not cand:
        return tuple(0.0 for _ in range(max_n))

    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)

    precisions = []
    for n in range(1, max_n + 1):
        counts = _ngram_counts(cand, n)
        total = sum(counts.values())
        if total == 0:
            precisions.append(0.0)
            continue
        max_ref = Counter()
        for ref in refs:
            for gram, k in _ngram_counts(ref, n).items():
                max_ref[gram] = max(max_ref[gram], k)
        clipped = sum(min(k, max_ref[gram]) for gram, k in counts.items())
        precisions.append(clipped / total)

    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if any(p == 0.0 for p in ps):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return tuple(scores)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.2) -> float:
    """LCS F-measure, F = (1 + beta^2) P R / (R + beta^2 P)."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


# ---------------------------------------------------------------------------
# Reports


def build_report(per_sample: dict[str, list[float]], protocol: dict,
                 sample_ids: list[str] | None = None) -> dict:
    aggregate = {}
    for name, values in sorted(per_sample.items()):
        if values:
            aggregate[name] = float(np.mean(np.asarray(values, dtype=np.float64)))
    return {
        "protocol": dict(sorted(protocol.items())),
        "sample_ids": sample_ids or [],
        "per_sample": {k: [float(v) for v in per_sample[k]] for k in sorted(per_sample)},
        "aggregate": aggregate,
    }


def render_report(report: dict) -> str:
    # protocol block first; nested blocks were sorted at build time
    return json.dumps(report, indent=2) + "\n"


def evaluate_image_dirs(recon_dir, truth_dir, metrics: list[str],
                        spec: EmbedderSpec | None = None,
                        resolution: tuple[int, int] | None = PROTOCOL_RESOLUTION,
                        seed: int = 0) -> dict:
    """Pair reconstruction and truth images by file stem and score them."""
    recon_files = {p.stem: p for p in sorted(Path(recon_dir).iterdir()) if p.is_file()}
    truth_files = {p.stem: p for p in sorted(Path(truth_dir).iterdir()) if p.is_file()}
    stems = sorted(set(recon_files) & set(truth_files))
    if not stems:
        raise ValidationError("no paired images between the two directories")
    recons = [read_image(recon_files[s]) for s in stems]
    truths = [read_image(truth_files[s]) for s in stems]

    per_sample: dict[str, list[float]] = {}
    protocol: dict = {
        "n_items": len(stems),
        "resolution": list(resolution) if resolution else None,
        "seed": seed,
        "tokenizer": "lowercase alphanumeric split (artifact-local)",
    }
    for metric in metrics:
        if metric == "pixcorr":
            per_sample["pixcorr"] = [
                pixcorr(a, b, resolution=resolution) for a, b in zip(recons, truths)
            ]
        elif metric == "ssim":
            per_sample["ssim"] = [
                ssim(a, b, resolution=resolution) for a, b in zip(recons, truths)
            ]
        elif metric == "twoway":
            if spec is None:
                raise ValidationError("two-way identification needs an embedder spec")
            score = two_way_identification(spec, recons, truths, seed=seed)
            per_sample["twoway"] = [score]
            protocol["twoway_comparisons_per_item"] = len(stems) - 1
        else:
            raise ValidationError(f"unknown image metric {metric!r}")
    return build_report(per_sample, protocol, sample_ids=stems)
