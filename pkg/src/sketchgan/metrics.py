"""Image-quality and biometric metrics, plus the checkpoint evaluation report.

FID and IS use the frozen perceptual stand-in as their feature source, so the
report calls them ``toy-FID`` and ``toy-IS``: comparable between runs of this
package, not with published numbers.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from .data import DataError, load_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


# --------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _as_chw(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError(f"ssim takes single images, got a batch of {a.shape[0]}")
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {a.shape}")
    return a


def ssim(a, b, data_range: float = 2.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    ``data_range`` is the width of the value range (2 for [-1, 1] images).
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = gaussian_window()

    def filt(x):
        return convolve2d(x, w, mode="valid")

    scores = []
    for ca, cb in zip(a, b):
        mu_a, mu_b = filt(ca), filt(cb)
        var_a = filt(ca * ca) - mu_a * mu_a
        var_b = filt(cb * cb) - mu_b * mu_b
        cov = filt(ca * cb) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# FID


@dataclass(frozen=True)
class ActivationStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean of length {d}")

    @classmethod
    def from_features(cls, feats) -> "ActivationStats":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"need an (N >= 2, d) feature matrix, got shape {f.shape}")
        cov = np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])
        return cls(f.mean(axis=0), (cov + cov.T) / 2, f.shape[0])


def psd_sqrt(s: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative eigenvalues are floored at 0."""
    s = (np.asarray(s, dtype=np.float64) + np.asarray(s, dtype=np.float64).T) / 2
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(stats_a: ActivationStats, stats_b: ActivationStats) -> float:
    """Frechet distance between two Gaussian fits.

    Tr((S1 S2)^1/2) is computed as Tr((S1^1/2 S2 S1^1/2)^1/2), which keeps
    everything symmetric and PSD.
    """
    if stats_a.mean.shape != stats_b.mean.shape:
        raise ValueError(f"dimension mismatch: {stats_a.mean.shape[0]} vs {stats_b.mean.shape[0]}")
    s1 = (stats_a.covariance + stats_a.covariance.T) / 2
    s2 = (stats_b.covariance + stats_b.covariance.T) / 2
    r1 = psd_sqrt(s1)
    cross = np.trace(psd_sqrt(r1 @ s2 @ r1))
    diff = stats_a.mean - stats_b.mean
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * cross)
    return max(value, 0.0)


# --------------------------------------------------------------------------
# IS


def inception_score(class_probs) -> float:
    """exp of the mean KL divergence between each row and the marginal."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"expected an (N, K) probability matrix, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
        raise ValueError("rows must be probability distributions")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


# --------------------------------------------------------------------------
# identification and verification


def cmc_curve(gallery: Sequence[tuple], probes: Sequence[tuple], max_rank: int) -> list[float]:
    """Rank-1..max_rank identification rates under inner-product similarity.

    A probe's rank is the position of the first gallery entry with its id
    after a stable descending sort, so ties go to the earlier gallery entry.
    """
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    if not gallery or not probes:
        raise ValueError("gallery and probes must be non-empty")
    g_ids = np.array([g[0] for g in gallery])
    g_emb = np.stack([np.asarray(g[1], dtype=np.float64) for g in gallery])
    known = set(g_ids.tolist())
    hits = np.zeros(max_rank)
    for pid, emb in probes:
        if pid not in known:
            raise DataError(f"probe identity {pid!r} is not in the gallery")
        order = np.argsort(-(g_emb @ np.asarray(emb, dtype=np.float64)), kind="stable")
        rank = int(np.flatnonzero(g_ids[order] == pid)[0])
        if rank < max_rank:
            hits[rank:] += 1
    return (hits / len(probes)).tolist()


@dataclass(frozen=True)
class MatchScoreSet:
    genuine_scores: tuple
    impostor_scores: tuple

    def __post_init__(self):
        if len(self.genuine_scores) == 0 or len(self.impostor_scores) == 0:
            raise ValueError("both genuine and impostor scores are required")


def roc_curve(scores: MatchScoreSet, num_thresholds: int | None = None) -> list[tuple[float, float]]:
    """(FAR, TAR) pairs for a sweep of accept-if-score >= threshold.

    With at most ``num_thresholds`` distinct scores every score is a
    threshold (the exact curve); otherwise thresholds are pooled-score
    quantiles. The sweep starts at (0, 0) and ends at (1, 1).
    """
    gen = np.sort(np.asarray(scores.genuine_scores, dtype=np.float64))
    imp = np.sort(np.asarray(scores.impostor_scores, dtype=np.float64))
    pooled = np.unique(np.concatenate([gen, imp]))
    if num_thresholds is not None and len(pooled) > num_thresholds:
        if num_thresholds < 1:
            raise ValueError("num_thresholds must be >= 1")
        pooled = np.unique(np.quantile(pooled, np.linspace(0, 1, num_thresholds), method="inverted_cdf"))
    points = [(0.0, 0.0)]
    for t in pooled[::-1]:
        far = (len(imp) - np.searchsorted(imp, t, side="left")) / len(imp)
        tar = (len(gen) - np.searchsorted(gen, t, side="left")) / len(gen)
        points.append((float(far), float(tar)))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def auc(points: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under a (FAR, TAR) curve."""
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2))


def match_scores(gallery_ids, gallery_emb, probe_ids, probe_emb) -> MatchScoreSet:
    """Every probe against every gallery entry: same id is genuine, else impostor."""
    sims = np.asarray(probe_emb, dtype=np.float64) @ np.asarray(gallery_emb, dtype=np.float64).T
    same = np.asarray(probe_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return MatchScoreSet(tuple(sims[same].tolist()), tuple(sims[~same].tolist()))


# --------------------------------------------------------------------------
# attribute probe


class AttributeProbe:
    """Hair-colour classifier on 16x16 pixels, independent of every trained network."""

    def __init__(self, size: int = 16, seed: int = 0):
        self.size = size
        self.seed = seed
        self.model = None

    def _features(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        f = x.shape[-1] // self.size
        if f > 1:
            n, c, h, w = x.shape
            x = x.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
        return x.reshape(len(x), -1)

    def fit(self, images, attrs) -> "AttributeProbe":
        from sklearn.linear_model import LogisticRegression

        y = np.asarray(attrs)[:, :3].argmax(axis=1)
        self.model = LogisticRegression(C=1.0, max_iter=2000, random_state=self.seed)
        self.model.fit(self._features(images), y)
        return self

    def predict(self, images) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("probe is not fitted")
        return self.model.predict(self._features(images))

    def accuracy(self, images, attrs) -> float:
        return float(np.mean(self.predict(images) == np.asarray(attrs)[:, :3].argmax(axis=1)))


# --------------------------------------------------------------------------
# checkpoint evaluation


REPORT_SECTIONS = ("ssim", "toy-FID", "toy-IS", "cmc", "roc")


def _batched(fn, *arrays, batch: int = 32):
    import torch

    out = []
    with torch.no_grad():
        for i in range(0, len(arrays[0]), batch):
            out.append(fn(*[a[i : i + batch] for a in arrays]))
    return torch.cat(out)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def evaluate_checkpoint(checkpoint, manifest, out_path, seed: int = 0, max_rank: int = 10) -> dict:
    """Evaluate a checkpoint on the test split and write the report.

    Writes JSON to ``out_path`` plus ``cmc.csv`` and ``roc.csv`` beside it.

    Protocol: the gallery is the first real photo of every subject in the
    manifest; probes are photos synthesised from the remaining test-split
    sketches with their own attributes. ROC scores every probe against every
    gallery entry (same subject genuine, otherwise impostor).
    """
    import torch
    import torch.nn.functional as F

    from .conditioning import concat_condition, sample_target_batch, with_rec
    from .data import xdog_sketch
    from .layers import FadeInState
    from .trainer import Trainer

    out_path = Path(out_path)
    test = manifest.split("test")
    train = manifest.split("train")
    if not test:
        raise DataError("manifest has no test split")
    if not train:
        raise DataError("manifest has no train split (needed for the attribute probe)")

    trainer = Trainer.load(checkpoint)
    b = trainer.bundle
    for m in b.modules().values():
        m.eval()
    index = json.loads((Path(checkpoint) / "index.json").read_text())
    res = int(index["resolution"])
    fade = FadeInState.fixed(res, float(index["alpha"]))
    full = trainer.config.max_resolution

    def load(split):
        photos, sketches, attrs, ids = manifest.load_arrays(split, (full, full))
        if sketches is None:
            sketches = xdog_sketch(photos, trainer.config.xdog)
        return photos, sketches, attrs, ids

    def down(a):
        t = torch.as_tensor(a)
        return t if full == res else F.avg_pool2d(t, full // res)

    photos, sketches, attrs, ids = load("test")
    x, y = down(photos), down(sketches)
    c = with_rec(attrs, 1)
    c_t = sample_target_batch(c, np.random.default_rng([seed, 2]))

    x_same = _batched(lambda s, a: b.G_x(concat_condition(s, a), fade), y, c)
    x_trans = _batched(lambda s, a: b.G_x(concat_condition(s, a), fade), y, c_t)
    y_fake = _batched(lambda p, a: b.G_y(concat_condition(p, a), fade), x, c)
    x_cyc = _batched(lambda s, a: b.G_x(concat_condition(s, a), fade), y_fake, c)

    ssim_vals = [ssim(a.numpy(), r.numpy()) for a, r in zip(x, x_cyc)]
    cycle_l1 = float((x_cyc - x).abs().mean())

    real_feats = _batched(b.P.pooled, x).numpy()
    fake_feats = _batched(b.P.pooled, x_trans).numpy()
    toy_fid = fid(ActivationStats.from_features(real_feats), ActivationStats.from_features(fake_feats))
    toy_is = inception_score(_batched(b.P.hair_probs, x_trans).double().numpy())

    with torch.no_grad():
        logits = torch.cat([b.D_x[0](x[i : i + 32], fade)[1] for i in range(0, len(x), 32)])
    hair_ok = logits[:, :3].argmax(1).numpy() == attrs[:, :3].argmax(1)
    young_ok = (logits[:, 3] > 0).numpy() == (attrs[:, 3] == 1)
    d_attr_accuracy = float(np.mean(hair_ok & young_ok))

    tr_photos, _, tr_attrs, _ = manifest.load_arrays("train", (full, full))
    probe = AttributeProbe(seed=seed).fit(tr_photos, tr_attrs)
    up = x_trans if res == full else F.interpolate(x_trans, size=(full, full), mode="nearest")
    probe_target_accuracy = probe.accuracy(up.numpy(), c_t)

    # identification: gallery = first photo of each subject
    all_recs = manifest.records
    first = {}
    for r in all_recs:
        first.setdefault(r.subject_id, r)
    gallery_paths = {r.path for r in first.values()}
    g_ids = np.array(sorted(first))
    g_photos = np.concatenate([load_image(manifest.root / first[s].path, (full, full)) for s in g_ids])
    g_emb = _batched(b.Phi, torch.as_tensor(g_photos)).double().numpy()
    keep = np.array([r.path not in gallery_paths for r in test])
    if not keep.any():
        raise DataError("no test images left to use as probes")
    p_emb = _batched(b.Phi, x_same[torch.from_numpy(keep)]).double().numpy()
    p_ids = ids[keep]
    ranks = min(max_rank, len(g_ids))
    cmc = cmc_curve(list(zip(g_ids.tolist(), g_emb)), list(zip(p_ids.tolist(), p_emb)), ranks)
    roc = roc_curve(match_scores(g_ids, g_emb, p_ids, p_emb))

    report = {
        "checkpoint_step": int(index["step"]),
        "resolution": res,
        "ssim": {"mean": float(np.mean(ssim_vals)), "pairs": "real vs cycle-reconstructed photo"},
        "toy-FID": {"value": toy_fid, "sets": "real test photos vs translated photos"},
        "toy-IS": {"value": toy_is, "classes": 3},
        "cmc": {
            "rank1": cmc[0],
            "rates": cmc,
            "gallery_size": int(len(g_ids)),
            "probes": int(keep.sum()),
        },
        "roc": {"auc": auc(roc), "points": len(roc)},
        "cycle_l1": cycle_l1,
        "d_attr_accuracy": d_attr_accuracy,
        "probe_target_accuracy": probe_target_accuracy,
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_csv(out_path.parent / "cmc.csv", ["rank", "rate"], [(k + 1, repr(v)) for k, v in enumerate(cmc)])
    _write_csv(out_path.parent / "roc.csv", ["far", "tar"], [(repr(a), repr(t)) for a, t in roc])
    return report
