"""Independent reference implementations used to check the package.

Nothing here imports the code under test. Everything runs in float64 with
plain loops or textbook formulas.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# --------------------------------------------------------------------------
# XDoG by explicit convolution


def gaussian_kernel_1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_naive(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with half-sample symmetric padding, written as loops."""
    k = gaussian_kernel_1d(sigma)
    r = len(k) // 2
    padded = np.pad(img, r, mode="symmetric")
    h, w = img.shape
    rows = np.zeros((h + 2 * r, w))
    for j in range(w):
        rows[:, j] = sum(k[t] * padded[:, j + t] for t in range(len(k)))
    out = np.zeros((h, w))
    for i in range(h):
        out[i, :] = sum(k[t] * rows[i + t, :] for t in range(len(k)))
    return out


def xdog_oracle(rgb: np.ndarray, sigma=1.0, k=1.6, tau=0.98, eps=0.0, phi=200.0) -> np.ndarray:
    """(3, H, W) image in [-1, 1] -> (H, W) sketch in [-1, 1]."""
    unit = (rgb.astype(np.float64) + 1) / 2
    gray = 0.299 * unit[0] + 0.587 * unit[1] + 0.114 * unit[2]
    u = blur_naive(gray, sigma) - tau * blur_naive(gray, k * sigma)
    t = np.empty_like(u)
    for idx, v in np.ndenumerate(u):
        t[idx] = 1.0 if v >= eps else 1.0 + math.tanh(phi * (v - eps))
    return 2 * t - 1


def step_edge(size: int = 64) -> np.ndarray:
    img = -np.ones((3, size, size))
    img[:, :, size // 2 :] = 1.0
    return img


def radial_gradient(size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    r = np.clip(np.sqrt(xx**2 + yy**2), 0, 1)
    return np.stack([1 - 2 * r, 0.5 - r, r - 0.3]).clip(-1, 1)


def checkerboard(size: int = 64, cell: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    board = (((yy // cell) + (xx // cell)) % 2) * 1.2 - 0.6
    return np.stack([board, board * 0.5, -board])


# --------------------------------------------------------------------------
# finite differences


def central_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


# --------------------------------------------------------------------------
# closed forms and brute force


def gram_bruteforce(feat: np.ndarray) -> np.ndarray:
    c, h, w = feat.shape
    g = np.zeros((c, c))
    for a in range(c):
        for b in range(c):
            g[a, b] = sum(feat[a, y, x] * feat[b, y, x] for y in range(h) for x in range(w))
    return g / (c * h * w)


def ssim_constant(mu_a: float, mu_b: float, data_range: float = 2.0) -> float:
    """SSIM of two constant fields: only the luminance term survives."""
    c1 = (0.01 * data_range) ** 2
    return (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)


def fid_1d(mu1, var1, mu2, var2) -> float:
    return (mu1 - mu2) ** 2 + var1 + var2 - 2 * math.sqrt(var1 * var2)


def fid_scipy(mu1, s1, mu2, s2) -> float:
    """Textbook FID with scipy's general matrix square root."""
    from scipy.linalg import sqrtm

    covmean = sqrtm(s1 @ s2)
    covmean = np.real(covmean)
    d = mu1 - mu2
    return float(d @ d + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean))


def cmc_bruteforce(gallery, probes, max_rank):
    """Rank by counting gallery entries scoring strictly higher, ties to earlier entries."""
    hits = [0] * max_rank
    for pid, pe in probes:
        scores = [float(np.dot(ge, pe)) for _, ge in gallery]
        mate = next(i for i, (gid, _) in enumerate(gallery) if gid == pid)
        s = scores[mate]
        rank = sum(1 for i, v in enumerate(scores) if v > s or (v == s and i < mate))
        for k in range(rank, max_rank):
            hits[k] += 1
    return [h / len(probes) for h in hits]


def auc_pairwise(genuine, impostor) -> float:
    """Mann-Whitney form of the ROC area: P(g > i) + P(g = i) / 2."""
    total = 0.0
    for g, i in itertools.product(genuine, impostor):
        total += 1.0 if g > i else 0.5 if g == i else 0.0
    return total / (len(genuine) * len(impostor))


def is_oracle(p: np.ndarray) -> float:
    marg = p.mean(axis=0)
    kl = []
    for row in p:
        kl.append(sum(q * math.log(q / m) for q, m in zip(row, marg) if q > 0))
    return math.exp(sum(kl) / len(kl))


def lr_table(base=1e-5, flat=10, decay=10):
    """The 21-point schedule, epochs 0..20, from the training-protocol description."""
    table = []
    for e in range(flat + decay + 1):
        table.append(base if e < flat else base * (1 - (e - flat) / decay))
    return table
