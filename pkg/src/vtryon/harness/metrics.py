"""Image-quality and try-on fidelity metrics.

FID and KID operate on features from a fixed random-projection embedder, so
values are only comparable with each other, never with published numbers
computed on Inception features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from ..errors import InvalidArgumentError, ShapeError

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FEATURE_DIM = 64


def _windows(x: np.ndarray) -> np.ndarray:
    """``(H-6, W-6, C, 7, 7)`` view of every valid window."""
    return sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW), axis=(0, 1))


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-window SSIM averaged over channels; shape ``(H-6, W-6)``.

    Inputs are images in [-1, 1] and are mapped to unit dynamic range first.
    Moments are taken from in-window deviations, which keeps flat windows exact.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    # same memory layout for both so identical inputs reduce identically
    wa = _windows(np.ascontiguousarray((a + 1.0) / 2.0))
    wb = _windows(np.ascontiguousarray((b + 1.0) / 2.0))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(axis=-1)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_map(a, b).mean())


def region_ssim(output: np.ndarray, reference: np.ndarray, region: np.ndarray) -> float:
    """SSIM over windows centred in ``region``; pixels outside it are taken from ``reference``."""
    region = np.asarray(region) > 0
    if not region.any():
        raise InvalidArgumentError("region is empty")
    composite = np.where(region[..., None], output, reference)
    smap = ssim_map(composite, reference)
    r = SSIM_WINDOW // 2
    centres = region[r:region.shape[0] - r, r:region.shape[1] - r]
    if not centres.any():
        return float(smap.mean())
    return float(smap[centres].mean())


def embed_features(images, seed: int = 0, dim: int = FEATURE_DIM) -> np.ndarray:
    """Fixed-seed random-projection embedder: 16x8 block means -> linear -> tanh."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise InvalidArgumentError("embed_features needs at least one image")
    pooled = np.stack([_pool(im) for im in images])
    flat = pooled.reshape(len(images), -1)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((flat.shape[1], dim)) / np.sqrt(flat.shape[1])
    bias = rng.uniform(-0.5, 0.5, size=dim)
    return np.tanh(2.0 * flat @ w + bias)


def _pool(im: np.ndarray, out_hw=(16, 8)) -> np.ndarray:
    H, W = im.shape[:2]
    oh, ow = out_hw
    if H % oh == 0 and W % ow == 0:
        return im.reshape(oh, H // oh, ow, W // ow, -1).mean(axis=(1, 3))
    rows = (np.arange(oh) * H) // oh
    cols = (np.arange(ow) * W) // ow
    return im[rows][:, cols]


def _check_rows(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidArgumentError(f"{name} needs a 2-D feature matrix with >= 2 rows")
    return x


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _trace_sqrt(m: np.ndarray) -> float:
    vals = np.linalg.eigvalsh((m + m.T) / 2)
    if vals.min() < -1e-8 * max(1.0, float(np.abs(vals).max())):
        raise InvalidArgumentError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3g})")
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def fid(feats_a, feats_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    a = _check_rows(feats_a, "fid")
    b = _check_rows(feats_b, "fid")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    # Tr((A B)^1/2) computed symmetrically from both sides, then averaged.
    ra, rb = _sqrtm_psd(cov_a), _sqrtm_psd(cov_b)
    cross = 0.5 * (_trace_sqrt(ra @ cov_b @ ra) + _trace_sqrt(rb @ cov_a @ rb))
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * cross)
    return max(value, 0.0)


def _poly_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kid(feats_a, feats_b) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x.y/D + 1)^3``."""
    x = _check_rows(feats_a, "kid")
    y = _check_rows(feats_b, "kid")
    m, n = len(x), len(y)
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid_subsets(feats_a, feats_b, n_subsets: int = 50, subset_size: int = 200,
                seed: int = 0) -> tuple[float, float]:
    """Mean KID over subsets and its standard error.

    Subsets are disjoint blocks of a random permutation when the sets are large
    enough, so the standard error is honest; otherwise they are drawn afresh.
    """
    x = _check_rows(feats_a, "kid")
    y = _check_rows(feats_b, "kid")
    size = max(2, min(subset_size, len(x), len(y)))
    rng = np.random.default_rng(seed)
    if n_subsets * size <= min(len(x), len(y)):
        px, py = rng.permutation(len(x)), rng.permutation(len(y))
        pairs = [(px[k * size:(k + 1) * size], py[k * size:(k + 1) * size]) for k in range(n_subsets)]
    else:
        pairs = [(rng.choice(len(x), size, replace=False), rng.choice(len(y), size, replace=False))
                 for _ in range(n_subsets)]
    vals = np.array([kid(x[i], y[j]) for i, j in pairs])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_subsets))


def region_mean_color(image: np.ndarray, region: np.ndarray) -> np.ndarray:
    region = np.asarray(region) > 0
    if not region.any():
        raise InvalidArgumentError("region is empty")
    return np.asarray(image, dtype=np.float64)[region].mean(axis=0)


def transfer_fidelity(output, target_garment, garment_region, garment_fg=None,
                      threshold: float = 0.15) -> tuple[bool, float]:
    """Compare the mean colour inside ``garment_region`` of ``output`` to the garment's.

    ``garment_fg`` selects garment pixels in the product image (whole image if
    omitted). Passes iff the Euclidean RGB distance is strictly below ``threshold``.
    """
    out_mean = region_mean_color(output, garment_region)
    fg = np.ones(np.asarray(target_garment).shape[:2], bool) if garment_fg is None else garment_fg
    tgt_mean = region_mean_color(target_garment, fg)
    dist = float(np.linalg.norm(out_mean - tgt_mean))
    return dist < threshold, dist


def marker_scores(output, person, marker_mask, max_dist: float = 0.2) -> list[float]:
    """Fraction of each marker disc's pixels reproduced within ``max_dist`` RGB distance."""
    labels, n = ndimage.label(np.asarray(marker_mask) > 0)
    diff = np.linalg.norm(np.asarray(output, np.float64) - np.asarray(person, np.float64), axis=-1)
    return [float((diff[labels == k] < max_dist).mean()) for k in range(1, n + 1)]


def identity_preservation(output, person, non_garment_mask, marker_mask=None, *,
                          ssim_gate: float = 0.80, marker_dist: float = 0.2,
                          marker_fraction: float = 0.5) -> tuple[bool, float]:
    """Region SSIM outside the garments plus a per-marker reproduction check.

    Returns ``(passed, region_ssim)``.
    """
    region = np.asarray(non_garment_mask) > 0
    if not region.any():
        raise InvalidArgumentError("non-garment mask is empty")
    score = region_ssim(output, person, region)
    passed = score >= ssim_gate
    if marker_mask is not None:
        visible = (np.asarray(marker_mask) > 0) & region
        passed = passed and all(f >= marker_fraction
                                for f in marker_scores(output, person, visible, marker_dist))
    return bool(passed), score


@dataclass
class MetricReport:
    ssim: float
    fid: float
    kid: float
    n_samples: int
    transfer_fidelity: float | None = None
    identity_preservation: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def image_set_report(generated, reference, seed: int = 0) -> MetricReport:
    """SSIM over aligned pairs plus FID/KID between the two sets."""
    if len(generated) != len(reference) or not generated:
        raise InvalidArgumentError("generated and reference sets must be non-empty and aligned")
    scores = [ssim(g, r) for g, r in zip(generated, reference)]
    fa = embed_features(generated, seed)
    fb = embed_features(reference, seed)
    many = len(generated) >= 2
    return MetricReport(
        ssim=float(np.mean(scores)),
        fid=fid(fa, fb) if many else float("nan"),
        kid=kid(fa, fb) if many else float("nan"),
        n_samples=len(generated),
    )
