"""Full-reference image quality metrics: MSE, PSNR, SSIM, UQI and pixel-domain VIF.

Inputs are RgbImage values or H×W×3 / H×W arrays on the 0..255 scale.
SSIM, UQI and VIF operate on the BT.601 luminance plane; MSE and PSNR on all
channels. VIF is directional: the reference image comes first.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, signal

from errors import EmptyDatasetError, ShapeError

PEAK = 255.0
PSNR_CAP = 99.0

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

UQI_WINDOW = 8

VIF_SCALES = 4
VIF_NOISE_VAR = 2.0
VIF_MIN_SIZE = 32
VIF_EPS = 1e-10

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

ROWS = (("PSNR", "psnr"), ("SSIM", "ssim"), ("MSE", "mse"), ("UQI", "uqi"), ("VIF", "vif"))


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    mse: float
    uqi: float
    vif: float

    def to_dict(self):
        return asdict(self)

    def format_table(self):
        lines = [f"{'metric':<8}{'value':>12}"]
        lines += [f"{name:<8}{getattr(self, key):>12.4f}" for name, key in ROWS]
        return "\n".join(lines)


def format_comparison(columns):
    """Metric rows × one column per labelled report."""
    labels = list(columns)
    lines = [f"{'metric':<8}" + "".join(f"{lbl:>12}" for lbl in labels)]
    for name, key in ROWS:
        lines.append(f"{name:<8}" + "".join(f"{getattr(columns[lbl], key):>12.4f}" for lbl in labels))
    return "\n".join(lines)


def _pixels(img):
    px = getattr(img, "pixels", img)
    return np.asarray(px, dtype=np.float64)


def _pair(a, b):
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ShapeError(f"image dimensions differ: {x.shape} vs {y.shape}")
    return x, y


def luma(px):
    return px @ LUMA_WEIGHTS if px.ndim == 3 else px


def _luma_pair(a, b, min_size, what):
    x, y = _pair(a, b)
    x, y = luma(x), luma(y)
    if min(x.shape) < min_size:
        raise ShapeError(f"{what} needs images of at least {min_size}×{min_size}, got {x.shape}")
    return x, y


def gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _valid(x, win):
    return signal.correlate2d(x, win, mode="valid")


def _local_stats(x, y, win):
    mx, my = _valid(x, win), _valid(y, win)
    sxx = _valid(x * x, win) - mx * mx
    syy = _valid(y * y, win) - my * my
    sxy = _valid(x * y, win) - mx * my
    return mx, my, sxx, syy, sxy


def mse(a, b):
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def psnr(a, b):
    m = mse(a, b)
    if m == 0:
        return PSNR_CAP
    return float(10.0 * math.log10(PEAK ** 2 / m))


def ssim(a, b):
    x, y = _luma_pair(a, b, SSIM_WINDOW, "ssim")
    c1, c2 = (SSIM_K1 * PEAK) ** 2, (SSIM_K2 * PEAK) ** 2
    mx, my, sxx, syy, sxy = _local_stats(x, y, gaussian_window(SSIM_WINDOW, SSIM_SIGMA))
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def uqi(a, b):
    x, y = _luma_pair(a, b, UQI_WINDOW, "uqi")
    win = np.full((UQI_WINDOW, UQI_WINDOW), 1.0 / UQI_WINDOW ** 2)
    mx, my, sxx, syy, sxy = _local_stats(x, y, win)
    # Rounding residue on flat windows counts as zero variance.
    tiny = 1e-12 * (mx * mx + my * my + 1.0)
    sxx = np.where(sxx < tiny, 0.0, sxx)
    syy = np.where(syy < tiny, 0.0, syy)
    num = 4.0 * sxy * (mx * my)
    den = (sxx + syy) * (mx * mx + my * my)
    keep = den != 0
    if not keep.any():
        return 1.0 if np.array_equal(x, y) else 0.0
    return float(np.mean(num[keep] / den[keep]))


def vif(reference, distorted):
    ref, dist = _luma_pair(reference, distorted, VIF_MIN_SIZE, "vif")
    same = np.array_equal(ref, dist)
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES + 1 - scale) + 1
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = ndimage.correlate(ref, win, mode="reflect")[::2, ::2]
            dist = ndimage.correlate(dist, win, mode="reflect")[::2, ::2]
        _, _, s11, s22, s12 = _local_stats(ref, dist, win)
        s11 = np.maximum(s11, 0.0)
        s22 = np.maximum(s22, 0.0)

        g = np.where(s11 >= VIF_EPS, s12 / np.where(s11 >= VIF_EPS, s11, 1.0), 0.0)
        sv = s22 - g * s12

        low_ref = s11 < VIF_EPS
        g[low_ref] = 0.0
        sv[low_ref] = s22[low_ref]
        s11[low_ref] = 0.0

        low_dist = s22 < VIF_EPS
        g[low_dist] = 0.0
        sv[low_dist] = 0.0

        neg = g < 0
        sv[neg] = s22[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, 0.0)

        num += float(np.sum(np.log2(1.0 + g * g * s11 / (sv + VIF_NOISE_VAR))))
        den += float(np.sum(np.log2(1.0 + s11 / VIF_NOISE_VAR)))
    if den == 0.0:
        return 1.0 if same else 0.0
    return num / den


def evaluate_pair(pred, truth):
    return MetricReport(
        psnr=psnr(pred, truth),
        ssim=ssim(pred, truth),
        mse=mse(pred, truth),
        uqi=uqi(pred, truth),
        vif=vif(truth, pred),
    )


def evaluate_set(pairs, workers=1):
    pairs = list(pairs)
    if not pairs:
        raise EmptyDatasetError("evaluate_set needs at least one (pred, truth) pair")
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda p: evaluate_pair(*p), pairs))
    else:
        reports = [evaluate_pair(p, t) for p, t in pairs]
    n = len(reports)
    return MetricReport(**{key: sum(getattr(r, key) for r in reports) / n for _, key in ROWS})
