"""sRGB <-> CIELAB conversion, [-1, 1] normalization and the L/ab split.

Conversions use the D65 white point and the standard sRGB companding curve.
All arithmetic is float64; torch helpers at the bottom are the differentiable
counterparts used inside the training graph.
"""
from dataclasses import dataclass

import numpy as np
import torch

from errors import ShapeError

L_SCALE      = 50.0
CHROMA_SCALE = 128.0
CHROMA_LIMIT = 128.0

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
# White point as the image of sRGB white, so R=G=B maps exactly onto the L axis.
_WHITE = _SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0
_RANGE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class RgbImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"RgbImage needs an H×W×3 array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"RgbImage needs at least one pixel, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("RgbImage channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.array(px, dtype=np.uint8, copy=True)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class LabImage:
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        L, a, b = (np.asarray(ch, dtype=np.float64) for ch in (self.L, self.a, self.b))
        if L.ndim != 2 or L.shape != a.shape or L.shape != b.shape:
            raise ShapeError(f"LabImage planes must share one H×W shape, got "
                             f"{L.shape}, {a.shape}, {b.shape}")
        if L.size:
            if L.min() < -_RANGE_TOL or L.max() > 100.0 + _RANGE_TOL:
                raise ValueError("LabImage L values must lie in [0, 100]")
            if max(np.abs(a).max(), np.abs(b).max()) > CHROMA_LIMIT + _RANGE_TOL:
                raise ValueError(f"LabImage a/b values must lie in "
                                 f"[-{CHROMA_LIMIT:g}, {CHROMA_LIMIT:g}]")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def ab(self):
        return np.stack([self.a, self.b], axis=-1)


@dataclass(frozen=True, eq=False)
class NormalizedLab:
    L_n: np.ndarray
    ab_n: np.ndarray

    def __post_init__(self):
        L_n = np.asarray(self.L_n, dtype=np.float64)
        ab_n = np.asarray(self.ab_n, dtype=np.float64)
        if L_n.ndim != 2 or ab_n.shape != L_n.shape + (2,):
            raise ShapeError(f"NormalizedLab needs H×W and H×W×2 arrays, got "
                             f"{L_n.shape} and {ab_n.shape}")
        object.__setattr__(self, "L_n", L_n)
        object.__setattr__(self, "ab_n", ab_n)


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    # Negative (out-of-gamut) values take the linear branch.
    safe = np.maximum(c, 0.0031308)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * safe ** (1.0 / 2.4) - 0.055)


def _lab_f(t):
    safe = np.maximum(t, _DELTA ** 3)
    return np.where(t > _DELTA ** 3, np.cbrt(safe), t / (3.0 * _DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(u):
    return np.where(u > _DELTA, u ** 3, 3.0 * _DELTA ** 2 * (u - 4.0 / 29.0))


def rgb_to_lab(img):
    rgb = img.pixels.astype(np.float64) / 255.0
    xyz = _srgb_to_linear(rgb) @ _SRGB_TO_XYZ.T
    fx, fy, fz = (_lab_f(xyz[..., i] / _WHITE[i]) for i in range(3))
    L = np.clip(116.0 * fy - 16.0, 0.0, 100.0)
    return LabImage(L=L, a=500.0 * (fx - fy), b=200.0 * (fy - fz))


def lab_to_rgb(img):
    fy = (img.L + 16.0) / 116.0
    fx = fy + img.a / 500.0
    fz = fy - img.b / 200.0
    xyz = np.stack([_lab_f_inv(f) * w for f, w in zip((fx, fy, fz), _WHITE)], axis=-1)
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_SRGB.T)
    return RgbImage(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8))


def normalize(img):
    return NormalizedLab(L_n=img.L / L_SCALE - 1.0, ab_n=img.ab / CHROMA_SCALE)


def denormalize(img):
    L = (img.L_n + 1.0) * L_SCALE
    ab = img.ab_n * CHROMA_SCALE
    return LabImage(L=L, a=ab[..., 0], b=ab[..., 1])


def merge_luminance_chroma(L, ab_n):
    """Pair a raw L plane (0..100) with normalized chroma and render to sRGB."""
    L = np.asarray(L, dtype=np.float64)
    ab_n = np.asarray(ab_n, dtype=np.float64)
    if L.ndim != 2 or ab_n.shape != L.shape + (2,):
        raise ShapeError(f"incompatible shapes: L {L.shape} vs ab {ab_n.shape}")
    ab = np.clip(ab_n, -1.0, 1.0) * CHROMA_SCALE
    lab = LabImage(L=np.clip(L, 0.0, 100.0), a=ab[..., 0], b=ab[..., 1])
    return lab_to_rgb(lab)


def luminance_from_rgb(img):
    return rgb_to_lab(img).L


def chroma(lab):
    return np.hypot(lab.a, lab.b)


# --- torch counterparts -------------------------------------------------------

def lab_tensor(L_n, ab_n):
    if L_n.shape[0] != ab_n.shape[0] or L_n.shape[2:] != ab_n.shape[2:]:
        raise ShapeError(f"incompatible shapes: L {tuple(L_n.shape)} vs ab {tuple(ab_n.shape)}")
    return torch.cat([L_n, ab_n], dim=1)


def lab_to_rgb_tensor(L_n, ab_n):
    """Normalized Lab (B×1×H×W, B×2×H×W) to sRGB in nominal [0, 1], without clipping.

    Smooth everywhere the generator can reach, so gradients flow back into ab_n.
    """
    if L_n.dim() != 4 or L_n.shape[1] != 1 or ab_n.dim() != 4 or ab_n.shape[1] != 2:
        raise ShapeError(f"expected B×1×H×W and B×2×H×W, got "
                         f"{tuple(L_n.shape)} and {tuple(ab_n.shape)}")
    lab_tensor(L_n, ab_n)
    L = (L_n + 1.0) * L_SCALE
    a = ab_n[:, 0:1] * CHROMA_SCALE
    b = ab_n[:, 1:2] * CHROMA_SCALE
    fy = (L + 16.0) / 116.0
    fs = (fy + a / 500.0, fy, fy - b / 200.0)
    white = torch.as_tensor(_WHITE, dtype=L_n.dtype, device=L_n.device)
    xyz = torch.cat([
        torch.where(f > _DELTA, f ** 3, 3.0 * _DELTA ** 2 * (f - 4.0 / 29.0)) * white[i]
        for i, f in enumerate(fs)
    ], dim=1)
    m = torch.as_tensor(_XYZ_TO_SRGB, dtype=L_n.dtype, device=L_n.device)
    lin = torch.einsum("ij,bjhw->bihw", m, xyz)
    safe = torch.clamp(lin, min=0.0031308)
    return torch.where(lin <= 0.0031308, 12.92 * lin, 1.055 * safe ** (1.0 / 2.4) - 0.055)
