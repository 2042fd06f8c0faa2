"""Grayscale image handling: PGM I/O, noise models, patches, PSNR, Anscombe."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, ParameterError
from ..expfam import get_distribution

POSITIVE_FLOOR = 1e-4


@dataclass
class ImageTensor:
    """Double-precision grayscale image; ``peak`` defaults to the maximum intensity."""

    intensities: np.ndarray
    peak: float | None = None

    def __post_init__(self):
        self.intensities = np.array(self.intensities, dtype=float)
        if self.intensities.ndim != 2:
            raise ParameterError(f"images must be 2-D, got shape {self.intensities.shape}")
        if self.peak is None:
            self.peak = float(self.intensities.max())

    @property
    def height(self):
        return self.intensities.shape[0]

    @property
    def width(self):
        return self.intensities.shape[1]

    @property
    def shape(self):
        return self.intensities.shape


# ---------------------------------------------------------------------------
# PGM

_TOKEN = re.compile(rb"#[^\n]*\n?|(\S+)")


def _header_tokens(raw, count):
    """First ``count`` whitespace-separated header tokens (comments skipped) and the offset after them."""
    out, pos = [], 0
    for m in _TOKEN.finditer(raw):
        if m.group(1) is not None:
            out.append(m.group(1))
            pos = m.end()
            if len(out) == count:
                return out, pos
    raise ValueError("truncated PGM header")


def read_pgm(path):
    """Read a P2 (ASCII) or P5 (binary, 8/16-bit) PGM file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        (magic, w, h, maxval), pos = _header_tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header ({exc})") from None
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    if magic == b"P2":
        vals = np.array(raw[pos:].split()[: w * h], dtype=float)
    elif magic == b"P5":
        body = raw[pos + 1 :]  # exactly one whitespace byte ends the header
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        vals = np.frombuffer(body, dtype=dtype, count=min(w * h, len(body) // dtype.itemsize)).astype(float)
    else:
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    if vals.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {vals.size}")
    return ImageTensor(vals.reshape(h, w))


def write_pgm(path, img, maxval=255, binary=True):
    """Write intensities rounded and clipped to ``[0, maxval]``."""
    x = img.intensities if isinstance(img, ImageTensor) else np.asarray(img, dtype=float)
    if not 0 < maxval < 65536:
        raise ValueError(f"unsupported maxval {maxval}")
    q = np.clip(np.rint(x), 0, maxval).astype(np.int64)
    h, w = q.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
            fh.write(q.astype(">u2" if maxval > 255 else "u1").tobytes())
        else:
            fh.write(b"P2\n%d %d\n%d\n" % (w, h, maxval))
            for row in q:
                fh.write(" ".join(map(str, row)).encode() + b"\n")


def to_display_range(img, reference_peak, maxval=255):
    """Map intensities on a ``[0, reference_peak]`` scale back to ``[0, maxval]``."""
    return ImageTensor(img.intensities * (maxval / reference_peak), peak=maxval)


# ---------------------------------------------------------------------------
# intensity scaling and noise


def rescale_peak(img, peak):
    """Divide by the maximum and multiply by ``peak``."""
    x = img.intensities
    top = x.max()
    if not top > 0:
        raise DomainError("cannot rescale an image without positive intensities")
    return ImageTensor(x / top * peak, peak=float(peak))


def add_noise(img, dist, rng, variance=1.0, shape=10.0):
    """Independent per-pixel noise whose mean is the clean intensity.

    Gaussian noise uses ``variance``; Gamma noise uses the given ``shape``.
    """
    dist = get_distribution(dist)
    x = img.intensities
    if dist.name in ("poisson", "exponential", "gamma") and np.any(x < 0):
        bad = tuple(int(i) for i in np.argwhere(x < 0)[0])
        raise DomainError(f"negative intensity at {bad} under {dist.name} noise")
    if dist.name == "poisson":
        y = rng.poisson(x).astype(float)
    elif dist.name == "exponential":
        y = rng.exponential(np.maximum(x, POSITIVE_FLOOR))
    elif dist.name == "gamma":
        y = rng.gamma(shape, np.maximum(x, POSITIVE_FLOOR) / shape)
    elif dist.name == "gaussian":
        y = rng.normal(x, math.sqrt(variance))
    else:
        raise ParameterError(f"no image noise model for {dist.name}")
    return ImageTensor(y, peak=img.peak)


# ---------------------------------------------------------------------------
# patches


@dataclass
class PatchGrid:
    patch_side: int
    stride: int
    image_shape: tuple
    positions: np.ndarray  # (N, 2) top-left corners
    patches: np.ndarray  # (N, patch_side**2)

    @property
    def coverage(self):
        cov = np.zeros(self.image_shape)
        p = self.patch_side
        for r, c in self.positions:
            cov[r : r + p, c : c + p] += 1
        return cov


def _starts(n, p, stride):
    s = list(range(0, n - p + 1, stride))
    if s[-1] != n - p:
        s.append(n - p)  # snap a final row/column to the edge
    return s


def extract_patches(img, patch_side, stride):
    x = img.intensities if isinstance(img, ImageTensor) else np.asarray(img, dtype=float)
    h, w = x.shape
    p = int(patch_side)
    if stride < 1 or p < 1:
        raise ParameterError("patch side and stride must be positive")
    if stride > p:
        raise ParameterError(f"stride {stride} exceeds the patch side {p} and would leave pixels uncovered")
    if h < p or w < p:
        raise ParameterError(f"image {x.shape} is smaller than the {p}x{p} patch")
    rows, cols = _starts(h, p, stride), _starts(w, p, stride)
    pos = np.array([(r, c) for r in rows for c in cols])
    win = np.lib.stride_tricks.sliding_window_view(x, (p, p))
    patches = win[pos[:, 0], pos[:, 1]].reshape(len(pos), p * p).copy()
    return PatchGrid(p, int(stride), (h, w), pos, patches)


def reassemble(grid, estimates, peak=None):
    """Average overlapping patch estimates with equal weights."""
    est = np.asarray(estimates, dtype=float)
    if est.shape != grid.patches.shape:
        raise ParameterError(f"estimates {est.shape} do not match patches {grid.patches.shape}")
    p = grid.patch_side
    acc = np.zeros(grid.image_shape)
    cov = np.zeros(grid.image_shape)
    for (r, c), e in zip(grid.positions, est):
        acc[r : r + p, c : c + p] += e.reshape(p, p)
        cov[r : r + p, c : c + p] += 1
    return ImageTensor(acc / cov, peak=peak)


# ---------------------------------------------------------------------------
# metrics and transforms


def psnr(clean, estimate, peak=None):
    """``10 log10(peak^2 / MSE)`` in dB with the clean image's peak; ``inf`` when identical."""
    a = clean.intensities if isinstance(clean, ImageTensor) else np.asarray(clean, dtype=float)
    b = estimate.intensities if isinstance(estimate, ImageTensor) else np.asarray(estimate, dtype=float)
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if peak is None:
        peak = clean.peak if isinstance(clean, ImageTensor) else float(a.max())
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def anscombe(z):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise DomainError("the Anscombe transform needs nonnegative input")
    return 2.0 * np.sqrt(z + 0.375)


def inverse_anscombe(x):
    return (np.asarray(x, dtype=float) / 2.0) ** 2 - 0.375


# ---------------------------------------------------------------------------
# test images


def synthetic_house(size=256):
    """Procedural house scene on a 0-255 scale: sky, gabled house, windows, door, lawn."""
    n = int(size)
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = 200.0 - 60.0 * yy  # sky gradient
    ground = yy > 0.78
    img[ground] = 90.0 + 25.0 * np.sin(40.0 * xx[ground]) * np.sin(23.0 * yy[ground])
    body = (xx > 0.2) & (xx < 0.8) & (yy > 0.45) & (yy <= 0.78)
    img[body] = 150.0 + 8.0 * np.floor(yy[body] * 40 % 2)  # siding
    roof = (yy > 0.2) & (yy <= 0.45) & (np.abs(xx - 0.5) < (yy - 0.2) * 1.5)
    img[roof] = 60.0 + 10.0 * np.floor((xx[roof] + yy[roof]) * 30 % 2)
    for x0 in (0.27, 0.6):
        win = (xx > x0) & (xx < x0 + 0.13) & (yy > 0.52) & (yy < 0.64)
        img[win] = 235.0
        img[win & ((np.abs(xx - (x0 + 0.065)) < 0.006) | (np.abs(yy - 0.58) < 0.006))] = 40.0
    door = (xx > 0.45) & (xx < 0.55) & (yy > 0.6) & (yy <= 0.78)
    img[door] = 35.0
    chimney = (xx > 0.65) & (xx < 0.71) & (yy > 0.18) & (yy < 0.35)
    img[chimney] = 110.0
    return ImageTensor(np.clip(img, 0, 255), peak=None)


def load_test_image(name="house", size=256):
    """``house`` is procedural; ``camera`` crops scikit-image's cameraman when available."""
    if name == "house":
        return synthetic_house(size)
    if name == "camera":
        try:
            from skimage import data
        except ImportError as exc:  # optional extra
            raise ParameterError("the 'camera' image needs scikit-image (pip install artifact[images])") from exc
        x = data.camera().astype(float)
        r0 = (x.shape[0] - size) // 2
        c0 = (x.shape[1] - size) // 2
        return ImageTensor(x[r0 : r0 + size, c0 : c0 + size])
    raise ParameterError(f"unknown test image {name!r}; expected 'house' or 'camera'")
