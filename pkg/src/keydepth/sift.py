"""SIFT descriptors at fixed geometry and dense per-pixel descriptor grids.

Binning arithmetic (mirrored by the brute-force oracle in the tests):

  * gradients: centered differences gx = 0.5*(I[i,j+1]-I[i,j-1]),
    gy = 0.5*(I[i+1,j]-I[i-1,j]); zero on the 1-px image border and outside
    the image (patches overhanging the border contribute nothing there);
  * orientation: atan2(gy, gx) wrapped to [0, 2*pi), split linearly across
    the two nearest of 8 bins of width pi/4;
  * spatial: patch offsets d in {-(size-1)/2 .. +(size-1)/2} map to
    fractional bin coordinates d/(size/4) + 1.5, split linearly across the
    two nearest of 4 bins per axis (out-of-range halves are dropped);
  * every sample is weighted by exp(-(du^2+dv^2)/(2*(size/2)^2));
  * accumulation order: dv ascending, du ascending, then spatial bins
    (r0,c0),(r0,c1),(r1,c0),(r1,c1); element index = (row*4 + col)*8 + ori;
  * normalize: L2-normalize, clamp at 0.2, renormalize, clamp at 0.2.
    The final clamp keeps every element inside [0, 0.2]; it is a no-op
    (norm stays exactly 1) unless the renormalization pushed a clamped
    element back over the threshold. A gradient-free patch yields the
    all-zero descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from keydepth.errors import ConfigurationError
from keydepth.image import ImageBuffer, bilinear_sample_many, gaussian_blur

DESCRIPTOR_DIM = 128
CLAMP = 0.2
N_SPATIAL = 4
N_ORI = 8
DETECTOR_SIGMA = 1.6
DETECTOR_K = 2.0 ** (1.0 / 3.0)
DEFAULT_PATCH_SIZE = 15

# A descriptor is a plain (128,) float array; kept unboxed for vector math.
Descriptor = np.ndarray


@dataclass(frozen=True)
class DescriptorGrid:
    """One descriptor per pixel: (H, W, 128), dims matching the source image."""

    descriptors: np.ndarray
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        d = self.descriptors
        if d.ndim != 3 or d.shape[2] != DESCRIPTOR_DIM:
            raise ConfigurationError(f"descriptor grid must be (H,W,{DESCRIPTOR_DIM}), got {d.shape}")

    @property
    def height(self) -> int:
        return self.descriptors.shape[0]

    @property
    def width(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    size: float
    orientation: float
    response: float


@dataclass(frozen=True)
class KeypointSet:
    """Keypoints ordered by non-increasing response (ties broken by y then x)."""

    keypoints: tuple[Keypoint, ...]

    def __len__(self) -> int:
        return len(self.keypoints)

    def pixel_anchors(self) -> np.ndarray:
        """(N, 2) integer (row, col) anchor pixels."""
        if not self.keypoints:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([[int(round(kp.y)), int(round(kp.x))] for kp in self.keypoints], dtype=np.int64)


def _centered_gradients(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """0.5-scaled centered differences, zero on the 1-px border."""
    gx = np.zeros_like(data)
    gy = np.zeros_like(data)
    gx[:, 1:-1] = 0.5 * (data[:, 2:] - data[:, :-2])
    gy[1:-1, :] = 0.5 * (data[2:, :] - data[:-2, :])
    return gx, gy


def _orientation_slabs(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """(H, W, 8) gradient magnitude split across the two nearest orientation bins."""
    mag = np.sqrt(gx * gx + gy * gy)
    ori = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    ob = ori / (np.pi / 4.0)
    ob = np.where(ob >= N_ORI, ob - N_ORI, ob)  # guard fl(2*pi) wraparound
    o0 = np.floor(ob).astype(np.int64)
    of = ob - o0
    o1 = (o0 + 1) % N_ORI
    h, w = mag.shape
    slabs = np.zeros((h, w, N_ORI))
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    slabs[ii, jj, o0] += mag * (1.0 - of)
    slabs[ii, jj, o1] += mag * of
    return slabs


def _offsets(size: int) -> np.ndarray:
    if size < 3:
        raise ConfigurationError(f"patch size must be >= 3, got {size}")
    if size % 2 == 1:
        return np.arange(size) - (size - 1) // 2
    return np.arange(size) - size // 2


def _spatial_weights(size: int):
    """Static per-offset (bin, weight) splits and the Gaussian window.

    Returns, for each patch offset d: the two bin rows/cols it feeds and
    their linear weights, plus exp-window values; bins outside 0..3 carry
    weight None and are skipped.
    """
    offs = _offsets(size)
    bin_w = size / float(N_SPATIAL)
    coord = offs / bin_w + 1.5
    b0 = np.floor(coord).astype(np.int64)
    frac = coord - b0
    sigma = size / 2.0
    gauss = np.exp(-(offs.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    return offs, b0, frac, gauss


def _bin_splits(b0: int, frac: float):
    out = []
    if 0 <= b0 < N_SPATIAL:
        out.append((b0, 1.0 - frac))
    if 0 <= b0 + 1 < N_SPATIAL:
        out.append((b0 + 1, frac))
    return out


_NORMALIZE_ROUNDS = 64


def _normalize(hist: np.ndarray) -> np.ndarray:
    """L2-normalize, then clamp at 0.2 / renormalize until stable.

    Repeating the clamp-renormalize pair until the renormalization no longer
    pushes any element back over the threshold projects onto the set
    {unit norm, elements <= 0.2}, so both constraints hold at once; the
    final safety clamp only bites for degenerate patches whose mass is too
    concentrated for that set to be reachable (norm then stays below 1).
    The zero histogram maps to the zero vector.
    """
    norm = np.sqrt(np.sum(hist * hist, axis=-1, keepdims=True))
    desc = np.where(norm > 0.0, hist / np.where(norm > 0.0, norm, 1.0), 0.0)
    for _ in range(_NORMALIZE_ROUNDS):
        over = np.max(desc, axis=-1, keepdims=True) > CLAMP
        if not np.any(over):
            break
        clamped = np.minimum(desc, CLAMP)
        norm = np.sqrt(np.sum(clamped * clamped, axis=-1, keepdims=True))
        renorm = np.where(norm > 0.0, clamped / np.where(norm > 0.0, norm, 1.0), 0.0)
        # only still-violating descriptors advance, so each one performs the
        # same op sequence whether computed densely or alone
        desc = np.where(over, renorm, desc)
    return np.minimum(desc, CLAMP)


def compute_dense_grid(img: ImageBuffer, size: int = DEFAULT_PATCH_SIZE) -> DescriptorGrid:
    """Descriptor at every pixel: grid[i,j] == compute_descriptor(img, j, i, size, 0).

    Implemented by accumulating, for each fixed patch offset, the shifted
    orientation slab into the spatial bins that offset feeds; per pixel this
    performs the identical FP operations in the identical order as the
    single-point routine, so the equality is exact.
    """
    if img.channels != 1:
        raise ConfigurationError("descriptors are computed on grayscale images")
    data = img.data
    h, w = data.shape
    gx, gy = _centered_gradients(data)
    slabs = _orientation_slabs(gx, gy)
    offs, b0, frac, gauss = _spatial_weights(size)

    hist = np.zeros((h, w, DESCRIPTOR_DIM))
    n = len(offs)
    for vi in range(n):
        dv = int(offs[vi])
        rows = _bin_splits(int(b0[vi]), float(frac[vi]))
        i_lo, i_hi = max(0, -dv), min(h, h - dv)
        if i_hi <= i_lo:
            continue
        for ui in range(n):
            du = int(offs[ui])
            cols = _bin_splits(int(b0[ui]), float(frac[ui]))
            j_lo, j_hi = max(0, -du), min(w, w - du)
            if j_hi <= j_lo:
                continue
            g = gauss[vi] * gauss[ui]
            src = slabs[i_lo + dv:i_hi + dv, j_lo + du:j_hi + du, :]
            for r, wr in rows:
                for c, wc in cols:
                    wgt = wr * wc * g
                    ch = (r * N_SPATIAL + c) * N_ORI
                    hist[i_lo:i_hi, j_lo:j_hi, ch:ch + N_ORI] += wgt * src
    return DescriptorGrid(_normalize(hist), patch_size=size)


def compute_descriptor(
    img: ImageBuffer, x: float, y: float, size: int = DEFAULT_PATCH_SIZE, orientation: float = 0.0
) -> Descriptor:
    """SIFT descriptor of the size x size patch at (x, y).

    Integer (x, y) with zero orientation follows the exact fast-path
    arithmetic of compute_dense_grid; subpixel or rotated patches sample
    the gradient field bilinearly at (rotated) offsets.
    """
    if img.channels != 1:
        raise ConfigurationError("descriptors are computed on grayscale images")
    h, w = img.data.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise ConfigurationError(f"descriptor center ({x}, {y}) outside image {w}x{h}")
    gx, gy = _centered_gradients(img.data)
    offs, b0, frac, gauss = _spatial_weights(size)
    n = len(offs)
    hist = np.zeros(DESCRIPTOR_DIM)

    exact = orientation == 0.0 and float(x).is_integer() and float(y).is_integer()
    if exact:
        slabs = _orientation_slabs(gx, gy)
        xi, yi = int(x), int(y)
        for vi in range(n):
            dv = int(offs[vi])
            i = yi + dv
            if not (0 <= i < h):
                continue
            rows = _bin_splits(int(b0[vi]), float(frac[vi]))
            for ui in range(n):
                du = int(offs[ui])
                j = xi + du
                if not (0 <= j < w):
                    continue
                cols = _bin_splits(int(b0[ui]), float(frac[ui]))
                g = gauss[vi] * gauss[ui]
                src = slabs[i, j, :]
                for r, wr in rows:
                    for c, wc in cols:
                        wgt = wr * wc * g
                        ch = (r * N_SPATIAL + c) * N_ORI
                        hist[ch:ch + N_ORI] += wgt * src
        return _normalize(hist)

    # General path: bilinear gradient samples at (rotated) subpixel offsets.
    cos_t, sin_t = np.cos(orientation), np.sin(orientation)
    dus, dvs = np.meshgrid(offs.astype(np.float64), offs.astype(np.float64))
    px = x + cos_t * dus - sin_t * dvs
    py = y + sin_t * dus + cos_t * dvs
    sgx, _, _, inb = bilinear_sample_many(gx, px, py)
    sgy, _, _, _ = bilinear_sample_many(gy, px, py)
    mag = np.sqrt(sgx * sgx + sgy * sgy) * inb
    ori = np.mod(np.arctan2(sgy, sgx) - orientation, 2.0 * np.pi)
    ob = ori / (np.pi / 4.0)
    ob = np.where(ob >= N_ORI, ob - N_ORI, ob)
    o0 = np.floor(ob).astype(np.int64)
    of = ob - o0
    for vi in range(n):
        rows = _bin_splits(int(b0[vi]), float(frac[vi]))
        for ui in range(n):
            if mag[vi, ui] == 0.0:
                continue
            cols = _bin_splits(int(b0[ui]), float(frac[ui]))
            g = gauss[vi] * gauss[ui]
            m = mag[vi, ui]
            k0 = int(o0[vi, ui])
            k1 = (k0 + 1) % N_ORI
            f = of[vi, ui]
            for r, wr in rows:
                for c, wc in cols:
                    wgt = wr * wc * g * m
                    ch = (r * N_SPATIAL + c) * N_ORI
                    hist[ch + k0] += wgt * (1.0 - f)
                    hist[ch + k1] += wgt * f
    return _normalize(hist)


def detect_keypoints(
    img: ImageBuffer, max_count: int = 500, contrast_threshold: float = 0.03
) -> KeypointSet:
    """Difference-of-Gaussians extrema on one octave of three DoG levels.

    Blur levels sigma * k^n (sigma=1.6, k=2^(1/3), n=0..3) are computed
    directly from the input; extrema are 3x3x3 local max/min of the middle
    DoG with |DoG| >= contrast_threshold, greedily non-max suppressed within
    1 px, ordered by descending |response| with ascending (y, x) tie-break.
    Size is fixed to 15 and orientation to 0.
    """
    if max_count < 1:
        raise ConfigurationError(f"max_count must be >= 1, got {max_count}")
    if img.channels != 1:
        raise ConfigurationError("keypoint detection expects a grayscale image")
    h, w = img.data.shape
    if h < 3 or w < 3:
        return KeypointSet(())

    levels = [gaussian_blur(img, DETECTOR_SIGMA * DETECTOR_K ** n).data for n in range(4)]
    dogs = [levels[i + 1] - levels[i] for i in range(3)]
    center = dogs[1][1:-1, 1:-1]

    neighborhoods = []
    for dog in dogs:
        for di in range(3):
            for dj in range(3):
                neighborhoods.append(dog[di:h - 2 + di, dj:w - 2 + dj])
    stack = np.stack(neighborhoods)  # (27, h-2, w-2); index 13 is the center
    others = np.delete(stack, 13, axis=0)
    is_max = (center > 0) & np.all(center >= others, axis=0)
    is_min = (center < 0) & np.all(center <= others, axis=0)
    passes = (is_max | is_min) & (np.abs(center) >= contrast_threshold)

    iy, ix = np.nonzero(passes)
    if len(iy) == 0:
        return KeypointSet(())
    ys = iy + 1
    xs = ix + 1
    resp = np.abs(center[iy, ix])

    order = np.lexsort((xs, ys, -resp))
    kept: list[tuple[int, int, float]] = []
    for idx in order:
        y, x, r = int(ys[idx]), int(xs[idx]), float(resp[idx])
        if any((y - ky) ** 2 + (x - kx) ** 2 <= 1.0 + 1e-12 for ky, kx, _ in kept):
            continue
        kept.append((y, x, r))
        if len(kept) >= max_count:
            break
    kps = tuple(
        Keypoint(x=float(x), y=float(y), size=float(DEFAULT_PATCH_SIZE), orientation=0.0, response=r)
        for y, x, r in kept
    )
    return KeypointSet(kps)


def sample_descriptor(grid: DescriptorGrid, u: float, v: float):
    """Bilinear lookup in the descriptor grid with exact per-element partials."""
    value, d_du, d_dv, inb = bilinear_sample_many(grid.descriptors, np.float64(u), np.float64(v))
    return np.asarray(value), np.asarray(d_du), np.asarray(d_dv), bool(inb)


def sample_descriptor_many(grid: DescriptorGrid, u: np.ndarray, v: np.ndarray):
    """Vectorized sample_descriptor over coordinate arrays; returns (N,128) blocks."""
    return bilinear_sample_many(grid.descriptors, u, v)
