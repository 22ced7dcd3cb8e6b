"""Image containers and the shared numeric substrate.

Conventions used throughout the package:
  * pixel (i, j) = (row, col) sits at continuous coordinate (u=j, v=i),
    i.e. u is the x/column axis and v the y/row axis, with zero offset;
  * intensities are 64-bit reals in [0, 1]; 8-bit files are divided by 255
    on load;
  * out-of-bounds samples carry zero value and zero derivatives and are
    excluded from losses (never clamped).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from keydepth.errors import ConfigurationError


@dataclass(frozen=True)
class ImageBuffer:
    """H x W (x C) array of intensities in [0, 1]; C is 1 or 3."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim == 2:
            pass
        elif d.ndim == 3 and d.shape[2] == 3:
            pass
        else:
            raise ConfigurationError(f"image data must be (H,W) or (H,W,3), got shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ConfigurationError(f"image dims must be positive, got {d.shape}")
        if d.dtype != np.float64:
            object.__setattr__(self, "data", d.astype(np.float64))
        if not np.all(np.isfinite(self.data)):
            raise ConfigurationError("image contains non-finite intensities")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ConfigurationError(
                f"intensities must lie in [0,1], got range [{self.data.min()}, {self.data.max()}]"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]


@dataclass(frozen=True)
class SampleResult:
    """One bilinear sample: value, exact partials, and a bounds flag.

    When in_bounds is false, value and derivatives are exactly 0 and the
    sample must be excluded from any loss.
    """

    value: float | np.ndarray
    d_du: float | np.ndarray
    d_dv: float | np.ndarray
    in_bounds: bool


def _corner_indices(u, v, width: int, height: int):
    """Cell corners and fractional offsets for bilinear interpolation.

    The floor cell is clamped so that u == width-1 falls into the last
    interior cell with fraction 1; lattice points therefore reproduce the
    stored pixel exactly.
    """
    j0 = np.clip(np.floor(u), 0, max(width - 2, 0)).astype(np.int64)
    i0 = np.clip(np.floor(v), 0, max(height - 2, 0)).astype(np.int64)
    j1 = np.minimum(j0 + 1, width - 1)
    i1 = np.minimum(i0 + 1, height - 1)
    a = u - j0
    b = v - i0
    return i0, i1, j0, j1, a, b


def bilinear_sample_many(data: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Vectorized bilinear sampling with analytic partials.

    data is (H, W) or (H, W, C); u, v are same-shape coordinate arrays.
    Returns (value, d_du, d_dv, in_bounds); out-of-bounds entries are
    exactly zero.
    """
    h, w = data.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    in_bounds = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    uc = np.where(in_bounds, u, 0.0)
    vc = np.where(in_bounds, v, 0.0)
    i0, i1, j0, j1, a, b = _corner_indices(uc, vc, w, h)
    p00 = data[i0, j0]
    p10 = data[i0, j1]
    p01 = data[i1, j0]
    p11 = data[i1, j1]
    if data.ndim == 3:
        a = a[..., None]
        b = b[..., None]
        mask = in_bounds[..., None]
    else:
        mask = in_bounds
    value = (1.0 - a) * (1.0 - b) * p00 + a * (1.0 - b) * p10 + (1.0 - a) * b * p01 + a * b * p11
    d_du = (1.0 - b) * (p10 - p00) + b * (p11 - p01)
    d_dv = (1.0 - a) * (p01 - p00) + a * (p11 - p10)
    zero = np.zeros_like(value)
    value = np.where(mask, value, zero)
    d_du = np.where(mask, d_du, zero)
    d_dv = np.where(mask, d_dv, zero)
    return value, d_du, d_dv, in_bounds


def bilinear_sample(img: ImageBuffer, u: float, v: float) -> SampleResult:
    """Sample img at subpixel (u, v) with the four-corner weighted sum.

    in_bounds is true iff 0 <= u <= width-1 and 0 <= v <= height-1;
    out-of-bounds samples signal via the flag, never an exception.
    """
    value, d_du, d_dv, inb = bilinear_sample_many(img.data, np.float64(u), np.float64(v))
    if img.channels == 1:
        return SampleResult(float(value), float(d_du), float(d_dv), bool(inb))
    return SampleResult(np.asarray(value), np.asarray(d_du), np.asarray(d_dv), bool(inb))


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    """Luma conversion 0.299R + 0.587G + 0.114B; 1-channel input is returned unchanged."""
    if img.channels == 1:
        return img
    gray = 0.299 * img.data[:, :, 0] + 0.587 * img.data[:, :, 1] + 0.114 * img.data[:, :, 2]
    return ImageBuffer(np.clip(gray, 0.0, 1.0))


def image_gradient(img: ImageBuffer) -> tuple[ImageBuffer, ImageBuffer]:
    """Forward differences: gx[i,j] = I[i,j+1] - I[i,j] (last column 0), gy analogous."""
    if img.channels != 1:
        raise ConfigurationError("image_gradient expects a 1-channel image")
    d = img.data
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[:, :-1] = d[:, 1:] - d[:, :-1]
    gy[:-1, :] = d[1:, :] - d[:-1, :]
    return _raw(gx), _raw(gy)


def _raw(arr: np.ndarray) -> ImageBuffer:
    """Wrap an array that may legitimately leave [0,1] (gradients)."""
    buf = ImageBuffer.__new__(ImageBuffer)
    object.__setattr__(buf, "data", np.asarray(arr, dtype=np.float64))
    return buf


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}")
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: ImageBuffer, sigma: float) -> ImageBuffer:
    """Separable Gaussian convolution with replicate borders."""
    if img.channels != 1:
        raise ConfigurationError("gaussian_blur expects a 1-channel image")
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    d = img.data
    h, w = d.shape
    padded = np.pad(d, ((0, 0), (r, r)), mode="edge")
    out = np.zeros_like(d)
    for off in range(2 * r + 1):
        out += k[off] * padded[:, off:off + w]
    padded = np.pad(out, ((r, r), (0, 0)), mode="edge")
    out = np.zeros_like(d)
    for off in range(2 * r + 1):
        out += k[off] * padded[off:off + h, :]
    return _raw(out)


# ---------------------------------------------------------------------------
# File formats: PGM (P5) / PPM (P6) 8-bit, PFM (Pf) float32 little-endian.
# ---------------------------------------------------------------------------


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ConfigurationError("unexpected end of header")
        if c.isspace():
            if tok:
                return tok
            continue
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        tok += c


def load_image(path: str) -> ImageBuffer:
    """Load a P5 PGM or P6 PPM (8-bit, maxval 255) as intensities in [0,1]."""
    try:
        with open(path, "rb") as f:
            magic = _read_token(f)
            if magic not in (b"P5", b"P6"):
                raise ConfigurationError(f"{path}: unsupported magic {magic!r}")
            w = int(_read_token(f))
            h = int(_read_token(f))
            maxval = int(_read_token(f))
            if maxval != 255:
                raise ConfigurationError(f"{path}: only maxval 255 supported, got {maxval}")
            ch = 1 if magic == b"P5" else 3
            raw = f.read(w * h * ch)
            if len(raw) != w * h * ch:
                raise ConfigurationError(f"{path}: truncated pixel data")
    except OSError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    if ch == 3:
        arr = arr.reshape(h, w, 3)
    else:
        arr = arr.reshape(h, w)
    return ImageBuffer(arr)


def save_image(img: ImageBuffer, path: str) -> None:
    """Write a P5 PGM (1 channel) or P6 PPM (3 channels), 8-bit."""
    quant = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if img.channels == 1 else b"P6"
    try:
        with open(path, "wb") as f:
            f.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
            f.write(quant.tobytes())
    except OSError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def load_pfm(path: str) -> np.ndarray:
    """Load a grayscale PFM (Pf, negative scale = little-endian) as float64 (H, W)."""
    try:
        with open(path, "rb") as f:
            magic = _read_token(f)
            if magic != b"Pf":
                raise ConfigurationError(f"{path}: unsupported PFM magic {magic!r}")
            w = int(_read_token(f))
            h = int(_read_token(f))
            scale = float(_read_token(f))
            raw = f.read(w * h * 4)
            if len(raw) != w * h * 4:
                raise ConfigurationError(f"{path}: truncated PFM data")
    except OSError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.float64)
    return arr[::-1, :].copy()  # PFM rows are stored bottom-to-top


def save_pfm(arr: np.ndarray, path: str) -> None:
    """Write a grayscale float32 PFM with scale -1.0 (little-endian)."""
    if arr.ndim != 2:
        raise ConfigurationError(f"PFM export expects a 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    data = arr[::-1, :].astype("<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
            f.write(data)
    except OSError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def quantize_intensities(arr: np.ndarray, step_bits: int = 30) -> np.ndarray:
    """Snap intensities to a 2**-step_bits grid.

    Rendered views of the same world point must agree bit-for-bit even though
    their evaluation paths round differently; snapping to a grid much coarser
    than accumulated roundoff (and much finer than any loss tolerance) makes
    self-consistent residuals exactly zero.
    """
    scale = float(2 ** step_bits)
    return np.round(arr * scale) / scale
