"""Synthetic multi-view scenes with exact ground truth.

A textured plane is rendered into each view by intersecting every pixel
ray with the plane and evaluating one analytic world texture at the
intersection, so all views sample the same world function and perfect
reprojection reproduces intensities exactly. Rendered intensities are
snapped to a 2**-30 grid so that the same world point evaluated along
different per-view FP paths yields bit-identical pixels.

Textures are pure functions of planar coordinates driven by an integer
hash; identical seeds and coordinates give identical values on every
platform and run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from keydepth.errors import ConfigurationError
from keydepth.geometry import DEFAULT_Z_MIN, CameraPose, DepthField, Intrinsics, se3_exp, se3_log
from keydepth.image import ImageBuffer, gaussian_kernel, load_image, load_pfm, quantize_intensities, save_image, save_pfm

NOISE_FREQ = 4.0  # value-noise lattice cells per scene unit
NOISE_GAIN = 3.0  # contrast stretch applied to blurred value noise
BLOB_AMPLITUDE = 0.9
BLOB_FLOOR = 0.05
LOW_TEXTURE_BLOB_AMPLITUDE = 0.35


@dataclass(frozen=True)
class TextureSpec:
    """Analytic world texture: smoothed value noise, Gaussian blobs, or
    low-contrast noise (optionally with a few blob features for the detector)."""

    kind: str
    seed: int = 0
    sigma_blur: float = 1.0
    count: int = 5
    contrast: float = 0.1
    blob_count: int = 0
    extent: float = 1.5

    def __post_init__(self):
        if self.kind not in ("smoothed_noise", "blobs", "low_texture"):
            raise ConfigurationError(f"unknown texture kind {self.kind!r}")
        if self.kind == "smoothed_noise" and self.sigma_blur <= 0:
            raise ConfigurationError("sigma_blur must be positive")
        if self.contrast < 0 or self.contrast > 1:
            raise ConfigurationError(f"contrast must lie in [0,1], got {self.contrast}")


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    intrinsics: Intrinsics
    plane_normal: np.ndarray
    plane_distance: float
    texture: TextureSpec
    source_poses: tuple[np.ndarray, ...]  # twists
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        n = np.asarray(self.plane_normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ConfigurationError(f"plane normal must be unit length, |n|={np.linalg.norm(n)}")
        object.__setattr__(self, "plane_normal", n)
        object.__setattr__(self, "source_poses", tuple(np.asarray(t, dtype=np.float64).reshape(6) for t in self.source_poses))
        if self.plane_distance <= 0:
            raise ConfigurationError(f"plane distance must be positive, got {self.plane_distance}")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("scene dimensions must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise sigma must be >= 0")


@dataclass(frozen=True)
class SceneSample:
    target: ImageBuffer
    sources: tuple[ImageBuffer, ...]
    gt_depth: DepthField
    gt_poses: tuple[CameraPose, ...]
    intrinsics: Intrinsics
    spec: SceneSpec | None = field(default=None, compare=False)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic integer-lattice hash to [0, 1); wrapping uint64 mixing."""
    with np.errstate(over="ignore"):
        x = np.asarray(ix, dtype=np.int64).astype(np.uint64)
        y = np.asarray(iy, dtype=np.int64).astype(np.uint64)
        s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        h = x * np.uint64(0x9E3779B97F4A7C15)
        h ^= y * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= s * np.uint64(0xD6E8FEB86659FD93) + np.uint64(0x2545F4914F6CDD1D)
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xC4CEB9FE1A85EC53)
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothed_lattice(m_lo: int, m_hi: int, n_lo: int, n_hi: int, seed: int, sigma: float) -> np.ndarray:
    """Lattice values convolved with a discrete Gaussian; position-pure."""
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    ms = np.arange(m_lo - r, m_hi + r + 1)
    ns = np.arange(n_lo - r, n_hi + r + 1)
    mg, ng = np.meshgrid(ms, ns, indexing="ij")
    raw = _hash01(mg, ng, seed)
    h = raw.shape[0] - 2 * r
    w = raw.shape[1] - 2 * r
    tmp = np.zeros((h, raw.shape[1]))
    for off in range(2 * r + 1):
        tmp += k[off] * raw[off:off + h, :]
    out = np.zeros((h, w))
    for off in range(2 * r + 1):
        out += k[off] * tmp[:, off:off + w]
    return out


def _smoothed_noise(a: np.ndarray, b: np.ndarray, seed: int, sigma_blur: float) -> np.ndarray:
    """Blurred value noise, contrast-stretched around 0.5 and clipped to [0,1]."""
    s = np.asarray(a, dtype=np.float64) * NOISE_FREQ
    t = np.asarray(b, dtype=np.float64) * NOISE_FREQ
    m0 = np.floor(s).astype(np.int64)
    n0 = np.floor(t).astype(np.int64)
    fa = s - m0
    fb = t - n0
    lat = _smoothed_lattice(int(m0.min()), int(m0.max()) + 1, int(n0.min()), int(n0.max()) + 1, seed, sigma_blur)
    mi = m0 - int(m0.min())
    ni = n0 - int(n0.min())
    v00 = lat[mi, ni]
    v10 = lat[mi + 1, ni]
    v01 = lat[mi, ni + 1]
    v11 = lat[mi + 1, ni + 1]
    v = (1 - fa) * (1 - fb) * v00 + fa * (1 - fb) * v10 + (1 - fa) * fb * v01 + fa * fb * v11
    return np.clip(0.5 + (v - 0.5) * NOISE_GAIN, 0.0, 1.0)


def _blob_params(seed: int, count: int, extent: float):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-extent, extent, size=(count, 2))
    sigmas = rng.uniform(0.04, 0.10, size=count)
    return centers, sigmas


def _blob_field(a: np.ndarray, b: np.ndarray, seed: int, count: int, extent: float, amplitude: float) -> np.ndarray:
    out = np.zeros_like(np.asarray(a, dtype=np.float64))
    centers, sigmas = _blob_params(seed, count, extent)
    for (ca, cb), sg in zip(centers, sigmas):
        d2 = (a - ca) ** 2 + (b - cb) ** 2
        out += amplitude * np.exp(-d2 / (2.0 * sg * sg))
    return out


def texture_value(spec: TextureSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """World intensity at planar coordinates (a, b); always clamped to [0,1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if spec.kind == "smoothed_noise":
        return _smoothed_noise(a, b, spec.seed, spec.sigma_blur)
    if spec.kind == "blobs":
        return np.clip(BLOB_FLOOR + _blob_field(a, b, spec.seed, spec.count, spec.extent, BLOB_AMPLITUDE), 0.0, 1.0)
    # low_texture: scaled noise around 0.5, plus optional blob features
    if spec.contrast == 0.0:
        v = np.full_like(a, 0.5)
    else:
        n = _smoothed_noise(a, b, spec.seed, spec.sigma_blur)
        v = 0.5 + (n - 0.5) * spec.contrast
    if spec.blob_count > 0:
        v = v + _blob_field(a, b, spec.seed + 1, spec.blob_count, spec.extent, LOW_TEXTURE_BLOB_AMPLITUDE)
    return np.clip(v, 0.0, 1.0)


def _plane_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    up = np.array([1.0, 0.0, 0.0]) if abs(n[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(up, n)
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def _pixel_rays(width: int, height: int, k: Intrinsics):
    jj, ii = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return (jj - k.cx) / k.fx, (ii - k.cy) / k.fy


def _intersect_view(width, height, k, normal, distance, view_name) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel ray-plane depth and 3-d intersection points; errors if not visible."""
    rx, ry = _pixel_rays(width, height, k)
    denom = normal[0] * rx + normal[1] * ry + normal[2]
    bad = (denom <= 0) | (distance / np.where(denom > 0, denom, 1.0) < DEFAULT_Z_MIN)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise ConfigurationError(f"plane not visible from {view_name} at pixel (i={i}, j={j})")
    depth = distance / denom
    return depth, rx, ry


def make_scene(spec: SceneSpec) -> SceneSample:
    """Render target and source views with exact ground-truth depth and poses."""
    k = spec.intrinsics
    n = spec.plane_normal
    e1, e2 = _plane_basis(n)
    rng = np.random.default_rng(spec.seed)

    depth_t, rx, ry = _intersect_view(spec.width, spec.height, k, n, spec.plane_distance, "target")
    px = depth_t * rx
    py = depth_t * ry
    pz = depth_t
    a = px * e1[0] + py * e1[1] + pz * e1[2]
    b = px * e2[0] + py * e2[1] + pz * e2[2]
    target = quantize_intensities(texture_value(spec.texture, a, b))

    sources = []
    poses = []
    for s_idx, twist in enumerate(spec.source_poses):
        pose = se3_exp(twist)
        r, t = pose.rotation, pose.translation
        n_s = r @ n
        dist_s = spec.plane_distance + float(n_s @ t)
        depth_s, sx, sy = _intersect_view(spec.width, spec.height, k, n_s, dist_s, f"source_{s_idx}")
        qx = depth_s * sx
        qy = depth_s * sy
        qz = depth_s
        # back to the target frame: X_t = R^T (X_s - t)
        dxp = qx - t[0]
        dyp = qy - t[1]
        dzp = qz - t[2]
        tx = r[0, 0] * dxp + r[1, 0] * dyp + r[2, 0] * dzp
        ty = r[0, 1] * dxp + r[1, 1] * dyp + r[2, 1] * dzp
        tz = r[0, 2] * dxp + r[1, 2] * dyp + r[2, 2] * dzp
        sa = tx * e1[0] + ty * e1[1] + tz * e1[2]
        sb = tx * e2[0] + ty * e2[1] + tz * e2[2]
        sources.append(quantize_intensities(texture_value(spec.texture, sa, sb)))
        poses.append(pose)

    if spec.noise_sigma > 0:
        target = quantize_intensities(np.clip(target + rng.normal(0.0, spec.noise_sigma, target.shape), 0.0, 1.0))
        sources = [
            quantize_intensities(np.clip(s + rng.normal(0.0, spec.noise_sigma, s.shape), 0.0, 1.0))
            for s in sources
        ]

    return SceneSample(
        target=ImageBuffer(target),
        sources=tuple(ImageBuffer(s) for s in sources),
        gt_depth=DepthField.from_depth(depth_t),
        gt_poses=tuple(poses),
        intrinsics=k,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# JSON spec and on-disk scene layout
# ---------------------------------------------------------------------------


def texture_to_dict(t: TextureSpec) -> dict:
    d = {"type": t.kind, "seed": t.seed}
    if t.kind == "smoothed_noise":
        d["sigma_blur"] = t.sigma_blur
    elif t.kind == "blobs":
        d.update(count=t.count, extent=t.extent)
    else:
        d.update(contrast=t.contrast, blob_count=t.blob_count, extent=t.extent, sigma_blur=t.sigma_blur)
    return d


def texture_from_dict(d: dict) -> TextureSpec:
    kind = d.get("type")
    if kind is None:
        raise ConfigurationError("texture spec needs a 'type' field")
    kwargs = {k: v for k, v in d.items() if k != "type"}
    renames = {"count": "count", "sigma_blur": "sigma_blur", "contrast": "contrast", "blob_count": "blob_count", "extent": "extent", "seed": "seed"}
    unknown = set(kwargs) - set(renames)
    if unknown:
        raise ConfigurationError(f"unknown texture fields: {sorted(unknown)}")
    return TextureSpec(kind=kind, **kwargs)


def spec_from_json(path: str) -> SceneSpec:
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e
    return spec_from_dict(d)


def spec_from_dict(d: dict) -> SceneSpec:
    try:
        return SceneSpec(
            width=int(d["width"]),
            height=int(d["height"]),
            intrinsics=Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"])),
            plane_normal=np.asarray(d["plane_normal"], dtype=np.float64),
            plane_distance=float(d["plane_distance"]),
            texture=texture_from_dict(d["texture"]),
            source_poses=tuple(np.asarray(t, dtype=np.float64) for t in d["source_poses"]),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            seed=int(d.get("seed", 0)),
        )
    except KeyError as e:
        raise ConfigurationError(f"scene spec missing field {e}") from e


def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "width": spec.width,
        "height": spec.height,
        "fx": spec.intrinsics.fx,
        "fy": spec.intrinsics.fy,
        "cx": spec.intrinsics.cx,
        "cy": spec.intrinsics.cy,
        "plane_normal": list(spec.plane_normal),
        "plane_distance": spec.plane_distance,
        "texture": texture_to_dict(spec.texture),
        "source_poses": [list(t) for t in spec.source_poses],
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
    }


def save_scene(sample: SceneSample, out_dir: str) -> dict:
    """Write PGM views, the PFM ground-truth depth, and manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    files = {"target": "target.pgm", "sources": [], "gt_depth": "gt_depth.pfm"}
    save_image(sample.target, os.path.join(out_dir, files["target"]))
    for i, src in enumerate(sample.sources):
        name = f"source_{i}.pgm"
        files["sources"].append(name)
        save_image(src, os.path.join(out_dir, name))
    save_pfm(sample.gt_depth.depth, os.path.join(out_dir, files["gt_depth"]))
    manifest = {
        "width": sample.target.width,
        "height": sample.target.height,
        "fx": sample.intrinsics.fx,
        "fy": sample.intrinsics.fy,
        "cx": sample.intrinsics.cx,
        "cy": sample.intrinsics.cy,
        "source_pose_twists": [list(se3_log(p)) for p in sample.gt_poses],
        "files": files,
    }
    if sample.spec is not None:
        manifest["spec"] = spec_to_dict(sample.spec)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_scene(scene_dir: str) -> SceneSample:
    path = os.path.join(scene_dir, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e
    k = Intrinsics(manifest["fx"], manifest["fy"], manifest["cx"], manifest["cy"])
    files = manifest["files"]
    target = load_image(os.path.join(scene_dir, files["target"]))
    sources = tuple(load_image(os.path.join(scene_dir, s)) for s in files["sources"])
    depth = load_pfm(os.path.join(scene_dir, files["gt_depth"]))
    poses = tuple(se3_exp(np.asarray(t)) for t in manifest["source_pose_twists"])
    spec = spec_from_dict(manifest["spec"]) if "spec" in manifest else None
    return SceneSample(target, sources, DepthField.from_depth(depth), poses, k, spec=spec)
