"""The weighted loss stack with analytic gradients.

Four components: keypoint similarity over 128-d descriptor vectors,
photometric L1, edge-aware smoothness on mean-normalized inverse depth,
and the explainability-mask regularizer. The total is

    total = alpha*l_key + beta*l_photo + gamma*l_smooth + delta*l_expl

evaluated in exactly that order, so it is bit-reproducible. Gradients are
taken w.r.t. per-pixel log-depth, per-source 6-d pose tangents, and
per-pixel mask logits. Descriptor grids are precomputed constants:
keypoint-loss gradients flow only through the warp coordinates, and in
detector mode only the selected keypoint pixels carry any gradient.

L1 subgradients at exactly zero residual are zero. Losses are means over
valid pixels/anchors by default; normalize=False switches to raw sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from keydepth.errors import ConfigurationError
from keydepth.geometry import CameraPose, DepthField, Intrinsics, WarpField, compute_warp
from keydepth.image import ImageBuffer, bilinear_sample_many, to_grayscale
from keydepth.sift import DescriptorGrid, KeypointSet, compute_dense_grid, detect_keypoints, sample_descriptor_many


@dataclass(frozen=True)
class LossWeights:
    """Eq-stack weights; defaults are the best values reported for the objective."""

    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.2

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {val}")


@dataclass(frozen=True)
class LossModes:
    """Ablation switches: detector on/off, mask on/off, mean vs raw-sum losses."""

    use_detector: bool = True
    use_mask: bool = True
    normalize: bool = True
    mask_gates_keypoint: bool = True


@dataclass
class ExplainabilityMask:
    """Per-pixel reliability weight sigmoid(logit) in (0,1), optimized via logits."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ConfigurationError(f"mask logits must be 2-d, got shape {self.logits.shape}")

    @property
    def weights(self) -> np.ndarray:
        return _sigmoid(self.logits)


@dataclass(frozen=True)
class LossBreakdown:
    l_key: float
    l_photo: float
    l_smooth: float
    l_expl: float
    total: float
    per_source: tuple[tuple[float, float], ...] = ()  # (l_key_i, l_photo_i) per source
    diagnostics: dict = field(default_factory=dict)


@dataclass
class GradientSet:
    g_logdepth: np.ndarray  # (H, W)
    g_twist: np.ndarray  # (S, 6), left-tangent pose coordinates
    g_mask_logits: np.ndarray  # (H, W)


@dataclass
class ComponentGradients:
    """Gradients of one per-source loss component."""

    g_logdepth: np.ndarray
    g_twist: np.ndarray  # (6,)
    g_mask_logits: np.ndarray


@dataclass(frozen=True)
class PreparedScene:
    """Static per-scene tensors the loss consumes: images, grids, keypoints."""

    target: ImageBuffer
    sources: tuple[ImageBuffer, ...]
    intrinsics: Intrinsics
    grid_t: DescriptorGrid
    grids_s: tuple[DescriptorGrid, ...]
    keypoints: KeypointSet

    @property
    def shape(self) -> tuple[int, int]:
        return self.target.data.shape[:2]


def prepare_scene(
    target: ImageBuffer,
    sources: list[ImageBuffer] | tuple[ImageBuffer, ...],
    intrinsics: Intrinsics,
    patch_size: int = 15,
    max_keypoints: int = 500,
    contrast_threshold: float = 0.03,
) -> PreparedScene:
    """Grayscale the views, precompute descriptor grids, detect target keypoints."""
    gray_t = to_grayscale(target)
    gray_s = tuple(to_grayscale(s) for s in sources)
    for s in gray_s:
        if s.data.shape != gray_t.data.shape:
            raise ConfigurationError("source and target dimensions differ")
    grid_t = compute_dense_grid(gray_t, patch_size)
    grids_s = tuple(compute_dense_grid(s, patch_size) for s in gray_s)
    kps = detect_keypoints(gray_t, max_count=max_keypoints, contrast_threshold=contrast_threshold)
    return PreparedScene(gray_t, gray_s, intrinsics, grid_t, grids_s, kps)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _zero_grads(shape: tuple[int, int]) -> ComponentGradients:
    return ComponentGradients(np.zeros(shape), np.zeros(6), np.zeros(shape))


def photometric_loss(
    target: ImageBuffer,
    source: ImageBuffer,
    warp: WarpField,
    mask: ExplainabilityMask | None = None,
    normalize: bool = True,
) -> tuple[float, ComponentGradients, dict]:
    """Mean (or sum) over valid pixels of w * |sample(source, u*, v*) - target|."""
    tdata = target.data
    if tdata.shape != source.data.shape:
        raise ConfigurationError("photometric loss requires matching image shapes")
    if tdata.ndim != 2:
        raise ConfigurationError("photometric loss expects grayscale views")
    valid = warp.valid
    n_valid = int(valid.sum())
    diag = {"n_valid": n_valid}
    if n_valid == 0:
        diag["no_valid_pixels"] = True
        return 0.0, _zero_grads(tdata.shape), diag

    vals, d_du, d_dv, _ = bilinear_sample_many(source.data, warp.u, warp.v)
    resid = np.where(valid, vals - tdata, 0.0)
    w = mask.weights if mask is not None else None
    wr = np.abs(resid) if w is None else w * np.abs(resid)
    denom = float(n_valid) if normalize else 1.0
    value = float(np.sum(np.where(valid, wr, 0.0)) / denom)

    sgn = np.sign(resid)
    scale = (sgn if w is None else w * sgn) / denom
    g_u = np.where(valid, scale * d_du, 0.0)
    g_v = np.where(valid, scale * d_dv, 0.0)
    g_ld = g_u * warp.j_depth[:, :, 0] + g_v * warp.j_depth[:, :, 1]
    g_twist = np.array(
        [float(np.sum(g_u * warp.j_twist[:, :, 0, k] + g_v * warp.j_twist[:, :, 1, k])) for k in range(6)]
    )
    if w is None:
        g_logits = np.zeros_like(tdata)
    else:
        g_logits = np.where(valid, np.abs(resid) * w * (1.0 - w), 0.0) / denom
    return value, ComponentGradients(g_ld, g_twist, g_logits), diag


def keypoint_similarity_loss(
    grid_t: DescriptorGrid,
    grid_s: DescriptorGrid,
    warp: WarpField,
    keypoints: KeypointSet | None = None,
    mask: ExplainabilityMask | None = None,
    normalize: bool = True,
) -> tuple[float, ComponentGradients, dict]:
    """L1 between anchor descriptors and subpixel-sampled source descriptors.

    Anchors are every pixel when keypoints is None, otherwise the detected
    keypoint pixels. Descriptors are constants; gradients flow only through
    the sampling coordinates, so non-anchor pixels carry exactly zero
    gradient.
    """
    h, w_px = grid_t.height, grid_t.width
    if (grid_s.height, grid_s.width) != (h, w_px):
        raise ConfigurationError("descriptor grids have mismatched dimensions")
    shape = (h, w_px)
    if keypoints is not None:
        anchors = keypoints.pixel_anchors()
        if len(anchors) == 0:
            return 0.0, _zero_grads(shape), {"n_anchors": 0, "empty_keypoints": True}
        ai, aj = anchors[:, 0], anchors[:, 1]
    else:
        ii, jj = np.meshgrid(np.arange(h), np.arange(w_px), indexing="ij")
        ai, aj = ii.ravel(), jj.ravel()

    u = warp.u[ai, aj]
    v = warp.v[ai, aj]
    avalid = warp.valid[ai, aj]
    n_valid = int(avalid.sum())
    diag = {"n_anchors": len(ai), "n_valid": n_valid}
    if n_valid == 0:
        diag["no_valid_anchors"] = True
        return 0.0, _zero_grads(shape), diag

    desc_t = grid_t.descriptors[ai, aj]
    s_val, s_du, s_dv, _ = sample_descriptor_many(grid_s, u, v)
    diff = desc_t - s_val
    term = np.sum(np.abs(diff), axis=1)
    aw = mask.weights[ai, aj] if mask is not None else np.ones_like(term)
    denom = float(n_valid) if normalize else 1.0
    value = float(np.sum(np.where(avalid, aw * term, 0.0)) / denom)

    sgn = np.sign(diff)
    dterm_du = -np.sum(sgn * s_du, axis=1)
    dterm_dv = -np.sum(sgn * s_dv, axis=1)
    g_u = np.where(avalid, aw * dterm_du, 0.0) / denom
    g_v = np.where(avalid, aw * dterm_dv, 0.0) / denom

    jd = warp.j_depth[ai, aj]  # (N, 2)
    ld_contrib = g_u * jd[:, 0] + g_v * jd[:, 1]
    logit_contrib = None
    if mask is not None:
        wts = mask.weights[ai, aj]
        logit_contrib = np.where(avalid, term * wts * (1.0 - wts), 0.0) / denom
    g_ld = np.zeros(shape)
    g_logits = np.zeros(shape)
    if keypoints is None:
        g_ld = ld_contrib.reshape(shape)
        if logit_contrib is not None:
            g_logits = logit_contrib.reshape(shape)
    else:
        g_ld[ai, aj] = ld_contrib  # anchor pixels are distinct after NMS
        if logit_contrib is not None:
            g_logits[ai, aj] = logit_contrib
    jt = warp.j_twist[ai, aj]  # (N, 2, 6)
    g_twist = np.array([float(np.sum(g_u * jt[:, 0, k] + g_v * jt[:, 1, k])) for k in range(6)])
    return value, ComponentGradients(g_ld, g_twist, g_logits), diag


def smooth_loss(depth: DepthField, target: ImageBuffer) -> tuple[float, np.ndarray]:
    """Edge-aware smoothness on mean-normalized inverse depth.

    value = mean over pixels of |dx dhat|*exp(-|dx I|) + |dy dhat|*exp(-|dy I|)
    with forward differences (zero past the last column/row); returns the
    value and its analytic gradient w.r.t. log-depth.
    """
    gray = to_grayscale(target).data
    if gray.shape != depth.log_depth.shape:
        raise ConfigurationError("smooth loss requires matching depth/image dimensions")
    h, w = gray.shape
    p = float(h * w)

    inv = np.exp(-depth.log_depth)
    m = float(inv.mean())
    dhat = inv / m

    dx = np.zeros_like(dhat)
    dy = np.zeros_like(dhat)
    dx[:, :-1] = dhat[:, 1:] - dhat[:, :-1]
    dy[:-1, :] = dhat[1:, :] - dhat[:-1, :]
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :-1] = gray[:, 1:] - gray[:, :-1]
    gy[:-1, :] = gray[1:, :] - gray[:-1, :]
    wx = np.exp(-np.abs(gx))
    wy = np.exp(-np.abs(gy))

    value = float(np.sum(np.abs(dx) * wx + np.abs(dy) * wy) / p)

    # dL/d dhat scattered from the forward-difference terms.
    sx = np.sign(dx) * wx / p
    sy = np.sign(dy) * wy / p
    ghat = -sx - sy
    ghat[:, 1:] += sx[:, :-1]
    ghat[1:, :] += sy[:-1, :]

    # Chain through dhat = exp(-ld)/mean(exp(-ld)).
    s = float(np.sum(ghat * dhat))
    g_ld = dhat * (s / p - ghat)
    return value, g_ld


def explainability_loss(mask: ExplainabilityMask) -> tuple[float, np.ndarray]:
    """Cross-entropy against the all-ones target: mean -ln(w); grad = (w-1)/N."""
    n = float(mask.logits.size)
    value = float(np.sum(np.logaddexp(0.0, -mask.logits)) / n)
    g = (mask.weights - 1.0) / n
    return value, g


def total_loss(
    scene: PreparedScene,
    depth: DepthField,
    poses: list[CameraPose] | tuple[CameraPose, ...],
    mask: ExplainabilityMask | None,
    weights: LossWeights = LossWeights(),
    modes: LossModes = LossModes(),
) -> tuple[LossBreakdown, GradientSet]:
    """Evaluate the full stack over all source views.

    Component values are per-source sums (keypoint, photometric) plus the
    single smoothness and mask-regularizer terms; gradients are the
    weighted sums of component gradients.
    """
    h, w = scene.shape
    if (depth.height, depth.width) != (h, w):
        raise ConfigurationError(f"depth dims {depth.log_depth.shape} != scene dims {(h, w)}")
    if len(poses) != len(scene.sources) or len(scene.sources) < 1:
        raise ConfigurationError(f"need one pose per source view, got {len(poses)} poses for {len(scene.sources)} sources")
    if modes.use_mask:
        if mask is None:
            raise ConfigurationError("mask mode is on but no mask was provided")
        if mask.logits.shape != (h, w):
            raise ConfigurationError(f"mask dims {mask.logits.shape} != scene dims {(h, w)}")

    photo_mask = mask if modes.use_mask else None
    key_mask = mask if (modes.use_mask and modes.mask_gates_keypoint) else None
    keypoints = scene.keypoints if modes.use_detector else None

    l_key = 0.0
    l_photo = 0.0
    key_gld = np.zeros((h, w))
    photo_gld = np.zeros((h, w))
    key_glog = np.zeros((h, w))
    photo_glog = np.zeros((h, w))
    g_twist = np.zeros((len(poses), 6))
    per_source = []
    diagnostics: dict = {"per_source": []}

    for s_idx, (source, grid_s, pose) in enumerate(zip(scene.sources, scene.grids_s, poses)):
        warp = compute_warp(depth, scene.intrinsics, pose, source_shape=source.data.shape[:2])
        p_val, p_grad, p_diag = photometric_loss(scene.target, source, warp, photo_mask, modes.normalize)
        k_val, k_grad, k_diag = keypoint_similarity_loss(
            scene.grid_t, grid_s, warp, keypoints, key_mask, modes.normalize
        )
        l_photo += p_val
        l_key += k_val
        photo_gld += p_grad.g_logdepth
        key_gld += k_grad.g_logdepth
        photo_glog += p_grad.g_mask_logits
        key_glog += k_grad.g_mask_logits
        g_twist[s_idx] = weights.alpha * k_grad.g_twist + weights.beta * p_grad.g_twist
        per_source.append((k_val, p_val))
        diagnostics["per_source"].append({"photo": p_diag, "key": k_diag})

    l_smooth, smooth_gld = smooth_loss(depth, scene.target)
    if modes.use_mask:
        l_expl, expl_glog = explainability_loss(mask)
    else:
        l_expl, expl_glog = 0.0, np.zeros((h, w))

    total = weights.alpha * l_key + weights.beta * l_photo + weights.gamma * l_smooth + weights.delta * l_expl
    g_logdepth = weights.alpha * key_gld + weights.beta * photo_gld + weights.gamma * smooth_gld
    g_mask_logits = weights.alpha * key_glog + weights.beta * photo_glog + weights.delta * expl_glog

    breakdown = LossBreakdown(
        l_key=l_key,
        l_photo=l_photo,
        l_smooth=l_smooth,
        l_expl=l_expl,
        total=total,
        per_source=tuple(per_source),
        diagnostics=diagnostics,
    )
    grads = GradientSet(g_logdepth=g_logdepth, g_twist=g_twist, g_mask_logits=g_mask_logits)
    return breakdown, grads
