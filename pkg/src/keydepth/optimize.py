"""Direct first-order optimization of log-depth, pose tangents, and mask logits.

Adaptive-moment (bias-corrected) updates with one learning rate per
parameter group stand in for network training: every formula and gradient
path of the loss stack is exercised on plain variables. Poses are updated
by retraction, pose <- exp(delta) @ pose, so the update direction lives in
the same left-tangent coordinates as the analytic Jacobians.

The finite-difference harness perturbs parameters the same way and skips
samples whose warp coordinates sit within 0.1 px of a bilinear cell
boundary, where the sampled objective is only piecewise-linear.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from keydepth.errors import ConfigurationError, NumericalError
from keydepth.geometry import CameraPose, DepthField, compute_warp, se3_exp, se3_log
from keydepth.losses import (
    ExplainabilityMask,
    LossBreakdown,
    LossModes,
    LossWeights,
    PreparedScene,
    total_loss,
)
from keydepth.synth import SceneSample

DEFAULT_MASK_INIT_LOGIT = 2.0


@dataclass
class OptimConfig:
    lr_depth: float = 1e-2
    lr_pose: float = 1e-3
    lr_mask: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_iters: int = 500
    rel_tol: float = 1e-6
    weights: LossWeights = field(default_factory=LossWeights)
    modes: LossModes = field(default_factory=LossModes)
    convergence_window: int = 10

    def __post_init__(self):
        if min(self.lr_depth, self.lr_pose, self.lr_mask) <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("moment decay constants must lie in [0, 1)")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")


@dataclass
class OptimState:
    depth: DepthField
    poses: list[CameraPose]
    mask: ExplainabilityMask
    step_count: int = 0
    m_depth: np.ndarray | None = None
    v_depth: np.ndarray | None = None
    m_twist: np.ndarray | None = None
    v_twist: np.ndarray | None = None
    m_mask: np.ndarray | None = None
    v_mask: np.ndarray | None = None

    def __post_init__(self):
        hw = self.depth.log_depth.shape
        s = len(self.poses)
        if self.m_depth is None:
            self.m_depth = np.zeros(hw)
            self.v_depth = np.zeros(hw)
            self.m_twist = np.zeros((s, 6))
            self.v_twist = np.zeros((s, 6))
            self.m_mask = np.zeros(hw)
            self.v_mask = np.zeros(hw)

    @property
    def n_params(self) -> int:
        hw = self.depth.log_depth.size
        return hw + 6 * len(self.poses) + self.mask.logits.size


def init_state(
    sample: SceneSample,
    init: str = "gt",
    sigma_depth: float = 0.1,
    sigma_twist: float = 0.01,
    d0: float = 2.0,
    seed: int = 0,
    mask_init_logit: float = DEFAULT_MASK_INIT_LOGIT,
) -> OptimState:
    """Build the optimization state from ground truth, a perturbation of it,
    or a constant-depth identity-pose start."""
    rng = np.random.default_rng(seed)
    gt_ld = sample.gt_depth.log_depth
    if init == "gt":
        log_depth = gt_ld.copy()
        twists = [se3_log(p) for p in sample.gt_poses]
    elif init == "perturbed":
        log_depth = gt_ld + rng.normal(0.0, sigma_depth, gt_ld.shape)
        twists = [se3_log(p) + rng.normal(0.0, sigma_twist, 6) for p in sample.gt_poses]
    elif init == "constant":
        if d0 <= 0:
            raise ConfigurationError(f"constant init requires d0 > 0, got {d0}")
        log_depth = np.full(gt_ld.shape, np.log(d0))
        twists = [np.zeros(6) for _ in sample.gt_poses]
    else:
        raise ConfigurationError(f"unknown init scheme {init!r}")
    poses = [se3_exp(t) for t in twists]
    mask = ExplainabilityMask(np.full(gt_ld.shape, float(mask_init_logit)))
    return OptimState(depth=DepthField(log_depth), poses=poses, mask=mask)


def _check_finite(breakdown: LossBreakdown) -> None:
    for name in ("l_key", "l_photo", "l_smooth", "l_expl", "total"):
        if not np.isfinite(getattr(breakdown, name)):
            raise NumericalError(f"loss component {name} is non-finite")


def _adam_delta(g, m, v, lr, t, cfg: OptimConfig):
    m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    return -lr * mhat / (np.sqrt(vhat) + cfg.epsilon)


def step(state: OptimState, scene: PreparedScene, config: OptimConfig) -> tuple[OptimState, LossBreakdown]:
    """One adaptive-moment update per parameter group; returns the pre-update loss."""
    breakdown, grads = total_loss(scene, state.depth, state.poses, state.mask, config.weights, config.modes)
    _check_finite(breakdown)
    if not (np.all(np.isfinite(grads.g_logdepth)) and np.all(np.isfinite(grads.g_twist)) and np.all(np.isfinite(grads.g_mask_logits))):
        raise NumericalError("gradients contain non-finite entries")

    t = state.step_count + 1
    d_depth = _adam_delta(grads.g_logdepth, state.m_depth, state.v_depth, config.lr_depth, t, config)
    d_twist = _adam_delta(grads.g_twist, state.m_twist, state.v_twist, config.lr_pose, t, config)
    d_mask = _adam_delta(grads.g_mask_logits, state.m_mask, state.v_mask, config.lr_mask, t, config)

    state.depth = DepthField(state.depth.log_depth + d_depth)
    state.poses = [se3_exp(d_twist[i]).compose(p) for i, p in enumerate(state.poses)]
    if config.modes.use_mask:
        state.mask = ExplainabilityMask(state.mask.logits + d_mask)
    state.step_count = t
    return state, breakdown


def run(state: OptimState, scene: PreparedScene, config: OptimConfig) -> tuple[OptimState, list[LossBreakdown]]:
    """Iterate until max_iters or the loss plateaus over the convergence window."""
    history: list[LossBreakdown] = []
    w = config.convergence_window
    for _ in range(config.max_iters):
        state, breakdown = step(state, scene, config)
        history.append(breakdown)
        k = len(history) - 1
        if k >= w:
            ref = history[k - w].total
            if abs(history[k].total - ref) <= config.rel_tol * max(abs(ref), 1e-30):
                break
    return state, history


def write_history_csv(history: list[LossBreakdown], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "l_key", "l_photo", "l_smooth", "l_expl", "total"])
        for i, b in enumerate(history):
            writer.writerow(
                [i, f"{b.l_key:.17g}", f"{b.l_photo:.17g}", f"{b.l_smooth:.17g}", f"{b.l_expl:.17g}", f"{b.total:.17g}"]
            )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst_param: str = ""


def gradcheck_core(value_at, analytic, params, step_size: float) -> GradCheckResult:
    """Compare analytic entries against central differences.

    value_at(index, delta) evaluates the objective with parameter `index`
    perturbed by delta; params is a list of (index, label). Relative error
    falls back to absolute when both magnitudes are below 1e-8.
    """
    worst = 0.0
    worst_label = ""
    for idx, label in params:
        fp = value_at(idx, +step_size)
        fm = value_at(idx, -step_size)
        fd = (fp - fm) / (2.0 * step_size)
        an = analytic[idx]
        denom = max(abs(fd), abs(an))
        err = abs(fd - an) if denom < 1e-8 else abs(fd - an) / denom
        if err > worst:
            worst = err
            worst_label = label
    return GradCheckResult(worst, len(params), 0, worst_label)


def warp_lattice_margin(state: OptimState, scene: PreparedScene) -> float:
    """Min distance of any valid warp coordinate to the bilinear lattice."""
    margin = np.inf
    for source, pose in zip(scene.sources, state.poses):
        warp = compute_warp(state.depth, scene.intrinsics, pose, source_shape=source.data.shape[:2])
        if not warp.valid.any():
            continue
        for c in (warp.u[warp.valid], warp.v[warp.valid]):
            margin = min(margin, float(np.min(np.abs(c - np.round(c)))))
    return margin


def _pixel_margins(state: OptimState, scene: PreparedScene) -> np.ndarray:
    """(H, W) distance of each pixel's warp coords to the lattice, inf when invalid in all views."""
    h, w = scene.shape
    margins = np.full((h, w), np.inf)
    for source, pose in zip(scene.sources, state.poses):
        warp = compute_warp(state.depth, scene.intrinsics, pose, source_shape=source.data.shape[:2])
        mu = np.abs(warp.u - np.round(warp.u))
        mv = np.abs(warp.v - np.round(warp.v))
        m = np.minimum(mu, mv)
        m = np.where(warp.valid, m, np.inf)
        margins = np.minimum(margins, m)
    return margins


def gradcheck(
    state: OptimState,
    scene: PreparedScene,
    config: OptimConfig,
    step_size: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
    corrupt: bool = False,
    boundary_margin: float = 0.1,
) -> GradCheckResult:
    """Check the full analytic gradient against central finite differences.

    All pose-tangent components are always checked (the pose is perturbed by
    retraction, matching the analytic convention); the remaining samples are
    drawn without replacement from log-depth and mask-logit parameters.
    Depth samples whose pixel warps within boundary_margin of a bilinear
    cell boundary are skipped, as are all twist components when any valid
    pixel sits that close (piecewise-linearity caveat).
    """
    if samples < 1:
        raise ConfigurationError(f"samples must be >= 1, got {samples}")
    _, grads = total_loss(scene, state.depth, state.poses, state.mask, config.weights, config.modes)
    h, w = scene.shape
    hw = h * w
    n_sources = len(state.poses)
    use_mask = config.modes.use_mask

    margins = _pixel_margins(state, scene)
    global_margin = warp_lattice_margin(state, scene)

    # Parameter vector layout: [log-depth (hw)] [twists (6S)] [mask logits (hw)].
    analytic = np.concatenate(
        [grads.g_logdepth.ravel(), grads.g_twist.ravel(), grads.g_mask_logits.ravel() if use_mask else np.zeros(hw)]
    )

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    n_twist = 6 * n_sources
    twist_ok = global_margin >= boundary_margin
    if twist_ok:
        chosen.extend(range(hw, hw + min(n_twist, samples)))
    n_skipped = 0 if twist_ok else n_twist
    pool = list(range(hw)) + (list(range(hw + n_twist, hw + n_twist + hw)) if use_mask else [])
    rng.shuffle(pool)
    for idx in pool:
        if len(chosen) >= samples:
            break
        if idx < hw and margins.ravel()[idx] < boundary_margin:
            n_skipped += 1
            continue
        chosen.append(idx)

    base_ld = state.depth.log_depth
    base_logits = state.mask.logits
    base_poses = list(state.poses)

    def value_at(idx: int, delta: float) -> float:
        depth = state.depth
        poses = base_poses
        mask = state.mask
        if idx < hw:
            ld = base_ld.copy()
            ld.flat[idx] += delta
            depth = DepthField(ld)
        elif idx < hw + n_twist:
            k = idx - hw
            s, comp = divmod(k, 6)
            d = np.zeros(6)
            d[comp] = delta
            poses = list(base_poses)
            poses[s] = se3_exp(d).compose(base_poses[s])
        else:
            logits = base_logits.copy()
            logits.flat[idx - hw - n_twist] += delta
            mask = ExplainabilityMask(logits)
        breakdown, _ = total_loss(scene, depth, poses, mask, config.weights, config.modes)
        return breakdown.total

    def label(idx: int) -> str:
        if idx < hw:
            return f"log_depth[{idx // w},{idx % w}]"
        if idx < hw + n_twist:
            k = idx - hw
            return f"twist[{k // 6}][{k % 6}]"
        k = idx - hw - n_twist
        return f"mask_logit[{k // w},{k % w}]"

    if corrupt and chosen:
        target = max(chosen, key=lambda i: abs(analytic[i]))
        analytic = analytic.copy()
        analytic[target] *= 2.0

    params = [(idx, label(idx)) for idx in chosen]
    result = gradcheck_core(value_at, analytic, params, step_size)
    return replace(result, n_skipped=n_skipped)
