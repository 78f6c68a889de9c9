"""Perception: an RGB-D frame plus point prompts → masks, clouds, 6DoF poses.

Three interchangeable segmenters feed one of two pose estimators:

- ``depthThreshold``: the fully-implemented baseline — one depth interval
  from the prompt points, connected components, component claiming.
- ``oracleFoundation``: a promptable-foundation-model stand-in — ground
  truth with configurable corruption (boundary erosion, missed detections,
  partial masks).
- ``domainLimited``: a trained-detector stand-in that only recognizes the
  (class, color, environment) tuples it was "trained" on.

Pose comes either from iterative registration against the model prior
(``icp``) or from a noisy ground-truth oracle (``oraclePose``).  Components
are independently selectable, and swapping one never changes the draws the
other consumes, so paired pipeline comparisons stay aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import PointCloud, Pose6, back_project_pixels
from .models import model_prior
from .registration import DegenerateRegistrationError, IcpConfig, icp_estimate
from .scene import RgbdFrame, WorldState, ground_truth, render_geometry
from .twinstore import ObjectTwin, SceneRepresentation, TwinStore

__all__ = [
    "CorruptionConfig",
    "DomainLimitedConfig",
    "EmptyCloudError",
    "PerceptionPipeline",
    "PoseNoiseConfig",
    "PromptPolicy",
    "PromptSet",
    "SegmentationResult",
    "ThresholdConfig",
    "depth_threshold_segment",
    "domain_limited_segment",
    "generate_prompts",
    "mask_to_cloud",
    "oracle_foundation_segment",
    "oracle_pose_estimate",
    "perceive",
]


class EmptyCloudError(ValueError):
    """Every masked pixel had invalid depth; no cloud can be formed."""


@dataclass(frozen=True)
class PromptSet:
    """Point prompts: per-object foreground pixels plus shared background."""

    positive: dict  # object name -> tuple of (u, v) pixels
    negative: tuple  # shared background (u, v) pixels

    def __post_init__(self):
        for name, pts in self.positive.items():
            if len(pts) == 0:
                raise ValueError(f"object {name!r} has no positive prompt")
        object.__setattr__(self, "positive",
                           {k: tuple(tuple(int(c) for c in p) for p in v)
                            for k, v in self.positive.items()})
        object.__setattr__(self, "negative",
                           tuple(tuple(int(c) for c in p) for p in self.negative))


@dataclass(frozen=True)
class ThresholdConfig:
    eps_lower: float = 0.010  # meters below the shallowest foreground depth
    eps_upper: float = 0.003  # meters above-noise margin under the background
    connectivity: int = 8

    def __post_init__(self):
        if self.eps_lower < 0 or self.eps_upper < 0:
            raise ValueError("eps margins must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class SegmentationResult:
    masks: dict  # object name -> boolean image
    detected: dict  # object name -> bool

    def __post_init__(self):
        total = None
        for name, det in self.detected.items():
            mask = self.masks[name]
            if not det and mask.any():
                raise ValueError(f"undetected object {name!r} has a mask")
            if total is None:
                total = np.zeros(mask.shape, dtype=np.int32)
            total += mask.astype(np.int32)
        if total is not None and total.max() > 1:
            raise ValueError("object masks overlap")


@dataclass(frozen=True)
class CorruptionConfig:
    boundary_erode_px: int = 0
    miss_prob: float = 0.0
    partial_mask_prob: float = 0.0

    def __post_init__(self):
        if self.boundary_erode_px < 0:
            raise ValueError("boundary_erode_px must be >= 0")
        for p in (self.miss_prob, self.partial_mask_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")


@dataclass(frozen=True)
class DomainLimitedConfig:
    trained_classes: frozenset  # of (class, color, environment) tuples
    environment: str
    boundary_erode_px: int = 1


@dataclass(frozen=True)
class PoseNoiseConfig:
    sigma_t: float = 0.0  # meters
    sigma_r_deg: float = 0.0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r_deg < 0:
            raise ValueError("noise sigmas must be >= 0")


@dataclass(frozen=True)
class PerceptionPipeline:
    segmenter: str = "depthThreshold"
    pose_estimator: str = "icp"
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    domain: DomainLimitedConfig | None = None
    pose_noise: PoseNoiseConfig = field(default_factory=PoseNoiseConfig)

    def __post_init__(self):
        if self.segmenter not in ("depthThreshold", "oracleFoundation",
                                  "domainLimited"):
            raise ValueError(f"unknown segmenter {self.segmenter!r}")
        if self.pose_estimator not in ("icp", "oraclePose"):
            raise ValueError(f"unknown pose estimator {self.pose_estimator!r}")
        if self.segmenter == "domainLimited" and self.domain is None:
            raise ValueError("domainLimited segmenter needs a DomainLimitedConfig")


def _check_prompts_in_bounds(frame: RgbdFrame, prompts: PromptSet) -> None:
    h, w = frame.depth.shape
    for pts in list(prompts.positive.values()) + [prompts.negative]:
        for (u, v) in pts:
            if not (0 <= u < w and 0 <= v < h):
                raise ValueError(f"prompt pixel ({u}, {v}) out of bounds")


def depth_threshold_segment(frame: RgbdFrame, prompts: PromptSet,
                            cfg: ThresholdConfig | None = None) -> SegmentationResult:
    """Depth-interval segmentation seeded by point prompts.

    One shared interval [min(foreground depths) - eps_lower,
    min(background depths) - eps_upper] thresholds the depth image; the
    thresholded pixels are split into connected components, and each object
    claims the components its positive prompts fall in.  A component wanted
    by several objects goes to the one with the most positive points inside
    it (name order breaks ties) and the losers are reported undetected, so
    masks never overlap.  An object with any invalid-depth positive prompt
    is undetected for the frame: prompts are trusted clicks, and a click
    with no depth behind it cannot anchor an interval.
    """
    cfg = cfg or ThresholdConfig()
    _check_prompts_in_bounds(frame, prompts)
    names = sorted(prompts.positive)
    empty = np.zeros(frame.depth.shape, dtype=bool)
    masks = {n: empty.copy() for n in names}
    detected = {n: False for n in names}

    def result():
        return SegmentationResult(masks=masks, detected=detected)

    live = [name for name in names
            if all(frame.validity[v, u] for (u, v) in prompts.positive[name])]
    neg_depths = [frame.depth[v, u] for (u, v) in prompts.negative
                  if frame.validity[v, u]]
    if not live or not neg_depths:
        return result()

    lower = min(min(frame.depth[v, u] for (u, v) in prompts.positive[n])
                for n in live) - cfg.eps_lower
    upper = min(neg_depths) - cfg.eps_upper
    if lower > upper:
        return result()

    binary = frame.validity & (frame.depth >= lower) & (frame.depth <= upper)
    structure = np.ones((3, 3), dtype=bool) if cfg.connectivity == 8 else None
    labels, _ = ndimage.label(binary, structure=structure)

    claims: dict[int, list] = {}  # component id -> [(positives inside, name)]
    for name in live:
        inside = [labels[v, u] for (u, v) in prompts.positive[name]]
        comps = sorted({c for c in inside if c != 0})
        if not comps:
            continue
        for comp in comps:
            count = sum(1 for c in inside if c == comp)
            claims.setdefault(comp, []).append((count, name))

    lost = set()
    won: dict[str, list] = {}
    for comp, claimants in claims.items():
        claimants.sort(key=lambda cn: (-cn[0], cn[1]))
        winner = claimants[0][1]
        won.setdefault(winner, []).append(comp)
        for _, loser in claimants[1:]:
            lost.add(loser)

    for name in live:
        if name in lost or name not in won:
            continue
        mask = np.isin(labels, won[name])
        if mask.any():
            masks[name] = mask
            detected[name] = True
    return result()


def _erode(mask: np.ndarray, px: int) -> np.ndarray:
    if px <= 0 or not mask.any():
        return mask
    return ndimage.binary_erosion(mask, iterations=px)


def oracle_foundation_segment(frame: RgbdFrame, prompts: PromptSet,
                              world: WorldState, corruption: CorruptionConfig,
                              rng: np.random.Generator) -> SegmentationResult:
    """Foundation-segmenter stand-in: ground truth with seeded corruption.

    Draw order is fixed (objects in name order; one miss draw, then the
    partial-mask draws) so paired pipelines consume identical randomness.
    Masks come from the color image's viewpoint and do not require valid
    depth, unlike the depth-threshold route.
    """
    names = sorted(prompts.positive)
    empty = np.zeros(frame.depth.shape, dtype=bool)
    masks = {}
    detected = {}
    for name in names:
        mask = ground_truth(world, name).mask.copy()
        missed = rng.uniform() < corruption.miss_prob
        cut = rng.uniform() < corruption.partial_mask_prob
        angle = rng.uniform(0.0, 2.0 * np.pi)
        if not missed:
            mask = _erode(mask, corruption.boundary_erode_px)
            if cut and mask.any():
                vs, us = np.nonzero(mask)
                cu, cv = us.mean(), vs.mean()
                keep = ((us - cu) * np.cos(angle) + (vs - cv) * np.sin(angle)) >= 0
                kept = np.zeros_like(mask)
                kept[vs[keep], us[keep]] = True
                mask = kept
        if missed or not mask.any():
            masks[name] = empty.copy()
            detected[name] = False
        else:
            masks[name] = mask
            detected[name] = True
    return SegmentationResult(masks=masks, detected=detected)


def _object_color(world: WorldState, name: str) -> str:
    obj = world.object(name)
    if obj.label == "block":
        return name.split("_", 1)[1] if "_" in name else "grey"
    return {"peg": "grey", "gauze": "white"}.get(obj.label, "grey")


def domain_limited_segment(frame: RgbdFrame, prompts: PromptSet,
                           world: WorldState,
                           cfg: DomainLimitedConfig) -> SegmentationResult:
    """Trained-detector stand-in: recognizes only its training tuples.

    Objects whose (class, color, environment) tuple is outside
    ``trained_classes`` are undetected — out-of-domain inputs produce
    nothing rather than degraded output.
    """
    names = sorted(prompts.positive)
    empty = np.zeros(frame.depth.shape, dtype=bool)
    masks = {}
    detected = {}
    for name in names:
        obj = world.object(name)
        key = (obj.label, _object_color(world, name), cfg.environment)
        mask = empty
        if key in cfg.trained_classes:
            mask = _erode(ground_truth(world, name).mask, cfg.boundary_erode_px)
        if mask.any():
            masks[name] = mask
            detected[name] = True
        else:
            masks[name] = empty.copy()
            detected[name] = False
    return SegmentationResult(masks=masks, detected=detected)


def mask_to_cloud(frame: RgbdFrame, mask: np.ndarray) -> PointCloud:
    """Back-project every valid masked pixel into the camera frame."""
    usable = mask & frame.validity
    if not usable.any():
        raise EmptyCloudError("no masked pixel has valid depth")
    vs, us = np.nonzero(usable)
    pts = back_project_pixels(us.astype(np.float64), vs.astype(np.float64),
                              frame.depth[vs, us], frame.intrinsics)
    return PointCloud(pts)


def oracle_pose_estimate(object_name: str, world: WorldState,
                         noise: PoseNoiseConfig,
                         rng: np.random.Generator) -> Pose6:
    """Ground-truth pose with zero-mean Gaussian perturbation.

    Draws are consumed even at zero sigma so paired comparisons across
    noise levels stay seed-aligned.
    """
    pose = ground_truth(world, object_name).pose
    offset = rng.normal(0.0, max(noise.sigma_t, 0.0), size=3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal(0.0, np.radians(noise.sigma_r_deg))
    wiggle = Pose6.from_axis_angle(axis, angle, (0.0, 0.0, 0.0))
    return Pose6(
        quat=wiggle.compose(pose).quat,
        trans=pose.trans + offset,
    )


# ---------------------------------------------------------------------------
# prompt generation (the simulated operator's clicks)


@dataclass(frozen=True)
class PromptPolicy:
    positives_per_object: int = 3
    interior_margin_px: int = 2
    ring_radius_px: int = 14
    ring_count: int = 2
    corner_negatives: int = 4
    corner_inset: float = 0.9  # fraction of the support half-extent

    def __post_init__(self):
        if self.positives_per_object < 1:
            raise ValueError("need at least one positive prompt per object")


def _project_world_point(world: WorldState, point) -> tuple | None:
    from .geometry import BehindCameraError, project

    cam = world.camera_pose.inverse().apply(np.asarray(point, dtype=float))
    try:
        u, v = project(cam, world.camera)
    except BehindCameraError:
        return None
    ui, vi = int(round(u)), int(round(v))
    if 0 <= ui < world.camera.width and 0 <= vi < world.camera.height:
        return (ui, vi)
    return None


def generate_prompts(world: WorldState, policy: PromptPolicy,
                     rng: np.random.Generator) -> PromptSet:
    """Simulate the operator's clicks for every promptable visible object.

    Positives: the mask's central pixel plus seeded interior picks, kept
    away from boundaries by ``interior_margin_px``.  Negatives: a small
    ring of background pixels around each object plus corner clicks near
    the support's edge, all verified to land on background geometry.
    """
    _, id_img = render_geometry(world)
    promptable_idx = {i for i, o in enumerate(world.objects) if o.promptable}

    positive = {}
    negative: list = []
    for obj in world.objects:
        if not obj.promptable:
            continue
        mask = ground_truth(world, obj.name).mask
        if not mask.any():
            continue
        interior = _erode(mask, policy.interior_margin_px)
        if not interior.any():
            interior = mask
        vs, us = np.nonzero(interior)
        cu, cv = us.mean(), vs.mean()
        order = np.argsort((us - cu) ** 2 + (vs - cv) ** 2, kind="stable")
        picks = [(int(us[order[0]]), int(vs[order[0]]))]
        for _ in range(policy.positives_per_object - 1):
            k = int(rng.integers(0, len(us)))
            picks.append((int(us[k]), int(vs[k])))
        positive[obj.name] = tuple(picks)

        # background ring around this object
        v_all, u_all = np.nonzero(mask)
        bu, bv = u_all.mean(), v_all.mean()
        span = max(u_all.max() - u_all.min(), v_all.max() - v_all.min())
        radius = span / 2 + policy.ring_radius_px
        found = 0
        for step in range(8):
            if found >= policy.ring_count:
                break
            ang = 2.0 * np.pi * step / 8
            u = int(round(bu + radius * np.cos(ang)))
            v = int(round(bv + radius * np.sin(ang)))
            if not (0 <= u < id_img.shape[1] and 0 <= v < id_img.shape[0]):
                continue
            hit = id_img[v, u]
            if hit >= 0 and hit not in promptable_idx:
                negative.append((u, v))
                found += 1

    # corner clicks near the support's edge
    support = "board" if world.has_object("board") else "table"
    if world.has_object(support):
        sup = world.object(support)
        hx = sup.shape.extents[0] / 2 * policy.corner_inset
        hy = sup.shape.extents[1] / 2 * policy.corner_inset
        hz = sup.shape.extents[2] / 2
        if support == "table":
            hx = hy = 0.075  # stay near the workspace, not the table rim
        corners = [(-hx, -hy), (hx, -hy), (-hx, hy), (hx, hy)]
        for cx, cy in corners[: policy.corner_negatives]:
            top_world = sup.pose.apply(np.array([cx, cy, -hz]))
            pix = _project_world_point(world, top_world)
            if pix is None:
                continue
            hit = id_img[pix[1], pix[0]]
            if hit >= 0 and hit not in promptable_idx:
                negative.append(pix)

    return PromptSet(positive=positive, negative=tuple(negative))


# ---------------------------------------------------------------------------
# full pipeline


_COLOR_PALETTE = {
    "yellow": (0.75, 0.68, 0.12),
    "black": (0.04, 0.04, 0.05),
    "red": (0.72, 0.08, 0.08),
    "grey": (0.75, 0.75, 0.78),
    "white": (0.92, 0.92, 0.88),
}


def _classify_color(frame: RgbdFrame, mask: np.ndarray) -> str | None:
    if not mask.any():
        return None
    mean = frame.color[mask].mean(axis=0) / 255.0
    names = sorted(_COLOR_PALETTE)
    dists = [float(np.sum((mean - np.asarray(_COLOR_PALETTE[n])) ** 2))
             for n in names]
    return names[int(np.argmin(dists))]


def _label_of(prompt_name: str) -> str:
    return prompt_name.split("_", 1)[0]


def perceive(frame: RgbdFrame, prompts: PromptSet,
             pipeline: PerceptionPipeline, store: TwinStore,
             world: WorldState | None = None,
             seg_rng: np.random.Generator | None = None,
             pose_rng: np.random.Generator | None = None) -> SceneRepresentation:
    """Run segmentation then per-object pose estimation; update the store.

    Component failures (empty interval, empty cloud, degenerate
    registration) mark the affected object undetected and never abort the
    frame.  Returns the store's merged scene snapshot with stable ids.
    """
    if pipeline.segmenter == "depthThreshold":
        seg = depth_threshold_segment(frame, prompts, pipeline.threshold)
    elif pipeline.segmenter == "oracleFoundation":
        if world is None or seg_rng is None:
            raise ValueError("oracleFoundation needs a world handle and rng")
        seg = oracle_foundation_segment(frame, prompts, world,
                                        pipeline.corruption, seg_rng)
    else:
        if world is None:
            raise ValueError("domainLimited needs a world handle")
        seg = domain_limited_segment(frame, prompts, world, pipeline.domain)

    observations = []
    for name in sorted(prompts.positive):
        detected = seg.detected.get(name, False)
        mask = seg.masks[name]
        label = _label_of(name)
        pose = None
        rms = None
        if detected:
            try:
                cloud = mask_to_cloud(frame, mask)
            except EmptyCloudError:
                detected = False
        if detected and pipeline.pose_estimator == "icp":
            try:
                fit = icp_estimate(
                    cloud, model_prior(label, pipeline.icp.model_sample_count),
                    pipeline.icp)
                pose, rms = fit.pose, fit.rms_residual
            except DegenerateRegistrationError:
                detected = False
        elif detected:
            if world is None or pose_rng is None:
                raise ValueError("oraclePose needs a world handle and rng")
            pose = oracle_pose_estimate(name, world, pipeline.pose_noise,
                                        pose_rng)
            rms = 0.0
        observations.append(ObjectTwin(
            object_id=0, label=label, model_id=label,
            pose=pose if detected else None, detected=detected, stale=False,
            frame_id=frame.frame_id,
            color=_classify_color(frame, mask) if detected else None,
            mask=mask if detected else None, rms_residual=rms))

    scene = SceneRepresentation(tuple(observations), frame_id=frame.frame_id)
    return store.update(scene)
