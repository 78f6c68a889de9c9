"""Rigid registration of observed point clouds to object model priors.

The estimator aligns a measured cloud (camera frame) to an object's model
sample points (model frame) by alternating nearest-neighbor correspondence
with a closed-form least-squares rigid solve.  Initialization follows the
benchtop pipeline convention: rotation starts at identity and translation
starts at the middle point (centroid) of the observed cloud.  The solver
works internally with the model samples re-centered on their own centroid so
that the centroid init is exact whenever observed and model clouds coincide;
the returned pose is expressed back in the model frame (model -> camera).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ModelPrior, PointCloud, Pose6

__all__ = [
    "DegenerateRegistrationError",
    "IcpConfig",
    "IcpResult",
    "icp_estimate",
    "kabsch_align",
]


class DegenerateRegistrationError(ValueError):
    """Too few usable correspondences to solve a rigid alignment."""


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-6  # meters of RMS change between iterations
    max_correspondence_distance: float = 0.02  # meters
    model_sample_count: int = 2000

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_correspondence_distance <= 0:
            raise ValueError("max_correspondence_distance must be positive")
        if self.model_sample_count < 4:
            raise ValueError("model_sample_count must be >= 4")


@dataclass(frozen=True)
class IcpResult:
    pose: Pose6  # model frame -> camera frame
    rms_residual: float
    iterations: int
    converged: bool
    rms_history: tuple
    correspondence_count: int


def kabsch_align(model_points, observed_points):
    """Closed-form least-squares rigid alignment: find (R, t) with R m + t ~ o.

    Uses the SVD of the cross-covariance of the centered point sets; the
    smallest singular direction is sign-corrected so the result is always a
    proper rotation (det +1), never a reflection.
    """
    m = np.asarray(model_points, dtype=np.float64)
    o = np.asarray(observed_points, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != 3 or m.shape != o.shape:
        raise ValueError("model and observed points must both be (N, 3)")
    if m.shape[0] < 3:
        raise DegenerateRegistrationError(
            f"need >= 3 correspondences to align, got {m.shape[0]}")
    m_mean = m.mean(axis=0)
    o_mean = o.mean(axis=0)
    cross = (m - m_mean).T @ (o - o_mean)
    u, _, vt = np.linalg.svd(cross)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    if sign == 0.0:
        sign = 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    translation = o_mean - rotation @ m_mean
    return rotation, translation


def icp_estimate(observed: PointCloud, model: ModelPrior,
                 config: IcpConfig | None = None) -> IcpResult:
    """Estimate the rigid pose (model frame -> camera frame) of ``model``.

    Each iteration matches every observed point to its nearest model sample
    under the current pose, drops pairs farther apart than
    ``max_correspondence_distance``, re-solves the alignment in closed form,
    and records the post-solve RMS residual.  Iteration stops when the RMS
    change falls below ``tolerance`` or ``max_iterations`` is reached (the
    latter sets ``converged=False`` on the returned best estimate).

    Raises ``DegenerateRegistrationError`` when fewer than 3 correspondences
    survive rejection.
    """
    cfg = config or IcpConfig()
    obs = observed.points
    if obs.shape[0] < 3:
        raise DegenerateRegistrationError(
            f"observed cloud has {obs.shape[0]} points; need >= 3")

    model_center = model.vertices.mean(axis=0)
    centered = model.vertices - model_center
    tree = cKDTree(centered)

    rotation = np.eye(3)
    translation = obs.mean(axis=0)
    previous_rms = np.inf
    history: list[float] = []
    converged = False
    kept = 0
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        # nearest model sample for every observed point, matched in the
        # model frame by applying the inverse of the current pose
        local = (obs - translation) @ rotation
        distances, indices = tree.query(local)
        keep = distances <= cfg.max_correspondence_distance
        kept = int(keep.sum())
        if kept < 3:
            raise DegenerateRegistrationError(
                f"only {kept} correspondences within "
                f"{cfg.max_correspondence_distance} m")
        rotation, translation = kabsch_align(centered[indices[keep]], obs[keep])
        residuals = centered[indices[keep]] @ rotation.T + translation - obs[keep]
        rms = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))
        history.append(rms)
        if abs(previous_rms - rms) < cfg.tolerance:
            converged = True
            break
        previous_rms = rms

    # undo the internal model centering: camera_point = R v + (t - R c)
    pose = Pose6.from_matrix(rotation, translation - rotation @ model_center)
    return IcpResult(pose=pose, rms_residual=history[-1], iterations=iterations,
                     converged=converged, rms_history=tuple(history),
                     correspondence_count=kept)
