"""Simulated tool-arm controller: Cartesian moves, jaw, frame conversion.

A kinematic proxy only — the controller tracks a tooltip pose in the robot
base frame plus jaw state, never joints.  Camera-frame targets convert to
base-frame commands through a hand-eye calibration that is exact by default
and can carry an injected error sampled once per trial.  The base frame
coincides physically with the world frame, so calibration error shows up
exactly where it does on hardware: commands computed from camera
coordinates land offset in the world.

Grasp and release physics stay in the scene module; this module decides
where the tooltip goes and delegates world effects to ``step_world``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose6
from .models import MODEL_LIBRARY
from .scene import (
    BLOCK_EDGE,
    GraspEvent,
    MoveEvent,
    PEG_HEIGHT,
    ReleaseEvent,
    WorldState,
    step_world,
    world_grasp_point,
)
from .twinstore import ObjectTwin

__all__ = [
    "ADJUST_STEP",
    "DIRECTIONS",
    "HandEyeCalibration",
    "MotionConfig",
    "MoveResult",
    "PLACE_CLEARANCE",
    "RobotState",
    "UndetectedTargetError",
    "adjust_tooltip",
    "base_to_camera",
    "camera_to_base",
    "format_command_record",
    "move_cartesian",
    "reach_pose",
    "set_jaw",
    "two_stage_reach",
]

ADJUST_STEP = 0.003  # meters per adjustment command
PLACE_CLEARANCE = 0.005  # hover of the held object above the peg top

# signed camera-frame axes for the six adjustment directions
DIRECTIONS = {
    "right": np.array([1.0, 0.0, 0.0]),
    "left": np.array([-1.0, 0.0, 0.0]),
    "down": np.array([0.0, 1.0, 0.0]),
    "up": np.array([0.0, -1.0, 0.0]),
    "forward": np.array([0.0, 0.0, 1.0]),
    "back": np.array([0.0, 0.0, -1.0]),
}


class UndetectedTargetError(ValueError):
    """Reach was asked for a twin that is not currently detected."""


@dataclass(frozen=True)
class RobotState:
    tool_tip_pose: Pose6  # robot base frame
    jaw: str = "open"
    held_object: str | None = None

    def __post_init__(self):
        if self.jaw not in ("open", "closed"):
            raise ValueError(f"jaw must be open or closed, got {self.jaw!r}")
        if self.held_object is not None and self.jaw != "closed":
            raise ValueError("holding an object requires a closed jaw")


@dataclass(frozen=True)
class HandEyeCalibration:
    """base_from_camera transform plus the realized calibration error.

    ``error`` is the perturbation actually baked into this calibration —
    sampled once per trial by ``calibrate`` — so repeated conversions are
    deterministic within a trial.
    """

    base_from_camera: Pose6
    error: Pose6 = field(default_factory=Pose6.identity)

    def effective(self) -> Pose6:
        return self.error.compose(self.base_from_camera)

    @staticmethod
    def calibrate(base_from_camera: Pose6, sigma_t: float = 0.0,
                  sigma_r_deg: float = 0.0,
                  rng: np.random.Generator | None = None) -> "HandEyeCalibration":
        if sigma_t == 0.0 and sigma_r_deg == 0.0:
            return HandEyeCalibration(base_from_camera)
        if rng is None:
            raise ValueError("injected calibration error needs an rng")
        offset = rng.normal(0.0, sigma_t, size=3)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.normal(0.0, np.radians(sigma_r_deg))
        return HandEyeCalibration(
            base_from_camera,
            error=Pose6.from_axis_angle(axis, angle, offset))


@dataclass(frozen=True)
class MotionConfig:
    waypoint_spacing: float = 0.01  # meters between interpolated waypoints
    execution_noise_sigma: float = 0.0005  # meters, final-position noise
    approach_height: float = 0.015  # hover above the reach target

    def __post_init__(self):
        if self.waypoint_spacing <= 0:
            raise ValueError("waypoint_spacing must be > 0")
        if self.execution_noise_sigma < 0 or self.approach_height < 0:
            raise ValueError("noise sigma and approach height must be >= 0")


def camera_to_base(pose_cam: Pose6, calib: HandEyeCalibration) -> Pose6:
    return calib.effective().compose(pose_cam)


def base_to_camera(pose_base: Pose6, calib: HandEyeCalibration) -> Pose6:
    return calib.effective().inverse().compose(pose_base)


@dataclass(frozen=True)
class MoveResult:
    state: RobotState
    world: WorldState
    waypoints: tuple  # executed tooltip poses, base frame, in order


def move_cartesian(state: RobotState, target_cam: Pose6,
                   calib: HandEyeCalibration, cfg: MotionConfig,
                   world: WorldState,
                   rng: np.random.Generator | None = None) -> MoveResult:
    """Linearly interpolated Cartesian move to a camera-frame target.

    Positions interpolate at spacing <= cfg.waypoint_spacing with the
    target's orientation held constant; the final waypoint gets zero-mean
    Gaussian execution noise (one draw per move, consumed even at sigma 0
    so seeded command sequences stay aligned across noise settings).  A
    held object tracks the tooltip through every waypoint.
    """
    if target_cam.trans[2] <= 0.0:
        raise ValueError("move target must be in front of the camera")
    target_base = camera_to_base(target_cam, calib)
    start = state.tool_tip_pose.trans
    span = target_base.trans - start
    segments = max(1, math.ceil(float(np.linalg.norm(span))
                                / cfg.waypoint_spacing))
    positions = [start + span * (k / segments)
                 for k in range(1, segments + 1)]
    if rng is not None:
        positions[-1] = positions[-1] + rng.normal(
            0.0, cfg.execution_noise_sigma, size=3)
    waypoints = tuple(Pose6(target_base.quat, p) for p in positions)
    for wp in waypoints:
        world, _ = step_world(world, MoveEvent(tuple(wp.trans)))
    return MoveResult(state=replace(state, tool_tip_pose=waypoints[-1]),
                      world=world, waypoints=waypoints)


def two_stage_reach(state: RobotState, target_cam: Pose6,
                    calib: HandEyeCalibration, cfg: MotionConfig,
                    world: WorldState,
                    rng: np.random.Generator | None = None) -> MoveResult:
    """Hover ``approach_height`` above the target (camera -z), then descend."""
    if cfg.approach_height == 0.0:
        return move_cartesian(state, target_cam, calib, cfg, world, rng)
    hover = Pose6(target_cam.quat,
                  target_cam.trans + [0.0, 0.0, -cfg.approach_height])
    first = move_cartesian(state, hover, calib, cfg, world, rng)
    second = move_cartesian(first.state, target_cam, calib, cfg,
                            first.world, rng)
    return MoveResult(state=second.state, world=second.world,
                      waypoints=first.waypoints + second.waypoints)


def adjust_tooltip(state: RobotState, direction: str,
                   calib: HandEyeCalibration,
                   world: WorldState) -> tuple[RobotState, WorldState]:
    """Translate the tooltip exactly 3 mm along one signed camera axis.

    Orientation is untouched; a held object moves with the tooltip.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown adjustment direction {direction!r}")
    delta_base = (calib.effective().rotation_matrix()
                  @ (ADJUST_STEP * DIRECTIONS[direction]))
    pose = Pose6(state.tool_tip_pose.quat,
                 state.tool_tip_pose.trans + delta_base)
    world, _ = step_world(world, MoveEvent(tuple(pose.trans)))
    return replace(state, tool_tip_pose=pose), world


def set_jaw(state: RobotState, jaw: str,
            world: WorldState) -> tuple[RobotState, WorldState, str]:
    """Open or close the jaw, delegating grasp/release physics to the world.

    Closing grabs whatever graspable object sits within the grasp radius of
    the tooltip (nearest first); closing on nothing still closes the jaw.
    The outcome code is reported truthfully for trial classification.
    """
    if jaw not in ("open", "closed"):
        raise ValueError(f"jaw must be open or closed, got {jaw!r}")
    if jaw == state.jaw:
        return state, world, f"already_{jaw}"
    tooltip = tuple(state.tool_tip_pose.trans)

    if jaw == "closed":
        candidates = [o for o in world.objects
                      if o.promptable and o.held_by is None]
        if not candidates:
            return replace(state, jaw="closed"), world, "grasp_missed"
        nearest = min(
            candidates,
            key=lambda o: float(np.linalg.norm(
                np.asarray(tooltip) - world_grasp_point(world, o.name))))
        world, outcome = step_world(world, GraspEvent(nearest.name, tooltip))
        held = nearest.name if outcome == "grasped" else None
        return replace(state, jaw="closed", held_object=held), world, outcome

    world, outcome = step_world(world, ReleaseEvent(tooltip))
    return replace(state, jaw="open", held_object=None), world, outcome


def reach_pose(twin: ObjectTwin, mode: str) -> Pose6:
    """Camera-frame tooltip target for picking or placing on a twin.

    pick: the twin's grasp point in camera coordinates, twin orientation.
    place: a point above the peg twin's top face, high enough that the held
    object's center clears the peg top by PLACE_CLEARANCE before release.

    The place target anchors on the camera-facing end of the peg rather
    than projecting through the twin center: the observed surface is the
    well-constrained part of a registered pose, while the fitted axis of a
    rotationally ambiguous cylinder carries several degrees of noise that
    a center-projected offset would amplify past the seating radius.  The
    offset is applied along the camera's viewing axis.
    """
    if not twin.detected:
        raise UndetectedTargetError(
            f"object {twin.object_id} is not currently detected")
    if mode == "pick":
        grasp = MODEL_LIBRARY[twin.model_id].grasp_point
        return Pose6(twin.pose.quat, twin.pose.apply(grasp))
    if mode == "place":
        if twin.label != "peg":
            raise ValueError("place target must be a peg twin")
        ends = (twin.pose.apply([0.0, 0.0, PEG_HEIGHT / 2]),
                twin.pose.apply([0.0, 0.0, -PEG_HEIGHT / 2]))
        top = min(ends, key=lambda p: p[2])  # camera-facing end
        hover = np.asarray(top) + [0.0, 0.0, -(BLOCK_EDGE / 2 + PLACE_CLEARANCE)]
        return Pose6(twin.pose.quat, hover)
    raise ValueError(f"unknown reach mode {mode!r}")


def _fmt_pose(pose: Pose6 | None) -> str:
    if pose is None:
        return "-"
    t = ", ".join(f"{v:.6f}" for v in pose.trans)
    q = ", ".join(f"{v:.9f}" for v in pose.quat)
    return f"({t})/({q})"


def format_command_record(command: str, target: Pose6 | None,
                          executed: Pose6 | None) -> str:
    """One line of the per-trial robot command log."""
    return f"cmd={command} target={_fmt_pose(target)} executed={_fmt_pose(executed)}"
