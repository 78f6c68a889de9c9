"""Versioned digital-twin scene store between perception and planning.

Perception emits per-frame observations; the store merges them into a scene
whose object IDs stay stable across frames via label + nearest-pose
association.  Objects that stop being observed are retained as stale twins
(detected=false, last known pose) so a planner can still reason about them
and ask for re-detection.  Timestamps are logical (frame counters), never
wall-clock, so identical update sequences produce identical stores.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose6

ASSOCIATION_RADIUS = 0.02  # meters: below peg spacing, above per-frame noise

__all__ = [
    "ASSOCIATION_RADIUS",
    "ObjectTwin",
    "RejectedUpdateError",
    "SceneRepresentation",
    "TwinStore",
    "parse_scene_text",
    "serialize_scene",
]


class RejectedUpdateError(ValueError):
    """An update carried a frame id not newer than the stored scene."""


@dataclass(frozen=True)
class ObjectTwin:
    object_id: int
    label: str  # class name: "block" | "peg" | "gauze"
    model_id: str
    pose: Pose6 | None  # camera frame; None only when never successfully seen
    detected: bool  # detected in the source frame
    stale: bool  # true when carried over from an earlier frame
    frame_id: int  # frame the pose information came from
    color: str | None = None
    mask: np.ndarray | None = None
    rms_residual: float | None = None

    def __post_init__(self):
        if self.detected and self.pose is None:
            raise ValueError("a detected twin must carry a pose")
        if self.detected and self.stale:
            raise ValueError("a twin cannot be both detected and stale")
        if self.detected and self.mask is not None and not self.mask.any():
            raise ValueError("a detected twin cannot reference an empty mask")


@dataclass(frozen=True)
class SceneRepresentation:
    twins: tuple
    frame_id: int
    timestamp: int = -1  # logical clock; defaults to the frame id

    def __post_init__(self):
        object.__setattr__(self, "twins", tuple(self.twins))
        if self.timestamp < 0:
            object.__setattr__(self, "timestamp", self.frame_id)
        ids = [t.object_id for t in self.twins if t.object_id > 0]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique within a scene")


def _observation_order(twin: ObjectTwin):
    pos = tuple(twin.pose.trans) if twin.pose is not None else (0.0, 0.0, 0.0)
    return (twin.label, pos)


@dataclass
class TwinStore:
    """Single-writer store; ``scene()`` hands out immutable snapshots."""

    association_radius: float = ASSOCIATION_RADIUS
    _scene: SceneRepresentation = field(
        default_factory=lambda: SceneRepresentation((), frame_id=0))
    _next_id: int = 1

    def scene(self) -> SceneRepresentation:
        return self._scene

    @property
    def frame_id(self) -> int:
        return self._scene.frame_id

    def update(self, perceived: SceneRepresentation) -> SceneRepresentation:
        """Merge one frame of observations; returns the new scene snapshot.

        Incoming detected observations are matched to stored twins of the
        same label by nearest pose within the association radius (greedy,
        closest pair first); unmatched observations get fresh monotonically
        increasing ids; stored twins with no match this frame are retained
        stale with detected=false.  Incoming undetected observations carry
        no pose and only matter on the first sighting (they never displace
        a stored twin).
        """
        if perceived.frame_id <= self._scene.frame_id:
            raise RejectedUpdateError(
                f"frame {perceived.frame_id} is not newer than "
                f"{self._scene.frame_id}")

        incoming = sorted((t for t in perceived.twins if t.detected),
                          key=_observation_order)
        stored = list(self._scene.twins)

        pairs = []
        for i, obs in enumerate(incoming):
            for j, twin in enumerate(stored):
                if twin.label != obs.label or twin.pose is None:
                    continue
                dist = float(np.linalg.norm(obs.pose.trans - twin.pose.trans))
                if dist <= self.association_radius:
                    pairs.append((dist, i, j))
        pairs.sort()
        obs_match: dict[int, int] = {}
        twin_taken: set[int] = set()
        for dist, i, j in pairs:
            if i in obs_match or j in twin_taken:
                continue
            obs_match[i] = j
            twin_taken.add(j)

        new_twins = []
        for i, obs in enumerate(incoming):
            if i in obs_match:
                object_id = stored[obs_match[i]].object_id
            else:
                object_id = self._next_id
                self._next_id += 1
            new_twins.append(replace(obs, object_id=object_id, stale=False,
                                     frame_id=perceived.frame_id))
        for j, twin in enumerate(stored):
            if j not in twin_taken:
                new_twins.append(replace(twin, detected=False, stale=True))

        new_twins.sort(key=lambda t: t.object_id)
        self._scene = SceneRepresentation(tuple(new_twins),
                                          frame_id=perceived.frame_id,
                                          timestamp=perceived.timestamp)
        return self._scene

    def query(self, selector: str, value=None) -> list:
        """Read-only lookup: ``all``, ``byId`` (int), or ``byLabel`` (str).

        Unknown ids and labels yield an empty list — absence is a value.
        """
        twins = self._scene.twins
        if selector == "all":
            return list(twins)
        if selector == "byId":
            return [t for t in twins if t.object_id == int(value)]
        if selector == "byLabel":
            return [t for t in twins if t.label == value]
        raise ValueError(f"unknown selector {selector!r}")


def _format_mm(value: float) -> str:
    return f"{value * 1000.0:.1f}"


def serialize_scene(store: TwinStore) -> str:
    """Deterministic human-readable scene listing (also the planner's view).

    Positions are millimeters in the camera frame; identical stores
    serialize byte-for-byte identically.
    """
    scene = store.scene()
    lines = [f"scene frame={scene.frame_id} objects={len(scene.twins)}"]
    for t in scene.twins:
        if t.pose is not None:
            px, py, pz = (_format_mm(v) for v in t.pose.trans)
            pos = f"({px}, {py}, {pz}) mm"
            quat = "({:.9f}, {:.9f}, {:.9f}, {:.9f})".format(*t.pose.quat)
        else:
            pos = "unknown"
            quat = "unknown"
        lines.append(
            f"object id={t.object_id} label={t.label} "
            f"color={t.color if t.color else '-'} "
            f"detected={'true' if t.detected else 'false'} "
            f"stale={'true' if t.stale else 'false'} "
            f"position={pos} quat={quat} frame={t.frame_id}")
    return "\n".join(lines) + "\n"


def parse_scene_text(text: str) -> SceneRepresentation:
    """Inverse of ``serialize_scene`` (poses to printed precision)."""
    lines = [ln for ln in text.strip().split("\n") if ln]
    header = lines[0]
    if not header.startswith("scene frame="):
        raise ValueError("not a scene document")
    frame_id = int(header.split("frame=")[1].split()[0])
    twins = []
    for ln in lines[1:]:
        if not ln.startswith("object "):
            raise ValueError(f"unparseable twin line: {ln!r}")
        body = ln[len("object "):]
        m = re.match(
            r"id=(\d+) label=(\S+) color=(\S+) detected=(\S+) stale=(\S+) "
            r"position=(\([^)]*\) mm|unknown) quat=(\([^)]*\)|unknown) "
            r"frame=(\d+)", body)
        if not m:
            raise ValueError(f"unparseable twin line: {ln!r}")
        oid, label, color, detected, stale, pos, quat, fid = m.groups()
        if pos == "unknown":
            pose = None
        else:
            nums = [float(x) / 1000.0 for x in pos[1:pos.index(")")].split(",")]
            qs = [float(x) for x in quat[1:-1].split(",")]
            pose = Pose6(np.asarray(qs), np.asarray(nums))
        twins.append(ObjectTwin(
            object_id=int(oid), label=label,
            model_id=label, pose=pose,
            detected=detected == "true", stale=stale == "true",
            frame_id=int(fid), color=None if color == "-" else color))
    return SceneRepresentation(tuple(twins), frame_id=frame_id)
