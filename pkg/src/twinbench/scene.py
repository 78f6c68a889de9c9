"""Ground-truth world model and synthetic RGB-D renderer.

The world is a set of primitive solids (boxes, cylinders, thin slabs) with
world-frame poses. Rendering casts one ray per pixel analytically against
every primitive, records the nearest hit's object and its camera-z depth,
then applies Gaussian depth noise and IR-dropout invalidation on
infrared-absorbing surfaces. Everything is deterministic given
(WorldState, seeds).

Frame conventions:
  - world: +z up, board top surface at z = 0 (untilted)
  - camera: positioned above the board looking straight down; camera +x =
    world +x, camera +y = world -y, camera +z = world -z
  - each object's model/local frame coincides with the camera frame when
    the object stands upright under the down-looking camera (so an upright
    object's camera-frame rotation is the identity)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose6, _frozen

_EPS_T = 1e-9  # minimum ray parameter treated as a hit

# world-rule defaults (all configurable through EnvironmentConfig)
DEFAULT_GRASP_RADIUS = 0.004
DEFAULT_PLACE_RADIUS = 0.003
BLOCK_EDGE = 0.025
PEG_RADIUS = 0.004
PEG_HEIGHT = 0.025
GAUZE_SIDE = 0.05
GAUZE_THICKNESS = 0.002
BOARD_EXTENTS = (0.14, 0.16, 0.012)
TABLE_EXTENTS = (0.8, 0.8, 0.02)
CAMERA_HEIGHT = 0.45

# 12 pegs: 3 columns x 4 rows, 30 mm pitch, board-local coordinates
PEG_XS = (-0.03, 0.0, 0.03)
PEG_YS = (-0.045, -0.015, 0.015, 0.045)

BLOCK_COLOR_TABLE = {
    "yellow": (0.75, 0.68, 0.12),
    "black": (0.04, 0.04, 0.04),
    "red": (0.72, 0.08, 0.08),
}


@dataclass(frozen=True)
class Box:
    extents: tuple[float, float, float]  # full side lengths, meters

    def __post_init__(self):
        if min(self.extents) <= 0:
            raise ValueError("box extents must be strictly positive")


@dataclass(frozen=True)
class Slab(Box):
    """Thin box; semantic alias for sheet-like objects (gauze)."""


@dataclass(frozen=True)
class Cylinder:
    radius: float
    height: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("cylinder radius/height must be strictly positive")


@dataclass(frozen=True, eq=False)
class SceneObject:
    name: str
    label: str  # class name: block | peg | board | table | gauze
    shape: Box | Cylinder
    pose: Pose6  # world_from_local
    albedo: tuple[float, float, float]
    ir_absorbing: bool = False
    model_id: str | None = None
    promptable: bool = False
    held_by: str | None = None
    seated_on_peg: str | None = None

    def __post_init__(self):
        if self.held_by is not None and self.seated_on_peg is not None:
            raise ValueError(f"{self.name} cannot be both held and seated")
        if not all(0.0 <= c <= 1.0 for c in self.albedo):
            raise ValueError("albedo components must be in [0, 1]")


@dataclass(frozen=True)
class EnvironmentConfig:
    environment: str  # ideal | blackRedBlock | tiltedPegboard | gauze
    tilt_degrees: float = 0.0
    block_colors: tuple[str, ...] = ("yellow",)
    depth_noise_sigma: float = 0.0005  # meters
    ir_dropout_prob: float = 0.5  # applied to irAbsorbing surfaces only
    grasp_radius: float = DEFAULT_GRASP_RADIUS
    place_radius: float = DEFAULT_PLACE_RADIUS
    image_width: int = 640
    image_height: int = 480
    focal: float = 525.0
    prompt_points: dict | None = None  # explicit prompt override (tests)

    def __post_init__(self):
        if self.environment not in ("ideal", "blackRedBlock", "tiltedPegboard", "gauze"):
            raise ValueError(f"unknown environment {self.environment!r}")
        if not 0.0 <= self.tilt_degrees <= 45.0:
            raise ValueError("tilt_degrees must be in [0, 45]")
        if not 0.0 <= self.ir_dropout_prob <= 1.0:
            raise ValueError("ir_dropout_prob must be a probability")
        if self.depth_noise_sigma < 0:
            raise ValueError("depth_noise_sigma must be >= 0")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.focal, fy=self.focal,
                                cx=self.image_width / 2 - 0.5,
                                cy=self.image_height / 2 - 0.5,
                                width=self.image_width, height=self.image_height)


@dataclass(frozen=True)
class Placement:
    """Per-trial randomized object placement, drawn by the harness."""

    block_pegs: dict[str, str] = field(default_factory=dict)  # block name -> peg name
    target_peg: str | None = None
    gauze_xy: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True, eq=False)
class WorldState:
    objects: tuple[SceneObject, ...]  # sorted by name
    camera: CameraIntrinsics
    camera_pose: Pose6  # world_from_camera
    tilt_degrees: float
    depth_noise_sigma: float
    ir_dropout_prob: float
    grasp_radius: float = DEFAULT_GRASP_RADIUS
    place_radius: float = DEFAULT_PLACE_RADIUS

    def __post_init__(self):
        names = [o.name for o in self.objects]
        if names != sorted(names):
            object.__setattr__(self, "objects", tuple(sorted(self.objects, key=lambda o: o.name)))
        if len(set(names)) != len(names):
            raise ValueError("duplicate object names")

    def object(self, name: str) -> SceneObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(f"no object named {name!r}")

    def has_object(self, name: str) -> bool:
        return any(o.name == name for o in self.objects)

    def pegs(self) -> list[SceneObject]:
        return [o for o in self.objects if o.label == "peg"]

    def held_object(self) -> SceneObject | None:
        for o in self.objects:
            if o.held_by is not None:
                return o
        return None

    def replace_object(self, name: str, **changes) -> "WorldState":
        objs = tuple(replace(o, **changes) if o.name == name else o for o in self.objects)
        return replace(self, objects=objs)

    def content_key(self) -> bytes:
        h = hashlib.sha256()
        for o in self.objects:
            h.update(o.name.encode())
            h.update(repr(o.shape).encode())
            h.update(o.pose.quat.tobytes())
            h.update(o.pose.trans.tobytes())
            h.update(np.float64(o.albedo).tobytes())
            h.update(bytes([o.ir_absorbing]))
        h.update(repr(self.camera).encode())
        h.update(self.camera_pose.quat.tobytes())
        h.update(self.camera_pose.trans.tobytes())
        return h.digest()


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64 meters, 0.0 = invalid
    validity: np.ndarray  # (H, W) bool
    intrinsics: CameraIntrinsics
    frame_id: int = 0

    def __post_init__(self):
        if not np.array_equal(self.depth == 0.0, ~self.validity):
            raise ValueError("depth must be exactly 0 where invalid and nonzero where valid")
        if np.any(self.depth < 0):
            raise ValueError("negative depth")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    pose: Pose6  # camera_from_model
    mask: np.ndarray  # (H, W) bool
    grasp_point_cam: np.ndarray  # 3-vector, camera frame


def _down_camera_pose(height: float) -> Pose6:
    # camera x = world x, camera y = -world y, camera z = -world z
    rot = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return Pose6.from_matrix(rot, (0.0, 0.0, height))


def _upright_pose(x: float, y: float, z: float) -> Pose6:
    """World pose of an object standing upright (local frame camera-aligned)."""
    rot = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return Pose6.from_matrix(rot, (x, y, z))


def peg_name(index: int) -> str:
    return f"peg_{index:02d}"


def peg_board_position(index: int) -> tuple[float, float]:
    col, row = index % 3, index // 3
    return PEG_XS[col], PEG_YS[row]


def build_environment(config: EnvironmentConfig, placement: Placement | None = None) -> WorldState:
    """Assemble the world for one trial.

    The pegboard scene always carries 12 pegs; `placement` decides which
    pegs the blocks start on. The tilted variant rotates the whole board
    assembly (board, pegs, seated blocks) about the world/camera x axis
    through the board-top center.
    """
    placement = placement or _default_placement(config)
    tilt = np.radians(config.tilt_degrees if config.environment == "tiltedPegboard" else 0.0)
    tilt_pose = Pose6.from_axis_angle((1.0, 0.0, 0.0), tilt) if tilt else Pose6.identity()

    objects: list[SceneObject] = [
        SceneObject("table", "table", Box(TABLE_EXTENTS),
                    _upright_pose(0.0, 0.0, -BOARD_EXTENTS[2] - TABLE_EXTENTS[2] / 2),
                    albedo=(0.22, 0.42, 0.30)),
    ]

    if config.environment == "gauze":
        gx, gy = placement.gauze_xy
        objects.append(SceneObject(
            "gauze", "gauze", Slab((GAUZE_SIDE, GAUZE_SIDE, GAUZE_THICKNESS)),
            _upright_pose(gx, gy, -BOARD_EXTENTS[2] + GAUZE_THICKNESS / 2),
            albedo=(0.92, 0.92, 0.86), model_id="gauze", promptable=True))
        # flat background: the table stands in for the drape; no board
        camera_pose = _down_camera_pose(CAMERA_HEIGHT - BOARD_EXTENTS[2])
    else:
        def tilted(pose: Pose6) -> Pose6:
            return tilt_pose.compose(pose)

        objects.append(SceneObject(
            "board", "board", Box(BOARD_EXTENTS),
            tilted(_upright_pose(0.0, 0.0, -BOARD_EXTENTS[2] / 2)),
            albedo=(0.45, 0.35, 0.25)))
        for i in range(12):
            px, py = peg_board_position(i)
            objects.append(SceneObject(
                peg_name(i), "peg", Cylinder(PEG_RADIUS, PEG_HEIGHT),
                tilted(_upright_pose(px, py, PEG_HEIGHT / 2)),
                albedo=(0.75, 0.75, 0.78), model_id="peg", promptable=True))
        for color in config.block_colors:
            name = f"block_{color}"
            peg = placement.block_pegs[name]
            px, py = peg_board_position(int(peg.split("_")[1]))
            objects.append(SceneObject(
                name, "block", Box((BLOCK_EDGE,) * 3),
                tilted(_upright_pose(px, py, BLOCK_EDGE / 2)),
                albedo=BLOCK_COLOR_TABLE[color],
                ir_absorbing=(color == "black"),
                model_id="block", promptable=True, seated_on_peg=peg))
        camera_pose = _down_camera_pose(CAMERA_HEIGHT)

    world = WorldState(tuple(sorted(objects, key=lambda o: o.name)),
                       camera=config.intrinsics(), camera_pose=camera_pose,
                       tilt_degrees=float(np.degrees(tilt)),
                       depth_noise_sigma=config.depth_noise_sigma,
                       ir_dropout_prob=config.ir_dropout_prob,
                       grasp_radius=config.grasp_radius,
                       place_radius=config.place_radius)
    if config.environment != "gauze" and len(world.pegs()) != 12:
        raise ValueError("peg-transfer scene must hold exactly 12 pegs")
    return world


def _default_placement(config: EnvironmentConfig) -> Placement:
    pegs = {}
    for i, color in enumerate(config.block_colors):
        pegs[f"block_{color}"] = peg_name(4 + 3 * i)
    return Placement(block_pegs=pegs, target_peg=peg_name(7), gauze_xy=(0.0, 0.0))


# ---------------------------------------------------------------------------
# rendering


def _ray_directions(intr: CameraIntrinsics) -> np.ndarray:
    us = np.arange(intr.width, dtype=np.float64)
    vs = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    d = np.empty((intr.height, intr.width, 3))
    d[..., 0] = (uu - intr.cx) / intr.fx
    d[..., 1] = (vv - intr.cy) / intr.fy
    d[..., 2] = 1.0
    return d


def _intersect_box(origin: np.ndarray, dirs: np.ndarray, extents) -> np.ndarray:
    """Ray parameter of the first box hit per ray; +inf where missed.

    `origin` is one local-frame point shared by all rays; `dirs` is (N, 3).
    Slab method per axis, careful with axis-parallel rays.
    """
    half = np.asarray(extents) / 2.0
    tmin = np.full(dirs.shape[0], -np.inf)
    tmax = np.full(dirs.shape[0], np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        o = origin[ax]
        parallel = d == 0.0
        with np.errstate(divide="ignore"):
            t1 = (-half[ax] - o) / d
            t2 = (half[ax] - o) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        inside = abs(o) <= half[ax]
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)
    t = np.where((tmax >= tmin) & (tmax > _EPS_T) & (tmin > _EPS_T), tmin, np.inf)
    return t


def _intersect_cylinder(origin: np.ndarray, dirs: np.ndarray, radius: float,
                        height: float) -> np.ndarray:
    """First hit against a z-axis cylinder with flat caps; +inf where missed."""
    ox, oy, oz = origin
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    half_h = height / 2.0
    best = np.full(dirs.shape[0], np.inf)

    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4.0 * a * c
    quad = (a > 0.0) & (disc >= 0.0)
    sq = np.sqrt(np.where(quad, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2.0 * a)
            z = oz + t * dz
            ok = quad & (t > _EPS_T) & (np.abs(z) <= half_h)
            best = np.where(ok & (t < best), t, best)

    nonvert = dz != 0.0
    with np.errstate(divide="ignore"):
        for zc in (-half_h, half_h):
            t = (zc - oz) / dz
            px = ox + t * dx
            py = oy + t * dy
            ok = nonvert & (t > _EPS_T) & (px * px + py * py <= radius * radius)
            best = np.where(ok & (t < best), t, best)
    return best


_geometry_cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
_GEOMETRY_CACHE_MAX = 12


def render_geometry(world: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-pixel (camera-z depth, object index) maps, noise-free.

    The ray parameter along directions ((u-cx)/fx, (v-cy)/fy, 1) IS the
    camera-z depth, so backProject(pixel, depth) reproduces the hit point
    exactly. Object index refers to world.objects order (-1 = background);
    exact ties go to the lower index (name order), a measure-zero case
    pinned only for determinism.
    """
    key = world.content_key()
    hit = _geometry_cache.get(key)
    if hit is not None:
        return hit
    intr = world.camera
    dirs_cam = _ray_directions(intr).reshape(-1, 3)
    rot_wc = world.camera_pose.rotation_matrix()
    dirs_world = dirs_cam @ rot_wc.T
    origin_world = world.camera_pose.trans

    best_t = np.full(dirs_world.shape[0], np.inf)
    best_id = np.full(dirs_world.shape[0], -1, dtype=np.int32)
    for idx, obj in enumerate(world.objects):
        inv = obj.pose.inverse()
        rot_lw = inv.rotation_matrix()
        o_local = inv.apply(origin_world)
        d_local = dirs_world @ rot_lw.T
        if isinstance(obj.shape, Cylinder):
            t = _intersect_cylinder(o_local, d_local, obj.shape.radius, obj.shape.height)
        else:
            t = _intersect_box(o_local, d_local, obj.shape.extents)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = idx

    t_img = np.where(np.isfinite(best_t), best_t, 0.0).reshape(intr.height, intr.width)
    id_img = best_id.reshape(intr.height, intr.width)
    t_img = _frozen(t_img)
    id_img = _frozen(id_img)
    if len(_geometry_cache) >= _GEOMETRY_CACHE_MAX:
        _geometry_cache.pop(next(iter(_geometry_cache)))
    _geometry_cache[key] = (t_img, id_img)
    return t_img, id_img


def render_frame(world: WorldState, render_seed, dropout_seed, frame_id: int = 0) -> RgbdFrame:
    """Render one RGB-D frame: exact geometry + depth noise + IR dropout.

    Noise and dropout draw from independent substreams so dropout sets are
    identical across noise settings and monotone across dropout
    probabilities (a pixel invalid at p stays invalid at p' > p).
    """
    t_img, id_img = render_geometry(world)
    albedos = np.array([o.albedo for o in world.objects] + [(0.0, 0.0, 0.0)])
    color = np.round(albedos[id_img] * 255.0).astype(np.uint8)

    depth = t_img.copy()
    validity = id_img >= 0
    if world.depth_noise_sigma > 0.0:
        noise_rng = np.random.default_rng(render_seed)
        noise = noise_rng.normal(0.0, world.depth_noise_sigma, size=depth.shape)
        depth = np.where(validity, depth + noise, 0.0)
        # additive noise must never fabricate an invalid (0/negative) depth
        depth = np.where(validity, np.maximum(depth, 1e-6), 0.0)

    ir_flags = np.array([o.ir_absorbing for o in world.objects] + [False])
    on_ir = ir_flags[id_img]
    if world.ir_dropout_prob > 0.0 and np.any(on_ir):
        dropout_rng = np.random.default_rng(dropout_seed)
        u = dropout_rng.uniform(size=depth.shape)
        dropped = on_ir & (u < world.ir_dropout_prob)
        validity = validity & ~dropped
        depth = np.where(validity, depth, 0.0)

    return RgbdFrame(color=color, depth=depth, validity=validity,
                     intrinsics=world.camera, frame_id=frame_id)


def ground_truth(world: WorldState, object_name: str) -> GroundTruth:
    """Exact camera-frame pose, pixel mask, and grasp point for one object."""
    from .models import MODEL_LIBRARY

    obj = world.object(object_name)  # raises KeyError for unknown names
    _, id_img = render_geometry(world)
    idx = [o.name for o in world.objects].index(object_name)
    mask = id_img == idx
    pose_cam = world.camera_pose.inverse().compose(obj.pose)
    if obj.model_id is not None:
        grasp_local = MODEL_LIBRARY[obj.model_id].grasp_point
    else:
        grasp_local = np.zeros(3)
    return GroundTruth(pose=pose_cam, mask=_frozen(mask.copy()),
                       grasp_point_cam=pose_cam.apply(grasp_local))


def world_grasp_point(world: WorldState, object_name: str) -> np.ndarray:
    from .models import MODEL_LIBRARY

    obj = world.object(object_name)
    return obj.pose.apply(MODEL_LIBRARY[obj.model_id].grasp_point)


# ---------------------------------------------------------------------------
# task-rule world stepping


@dataclass(frozen=True)
class GraspEvent:
    object_name: str
    tooltip_world: tuple[float, float, float]


@dataclass(frozen=True)
class ReleaseEvent:
    tooltip_world: tuple[float, float, float]


@dataclass(frozen=True)
class MoveEvent:
    tooltip_world: tuple[float, float, float]


def step_world(world: WorldState, event) -> tuple[WorldState, str]:
    """Apply one physics-lite event; returns (new world, outcome code).

    Outcomes: grasped | grasp_missed | grasp_while_holding | moved |
    seated:<peg> | dropped | released | release_empty.
    """
    if isinstance(event, GraspEvent):
        return _apply_grasp(world, event)
    if isinstance(event, ReleaseEvent):
        return _apply_release(world, event)
    if isinstance(event, MoveEvent):
        return _apply_move(world, event)
    raise TypeError(f"unknown world event {event!r}")


def _snap_held(obj: SceneObject, tooltip: np.ndarray) -> Pose6:
    """Pose that puts the object's grasp point exactly at the tooltip."""
    from .models import MODEL_LIBRARY

    grasp_world = obj.pose.apply(MODEL_LIBRARY[obj.model_id].grasp_point)
    return Pose6(obj.pose.quat, obj.pose.trans + (tooltip - grasp_world))


def _apply_grasp(world: WorldState, event: GraspEvent) -> tuple[WorldState, str]:
    if world.held_object() is not None:
        return world, "grasp_while_holding"
    obj = world.object(event.object_name)
    tooltip = np.asarray(event.tooltip_world, dtype=np.float64)
    if np.linalg.norm(tooltip - world_grasp_point(world, obj.name)) > world.grasp_radius:
        return world, "grasp_missed"
    snapped = _snap_held(obj, tooltip)
    new = world.replace_object(obj.name, held_by="psm", seated_on_peg=None)
    new = new.replace_object(obj.name, pose=snapped)
    return new, "grasped"


def _apply_move(world: WorldState, event: MoveEvent) -> tuple[WorldState, str]:
    held = world.held_object()
    if held is None:
        return world, "moved"
    tooltip = np.asarray(event.tooltip_world, dtype=np.float64)
    return world.replace_object(held.name, pose=_snap_held(held, tooltip)), "moved"


def _apply_release(world: WorldState, event: ReleaseEvent) -> tuple[WorldState, str]:
    from .models import MODEL_LIBRARY

    held = world.held_object()
    if held is None:
        return world, "release_empty"
    model = MODEL_LIBRARY[held.model_id]

    if model.place_point is not None:
        place_world = held.pose.apply(model.place_point)
        occupied = {o.seated_on_peg for o in world.objects if o.seated_on_peg}
        for peg in world.pegs():
            if peg.name in occupied:
                continue
            local = peg.pose.inverse().apply(place_world)
            radial = float(np.hypot(local[0], local[1]))
            above_top = local[2] < -peg.shape.height / 2.0
            if radial <= world.place_radius and above_top:
                seated_pose = Pose6(peg.pose.quat, peg.pose.trans)
                new = world.replace_object(held.name, held_by=None, pose=seated_pose)
                new = new.replace_object(held.name, seated_on_peg=peg.name)
                return new, f"seated:{peg.name}"

    if held.label == "gauze":
        # retrieval task: releasing the held gauze anywhere completes it
        drop = _rest_on_support(world, held)
        new = world.replace_object(held.name, held_by=None, pose=drop)
        return new, "released"

    drop = _rest_on_support(world, held)
    new = world.replace_object(held.name, held_by=None, pose=drop)
    return new, "dropped"


def _rest_on_support(world: WorldState, obj: SceneObject) -> Pose6:
    """Resting pose under the object's current position: board if over it, else table."""
    half_h = obj.shape.extents[2] / 2.0 if isinstance(obj.shape, Box) else obj.shape.height / 2.0
    if world.has_object("board"):
        board = world.object("board")
        local = board.pose.inverse().apply(obj.pose.trans)
        bx, by, bz = board.shape.extents
        if abs(local[0]) <= bx / 2.0 and abs(local[1]) <= by / 2.0:
            rest_local = np.array([local[0], local[1], -bz / 2.0 - half_h])
            return Pose6(board.pose.quat, board.pose.apply(rest_local))
    table = world.object("table")
    table_top = table.pose.trans[2] + table.shape.extents[2] / 2.0
    return _upright_pose(obj.pose.trans[0], obj.pose.trans[1], table_top + half_h)


# ---------------------------------------------------------------------------
# snapshot export


def export_snapshot(frame: RgbdFrame, world: WorldState, out_dir) -> dict:
    """Write color PNG, 16-bit depth PNG (0.1 mm units), and a metadata JSON."""
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame.color).save(out / "color.png")
    depth_tenths_mm = np.round(frame.depth / 1e-4).astype(np.uint16)
    Image.fromarray(depth_tenths_mm).save(out / "depth.png")
    meta = {
        "intrinsics": {"fx": frame.intrinsics.fx, "fy": frame.intrinsics.fy,
                       "cx": frame.intrinsics.cx, "cy": frame.intrinsics.cy,
                       "width": frame.intrinsics.width, "height": frame.intrinsics.height},
        "depth_units_m": 1e-4,
        "frame_id": frame.frame_id,
        "camera_pose_world": {"quat": list(world.camera_pose.quat),
                              "trans": list(world.camera_pose.trans)},
        "objects": {o.name: {"label": o.label,
                             "quat": list(o.pose.quat),
                             "trans": list(o.pose.trans)}
                    for o in world.objects},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta
