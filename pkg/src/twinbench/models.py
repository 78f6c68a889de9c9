"""Object model priors: surface point samples plus grasp/place affordances.

Trial-time registration uses camera-facing samples — the top face plus the
upper half of the side walls — because a bench camera looking down only
ever observes that portion; registering against a full closed surface
biases the fit toward the invisible underside.

Samples are drawn by a seeded RNG rather than on a regular grid: a regular
grid aliases coherently under a rotation offset (every point mis-binds to
its neighbor the same way), which locks the registration into biased fixed
points a few degrees off; random samples decorrelate those errors and the
solver recovers exact poses.  The seed is fixed per model id and sample
count, so identical configs still yield identical priors byte-for-byte.

The full-surface samplers at the bottom serve synthetic registration
studies that need clouds drawn from the whole solid.
"""

from __future__ import annotations

import numpy as np

from .geometry import ModelPrior
from .scene import BLOCK_EDGE, GAUZE_SIDE, GAUZE_THICKNESS, PEG_HEIGHT, PEG_RADIUS

_MODEL_SEED = {"block": 101, "peg": 102, "gauze": 103}


def sample_box_camera_facing(extents, count: int, rng: np.random.Generator) -> np.ndarray:
    """Top face plus upper half of the four side walls, local frame.

    The local frame is camera-aligned for an upright object: -z points at
    the camera, so the "top" face lies at z = -ez/2 and the upper wall band
    spans z in [-ez/2, 0].  Samples are uniform by area over that shell.
    """
    ex, ey, ez = extents
    hx, hy, hz = ex / 2, ey / 2, ez / 2
    areas = np.array([ex * ey, ey * hz, ey * hz, ex * hz, ex * hz])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(0.0, 1.0, size=count)
    pts = np.empty((count, 3))
    m = face == 0  # top face
    pts[m, 0] = u[m] * ex
    pts[m, 1] = (v[m] - 0.5) * ey
    pts[m, 2] = -hz
    for f, (axis, sign) in enumerate(((0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0)), start=1):
        m = face == f
        other = 1 - axis
        pts[m, axis] = sign * (hx if axis == 0 else hy)
        pts[m, other] = u[m] * (ey if axis == 0 else ex)
        pts[m, 2] = -v[m] * hz  # upper band: z in [-hz, 0]
    return pts


def sample_cylinder_camera_facing(radius: float, height: float, count: int,
                                  rng: np.random.Generator) -> np.ndarray:
    """Top cap plus upper half of the barrel, local frame (axis = z)."""
    half_h = height / 2
    cap = np.pi * radius**2
    band = 2 * np.pi * radius * half_h
    on_cap = rng.uniform(size=count) < cap / (cap + band)
    ang = rng.uniform(0.0, 2 * np.pi, size=count)
    pts = np.empty((count, 3))
    n_cap = int(on_cap.sum())
    r = radius * np.sqrt(rng.uniform(size=n_cap))
    pts[on_cap, 0] = r * np.cos(ang[on_cap])
    pts[on_cap, 1] = r * np.sin(ang[on_cap])
    pts[on_cap, 2] = -half_h
    m = ~on_cap
    pts[m, 0] = radius * np.cos(ang[m])
    pts[m, 1] = radius * np.sin(ang[m])
    pts[m, 2] = rng.uniform(-half_h, 0.0, size=int(m.sum()))
    return pts


def build_model_prior(model_id: str, sample_count: int = 2000) -> ModelPrior:
    rng = np.random.default_rng(np.random.SeedSequence(
        [_MODEL_SEED.get(model_id, 0), int(sample_count)]))
    if model_id == "block":
        verts = sample_box_camera_facing((BLOCK_EDGE,) * 3, sample_count, rng)
        return ModelPrior("block", verts,
                          grasp_point=(0.0, 0.0, -BLOCK_EDGE / 2),
                          place_point=(0.0, 0.0, 0.0))
    if model_id == "peg":
        verts = sample_cylinder_camera_facing(PEG_RADIUS, PEG_HEIGHT, sample_count, rng)
        return ModelPrior("peg", verts,
                          grasp_point=(0.0, 0.0, -PEG_HEIGHT / 2),
                          place_point=None)
    if model_id == "gauze":
        verts = sample_box_camera_facing((GAUZE_SIDE, GAUZE_SIDE, GAUZE_THICKNESS),
                                         sample_count, rng)
        return ModelPrior("gauze", verts,
                          grasp_point=(0.0, 0.0, -GAUZE_THICKNESS / 2),
                          place_point=None)
    raise KeyError(f"unknown model id {model_id!r}")


MODEL_LIBRARY: dict[str, ModelPrior] = {
    mid: build_model_prior(mid) for mid in ("block", "peg", "gauze")
}

_prior_cache: dict[tuple[str, int], ModelPrior] = {}


def model_prior(model_id: str, sample_count: int) -> ModelPrior:
    key = (model_id, int(sample_count))
    if key not in _prior_cache:
        _prior_cache[key] = build_model_prior(model_id, sample_count)
    return _prior_cache[key]


# ---------------------------------------------------------------------------
# full-surface random samplers (synthetic registration studies)


def sample_box_surface(extents, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area random samples over all six faces of a box."""
    ex, ey, ez = extents
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    pts = np.empty((count, 3))
    for f in range(6):
        m = face == f
        axis, sign = divmod(f, 2)
        sign = 1.0 if sign else -1.0
        others = [a for a in range(3) if a != axis]
        dims = (ex, ey, ez)
        pts[m, axis] = sign * dims[axis] / 2
        pts[m, others[0]] = u[m] * dims[others[0]]
        pts[m, others[1]] = v[m] * dims[others[1]]
    return pts


def sample_cylinder_surface(radius: float, height: float, count: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area random samples over barrel and both caps."""
    barrel = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    which = rng.choice(3, size=count, p=np.array([barrel, cap, cap]) / (barrel + 2 * cap))
    ang = rng.uniform(0.0, 2 * np.pi, size=count)
    pts = np.empty((count, 3))
    m = which == 0
    pts[m, 0] = radius * np.cos(ang[m])
    pts[m, 1] = radius * np.sin(ang[m])
    pts[m, 2] = rng.uniform(-height / 2, height / 2, size=int(m.sum()))
    for w, z in ((1, -height / 2), (2, height / 2)):
        m = which == w
        r = radius * np.sqrt(rng.uniform(size=int(m.sum())))
        pts[m, 0] = r * np.cos(ang[m])
        pts[m, 1] = r * np.sin(ang[m])
        pts[m, 2] = z
    return pts
