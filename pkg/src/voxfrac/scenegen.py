"""Procedural forest scenes: relief ground, trees, shrubs and box-shaped clutter.

Every object draws from its own counter-based generator keyed on
``(seed, object class, object index)`` so the layout of one object never
depends on how many random numbers another object consumed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from voxfrac.mesh import Material, TriangleMesh, mesh_material_areas

GROUND_RELIEF = 0.4  # m, must stay <= 0.5
GROUND_BASE = 0.5
GROUND_CELL = 1.0
MAX_PLACEMENT_TRIES = 400
MISC_AREA_CAP = 0.005  # fraction of the non-misc area

_CLASS_KEYS = {"ground": 0, "tree": 1, "shrub": 2, "misc": 3}


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    extent: tuple[float, float, float] = (50.0, 50.0, 30.0)
    tree_count: int = 10
    shrub_count: int = 6
    misc_count: int = 2
    leaf_density: float = 2.0  # crown triangles per cubic meter
    rng_seed: int = 0

    def validate(self) -> None:
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise SceneError(f"extent must be three positive lengths, got {self.extent}")
        for name in ("tree_count", "shrub_count", "misc_count"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be >= 0")
        if self.leaf_density <= 0:
            raise SceneError("leaf_density must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extent"] = list(self.extent)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "extent" in d:
            d["extent"] = tuple(float(v) for v in d["extent"])
        return cls(**d)


def object_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (_CLASS_KEYS[kind] << 32) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# -- primitives ----------------------------------------------------------------

def _frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def cylinder(p0, p1, radius: float, material: Material, segments: int = 8) -> TriangleMesh:
    """Open cylinder (side wall only) from ``p0`` to ``p1``."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    u, v = _frame(p1 - p0)
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = radius * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)
    verts = np.concatenate([p0 + ring, p1 + ring])
    i = np.arange(segments)
    j = (i + 1) % segments
    tris = np.concatenate([np.stack([i, j, i + segments], 1), np.stack([j, j + segments, i + segments], 1)])
    return TriangleMesh(verts, tris, np.full(len(tris), material))


def ellipsoid_shell(center, radii, n_lat: int, material: Material) -> TriangleMesh:
    """Closed latitude/longitude tessellation of an ellipsoid surface."""
    n_lat = max(n_lat, 3)
    n_lon = 2 * n_lat
    theta = np.pi * np.arange(1, n_lat) / n_lat  # interior rings
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi), np.broadcast_to(ct, (n_lat - 1, n_lon))], -1)
    ring = ring.reshape(-1, 3)
    unit = np.concatenate([[[0.0, 0.0, 1.0]], ring, [[0.0, 0.0, -1.0]]])
    verts = np.asarray(center) + unit * np.asarray(radii)
    top, bottom = 0, len(unit) - 1
    tris = []
    k = np.arange(n_lon)
    kn = (k + 1) % n_lon
    first = 1
    tris.append(np.stack([np.full(n_lon, top), first + k, first + kn], 1))
    for r in range(n_lat - 2):
        a = 1 + r * n_lon
        b = a + n_lon
        tris.append(np.stack([a + k, b + k, a + kn], 1))
        tris.append(np.stack([a + kn, b + k, b + kn], 1))
    last = 1 + (n_lat - 2) * n_lon
    tris.append(np.stack([last + k, np.full(n_lon, bottom), last + kn], 1))
    tris = np.concatenate(tris)
    return TriangleMesh(verts, tris, np.full(len(tris), material))


def box(lo, hi, material: Material) -> TriangleMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.float64)
    verts = lo + corners * (hi - lo)
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(tris), np.full(12, material))


# -- ground ------------------------------------------------------------------

@dataclass
class Ground:
    extent: tuple[float, float, float]
    freq: np.ndarray = field(default_factory=lambda: np.ones(2))
    phase: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def height(self, x, y):
        ex, ey, _ = self.extent
        return GROUND_BASE + GROUND_RELIEF * np.sin(
            2 * np.pi * self.freq[0] * np.asarray(x) / ex + self.phase[0]
        ) * np.sin(2 * np.pi * self.freq[1] * np.asarray(y) / ey + self.phase[1])

    def mesh(self) -> TriangleMesh:
        ex, ey, _ = self.extent
        nx = max(1, math.ceil(ex / GROUND_CELL))
        ny = max(1, math.ceil(ey / GROUND_CELL))
        xs = np.linspace(0.0, ex, nx + 1)
        ys = np.linspace(0.0, ey, ny + 1)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        verts = np.stack([gx, gy, self.height(gx, gy)], -1).reshape(-1, 3)
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        v00 = (i * (ny + 1) + j).ravel()
        v10 = v00 + (ny + 1)
        tris = np.concatenate([np.stack([v00, v10, v10 + 1], 1), np.stack([v00, v10 + 1, v00 + 1], 1)])
        return TriangleMesh(verts, tris, np.full(len(tris), Material.SOIL))


def make_ground(config: SceneConfig) -> Ground:
    rng = object_rng(config.rng_seed, "ground", 0)
    return Ground(tuple(config.extent), freq=rng.integers(1, 4, size=2).astype(float),
                  phase=rng.uniform(0, 2 * np.pi, size=2))


# -- objects -------------------------------------------------------------------

@dataclass
class _Footprint:
    x: float
    y: float
    radius: float


def _place(rng, extent, radius, placed: list[_Footprint], spacing: float, kind: str, index: int):
    ex, ey, _ = extent
    if 2 * radius >= min(ex, ey):
        raise SceneError(f"could not place {kind} {index}: footprint radius {radius:.2f} m exceeds extent")
    for _ in range(MAX_PLACEMENT_TRIES):
        x = rng.uniform(radius, ex - radius)
        y = rng.uniform(radius, ey - radius)
        if all(math.hypot(x - p.x, y - p.y) >= spacing * (radius + p.radius) for p in placed):
            return x, y
    raise SceneError(f"could not place {kind} {index}: extent too small for requested count")


def _crown_shells(center, radii, leaf_density) -> list[TriangleMesh]:
    volume = 4.0 / 3.0 * np.pi * float(np.prod(radii))
    total = leaf_density * volume
    scales = (1.0, 0.72, 0.45)
    weights = np.array(scales) ** 2
    shells = []
    for s, w in zip(scales, weights / weights.sum()):
        n_lat = max(3, int(round(math.sqrt(total * w / 4.0))))
        shells.append(ellipsoid_shell(center, np.asarray(radii) * s, n_lat, Material.LEAF))
    return shells


def _tree(rng, x, y, ground: Ground, crown_r: float, ez: float, leaf_density: float) -> list[TriangleMesh]:
    base = float(ground.height(x, y)) - 0.05
    top_limit = ez - 0.5
    height = rng.uniform(0.55, 0.9) * (top_limit - base)
    crown_rz = min(rng.uniform(0.25, 0.4) * height, 0.5 * height)
    crown_c = np.array([x, y, base + height - crown_rz])
    trunk_r = rng.uniform(0.15, 0.35)
    parts = [cylinder((x, y, base), crown_c + [0, 0, 0.4 * crown_rz], trunk_r, Material.BARK)]
    for _ in range(int(rng.integers(3, 7))):
        z0 = crown_c[2] + rng.uniform(-0.6, 0.3) * crown_rz
        az = rng.uniform(0, 2 * np.pi)
        reach = rng.uniform(0.5, 0.85)
        tip = crown_c + np.array([reach * crown_r * math.cos(az), reach * crown_r * math.sin(az),
                                  (z0 - crown_c[2]) + rng.uniform(0.1, 0.4) * crown_rz])
        parts.append(cylinder((x, y, z0), tip, rng.uniform(0.05, 0.1), Material.BARK, segments=6))
    parts += _crown_shells(crown_c, (crown_r, crown_r, crown_rz), leaf_density)
    return parts


def _shrub(rng, x, y, ground: Ground, r: float, leaf_density: float) -> list[TriangleMesh]:
    g = float(ground.height(x, y))
    rz = rng.uniform(0.5, 1.0)
    center = np.array([x, y, g + rz])
    stem = cylinder((x, y, g - 0.05), center, rng.uniform(0.04, 0.08), Material.BARK, segments=6)
    return [stem] + _crown_shells(center, (r, r, rz), leaf_density)[:2]


def generate_scene(config: SceneConfig) -> TriangleMesh:
    """Build a deterministic forest mesh from ``config``.

    The ground covers the whole x-y extent with mild sinusoidal relief; trees
    are bark trunks and branches inside nested leaf shells; clutter objects
    are axis-aligned misc boxes scaled to stay well under 1% of total area.
    """
    config.validate()
    ex, ey, ez = config.extent
    if ez < 2.0:
        raise SceneError("could not place ground: extent z must be at least 2 m")
    ground = make_ground(config)
    parts = [ground.mesh()]
    placed: list[_Footprint] = []

    for i in range(config.tree_count):
        rng = object_rng(config.rng_seed, "tree", i)
        crown_r = min(rng.uniform(2.0, 4.0), 0.45 * min(ex, ey))
        x, y = _place(rng, config.extent, crown_r, placed, 0.7, "tree", i)
        placed.append(_Footprint(x, y, crown_r))
        if ez < 6.0:
            raise SceneError(f"could not place tree {i}: extent z below 6 m")
        parts += _tree(rng, x, y, ground, crown_r, ez, config.leaf_density)

    for i in range(config.shrub_count):
        rng = object_rng(config.rng_seed, "shrub", i)
        r = rng.uniform(0.6, 1.2)
        x, y = _place(rng, config.extent, r, placed, 0.5, "shrub", i)
        placed.append(_Footprint(x, y, r))
        parts += _shrub(rng, x, y, ground, r, config.leaf_density)

    scene = TriangleMesh.concatenate(parts)
    other_area = float(scene.triangle_areas().sum())
    boxes = []
    for i in range(config.misc_count):
        rng = object_rng(config.rng_seed, "misc", i)
        size = rng.uniform([0.6, 0.6, 0.5], [1.6, 1.6, 1.5])
        half = 0.5 * float(np.hypot(size[0], size[1]))
        x, y = _place(rng, config.extent, half, placed, 0.5, "misc", i)
        placed.append(_Footprint(x, y, half))
        boxes.append((x, y, size))
    if boxes:
        misc_area = sum(2 * (s[0] * s[1] + s[0] * s[2] + s[1] * s[2]) for _, _, s in boxes)
        shrink = min(1.0, math.sqrt(MISC_AREA_CAP * other_area / misc_area))
        for x, y, size in boxes:
            size = size * shrink
            z0 = float(ground.height(x, y)) - 0.1 * size[2]
            lo = np.array([x - size[0] / 2, y - size[1] / 2, z0])
            parts.append(box(lo, lo + size, Material.MISC))
        scene = TriangleMesh.concatenate(parts)

    scene.validate()
    return scene


def scene_summary(mesh: TriangleMesh) -> dict:
    areas = mesh_material_areas(mesh)
    total = sum(areas.values())
    return {
        "triangles": mesh.n_triangles,
        "area": {m.label: a for m, a in areas.items()},
        "share": {m.label: (a / total if total else 0.0) for m, a in areas.items()},
    }
