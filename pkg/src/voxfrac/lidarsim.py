"""Simplified airborne LiDAR: Beer-Lambert ray marching and per-voxel intensity.

Each ray loses energy inside a voxel at rate ``kappa = area / voxel_size**3``
(vegetation and clutter area; the ground is an opaque surface that absorbs
whatever energy reaches it).  A waveform stores the energy scattered in
consecutive range cells of width ``dt`` divided by ``dt``; its integral is
therefore exactly the scattered energy.

Waveform integrals treat each sample as constant over its cell.  With that
rule ``sum(S) * dt`` is the scattered energy and the per-voxel integrals add
up exactly along a ray.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from voxfrac.mesh import Material, TriangleMesh
from voxfrac.voxelizer import (
    GridError,
    MaterialAreaGrid,
    VoxelGridSpec,
    read_vxa_header,
    voxelize_sampled,
    write_vxa_header,
)

VFW_MAGIC = b"VFW1"
_EPS_T = 1e-12


class SensorError(ValueError):
    pass


@dataclass
class SensorConfig:
    """Flight and pulse parameters; defaults describe a low-altitude 16-channel scanner survey."""

    altitude: float = 88.0
    speed: float = 5.0
    flight_lines: int = 4
    side_overlap: float = 50.0
    pulse_rate: float = 18080.0
    pulse_energy: float = 2e-7
    gate_range: float = 119.8
    wavelength: float = 903.0
    ray_spacing: float = 0.5  # ground spacing of the decimated pulse lattice
    jitter: float = 0.5  # lattice jitter as a fraction of ray_spacing

    def validate(self) -> None:
        for name in ("altitude", "speed", "flight_lines", "side_overlap", "pulse_rate",
                     "pulse_energy", "gate_range", "wavelength", "ray_spacing"):
            if not getattr(self, name) > 0:
                raise SensorError(f"{name} must be positive")
        if self.gate_range < self.altitude:
            raise SensorError("gate_range must be >= altitude for nadir coverage")
        if not 0 <= self.jitter < 1:
            raise SensorError("jitter must be in [0, 1)")

    @property
    def decimation(self) -> int:
        """Pulses skipped per emitted ray along track at full pulse rate."""
        return max(1, round(self.ray_spacing * self.pulse_rate / self.speed))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Waveform:
    origin: np.ndarray
    direction: np.ndarray
    t0: float  # range of the start of the first cell
    dt: float
    samples: np.ndarray
    t_end: float  # range where the ray stopped (ground hit or grid exit)
    emitted: float = 1.0
    escaped: float = 0.0

    @property
    def times(self) -> np.ndarray:
        """Cell-center ranges."""
        return self.t0 + (np.arange(len(self.samples)) + 0.5) * self.dt

    def total(self) -> float:
        return float(self.samples.sum() * self.dt)

    def cumulative(self, t) -> np.ndarray:
        """Integral of the waveform from 0 to ``t`` under the cell rule."""
        t = np.asarray(t, dtype=np.float64)
        edges = np.concatenate([[0.0], np.cumsum(self.samples) * self.dt])
        u = np.clip((t - self.t0) / self.dt, 0.0, len(self.samples))
        k = np.minimum(np.floor(u).astype(np.int64), len(self.samples) - 1)
        k = np.maximum(k, 0)
        if len(self.samples) == 0:
            return np.zeros_like(u)
        return edges[k] + (u - k) * self.samples[k] * self.dt


@dataclass
class IntensityGrid:
    """Per-voxel mean scattering density (1/m) and ray counts, stored sparsely."""

    spec: VoxelGridSpec
    index: np.ndarray
    intensity: np.ndarray
    hits: np.ndarray

    def lookup(self) -> dict[tuple[int, int, int], tuple[float, int]]:
        return {tuple(k): (float(v), int(h)) for k, v, h in zip(self.index.tolist(), self.intensity, self.hits)}


# -- grid traversal --------------------------------------------------------------------

def ray_box(origin, direction, lo, hi) -> tuple[float, float]:
    """Entry and exit range of a ray against an axis-aligned box (nan if missed)."""
    t_in, t_out = -math.inf, math.inf
    for a in range(3):
        d = direction[a]
        if d == 0.0:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return math.nan, math.nan
            continue
        t1 = (lo[a] - origin[a]) / d
        t2 = (hi[a] - origin[a]) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_in = max(t_in, t1)
        t_out = min(t_out, t2)
    if t_out <= max(t_in, 0.0):
        return math.nan, math.nan
    return max(t_in, 0.0), t_out


def traverse(origin, direction, spec: VoxelGridSpec, t_max: float = math.inf):
    """Voxels crossed by a ray and the range interval spent in each.

    Returns ``(ijk, t_near, t_far)``; the intervals partition the part of
    [grid entry, min(grid exit, t_max)] the ray spends inside the grid.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    lo = np.asarray(spec.origin)
    hi = spec.upper
    t_in, t_out = ray_box(origin, direction, lo, hi)
    if math.isnan(t_in):
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0), np.zeros(0)
    t_out = min(t_out, t_max)
    if t_out <= t_in:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0), np.zeros(0)
    cuts = [np.array([t_in, t_out])]
    vs = spec.voxel_size
    for a in range(3):
        d = direction[a]
        if d == 0.0:
            continue
        p_in = origin[a] + t_in * d
        p_out = origin[a] + t_out * d
        k_lo = math.ceil((min(p_in, p_out) - lo[a]) / vs)
        k_hi = math.floor((max(p_in, p_out) - lo[a]) / vs)
        if k_hi >= k_lo:
            planes = lo[a] + vs * np.arange(k_lo, k_hi + 1)
            cuts.append((planes - origin[a]) / d)
    t = np.unique(np.clip(np.concatenate(cuts), t_in, t_out))
    keep = np.diff(t) > _EPS_T
    near, far = t[:-1][keep], t[1:][keep]
    mid = origin + 0.5 * (near + far)[:, None] * direction
    ijk = np.floor((mid - lo) / vs).astype(np.int64)
    ijk = np.clip(ijk, 0, np.asarray(spec.dims) - 1)
    return ijk, near, far


# -- ground -------------------------------------------------------------------------

class SoilSurface:
    """First-hit queries against the soil triangles, bucketed on an x-y grid."""

    def __init__(self, mesh: TriangleMesh):
        corners = mesh.corners()[mesh.material == Material.SOIL]
        self.corners = corners
        if len(corners) == 0:
            self.cell = 1.0
            self.buckets = {}
            self.zmin = self.zmax = 0.0
            return
        xy_lo = corners[:, :, :2].min(axis=1)
        xy_hi = corners[:, :, :2].max(axis=1)
        self.cell = float(max((xy_hi - xy_lo).max(), 1e-3))
        self.zmin = float(corners[:, :, 2].min())
        self.zmax = float(corners[:, :, 2].max())
        i_lo = np.floor(xy_lo / self.cell).astype(int)
        i_hi = np.floor(xy_hi / self.cell).astype(int)
        buckets: dict[tuple[int, int], list[int]] = {}
        for t in range(len(corners)):
            for i in range(i_lo[t, 0], i_hi[t, 0] + 1):
                for j in range(i_lo[t, 1], i_hi[t, 1] + 1):
                    buckets.setdefault((i, j), []).append(t)
        self.buckets = {k: np.array(v) for k, v in buckets.items()}

    def first_hit(self, origin, direction) -> float:
        """Smallest positive range at which the ray meets a soil triangle, or inf."""
        if not self.buckets:
            return math.inf
        if direction[2] != 0.0:
            ta = (self.zmax + 1e-6 - origin[2]) / direction[2]
            tb = (self.zmin - 1e-6 - origin[2]) / direction[2]
            ts = np.array([max(min(ta, tb), 0.0), max(ta, tb)])
            if ts[1] < 0:
                return math.inf
        else:
            if not self.zmin - 1e-6 <= origin[2] <= self.zmax + 1e-6:
                return math.inf
            ts = np.array([0.0, 1e6])
        xy = origin[:2] + ts[:, None] * direction[:2]
        i_lo = np.floor(xy.min(axis=0) / self.cell).astype(int)
        i_hi = np.floor(xy.max(axis=0) / self.cell).astype(int)
        cand = [self.buckets[(i, j)] for i in range(i_lo[0], i_hi[0] + 1)
                for j in range(i_lo[1], i_hi[1] + 1) if (i, j) in self.buckets]
        if not cand:
            return math.inf
        tri = self.corners[np.unique(np.concatenate(cand))]
        return _moller_trumbore(origin, direction, tri)


def _moller_trumbore(origin, direction, tri: np.ndarray) -> float:
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin - tri[:, 0]
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ direction) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    tol = 1e-12
    hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol) & (t > 0)
    return float(t[hit].min()) if hit.any() else math.inf


# -- rays and waveforms -------------------------------------------------------------

def extinction_grid(areas: MaterialAreaGrid) -> tuple[dict, np.ndarray]:
    """Linear voxel index -> extinction (1/m) from non-soil area."""
    vs = areas.spec.voxel_size
    scatter = areas.area.sum(axis=1) - areas.area[:, Material.SOIL]
    lin = areas.spec.linear(areas.index)
    kappa = scatter / vs**3
    return lin, kappa


def ray_lattice(spec: VoxelGridSpec, sensor: SensorConfig, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sensor positions and unit directions of every decimated pulse.

    Flight lines run along +y, evenly spaced across x.  Each line images its
    own strip widened by half the side overlap on both sides, on a jittered
    lattice of pitch ``sensor.ray_spacing``.
    """
    sensor.validate()
    lo = np.asarray(spec.origin)
    hi = spec.upper
    ex, ey = hi[0] - lo[0], hi[1] - lo[1]
    strip = ex / sensor.flight_lines
    g = sensor.ray_spacing
    rng = np.random.default_rng(rng_seed)
    origins, directions = [], []
    for line in range(sensor.flight_lines):
        xc = lo[0] + (line + 0.5) * strip
        x0 = max(lo[0], xc - 0.5 * strip - 0.5 * sensor.side_overlap)
        x1 = min(hi[0], xc + 0.5 * strip + 0.5 * sensor.side_overlap)
        nxr = int(math.floor((x1 - x0) / g))
        nyr = int(math.floor(ey / g))
        if nxr < 1 or nyr < 1:
            continue
        gx, gy = np.meshgrid(x0 + (np.arange(nxr) + 0.5) * g, lo[1] + (np.arange(nyr) + 0.5) * g, indexing="ij")
        targets = np.stack([gx.ravel(), gy.ravel()], 1)
        targets = targets + sensor.jitter * g * (rng.random(targets.shape) - 0.5)
        sensor_pos = np.stack([np.full(len(targets), xc), targets[:, 1],
                               np.full(len(targets), lo[2] + sensor.altitude)], 1)
        ground = np.concatenate([targets, np.full((len(targets), 1), lo[2])], 1)
        d = ground - sensor_pos
        rng_len = np.linalg.norm(d, axis=1)
        keep = rng_len <= sensor.gate_range
        origins.append(sensor_pos[keep])
        directions.append(d[keep] / rng_len[keep, None])
    if not origins or sum(len(o) for o in origins) == 0:
        raise SensorError("ray lattice is empty; ray_spacing too coarse for the grid")
    return np.concatenate(origins), np.concatenate(directions)


def march(origin, direction, spec: VoxelGridSpec, kappa_of, soil: SoilSurface | None,
          energy: float = 1.0) -> Waveform | None:
    """Build the waveform of one ray; ``None`` if the ray misses the grid."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t_ground = soil.first_hit(origin, direction) if soil is not None else math.inf
    ijk, near, far = traverse(origin, direction, spec, t_max=t_ground)
    if len(near) == 0:
        return None
    dt = spec.voxel_size / 4.0
    t_entry, t_end = float(near[0]), float(far[-1])
    hit_ground = t_ground <= t_end + 1e-9
    kappa = kappa_of(spec.linear(ijk))
    tau_edges = np.concatenate([[0.0], np.cumsum(kappa * (far - near))])
    t_nodes = np.concatenate([[near[0]], far])
    n = max(1, math.ceil((t_end - t_entry) / dt - 1e-9))
    t0 = t_end - n * dt
    cells = t0 + dt * np.arange(n + 1)
    tau = np.interp(cells, t_nodes, tau_edges, left=0.0)
    e = energy * np.exp(-tau)
    deposit = e[:-1] - e[1:]
    remaining = float(e[-1])
    escaped = 0.0
    if hit_ground:
        deposit[-1] += remaining
    else:
        escaped = remaining
    return Waveform(origin, direction, t0, dt, np.maximum(deposit, 0.0) / dt, t_end, energy, escaped)


def cast_rays(mesh: TriangleMesh, spec: VoxelGridSpec, sensor: SensorConfig, rng_seed: int = 0,
              areas: MaterialAreaGrid | None = None) -> list[Waveform]:
    """Simulate the decimated flight over ``mesh`` and return one waveform per ray."""
    if areas is None:
        areas = voxelize_sampled(mesh, spec, rng_seed)
    elif areas.spec != spec:
        raise GridError("area grid does not match the simulation grid")
    lin, kappa = extinction_grid(areas)
    order = np.argsort(lin)
    lin, kappa = lin[order], kappa[order]

    def kappa_of(q):
        pos = np.clip(np.searchsorted(lin, q), 0, max(len(lin) - 1, 0))
        if len(lin) == 0:
            return np.zeros(len(q))
        return np.where(lin[pos] == q, kappa[pos], 0.0)

    soil = SoilSurface(mesh)
    origins, directions = ray_lattice(spec, sensor, rng_seed)
    waves = []
    for o, d in zip(origins, directions):
        w = march(o, d, spec, kappa_of, soil, sensor.pulse_energy)
        if w is not None:
            waves.append(w)
    return waves


# -- fractions and intensity -------------------------------------------------------------

@dataclass
class VoxelRecords:
    """Per (ray, voxel) scattering fractions, columnar."""

    ijk: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    f_scatter: np.ndarray = field(default_factory=lambda: np.zeros(0))
    f_remaining: np.ndarray = field(default_factory=lambda: np.zeros(0))
    path_length: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ray: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.f_scatter)

    def __iter__(self):
        for k, fs, fr in zip(map(tuple, self.ijk.tolist()), self.f_scatter, self.f_remaining):
            yield k, float(fs), float(fr)

    @staticmethod
    def concatenate(parts: list["VoxelRecords"]) -> "VoxelRecords":
        if not parts:
            return VoxelRecords()
        return VoxelRecords(*(np.concatenate([getattr(p, f) for p in parts])
                              for f in ("ijk", "f_scatter", "f_remaining", "path_length", "ray")))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return np.clip(out, 0.0, 1.0)


def voxel_fractions(waveform: Waveform, spec: VoxelGridSpec, ray_id: int = 0) -> VoxelRecords:
    """Scattered and remaining fractions for every voxel the ray crosses.

    f_scatter = int_{near}^{far} S / int_{near}^inf S and
    f_remaining = int_{near}^inf S / int_0^inf S, with 0/0 taken as 0.
    """
    total = waveform.total()
    if not total > 0:
        return VoxelRecords()
    ijk, near, far = traverse(waveform.origin, waveform.direction, spec, t_max=waveform.t_end)
    if len(near) == 0:
        return VoxelRecords()
    c_near = waveform.cumulative(near)
    c_far = waveform.cumulative(far)
    tail = total - c_near
    f_s = _ratio(c_far - c_near, tail)
    f_r = _ratio(tail, np.full_like(tail, total))
    return VoxelRecords(ijk, f_s, f_r, far - near, np.full(len(near), ray_id, dtype=np.int64))


def aggregate_intensity(records: VoxelRecords, spec: VoxelGridSpec) -> IntensityGrid:
    """Mean over rays of (f_scatter * f_remaining) / path length, per voxel.

    Contributions are sorted within each voxel before summation so the result
    does not depend on record order.
    """
    if len(records) == 0:
        return IntensityGrid(spec, np.zeros((0, 3), dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))
    lin = spec.linear(records.ijk)
    density = np.zeros(len(records))
    ok = records.path_length > 0
    density[ok] = records.f_scatter[ok] * records.f_remaining[ok] / records.path_length[ok]
    order = np.lexsort((density, lin))
    lin, density = lin[order], density[order]
    starts = np.flatnonzero(np.r_[True, lin[1:] != lin[:-1]])
    sums = np.add.reduceat(density, starts)
    hits = np.diff(np.r_[starts, len(lin)])
    return IntensityGrid(spec, spec.unlinear(lin[starts]), sums / hits, hits.astype(np.int64))


def simulate_intensity(mesh: TriangleMesh, spec: VoxelGridSpec, sensor: SensorConfig, rng_seed: int = 0,
                       areas: MaterialAreaGrid | None = None) -> IntensityGrid:
    waves = cast_rays(mesh, spec, sensor, rng_seed, areas)
    recs = VoxelRecords.concatenate([voxel_fractions(w, spec, i) for i, w in enumerate(waves)])
    return aggregate_intensity(recs, spec)


# -- files ------------------------------------------------------------------------------

_INTENSITY_RECORD = np.dtype([("ix", "<u4"), ("iy", "<u4"), ("iz", "<u4"), ("intensity", "<f8"), ("hits", "<u4")])
_VFW_RAY = struct.Struct("<3d3dId")


def write_intensity_grid(grid: IntensityGrid, path) -> None:
    rec = np.zeros(len(grid.index), dtype=_INTENSITY_RECORD)
    rec["ix"], rec["iy"], rec["iz"] = grid.index.T
    rec["intensity"] = grid.intensity
    rec["hits"] = grid.hits
    with open(path, "wb") as fh:
        write_vxa_header(fh, grid.spec, len(rec))
        fh.write(rec.tobytes())


def read_intensity_grid(path) -> IntensityGrid:
    data = Path(path).read_bytes()
    spec, count, off = read_vxa_header(data, path)
    rec = np.frombuffer(data, dtype=_INTENSITY_RECORD, count=count, offset=off)
    index = np.stack([rec["ix"], rec["iy"], rec["iz"]], 1).astype(np.int64)
    return IntensityGrid(spec, index, rec["intensity"].astype(np.float64), rec["hits"].astype(np.int64))


def write_waveforms(waves: list[Waveform], path) -> None:
    """Debug dump: per ray {origin, direction, sample count, dt} then f32 samples."""
    with open(path, "wb") as fh:
        fh.write(VFW_MAGIC)
        fh.write(struct.pack("<I", len(waves)))
        for w in waves:
            fh.write(_VFW_RAY.pack(*w.origin, *w.direction, len(w.samples), w.dt))
            fh.write(w.samples.astype("<f4").tobytes())


def read_waveforms(path) -> list[tuple[np.ndarray, np.ndarray, float, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != VFW_MAGIC:
        raise SensorError(f"{path}: bad magic {data[:4]!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    out = []
    for _ in range(count):
        vals = _VFW_RAY.unpack_from(data, off)
        off += _VFW_RAY.size
        n = vals[6]
        samples = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        out.append((np.array(vals[0:3]), np.array(vals[3:6]), vals[7], samples))
    return out
