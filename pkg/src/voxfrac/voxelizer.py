"""Per-voxel, per-material surface area from a labelled triangle mesh.

Two routes are provided.  ``voxelize_sampled`` spreads each triangle's area
over ``ceil(32 * area / voxel_size**2)`` low-discrepancy points and is what
datasets are built with.  ``voxelize_exact`` clips every triangle against the
voxel slabs and measures the pieces; it is the reference the sampled route
is tested against.

Points lying exactly on a voxel face belong to the voxel with the lower index
along that axis (the grid's lower boundary belongs to voxel 0).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voxfrac.mesh import MATERIALS, N_MATERIALS, TriangleMesh

STANDARD_VOXEL_SIZES = (0.25, 0.5, 1.0, 1.5, 2.0)
SAMPLES_PER_FOOTPRINT = 32
VXA_MAGIC = b"VXA1"
BOUNDS_TOL = 1e-9

# R2 low-discrepancy sequence constants (inverse plastic number powers)
_PLASTIC = 1.32471795724474602596
_R2_ALPHA = np.array([1.0 / _PLASTIC, 1.0 / _PLASTIC**2])


class GridError(ValueError):
    pass


class OutOfBoundsError(GridError):
    def __init__(self, triangle_index: int):
        super().__init__(f"triangle {triangle_index} lies outside the voxel grid")
        self.triangle_index = triangle_index


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if not self.voxel_size > 0:
            raise GridError("voxel_size must be positive")
        if min(self.dims) < 1:
            raise GridError("grid dims must be positive")

    @classmethod
    def covering(cls, lo, hi, voxel_size: float, origin=None) -> "VoxelGridSpec":
        """Smallest grid anchored at ``origin`` (default ``lo``) that contains [lo, hi]."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        origin = lo if origin is None else np.asarray(origin, dtype=np.float64)
        dims = np.maximum(np.ceil((hi - origin) / voxel_size - 1e-12), 1).astype(int)
        return cls(tuple(origin), float(voxel_size), tuple(dims))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * np.asarray(self.dims)

    def shifted(self, offset) -> "VoxelGridSpec":
        return VoxelGridSpec(tuple(np.asarray(self.origin) + offset), self.voxel_size, self.dims)

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        """Integer voxel coordinates of ``points`` under the lower-index tie rule.

        No bounds check; callers decide how to treat points outside the grid.
        """
        u = (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size
        return np.maximum(np.ceil(u).astype(np.int64) - 1, 0)

    def contains(self, points: np.ndarray, tol: float = BOUNDS_TOL) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= np.asarray(self.origin) - tol) & (p <= self.upper + tol), axis=-1)

    def linear(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        nx, ny, nz = self.dims
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def unlinear(self, lin: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        lin = np.asarray(lin, dtype=np.int64)
        return np.stack([lin // (ny * nz), (lin // nz) % ny, lin % nz], axis=-1)

    def centers(self, ijk: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(ijk, dtype=np.float64) + 0.5) * self.voxel_size


@dataclass
class MaterialAreaGrid:
    """Occupied voxels of a grid with their four per-material areas (m^2).

    Stored sparsely: ``index`` is (M, 3) in lexicographic order and ``area`` is
    (M, 4) in ``Material`` order.  ``to_dense`` materializes the full array.
    """

    spec: VoxelGridSpec
    index: np.ndarray
    area: np.ndarray

    @classmethod
    def from_linear(cls, spec: VoxelGridSpec, lin: np.ndarray, values: np.ndarray) -> "MaterialAreaGrid":
        order = np.argsort(lin, kind="stable")
        return cls(spec, spec.unlinear(lin[order]), np.asarray(values)[order])

    @property
    def n_occupied(self) -> int:
        return len(self.index)

    def totals(self) -> np.ndarray:
        return self.area.sum(axis=0)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(tuple(self.spec.dims) + (N_MATERIALS,))
        if len(self.index):
            out[self.index[:, 0], self.index[:, 1], self.index[:, 2]] = self.area
        return out

    def lookup(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(k): v for k, v in zip(self.index.tolist(), self.area)}


def _check_bounds(corners: np.ndarray, spec: VoxelGridSpec) -> None:
    inside = spec.contains(corners.reshape(-1, 3)).reshape(-1, 3).all(axis=1)
    if not inside.all():
        raise OutOfBoundsError(int(np.flatnonzero(~inside)[0]))


def _accumulate(spec: VoxelGridSpec, lin_chunks, val_chunks) -> MaterialAreaGrid:
    if not lin_chunks:
        return MaterialAreaGrid(spec, np.zeros((0, 3), dtype=np.int64), np.zeros((0, N_MATERIALS)))
    lin = np.concatenate(lin_chunks)
    vals = np.concatenate(val_chunks)
    keys, inverse = np.unique(lin // N_MATERIALS, return_inverse=True)
    area = np.zeros((len(keys), N_MATERIALS))
    np.add.at(area, (inverse, lin % N_MATERIALS), vals)
    return MaterialAreaGrid(spec, spec.unlinear(keys), area)


def sample_counts(areas: np.ndarray, voxel_size: float) -> np.ndarray:
    """Points drawn per triangle: ceil(32 * area / voxel footprint), at least 1."""
    ratio = np.asarray(areas, dtype=np.float64) / voxel_size**2
    return np.maximum(np.ceil(SAMPLES_PER_FOOTPRINT * ratio).astype(np.int64), 1)


def triangle_samples(corners: np.ndarray, counts: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Quasi-uniform points on each triangle.

    Triangle ``t`` gets ``counts[t]`` points of the R2 sequence rotated by
    ``shifts[t]`` and folded onto the triangle with the square-root map
    (b0, b1, b2) = (1 - sqrt(u), sqrt(u) (1 - v), sqrt(u) v).
    """
    owner = np.repeat(np.arange(len(counts)), counts)
    start = np.cumsum(counts) - counts
    k = np.arange(owner.size) - start[owner] + 1
    uv = np.mod(shifts[owner] + k[:, None] * _R2_ALPHA, 1.0)
    s = np.sqrt(uv[:, 0])
    b1 = s * (1.0 - uv[:, 1])
    b2 = s * uv[:, 1]
    c = corners[owner]
    return c[:, 0] + b1[:, None] * (c[:, 1] - c[:, 0]) + b2[:, None] * (c[:, 2] - c[:, 0])


def voxelize_sampled(mesh: TriangleMesh, spec: VoxelGridSpec, rng_seed: int = 0,
                     chunk_points: int = 2_000_000) -> MaterialAreaGrid:
    corners = mesh.corners()
    _check_bounds(corners, spec)
    areas = mesh.triangle_areas()
    counts = sample_counts(areas, spec.voxel_size)
    shifts = np.random.default_rng(rng_seed).random((len(corners), 2))
    nx, ny, nz = spec.dims
    upper = np.array([nx, ny, nz]) - 1

    lin_chunks, val_chunks = [], []
    cum = np.cumsum(counts)
    t0 = 0
    while t0 < len(corners):
        # chunk on triangle boundaries so every chunk holds whole triangles
        t1 = max(int(np.searchsorted(cum, (cum[t0 - 1] if t0 else 0) + chunk_points, side="right")), t0 + 1)
        pts = triangle_samples(corners[t0:t1], counts[t0:t1], shifts[t0:t1])
        ijk = np.minimum(spec.voxel_index(pts), upper)
        per_point = np.repeat(areas[t0:t1] / counts[t0:t1], counts[t0:t1])
        mat = np.repeat(mesh.material[t0:t1].astype(np.int64), counts[t0:t1])
        lin_chunks.append(spec.linear(ijk) * N_MATERIALS + mat)
        val_chunks.append(per_point)
        t0 = t1
    return _accumulate(spec, lin_chunks, val_chunks)


# -- exact clipping --------------------------------------------------------------

def _split(poly: list, axis: int, plane: float) -> tuple[list, list]:
    """Split a convex polygon by the plane ``x[axis] == plane`` into (below, above)."""
    below, above = [], []
    n = len(poly)
    for i in range(n):
        p = poly[i]
        q = poly[(i + 1) % n]
        dp = p[axis] - plane
        dq = q[axis] - plane
        if dp <= 0:
            below.append(p)
        if dp >= 0:
            above.append(p)
        if (dp < 0 < dq) or (dq < 0 < dp):
            t = dp / (dp - dq)
            x = (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), p[2] + t * (q[2] - p[2]))
            x = tuple(plane if a == axis else x[a] for a in range(3))
            below.append(x)
            above.append(x)
    return below, above


def _polygon_area(poly: list) -> float:
    if len(poly) < 3:
        return 0.0
    ox, oy, oz = poly[0]
    sx = sy = sz = 0.0
    for i in range(1, len(poly) - 1):
        ax, ay, az = poly[i][0] - ox, poly[i][1] - oy, poly[i][2] - oz
        bx, by, bz = poly[i + 1][0] - ox, poly[i + 1][1] - oy, poly[i + 1][2] - oz
        sx += ay * bz - az * by
        sy += az * bx - ax * bz
        sz += ax * by - ay * bx
    return 0.5 * math.sqrt(sx * sx + sy * sy + sz * sz)


def _slab_index(u: float) -> int:
    return max(math.ceil(u) - 1, 0)


def clip_triangle(tri, voxel_size: float, dims) -> list[tuple[tuple[int, int, int], float]]:
    """Areas of one triangle (in grid-local coordinates) per voxel it touches."""
    out = []

    def recurse(poly, axis, prefix):
        if len(poly) < 3:
            return
        if axis == 3:
            a = _polygon_area(poly)
            if a > 0.0:
                out.append((tuple(prefix), a))
            return
        coords = [p[axis] / voxel_size for p in poly]
        i_lo = min(_slab_index(min(coords)), dims[axis] - 1)
        i_hi = min(_slab_index(max(coords)), dims[axis] - 1)
        rest = poly
        for i in range(i_lo, i_hi):
            piece, rest = _split(rest, axis, (i + 1) * voxel_size)
            recurse(piece, axis + 1, prefix + [i])
        recurse(rest, axis + 1, prefix + [i_hi])

    recurse([tuple(p) for p in tri], 0, [])
    return out


def voxelize_exact(mesh: TriangleMesh, spec: VoxelGridSpec) -> MaterialAreaGrid:
    """Exact per-voxel area by splitting every triangle along the grid planes."""
    corners = mesh.corners()
    _check_bounds(corners, spec)
    local = (corners - np.asarray(spec.origin)).tolist()
    ny, nz = spec.dims[1], spec.dims[2]
    lin, vals = [], []
    for tri, m in zip(local, mesh.material.tolist()):
        for (i, j, k), a in clip_triangle(tri, spec.voxel_size, spec.dims):
            lin.append(((i * ny + j) * nz + k) * N_MATERIALS + m)
            vals.append(a)
    if not lin:
        return _accumulate(spec, [], [])
    return _accumulate(spec, [np.array(lin, dtype=np.int64)], [np.array(vals)])


# -- fractions -----------------------------------------------------------------------

@dataclass
class VoxelFractions:
    """Occupied voxels (total area >= min_area) and their normalized material shares."""

    spec: VoxelGridSpec
    index: np.ndarray
    fractions: np.ndarray
    total_area: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def as_dict(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(k): f for k, f in zip(self.index.tolist(), self.fractions)}


def areas_to_fractions(grid: MaterialAreaGrid, min_area: float = 1e-6) -> VoxelFractions:
    if not min_area > 0:
        raise GridError("min_area must be positive")
    total = grid.area.sum(axis=1)
    keep = total >= min_area
    return VoxelFractions(grid.spec, grid.index[keep], grid.area[keep] / total[keep, None], total[keep])


# -- files ---------------------------------------------------------------------------

_VXA_HEADER = struct.Struct("<4sd3d3IQ")
_AREA_RECORD = np.dtype([("ix", "<u4"), ("iy", "<u4"), ("iz", "<u4"), ("area", "<f8", (4,))])


def write_vxa_header(fh, spec: VoxelGridSpec, count: int) -> None:
    fh.write(_VXA_HEADER.pack(VXA_MAGIC, spec.voxel_size, *spec.origin, *spec.dims, count))


def read_vxa_header(data: bytes, path="<bytes>") -> tuple[VoxelGridSpec, int, int]:
    magic, vs, ox, oy, oz, nx, ny, nz, count = _VXA_HEADER.unpack_from(data, 0)
    if magic != VXA_MAGIC:
        raise GridError(f"{path}: bad magic {magic!r}")
    return VoxelGridSpec((ox, oy, oz), vs, (nx, ny, nz)), count, _VXA_HEADER.size


def write_area_grid(grid: MaterialAreaGrid, path) -> None:
    rec = np.zeros(grid.n_occupied, dtype=_AREA_RECORD)
    rec["ix"], rec["iy"], rec["iz"] = grid.index.T
    rec["area"] = grid.area
    with open(path, "wb") as fh:
        write_vxa_header(fh, grid.spec, grid.n_occupied)
        fh.write(rec.tobytes())


def read_area_grid(path) -> MaterialAreaGrid:
    data = Path(path).read_bytes()
    spec, count, off = read_vxa_header(data, path)
    rec = np.frombuffer(data, dtype=_AREA_RECORD, count=count, offset=off)
    index = np.stack([rec["ix"], rec["iy"], rec["iz"]], 1).astype(np.int64)
    return MaterialAreaGrid(spec, index, rec["area"].astype(np.float64))


def write_area_csv(grid: MaterialAreaGrid, path) -> None:
    header = "ix,iy,iz," + ",".join(f"{m.label}_area" for m in MATERIALS)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for (i, j, k), a in zip(grid.index.tolist(), grid.area.tolist()):
            fh.write(f"{i},{j},{k}," + ",".join(repr(v) for v in a) + "\n")
