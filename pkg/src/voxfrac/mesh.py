"""Material-labelled triangle soups and their on-disk forms (OBJ text, VFM1 binary)."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_TRIANGLE_AREA = 1e-12
VFM_MAGIC = b"VFM1"


class Material(enum.IntEnum):
    BARK = 0
    LEAF = 1
    SOIL = 2
    MISC = 3

    @property
    def label(self) -> str:
        return self.name.lower()


MATERIALS = tuple(Material)
N_MATERIALS = len(MATERIALS)


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    """Triangle soup with one material tag per triangle.

    ``vertices`` is (V, 3) float64 in meters, ``triangles`` is (T, 3) int64
    vertex indices and ``material`` is (T,) int8 holding ``Material`` values.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    material: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.material = np.ascontiguousarray(self.material, dtype=np.int8).reshape(-1)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int8))

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """(T, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        return triangle_areas(self.corners())

    def validate(self) -> None:
        if len(self.material) != len(self.triangles):
            raise MeshError(
                f"{len(self.material)} material tags for {len(self.triangles)} triangles"
            )
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise MeshError("triangle vertex index out of range")
            bad = np.flatnonzero(self.triangle_areas() < MIN_TRIANGLE_AREA)
            if len(bad):
                raise MeshError(f"degenerate triangle at index {int(bad[0])}")
        if len(self.material) and (self.material.min() < 0 or self.material.max() >= N_MATERIALS):
            raise MeshError("invalid material tag")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinate")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)] if len(self.triangles) else self.vertices
        if len(used) == 0:
            return np.zeros(3), np.zeros(3)
        return used.min(axis=0), used.max(axis=0)

    def select(self, mask: np.ndarray) -> "TriangleMesh":
        """Sub-mesh holding the triangles where ``mask`` is true (vertices shared)."""
        return TriangleMesh(self.vertices, self.triangles[mask], self.material[mask])

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles, self.material)

    @staticmethod
    def concatenate(parts: list["TriangleMesh"]) -> "TriangleMesh":
        if not parts:
            return TriangleMesh.empty()
        offsets = np.cumsum([0] + [len(p.vertices) for p in parts[:-1]])
        return TriangleMesh(
            np.concatenate([p.vertices for p in parts]),
            np.concatenate([p.triangles + off for p, off in zip(parts, offsets)]),
            np.concatenate([p.material for p in parts]),
        )

    @classmethod
    def from_soup(cls, corners: np.ndarray, material) -> "TriangleMesh":
        """Build from a (T, 3, 3) corner array; vertices are not shared."""
        corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
        t = len(corners)
        material = np.broadcast_to(np.asarray(material, dtype=np.int8), (t,))
        return cls(corners.reshape(-1, 3), np.arange(3 * t).reshape(t, 3), material)


def triangle_areas(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def mesh_material_areas(mesh: TriangleMesh) -> dict[Material, float]:
    """Total surface area per material, in square meters."""
    areas = mesh.triangle_areas()
    sums = np.bincount(mesh.material.astype(np.int64), weights=areas, minlength=N_MATERIALS)
    return {m: float(sums[m]) for m in MATERIALS}


# -- OBJ ---------------------------------------------------------------------

def write_obj(mesh: TriangleMesh, path) -> None:
    """Write OBJ text with one ``usemtl`` group per material, in material order."""
    lines = ["# voxfrac scene mesh"]
    lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist())
    for m in MATERIALS:
        faces = mesh.triangles[mesh.material == m]
        if len(faces) == 0:
            continue
        lines.append(f"usemtl {m.label}")
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    names = {m.label: m for m in MATERIALS}
    vertices, faces, tags = [], [], []
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "usemtl":
            if parts[1] not in names:
                raise MeshError(f"{path}:{lineno}: unknown material {parts[1]!r}")
            current = names[parts[1]]
        elif parts[0] == "f":
            if current is None:
                raise MeshError(f"{path}:{lineno}: face before any usemtl")
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
                tags.append(int(current))
    return TriangleMesh(np.array(vertices).reshape(-1, 3), np.array(faces).reshape(-1, 3), np.array(tags))


# -- VFM1 binary -------------------------------------------------------------
# magic "VFM1", u32 vertex count, u32 triangle count,
# vertices as f32 xyz, triangles as u32 triples, material as u8.

def write_vfm(mesh: TriangleMesh, path) -> None:
    with open(path, "wb") as fh:
        fh.write(VFM_MAGIC)
        fh.write(struct.pack("<II", len(mesh.vertices), len(mesh.triangles)))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        fh.write(mesh.triangles.astype("<u4").tobytes())
        fh.write(mesh.material.astype("u1").tobytes())


def read_vfm(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    if data[:4] != VFM_MAGIC:
        raise MeshError(f"{path}: bad magic {data[:4]!r}")
    nv, nt = struct.unpack_from("<II", data, 4)
    off = 12
    verts = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3)
    off += 12 * nv
    tris = np.frombuffer(data, dtype="<u4", count=3 * nt, offset=off).reshape(nt, 3)
    off += 12 * nt
    mats = np.frombuffer(data, dtype="u1", count=nt, offset=off)
    return TriangleMesh(verts.astype(np.float64), tris.astype(np.int64), mats.astype(np.int8))
