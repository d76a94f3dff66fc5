"""Voxel datasets: joining ground truth with intensity, block splits, file formats."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxfrac.lidarsim import IntensityGrid
from voxfrac.mesh import MATERIALS, N_MATERIALS
from voxfrac.relevance import HistogramSpec, histogram
from voxfrac.voxelizer import GridError, VoxelFractions, VoxelGridSpec

VXD_MAGIC = b"VXD1"
_VXD_HEADER = struct.Struct("<4sd3d3IQ")
_VXD_RECORD = np.dtype([
    ("ix", "<u4"), ("iy", "<u4"), ("iz", "<u4"),
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("intensity", "<f8"),
    ("targets", "<f8", (N_MATERIALS,)),
    ("section", "<u4"),
])
CSV_HEADER = "ix,iy,iz,x,y,z,intensity," + ",".join(m.label for m in MATERIALS) + ",section"


class DatasetError(ValueError):
    pass


@dataclass
class VoxelDataset:
    spec: VoxelGridSpec
    index: np.ndarray
    position: np.ndarray
    intensity: np.ndarray
    targets: np.ndarray
    section: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def validate(self, tol: float = 1e-9) -> None:
        n = len(self.index)
        for name in ("position", "intensity", "targets", "section"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if n and np.any(np.abs(self.targets.sum(axis=1) - 1.0) > tol):
            raise DatasetError("target fractions must sum to 1")
        if n and np.any(self.intensity < 0):
            raise DatasetError("intensity must be non-negative")

    def subset(self, mask) -> "VoxelDataset":
        return VoxelDataset(self.spec, self.index[mask], self.position[mask], self.intensity[mask],
                            self.targets[mask], self.section[mask])

    def features(self) -> np.ndarray:
        """Per-point input features: a constant channel and the intensity.

        Intensity (1/m) is multiplied by the voxel size so the feature is a
        dimensionless per-voxel fraction comparable across voxel sizes.
        """
        return np.column_stack([np.ones(len(self)), self.intensity * self.spec.voxel_size])

    def histograms(self, spec: HistogramSpec = HistogramSpec()) -> dict[str, list[int]]:
        if len(self) == 0:
            return {m.label: [0] * spec.bin_count for m in MATERIALS}
        return {m.label: histogram(self.targets[:, m], spec).tolist() for m in MATERIALS}


# -- sections and splits -----------------------------------------------------------------

@dataclass(frozen=True)
class SectionGrid:
    """Square tiling of the x-y extent into sections of ``size`` meters."""

    origin: tuple[float, float]
    extent: tuple[float, float]
    size: float

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(max(1, math.ceil(e / self.size - 1e-9)) for e in self.extent)

    @property
    def n_sections(self) -> int:
        nx, ny = self.shape
        return nx * ny

    def section_of(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        nx, ny = self.shape
        ij = np.floor((xy - np.asarray(self.origin)) / self.size).astype(np.int64)
        ij[:, 0] = np.clip(ij[:, 0], 0, nx - 1)
        ij[:, 1] = np.clip(ij[:, 1], 0, ny - 1)
        return ij[:, 0] * ny + ij[:, 1]

    @classmethod
    def for_grid(cls, spec: VoxelGridSpec, size: float) -> "SectionGrid":
        if not size > 0:
            raise DatasetError("section_size must be positive")
        ext = (spec.dims[0] * spec.voxel_size, spec.dims[1] * spec.voxel_size)
        return cls(spec.origin[:2], ext, float(size))


@dataclass
class SplitAssignment:
    train_sections: list[int]
    test_sections: list[int]
    validation_sections: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"train": self.train_sections, "test": self.test_sections, "validation": self.validation_sections}


def assign_sections(n_sections: int, test_fraction: float, seed: int,
                    validation_fraction: float = 0.0) -> SplitAssignment:
    """Seeded shuffle of section ids; the first ``round(test_fraction * n)`` are test."""
    if n_sections < 2:
        raise DatasetError(f"block split needs at least 2 sections, got {n_sections}")
    if not 0.0 <= test_fraction < 1.0:
        raise DatasetError("test_fraction must be in [0, 1)")
    if not 0.0 <= validation_fraction < 1.0:
        raise DatasetError("validation_fraction must be in [0, 1)")
    order = np.random.default_rng(seed).permutation(n_sections)
    n_test = int(round(test_fraction * n_sections))
    test = sorted(order[:n_test].tolist())
    train = order[n_test:]
    n_val = int(round(validation_fraction * len(train)))
    val = sorted(train[:n_val].tolist())
    return SplitAssignment(sorted(train[n_val:].tolist()), test, val)


def block_split(dataset: VoxelDataset, section_size: float | None = None, test_fraction: float = 10 / 35,
                seed: int = 0, validation_fraction: float = 0.0):
    """Split whole sections into train and test (and optionally validation).

    Sections are those stored in ``dataset.section``; if ``section_size`` is
    given they are recomputed on the grid's x-y extent first.  Returns
    ``(train, test, assignment)`` and, with a validation fraction, the
    validation subset as a fourth element.
    """
    if section_size is not None:
        grid = SectionGrid.for_grid(dataset.spec, section_size)
        dataset.section = grid.section_of(dataset.position[:, :2])
        n_sections = grid.n_sections
    else:
        n_sections = int(dataset.section.max()) + 1 if len(dataset) else 0
    a = assign_sections(n_sections, test_fraction, seed, validation_fraction)
    train = dataset.subset(np.isin(dataset.section, a.train_sections))
    test = dataset.subset(np.isin(dataset.section, a.test_sections))
    if validation_fraction > 0:
        return train, test, a, dataset.subset(np.isin(dataset.section, a.validation_sections))
    return train, test, a


# -- assembly -------------------------------------------------------------------------------

def join_dataset(fractions: VoxelFractions, intensity: IntensityGrid, section_size: float) -> VoxelDataset:
    """Left join of ground-truth fractions with intensity on voxel index.

    Voxels with ground truth but no ray hits keep intensity 0.
    """
    if fractions.spec != intensity.spec:
        raise GridError("fraction grid and intensity grid differ")
    spec = fractions.spec
    lin_f = spec.linear(fractions.index)
    lin_i = spec.linear(intensity.index)
    inten = np.zeros(len(lin_f))
    order = np.argsort(lin_i)
    lin_sorted = lin_i[order]
    pos = np.searchsorted(lin_sorted, lin_f)
    pos_c = np.clip(pos, 0, max(len(lin_sorted) - 1, 0))
    if len(lin_sorted):
        hit = lin_sorted[pos_c] == lin_f
        inten[hit] = intensity.intensity[order][pos_c[hit]]
    centers = spec.centers(fractions.index)
    sections = SectionGrid.for_grid(spec, section_size).section_of(centers[:, :2])
    ds = VoxelDataset(spec, fractions.index.astype(np.int64), centers, inten,
                      fractions.fractions.astype(np.float64), sections)
    ds.validate()
    return ds


# -- files -----------------------------------------------------------------------------------

def write_vxd(ds: VoxelDataset, path) -> None:
    rec = np.zeros(len(ds), dtype=_VXD_RECORD)
    rec["ix"], rec["iy"], rec["iz"] = ds.index.T
    rec["x"], rec["y"], rec["z"] = ds.position.T
    rec["intensity"] = ds.intensity
    rec["targets"] = ds.targets
    rec["section"] = ds.section
    with open(path, "wb") as fh:
        fh.write(_VXD_HEADER.pack(VXD_MAGIC, ds.spec.voxel_size, *ds.spec.origin, *ds.spec.dims, len(ds)))
        fh.write(rec.tobytes())


def read_vxd(path) -> VoxelDataset:
    data = Path(path).read_bytes()
    if len(data) < _VXD_HEADER.size:
        raise DatasetError(f"{path}: file too short for a VXD1 header")
    magic, vs, ox, oy, oz, nx, ny, nz, count = _VXD_HEADER.unpack_from(data, 0)
    if magic != VXD_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if len(data) != _VXD_HEADER.size + count * _VXD_RECORD.itemsize:
        raise DatasetError(f"{path}: expected {count} rows")
    rec = np.frombuffer(data, dtype=_VXD_RECORD, count=count, offset=_VXD_HEADER.size)
    spec = VoxelGridSpec((ox, oy, oz), vs, (nx, ny, nz))
    return VoxelDataset(
        spec,
        np.stack([rec["ix"], rec["iy"], rec["iz"]], 1).astype(np.int64),
        np.stack([rec["x"], rec["y"], rec["z"]], 1).astype(np.float64),
        rec["intensity"].astype(np.float64),
        rec["targets"].astype(np.float64),
        rec["section"].astype(np.int64),
    )


def write_dataset_csv(ds: VoxelDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for ijk, p, inten, t, s in zip(ds.index.tolist(), ds.position.tolist(), ds.intensity.tolist(),
                                        ds.targets.tolist(), ds.section.tolist()):
            fh.write(",".join(str(v) for v in ijk) + "," + ",".join(repr(v) for v in p) + f",{inten!r},"
                     + ",".join(repr(v) for v in t) + f",{s}\n")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def vxd_row_count(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(_VXD_HEADER.size)
    return _VXD_HEADER.unpack(head)[-1]


@dataclass
class ManifestEntry:
    voxel_size: float
    rows: int
    train_rows: int
    test_rows: int
    validation_rows: int
    split: dict
    files: dict
    sha256: dict
    histograms: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"entries": [e.to_dict() for e in self.entries]}, indent=2, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        return cls([ManifestEntry(**e) for e in raw["entries"]])

    def verify(self, root) -> None:
        """Check row counts and checksums of every referenced file."""
        root = Path(root)
        for e in self.entries:
            for key, name in e.files.items():
                p = root / name
                if file_sha256(p) != e.sha256[key]:
                    raise DatasetError(f"checksum mismatch for {p}")
                if name.endswith(".vxd") and vxd_row_count(p) != e.rows:
                    raise DatasetError(f"{p}: row count differs from the manifest")
