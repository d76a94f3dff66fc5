import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import binomial_bound_grid, random_soup
from voxfrac.mesh import Material, TriangleMesh, mesh_material_areas
from voxfrac.scenegen import SceneConfig, generate_scene
from voxfrac.voxelizer import (GridError, MaterialAreaGrid, OutOfBoundsError, VoxelGridSpec, areas_to_fractions,
                               read_area_grid, sample_counts, voxelize_exact, voxelize_sampled, write_area_csv,
                               write_area_grid)

STRADDLE = [[[0.5, 0, 0], [1.5, 0, 0], [1, 1, 0]]]


def grid_with(areas: dict, spec=VoxelGridSpec((0, 0, 0), 1.0, (4, 4, 4))) -> MaterialAreaGrid:
    idx = np.array(list(areas.keys()), dtype=np.int64).reshape(-1, 3)
    return MaterialAreaGrid(spec, idx, np.array(list(areas.values()), dtype=np.float64).reshape(-1, 4))


def test_sample_counts_rule():
    assert sample_counts(np.array([0.5]), 1.0).tolist() == [16]
    assert sample_counts(np.array([1e-9]), 1.0).tolist() == [1]
    assert sample_counts(np.array([1.0]), 2.0).tolist() == [8]
    assert sample_counts(np.array([0.51]), 1.0).tolist() == [17]


def test_triangle_in_one_big_voxel():
    mesh = TriangleMesh.from_soup([[[0.2, 0.2, 0.2], [1.2, 0.2, 0.2], [0.2, 1.2, 0.2]]], Material.BARK)
    spec = VoxelGridSpec((0, 0, 0), 2.0, (2, 2, 2))
    for grid in (voxelize_sampled(mesh, spec, 0), voxelize_exact(mesh, spec)):
        assert grid.n_occupied == 1
        assert grid.index.tolist() == [[0, 0, 0]]
        assert grid.area[0].tolist() == [0.5, 0.0, 0.0, 0.0]


def test_straddling_triangle_exact():
    mesh = TriangleMesh.from_soup(STRADDLE, Material.LEAF)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (2, 1, 1))
    grid = voxelize_exact(mesh, spec)
    assert grid.index.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert grid.area[:, Material.LEAF] == pytest.approx([0.25, 0.25], abs=1e-15)


def test_straddling_triangle_sampled_within_binomial_bound():
    mesh = TriangleMesh.from_soup(STRADDLE, Material.LEAF)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (2, 1, 1))
    n = 16
    sigma = 0.5 * np.sqrt(0.25 / n)  # area * sqrt(p (1 - p) / n)
    for seed in range(20):
        grid = voxelize_sampled(mesh, spec, seed)
        leaf = grid.to_dense()[:, 0, 0, Material.LEAF]
        assert leaf.sum() == pytest.approx(0.5, rel=1e-12)
        assert np.all(np.abs(leaf - 0.25) <= 3 * sigma)


def test_face_triangle_goes_to_lower_voxel():
    # lies in the plane z = 1 shared by layers 0 and 1
    mesh = TriangleMesh.from_soup([[[0.2, 0.2, 1.0], [0.8, 0.2, 1.0], [0.2, 0.8, 1.0]]], Material.SOIL)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (2, 2, 2))
    for grid in (voxelize_exact(mesh, spec), voxelize_sampled(mesh, spec, 1)):
        assert grid.index.tolist() == [[0, 0, 0]]
        assert grid.area.sum() == pytest.approx(0.18, rel=1e-12)


def test_triangle_on_grid_lines_conserves_area():
    # edges lie on voxel planes in x and y too
    mesh = TriangleMesh.from_soup([[[0, 0, 1], [2, 0, 1], [0, 2, 1]]], Material.BARK)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (2, 2, 2))
    grid = voxelize_exact(mesh, spec)
    assert grid.area.sum() == pytest.approx(2.0, rel=1e-12)
    assert set(map(tuple, grid.index.tolist())) == {(0, 0, 0), (1, 0, 0), (0, 1, 0)}
    d = grid.lookup()
    assert d[(0, 0, 0)][Material.BARK] == pytest.approx(1.0)
    assert d[(1, 0, 0)][Material.BARK] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(3))
def test_exact_conservation_random_soup(seed):
    mesh = random_soup(np.random.default_rng(seed), 100)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (10, 10, 10))
    totals = voxelize_exact(mesh, spec).totals()
    areas = mesh_material_areas(mesh)
    for m in Material:
        assert totals[m] == pytest.approx(areas[m], rel=1e-9, abs=1e-12)


def test_sampled_vs_exact_per_voxel_bound():
    rng = np.random.default_rng(5)
    mesh = random_soup(rng, 200, min_area=1.0 / 16)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (10, 10, 10))
    exact = voxelize_exact(mesh, spec).to_dense()
    sampled = voxelize_sampled(mesh, spec, 9).to_dense()
    bound = binomial_bound_grid(mesh, spec.origin, spec.voxel_size, spec.dims)
    assert np.all(np.abs(sampled - exact) <= bound + 1e-12)


def test_scene_conservation_sampled():
    mesh = generate_scene(SceneConfig(rng_seed=2))
    assert mesh.n_triangles >= 10_000
    spec = VoxelGridSpec.covering((0, 0, 0), (50, 50, 30), 1.0)
    totals = voxelize_sampled(mesh, spec, 3).totals()
    areas = mesh_material_areas(mesh)
    for m in Material:
        assert abs(totals[m] - areas[m]) <= 0.005 * areas[m]


def test_translation_equivariance_bitwise():
    rng = np.random.default_rng(11)
    mesh = random_soup(rng, 60)
    # dyadic coordinates make every shifted coordinate exactly representable
    mesh = TriangleMesh(np.round(mesh.vertices * 2**20) / 2**20, mesh.triangles, mesh.material)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (10, 10, 10))
    base = voxelize_exact(mesh, spec)
    for shift in ([0.5, -2.25, 3.0], [17.0, 0.125, -64.0]):
        moved = voxelize_exact(mesh.translated(shift), spec.shifted(np.array(shift)))
        assert np.array_equal(moved.index, base.index)
        assert moved.area.tobytes() == base.area.tobytes()


def test_out_of_bounds_names_triangle():
    mesh = TriangleMesh.from_soup([[[0.1, 0.1, 0.1], [0.5, 0.1, 0.1], [0.1, 0.5, 0.1]],
                                   [[0.1, 0.1, 0.1], [5.0, 0.1, 0.1], [0.1, 0.5, 0.1]]], Material.BARK)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (2, 2, 2))
    for fn in (voxelize_exact, voxelize_sampled):
        with pytest.raises(OutOfBoundsError) as info:
            fn(mesh, spec)
        assert info.value.triangle_index == 1
        assert "triangle 1" in str(info.value)


def test_fractions_examples():
    grid = grid_with({(0, 0, 0): [0.3, 0.1, 0, 0], (1, 0, 0): [0, 0, 0, 0], (2, 0, 0): [0.2] * 4})
    fr = areas_to_fractions(grid).as_dict()
    assert set(fr) == {(0, 0, 0), (2, 0, 0)}
    assert fr[(0, 0, 0)] == pytest.approx([0.75, 0.25, 0, 0])
    assert fr[(2, 0, 0)] == pytest.approx([0.25] * 4)


def test_fractions_min_area():
    grid = grid_with({(0, 0, 0): [5e-7, 0, 0, 0], (1, 0, 0): [1e-6, 0, 0, 0]})
    assert list(areas_to_fractions(grid).as_dict()) == [(1, 0, 0)]
    with pytest.raises(GridError):
        areas_to_fractions(grid, min_area=0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(0, 10), min_size=4, max_size=4), min_size=1, max_size=20))
def test_fractions_sum_to_one(rows):
    grid = grid_with({(i % 4, i // 4 % 4, i // 16): r for i, r in enumerate(rows)})
    fr = areas_to_fractions(grid)
    if len(fr):
        assert np.all(np.abs(fr.fractions.sum(axis=1) - 1) <= 1e-9)
        assert np.all(fr.fractions >= 0)


def test_vxa_round_trip(tmp_path):
    mesh = random_soup(np.random.default_rng(0), 30)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (10, 10, 10))
    grid = voxelize_exact(mesh, spec)
    path = tmp_path / "g.vxa"
    write_area_grid(grid, path)
    assert path.read_bytes()[:4] == b"VXA1"
    back = read_area_grid(path)
    assert back.spec == spec
    np.testing.assert_array_equal(back.index, grid.index)
    np.testing.assert_array_equal(back.area, grid.area)
    csv = tmp_path / "g.csv"
    write_area_csv(grid, csv)
    lines = csv.read_text().splitlines()
    assert lines[0] == "ix,iy,iz,bark_area,leaf_area,soil_area,misc_area"
    assert len(lines) == grid.n_occupied + 1


def test_grid_index_is_lexicographic():
    mesh = random_soup(np.random.default_rng(4), 50)
    spec = VoxelGridSpec((0, 0, 0), 1.0, (10, 10, 10))
    for grid in (voxelize_exact(mesh, spec), voxelize_sampled(mesh, spec)):
        lin = spec.linear(grid.index)
        assert np.all(np.diff(lin) > 0)
        assert np.all(grid.area >= 0)
