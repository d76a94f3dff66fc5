import numpy as np
import pytest

from voxfrac.mesh import (Material, MeshError, TriangleMesh, mesh_material_areas, read_obj, read_vfm,
                          write_obj, write_vfm)
from voxfrac.scenegen import SceneConfig, SceneError, generate_scene, scene_summary


def brute_force_areas(mesh: TriangleMesh) -> dict:
    out = {m: 0.0 for m in Material}
    for tri, m in zip(mesh.vertices[mesh.triangles].tolist(), mesh.material.tolist()):
        a, b, c = (np.array(p) for p in tri)
        out[Material(m)] += 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))
    return out


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(extent=(50, 50, 30), tree_count=10, misc_count=2, rng_seed=1))


def test_unit_triangle_area():
    mesh = TriangleMesh.from_soup([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], Material.BARK)
    areas = mesh_material_areas(mesh)
    assert areas[Material.BARK] == 0.5
    assert areas[Material.LEAF] == areas[Material.SOIL] == areas[Material.MISC] == 0.0


def test_empty_mesh_areas():
    assert all(v == 0.0 for v in mesh_material_areas(TriangleMesh.empty()).values())


def test_material_tags_are_stable():
    assert [int(m) for m in Material] == [0, 1, 2, 3]
    assert [m.label for m in Material] == ["bark", "leaf", "soil", "misc"]


def test_same_seed_gives_identical_bytes():
    a = generate_scene(SceneConfig(rng_seed=7))
    b = generate_scene(SceneConfig(rng_seed=7))
    assert a.n_triangles == b.n_triangles
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert a.triangles.tobytes() == b.triangles.tobytes()
    assert a.material.tobytes() == b.material.tobytes()


def test_different_seeds_differ():
    a = generate_scene(SceneConfig(rng_seed=7))
    b = generate_scene(SceneConfig(rng_seed=8))
    assert a.vertices.shape != b.vertices.shape or not np.array_equal(a.vertices, b.vertices)


def test_ground_only_scene():
    mesh = generate_scene(SceneConfig(tree_count=0, shrub_count=0, misc_count=0))
    assert mesh.n_triangles > 0
    assert np.all(mesh.material == Material.SOIL)


def test_scene_composition(scene):
    areas = mesh_material_areas(scene)
    assert all(a > 0 for a in areas.values())
    total = sum(areas.values())
    assert areas[Material.MISC] / total < 0.01
    oracle = brute_force_areas(scene)
    for m in Material:
        assert areas[m] == pytest.approx(oracle[m], rel=1e-10)


def test_soil_covers_extent(scene):
    assert mesh_material_areas(scene)[Material.SOIL] >= 50 * 50


def test_triangles_inside_extent(scene):
    v = scene.vertices[scene.triangles].reshape(-1, 3)
    assert v.min() >= -1e-6
    assert np.all(v <= np.array([50, 50, 30]) + 1e-6)


def test_ground_relief_is_mild(scene):
    soil = scene.vertices[scene.triangles[scene.material == Material.SOIL]].reshape(-1, 3)
    assert np.ptp(soil[:, 2]) <= 1.0 + 1e-9
    assert np.ptp(soil[:, 2]) > 0


def test_misc_objects_are_axis_aligned_boxes(scene):
    misc = scene.corners()[scene.material == Material.MISC]
    normals = np.cross(misc[:, 1] - misc[:, 0], misc[:, 2] - misc[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    # every face normal is a coordinate axis
    assert np.allclose(np.sort(np.abs(normals), axis=1), [0, 0, 1])


def test_placement_failure_names_class():
    with pytest.raises(SceneError, match="tree"):
        generate_scene(SceneConfig(extent=(12, 12, 20), tree_count=40, shrub_count=0, misc_count=0))
    with pytest.raises(SceneError, match="misc"):
        generate_scene(SceneConfig(extent=(3, 3, 20), tree_count=0, shrub_count=0, misc_count=30))


def test_invalid_config():
    with pytest.raises(SceneError):
        generate_scene(SceneConfig(leaf_density=0))
    with pytest.raises(SceneError):
        generate_scene(SceneConfig(tree_count=-1))


def test_mesh_validation_rejects_degenerate():
    mesh = TriangleMesh.from_soup([[[0, 0, 0], [1, 0, 0], [2, 0, 0]]], Material.BARK)
    with pytest.raises(MeshError, match="degenerate"):
        mesh.validate()


def test_obj_round_trip(tmp_path, scene):
    path = tmp_path / "scene.obj"
    write_obj(scene, path)
    text = path.read_text()
    assert "usemtl soil" in text and "usemtl bark" in text
    back = read_obj(path)
    # faces come back grouped by material, in their original relative order
    order = np.argsort(scene.material, kind="stable")
    np.testing.assert_array_equal(back.material, scene.material[order])
    np.testing.assert_array_equal(back.corners(), scene.corners()[order])


def test_vfm_round_trip(tmp_path, scene):
    path = tmp_path / "scene.vfm"
    write_vfm(scene, path)
    assert path.read_bytes()[:4] == b"VFM1"
    back = read_vfm(path)
    np.testing.assert_array_equal(back.triangles, scene.triangles)
    np.testing.assert_array_equal(back.material, scene.material)
    np.testing.assert_array_equal(back.vertices, scene.vertices.astype(np.float32).astype(np.float64))


def test_summary_shares_sum_to_one(scene):
    s = scene_summary(scene)
    assert sum(s["share"].values()) == pytest.approx(1.0)
    assert s["triangles"] == scene.n_triangles
