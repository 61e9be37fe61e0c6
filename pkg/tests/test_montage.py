"""
Montage projection: azimuthal equidistant layout, Clough-Tocher meshes, montage files
"""
import numpy as np
import pytest

from app.core.exceptions import ShapeError
from app.models.schemas import ElectrodeMontage
from app.services.montage_service import (
    MeshProjector,
    border_crop,
    interpolate_mesh,
    load_montage_csv,
    make_grid,
    project_azimuthal,
    project_trials,
    save_montage_csv,
    standard_montage,
    trial_to_frames,
    triangulate,
)


def random_montage(rng, n=124):
    points = rng.normal(size=(n, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    labels = [f"E{i}" for i in range(n)]
    return ElectrodeMontage(labels=labels, positions=[tuple(p) for p in points], center_label="E0")


# ============================================
# Projection
# ============================================

def test_center_maps_to_origin(rng):
    montage = random_montage(rng)
    planar = project_azimuthal(montage)
    np.testing.assert_allclose(planar[0], [0.0, 0.0], atol=1e-12)


def test_planar_radius_equals_geodesic_distance(rng):
    montage = random_montage(rng)
    planar = project_azimuthal(montage)
    geodesic = np.arccos(np.clip(montage.as_array() @ montage.center(), -1, 1))
    np.testing.assert_allclose(np.linalg.norm(planar, axis=1), geodesic, atol=1e-9)


def test_azimuth_preserved_for_pole_center():
    montage = ElectrodeMontage(
        labels=["top", "a", "b"],
        positions=[(0, 0, 1), (1, 0, 0), (0, 1, 1)],
        center_label="top",
    )
    planar = project_azimuthal(montage)
    np.testing.assert_allclose(planar[1], [np.pi / 2, 0.0], atol=1e-12)
    np.testing.assert_allclose(planar[2], [0.0, np.pi / 4], atol=1e-12)


def test_radius_resolves_electrodes_next_to_center():
    angles = [1e-9, 1e-6]
    montage = ElectrodeMontage(
        labels=["top", "near", "close"],
        positions=[(0, 0, 1)] + [(np.sin(a), 0.0, np.cos(a)) for a in angles],
        center_label="top",
    )
    planar = project_azimuthal(montage)
    np.testing.assert_allclose(planar[1:, 0], angles, rtol=1e-6)
    np.testing.assert_allclose(planar[1:, 1], 0.0, atol=1e-20)


def test_antipodal_electrode_warns():
    montage = ElectrodeMontage(
        labels=["top", "bottom", "side"],
        positions=[(0, 0, 1), (0, 0, -1), (1, 0, 0)],
        center_label="top",
    )
    with pytest.warns(RuntimeWarning, match="antipodal"):
        planar = project_azimuthal(montage)
    np.testing.assert_allclose(planar[1], [np.pi, 0.0])


def test_montage_validation():
    with pytest.raises(ValueError):
        ElectrodeMontage(labels=["a", "a", "b"], positions=[(0, 0, 1)] * 3, center_label="a")
    with pytest.raises(ValueError):
        ElectrodeMontage(labels=["a", "b", "c"], positions=[(0, 0, 0), (1, 0, 0), (0, 1, 0)], center_label="a")
    with pytest.raises(ValueError):
        ElectrodeMontage(labels=["a", "b", "c"], positions=[(0, 0, 1), (1, 0, 0), (0, 1, 0)], center_label="z")


# ============================================
# Interpolation
# ============================================

def test_affine_field_reproduced_inside_hull(rng):
    points = rng.uniform(-1, 1, size=(60, 2))
    values = 0.7 - 1.3 * points[:, 0] + 2.1 * points[:, 1]
    grid = make_grid(points, 25)
    tri = triangulate(points)
    field = interpolate_mesh(tri, values, grid)
    nodes = grid.nodes()
    inside = (tri.find_simplex(nodes) >= 0).reshape(grid.shape)
    expected = (0.7 - 1.3 * nodes[:, 0] + 2.1 * nodes[:, 1]).reshape(grid.shape)
    assert inside.sum() > 100
    np.testing.assert_allclose(field[inside], expected[inside], atol=1e-7)
    np.testing.assert_array_equal(field[~inside], 0.0)


def test_interpolation_is_exact_at_electrodes(rng):
    points = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]], dtype=float)
    values = rng.normal(size=5)
    grid = make_grid(points, 3)
    field = interpolate_mesh(points, values, grid)
    assert field[0, 0] == pytest.approx(values[0])
    assert field[2, 2] == pytest.approx(values[3])
    assert field[1, 1] == pytest.approx(values[4])


def test_grid_covers_bounding_box(rng):
    points = rng.uniform(-2, 3, size=(10, 2))
    grid = make_grid(points, 5, 7)
    assert grid.shape == (5, 7)
    assert grid.extent == pytest.approx((points[:, 0].min(), points[:, 0].max(), points[:, 1].min(), points[:, 1].max()))


def test_triangulation_rejects_degenerate_layouts():
    with pytest.raises(ValueError):
        triangulate(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))
    with pytest.raises(ValueError):
        triangulate(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ShapeError):
        triangulate(np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_border_crop():
    field = np.arange(5 * 6 * 2).reshape(5, 6, 2)
    cropped = border_crop(field)
    assert cropped.shape == (3, 4, 2)
    np.testing.assert_array_equal(cropped, field[1:-1, 1:-1])
    with pytest.raises(ShapeError):
        border_crop(np.zeros((2, 5)))


# ============================================
# Trial projection
# ============================================

def test_frames_shape_and_crop(small_montage, rng):
    trial = rng.normal(size=(small_montage.size, 6))
    stack = trial_to_frames(trial, small_montage, 14)
    assert stack.data.shape == (1, 12, 12, 6)
    assert np.all(np.isfinite(stack.data))


def test_frames_are_linear_in_trial_values(small_montage, rng):
    projector = MeshProjector(small_montage, 14)
    x = rng.normal(size=(small_montage.size, 4))
    y = rng.normal(size=(small_montage.size, 4))
    combined = projector.frames(2.0 * x - 0.5 * y).data
    separate = 2.0 * projector.frames(x).data - 0.5 * projector.frames(y).data
    np.testing.assert_allclose(combined, separate, atol=1e-6)


def test_project_all_matches_single_trials(small_montage, rng):
    trials = rng.normal(size=(3, small_montage.size, 5))
    projector = MeshProjector(small_montage, 10)
    meshes = projector.project_all(trials, dtype=np.float64)
    assert meshes.shape == (3, 1, 8, 8, 5)
    for i in range(3):
        np.testing.assert_allclose(meshes[i], projector.frames(trials[i]).data, atol=1e-8)
    np.testing.assert_allclose(project_trials(trials, small_montage, 10, dtype=np.float64), meshes, atol=1e-12)


def test_channel_mismatch_rejected(small_montage):
    projector = MeshProjector(small_montage, 10)
    with pytest.raises(ShapeError):
        projector.frames(np.zeros((small_montage.size + 1, 4)))
    with pytest.raises(ShapeError):
        MeshProjector(small_montage, 2)


# ============================================
# Montage files
# ============================================

def test_standard_montage_layout():
    montage = standard_montage()
    assert montage.size == 124
    assert montage.center_label == "Cz"
    np.testing.assert_allclose(montage.center(), [0.0, 0.0, 1.0])
    assert montage.as_array()[:, 2].min() >= -0.35 - 1e-9
    assert standard_montage().positions == montage.positions


def test_montage_csv_round_trip(tmp_path):
    montage = standard_montage(20)
    path = save_montage_csv(montage, tmp_path / "cap.csv")
    loaded = load_montage_csv(path)
    assert loaded.labels == montage.labels
    assert loaded.center_label == "Cz"
    np.testing.assert_allclose(loaded.as_array(), montage.as_array(), atol=1e-10)


def test_montage_csv_defaults_center_to_top(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("label,x,y,z\nA,1,0,0\nB,0,1,0\nTop,0,0.1,2\nD,0,-1,0.2\n")
    assert load_montage_csv(path).center_label == "Top"
    assert load_montage_csv(path, center_label="B").center_label == "B"


def test_constant_values_reproduced_inside_hull(rng):
    points = rng.uniform(-1, 1, size=(30, 2))
    grid = make_grid(points, 15)
    tri = triangulate(points)
    field = interpolate_mesh(tri, np.full(30, 5.0), grid)
    inside = (tri.find_simplex(grid.nodes()) >= 0).reshape(grid.shape)
    np.testing.assert_allclose(field[inside], 5.0, atol=1e-9)


def test_smallest_crop_keeps_the_center():
    field = np.zeros((3, 3))
    field[1, 1] = 7.0
    np.testing.assert_array_equal(border_crop(field), [[7.0]])


def test_constant_trial_gives_constant_meshes(small_montage):
    projector = MeshProjector(small_montage, 14)
    frames = projector.frames(np.full((small_montage.size, 3), -2.5)).data[0]
    inside = (projector.triangulation.find_simplex(projector.grid.nodes()) >= 0).reshape(projector.grid.shape)[1:-1, 1:-1]
    np.testing.assert_allclose(frames[inside], -2.5, atol=1e-9)
    np.testing.assert_array_equal(frames[~inside], 0.0)
