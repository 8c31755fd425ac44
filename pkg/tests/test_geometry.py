import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenekit.dataset import (Dataset, read_depth_png, read_intrinsics, read_poses, write_depth_png,
                              write_frame, write_intrinsics, write_poses)
from scenekit.errors import NonPositiveDepth, NonPositiveInverseDepth
from scenekit.geometry import (ColorImage, DepthImage, Frame, Intrinsics, Pose, project_point, to_ndc,
                               unproject_depth, unproject_pixel)

K100 = Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)

unit = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = st.tuples(unit, unit, unit).map(np.array)
poses = st.builds(lambda r, t: Pose.from_rotvec(np.asarray(r) * 3.0, np.asarray(t) * 5.0), vec3, vec3)


def test_project_examples():
    uv, z = project_point([0, 0, 2], K100)
    assert np.allclose(uv, [50, 50]) and z == 2
    uv, z = project_point([1, 0, 2], K100)
    assert np.allclose(uv, [100, 50]) and z == 2
    with pytest.raises(NonPositiveDepth):
        project_point([0, 0, -1], K100)


def test_unproject_examples():
    assert np.allclose(unproject_pixel([50, 50], 0.5, K100), [0, 0, 2])
    assert np.allclose(unproject_pixel([100, 50], 0.5, K100), [1, 0, 2])
    with pytest.raises(NonPositiveInverseDepth):
        unproject_pixel([3, 4], 0.0, K100)


def test_ndc_examples():
    assert np.allclose(to_ndc([0, 0, 2], K100), [50, 50, 0.5])
    assert np.allclose(to_ndc([1, 0, 2], K100), [100, 50, 0.5])
    assert to_ndc([0, 0, 1], K100)[2] > to_ndc([0, 0, 3], K100)[2]


def test_pose_examples():
    p = np.array([0.3, -2.0, 7.0])
    assert np.allclose(Pose().apply(p), p)
    assert np.allclose(Pose(translation=[1, 0, 0]).apply(np.zeros(3)), [1, 0, 0])
    rz = Pose.from_rotvec([0, 0, np.pi / 2])
    assert np.max(np.abs(rz.apply(np.array([1.0, 0, 0])) - [0, 1, 0])) < 1e-12


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 5, 5, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 10, 5, 10, 10)


def test_depth_image_masks_invalid_values():
    img = DepthImage(np.array([[1.0, -2.0], [np.nan, 0.0]]), np.ones((2, 2), bool))
    assert img.validity.tolist() == [[True, False], [False, False]]
    assert img.values[0, 1] == 0


def test_color_image_range():
    with pytest.raises(ValueError):
        ColorImage(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        ColorImage(np.zeros((2, 2)))


def test_frame_needs_a_field():
    with pytest.raises(ValueError):
        Frame(0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0.01, 50.0))
def test_project_unproject_round_trip(u, v, d):
    p = unproject_pixel([u, v], d, K100)
    uv, z = project_point(p, K100)
    assert np.allclose(uv, [u, v], atol=1e-9)
    assert abs(1.0 / z - d) < 1e-9 * max(1.0, d)
    assert abs(to_ndc(p, K100)[2] - 1.0 / z) < 1e-12


@settings(max_examples=100, deadline=None)
@given(poses, poses, poses, vec3)
def test_se3_group_laws(a, b, c, p):
    assert ((a @ b) @ c).almost_equal(a @ (b @ c), 1e-9)
    assert a.inverse().inverse().almost_equal(a, 1e-9)
    assert (a @ a.inverse()).almost_equal(Pose(), 1e-9)
    assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-9)
    assert abs(np.linalg.norm(a.quat) - 1) < 1e-9


def test_perturb_left_first_order():
    g = Pose.from_rotvec([0.2, -0.1, 0.4], [1.0, 2.0, 3.0])
    p = np.array([0.5, -0.3, 2.0])
    xi = np.array([1e-7, -2e-7, 3e-7, 2e-7, 1e-7, -1e-7])
    moved = g.perturb_left(xi).apply(p) - g.apply(p)
    q = g.apply(p)
    assert np.allclose(moved, xi[:3] + np.cross(xi[3:], q), atol=1e-12)


def test_unproject_depth_matches_pixelwise():
    rng = np.random.default_rng(0)
    k = Intrinsics(40.0, 42.0, 9.5, 7.5, 20, 15)
    d = rng.uniform(1, 3, (15, 20))
    pts = unproject_depth(d, k)
    assert np.allclose(pts[4, 7], unproject_pixel([7, 4], 1 / d[4, 7], k))


def test_depth_png_round_trip(tmp_path):
    d = np.array([[1.2344, 0.0], [65.0, 2.0]])
    write_depth_png(tmp_path / "d.png", d)
    back = read_depth_png(tmp_path / "d.png")
    assert np.allclose(back.values, [[1.234, 0], [65.0, 2.0]])
    assert back.validity.tolist() == [[True, False], [True, True]]


def test_poses_and_intrinsics_round_trip(tmp_path):
    ps = {0: Pose(), 3: Pose.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3])}
    write_poses(tmp_path / "poses.txt", ps)
    back = read_poses(tmp_path / "poses.txt")
    assert sorted(back) == [0, 3]
    assert back[3].almost_equal(ps[3], 1e-8)
    write_intrinsics(tmp_path / "k.txt", K100)
    assert read_intrinsics(tmp_path / "k.txt") == K100


def test_missing_files_leave_fields_empty(tmp_path):
    write_frame(tmp_path, Frame(0, color=ColorImage(np.zeros((4, 5, 3)))))
    ds = Dataset.open(tmp_path)
    f = ds.frame(0)
    assert f.color is not None and f.depth is None and f.pose is None and f.intrinsics is None
