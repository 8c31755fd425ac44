import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import binary_erosion

from scenekit.flexion import depth_to_flexion
from scenekit.geometry import DepthImage, Intrinsics
from scenekit.synth.render import ground_truth_flow, render_frame, render_labels
from scenekit.synth.scene import Room, SceneSpec, Sphere, look_at

K = Intrinsics(80.0, 80.0, 32.0, 24.0, 64, 48)


def rays(k):
    vs, us = np.mgrid[0:k.height, 0:k.width].astype(float)
    return (us - k.cx) / k.fx, (vs - k.cy) / k.fy


def plane_depth(k, normal, offset):
    """Depth of the plane ``normal . p = offset`` along every pixel ray."""
    a, b = rays(k)
    n = np.asarray(normal, float)
    return offset / (n[0] * a + n[1] * b + n[2])


def test_fronto_parallel_plane_is_one():
    out = depth_to_flexion(DepthImage.from_array(np.full((48, 64), 2.0)), K)
    assert out.validity[2:-2, 2:-2].all()
    assert np.allclose(out.values[out.validity], 1.0, atol=1e-12)


@pytest.mark.parametrize("normal", [(0.3, 0.1, 1.0), (-0.5, 0.4, 1.0), (0.0, -0.7, 1.0)])
def test_slanted_plane_is_one(normal):
    d = plane_depth(K, normal, 2.0)
    out = depth_to_flexion(DepthImage.from_array(d), K, step=2)
    assert out.validity.sum() > 0.8 * d.size
    assert np.max(np.abs(out.values[out.validity] - 1.0)) < 1e-6


def test_right_angle_crease_is_zero_on_the_crease():
    a, _ = rays(K)
    d = 2.0 / (1.0 - np.abs(a))          # z = 2 + |x|: two planes meeting at 90 degrees
    out = depth_to_flexion(DepthImage.from_array(d), K, step=2)
    col = int(K.cx)
    assert out.validity[2:-2, col].all()
    assert np.max(out.values[2:-2, col]) < 1e-9
    # well away from the crease each side is planar
    assert np.allclose(out.values[2:-2, col + 4:-2], 1.0, atol=1e-9)


def test_hole_invalidates_dilated_neighbourhood():
    d = np.full((48, 64), 2.0)
    d[20:24, 30:34] = 0.0
    step = 2
    out = depth_to_flexion(DepthImage.from_array(d), K, step)
    assert not out.validity[20 - step:24 + step, 30:34].any()
    assert not out.validity[20:24, 30 - step:34 + step].any()
    assert out.validity[10, 10] and out.validity[22, 40]


def test_tiny_image_is_all_invalid():
    out = depth_to_flexion(DepthImage.from_array(np.ones((4, 4))), K, step=2)
    assert not out.validity.any()
    with pytest.raises(ValueError):
        depth_to_flexion(DepthImage.from_array(np.ones((9, 9))), K, step=0)


def test_rgb_replication():
    d = np.full((10, 12), 2.0)
    out = depth_to_flexion(DepthImage.from_array(d), Intrinsics(20, 20, 6, 5, 12, 10), step=1)
    rgb = out.as_rgb()
    assert rgb.shape == (10, 12, 3)
    assert np.array_equal(rgb[..., 0], rgb[..., 2])


def test_sphere_flexion_is_view_invariant():
    k = Intrinsics(200.0, 200.0, 79.5, 59.5, 160, 120)
    traj = (look_at((-0.15, 0.0, 0.0), (0.0, 0.0, 2.0)), look_at((0.15, 0.05, 0.1), (0.0, 0.0, 2.0)))
    scene = SceneSpec((Room((-3, -3, -3), (3, 3, 6)), Sphere((0.0, 0.0, 2.0), 0.5, name="s")), traj, k)
    step = 2
    flex, on_sphere = [], []
    for i in range(2):
        f = render_frame(scene, i)
        flex.append(depth_to_flexion(f.depth, k, step))
        on_sphere.append(binary_erosion(render_labels(scene, i) == 1, iterations=step + 1))
    flow = ground_truth_flow(scene, 0, 1)
    vs, us = np.nonzero(flow.validity & on_sphere[0] & flex[0].validity)
    tgt = np.rint(flow.targets()[vs, us]).astype(int)
    inb = (tgt[:, 0] >= 0) & (tgt[:, 0] < k.width) & (tgt[:, 1] >= 0) & (tgt[:, 1] < k.height)
    vs, us, tgt = vs[inb], us[inb], tgt[inb]
    keep = on_sphere[1][tgt[:, 1], tgt[:, 0]] & flex[1].validity[tgt[:, 1], tgt[:, 0]]
    assert keep.sum() > 500
    a = flex[0].values[vs[keep], us[keep]]
    b = flex[1].values[tgt[keep, 1], tgt[keep, 0]]
    assert np.max(np.abs(a - b)) < 0.05


@settings(max_examples=40, deadline=None)
@given(arrays(float, (12, 14), elements=st.floats(0.0, 10.0)), st.integers(1, 3))
def test_output_in_unit_interval(values, step):
    out = depth_to_flexion(DepthImage.from_array(values), Intrinsics(15, 15, 7, 6, 14, 12), step)
    v = out.values[out.validity]
    assert np.all((v >= 0) & (v <= 1))
    assert np.all(out.values[~out.validity] == 0)
