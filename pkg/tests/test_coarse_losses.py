import numpy as np
import pytest

from npg.autodiff import Tensor, finite_diff_check
from npg.coarse_losses import (EmptyMaskError, LossWeights, build_neighbor_graph, chamfer_pixels,
                               chamfer_squared, flow_consistency_loss, mask_chamfer_loss,
                               render_descriptors, rigidity_loss, sample_mask)
from npg.geometry import Camera, random_rotation
from tests.oracles import composite_brute_force


def cam64():
    return Camera(np.eye(3), np.zeros(3), 64.0, 64.0, 31.5, 31.5, 64, 64)


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(flow=-1.0)


def test_neighbor_graph_properties():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(60, 3))
    pts[0] = [50.0, 50.0, 50.0]  # an outlier still gets neighbours
    g = build_neighbor_graph(pts)
    assert np.all(g.src != g.dst)
    for i in range(60):
        assert len(g.neighbors(i)) >= 4


def test_chamfer_examples():
    a = np.array([[0.5, 0.5]])
    assert chamfer_squared(a, a).item() == 0.0
    assert chamfer_squared(a, np.array([[0.6, 0.5]])).item() == pytest.approx(0.02)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.uniform(size=(30, 2)), rng.uniform(size=(45, 2))
        d = ((a[:, None] - b[None]) ** 2).sum(-1)
        ref = d.min(1).mean() + d.min(0).mean()
        assert chamfer_squared(a, b).item() == pytest.approx(ref, rel=1e-12)


def test_mask_chamfer_zero_when_points_on_samples():
    cam = cam64()
    samples = np.array([[31.5, 31.5], [40.0, 20.0]])
    pts = np.array([[0.0, 0.0, 2.0], [(40.0 - 31.5) * 2 / 64, (20.0 - 31.5) * 2 / 64, 2.0]])
    mask = np.zeros((64, 64), bool)
    mask[20, 40] = True
    assert mask_chamfer_loss(pts, cam, mask, samples=samples).item() == pytest.approx(0.0, abs=1e-20)


def test_mask_chamfer_nonnegative_and_gradient():
    rng = np.random.default_rng(2)
    cam = cam64()
    mask = np.zeros((64, 64), bool)
    mask[20:40, 25:35] = True
    samples = sample_mask(mask, 200, rng)
    pts = np.column_stack([rng.uniform(-0.5, 0.5, (40, 2)), rng.uniform(2, 3, 40)])
    assert mask_chamfer_loss(pts, cam, mask, samples=samples).item() >= 0
    rep = finite_diff_check(lambda p: mask_chamfer_loss(p, cam, mask, samples=samples), pts)
    assert rep.passed, rep.message


def test_empty_mask_rejected():
    with pytest.raises(EmptyMaskError):
        sample_mask(np.zeros((8, 8)), 10, np.random.default_rng(0))


def test_rigidity_examples():
    rng = np.random.default_rng(3)
    ref = rng.normal(size=(40, 3))
    g = build_neighbor_graph(ref)
    assert rigidity_loss(ref, ref, g).item() == 0.0
    chain = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    gc = build_neighbor_graph(chain, radius_frac=0.3, min_neighbors=1)
    assert len(gc) == 4  # directed pairs 0-1, 1-0, 1-2, 2-1
    assert rigidity_loss(2 * chain, chain, gc).item() == pytest.approx(len(gc))


def test_rigidity_invariant_under_rigid_motion():
    rng = np.random.default_rng(4)
    ref = rng.normal(size=(50, 3))
    g = build_neighbor_graph(ref)
    pt = ref + 0.05 * rng.normal(size=ref.shape)
    base = rigidity_loss(pt, ref, g).item()
    for _ in range(50):
        R, t = random_rotation(rng), rng.normal(size=3)
        assert rigidity_loss(ref @ R.T + t, ref, g).item() < 1e-10
        assert rigidity_loss(pt @ R.T + t, ref @ R.T - t, g).item() == pytest.approx(base, rel=1e-9)


def test_rigidity_coincident_points_finite_gradient():
    from npg.autodiff import backward
    ref = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    g = build_neighbor_graph(ref, min_neighbors=2)
    pt = Tensor(np.zeros((3, 3)), requires_grad=True)
    grad = backward(rigidity_loss(pt, ref, g), [pt])[pt]
    assert np.all(np.isfinite(grad))


def test_descriptor_render_single_point_symmetric():
    cam = cam64()
    img, cover = render_descriptors(np.array([[0.0, 0.0, 2.0]]), np.array([[1.0, 2.0]]), cam)
    c = cover.data
    i, j = np.unravel_index(np.argmax(c), c.shape)
    # Centre at (31.5, 31.5): the four central pixels tie.
    assert (i, j) in {(31, 31), (31, 32), (32, 31), (32, 32)}
    np.testing.assert_allclose(c, c[::-1, ::-1], atol=1e-15)
    np.testing.assert_allclose(c, c.T, atol=1e-15)
    np.testing.assert_allclose(img.data[c > 0], np.broadcast_to([1.0, 2.0], img.data[c > 0].shape))


def test_descriptor_render_depth_order():
    cam = cam64()
    pts = np.array([[0.0, 0.0, 2.0], [0.05, 0.0, 4.0]])
    img, _ = render_descriptors(pts, np.array([[1.0], [0.0]]), cam)
    # Same footprints with the depth order reversed.
    behind = np.array([[0.0, 0.0, 4.0], [0.025, 0.0, 2.0]])
    swapped, _ = render_descriptors(behind, np.array([[1.0], [0.0]]), cam)
    assert img.data[31, 31, 0] > 0.5 > swapped.data[31, 31, 0]


def test_descriptor_render_matches_brute_force_and_permutation():
    rng = np.random.default_rng(5)
    cam = cam64()
    pts = np.column_stack([rng.uniform(-0.6, 0.6, (25, 2)), rng.uniform(2, 4, 25)])
    desc = rng.uniform(size=(25, 4))
    img, cover = render_descriptors(pts, desc, cam)
    uv = pts[:, :2] / pts[:, 2:] * 64 + 31.5
    ref = composite_brute_force(uv, np.broadcast_to(np.eye(2) * 2.25, (25, 2, 2)), desc, np.ones(25),
                                pts[:, 2], 64, 64, alpha_min=0.0, max_mahalanobis=3.0)
    np.testing.assert_allclose(cover.data, ref[..., -1], atol=1e-9)
    perm = rng.permutation(25)
    img2, _ = render_descriptors(pts[perm], desc[perm], cam)
    np.testing.assert_allclose(img2.data, img.data, atol=1e-12)


def test_descriptor_render_no_visible_points():
    img, cover = render_descriptors(np.array([[0.0, 0.0, -1.0]]), np.ones((1, 3)), cam64())
    assert np.all(img.data == 0) and np.all(cover.data == 0)


def _scene(rng, n=40):
    pts = np.column_stack([rng.uniform(-0.4, 0.4, (n, 2)), rng.uniform(2.5, 3.0, n)])
    return pts, rng.uniform(size=(n, 8))


def test_flow_loss_static_zero():
    rng = np.random.default_rng(6)
    pts, desc = _scene(rng)
    cam = cam64()
    _, cover = render_descriptors(pts, desc, cam)
    mask = cover.data > 0.5
    loss = flow_consistency_loss(pts, pts, desc, np.zeros((64, 64, 2)), mask, cam, cam)
    assert loss.item() == 0.0


def test_flow_loss_consistent_pair_near_zero():
    # Shifting every point parallel to the image plane by exactly 2 px gives
    # a constant 2 px flow.
    rng = np.random.default_rng(7)
    pts, desc = _scene(rng)
    pts[:, 2] = 2.5
    cam = cam64()
    moved = pts + np.array([2.0 * 2.5 / 64, 0.0, 0.0])
    flow = np.zeros((64, 64, 2))
    flow[..., 0] = 2.0
    _, cover = render_descriptors(pts, desc, cam)
    mask = cover.data > 0.5
    mask[:, 60:] = False
    assert flow_consistency_loss(pts, moved, desc, flow, mask, cam, cam).item() < 1e-6


def test_huber_quadratic_branch():
    from npg import autodiff as ad
    x = Tensor(np.full(10, 0.005))
    assert ad.huber(x, 0.01).sum().item() == pytest.approx(10 * 0.5 * 0.005 ** 2 / 0.01)
    assert ad.huber(Tensor(np.array([0.03])), 0.01).item() == pytest.approx(0.03 - 0.005)


def test_flow_loss_gradient():
    rng = np.random.default_rng(8)
    pts, desc = _scene(rng, 15)
    cam = cam64()
    pts1 = pts + 0.01 * rng.normal(size=pts.shape)
    flow = rng.normal(0, 0.3, size=(64, 64, 2))
    _, cover = render_descriptors(pts, desc, cam)
    mask = cover.data > 0.3
    rep = finite_diff_check(lambda p: flow_consistency_loss(p, pts1, desc, flow, mask, cam, cam, eps=10.0),
                            pts, tolerance=1e-4)
    assert rep.passed, rep.message


def test_chamfer_pixels_metric():
    mask = np.zeros((10, 10), bool)
    mask[2, 3] = True
    assert chamfer_pixels(np.array([[3.0, 2.0]]), mask) == 0.0
    assert chamfer_pixels(np.array([[5.0, 2.0]]), mask) == pytest.approx(2.0)
