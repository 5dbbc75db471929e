import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptkpt.geometry import (AnnotatedImage, Box, GeometryError, Keypoint, KeypointSet, SwapMapError,
                                box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, fourier_embed, giou, hflip, oks,
                                pairwise_giou, swap_map_from_pairs, visibility_from_raw)


def area_oracle(a, b, n=400):
    """GIoU by accumulating areas on a fine grid of unit-square cells."""
    def xyxy(bx):
        cx, cy, w, h = bx
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2

    ax1, ay1, ax2, ay2 = xyxy(a)
    bx1, by1, bx2, by2 = xyxy(b)
    x1, y1 = min(ax1, bx1), min(ay1, by1)
    x2, y2 = max(ax2, bx2), max(ay2, by2)
    xs = x1 + (np.arange(n) + 0.5) * (x2 - x1) / n
    ys = y1 + (np.arange(n) + 0.5) * (y2 - y1) / n
    gx, gy = np.meshgrid(xs, ys)
    ina = (gx >= ax1) & (gx <= ax2) & (gy >= ay1) & (gy <= ay2)
    inb = (gx >= bx1) & (gx <= bx2) & (gy >= by1) & (gy <= by2)
    cell = (x2 - x1) * (y2 - y1) / n ** 2
    inter = (ina & inb).sum() * cell
    union = (ina | inb).sum() * cell
    enclosing = (x2 - x1) * (y2 - y1)
    return inter / union - (enclosing - union) / enclosing


def test_giou_disjoint_example():
    a, b = Box(0.25, 0.25, 0.5, 0.5), Box(0.75, 0.75, 0.5, 0.5)
    assert giou(a, b) == pytest.approx(-0.5, abs=1e-12)
    assert area_oracle((0.25, 0.25, 0.5, 0.5), (0.75, 0.75, 0.5, 0.5)) == pytest.approx(-0.5, abs=1e-2)


def test_giou_nested_example():
    a, b = Box(0.5, 0.5, 0.5, 0.5), Box(0.5, 0.5, 1.0, 1.0)
    assert giou(a, b) == pytest.approx(0.25, abs=1e-12)
    assert area_oracle((0.5, 0.5, 0.5, 0.5), (0.5, 0.5, 1.0, 1.0)) == pytest.approx(0.25, abs=1e-2)


def test_giou_identity():
    b = Box(0.3, 0.6, 0.2, 0.4)
    assert giou(b, b) == 1.0


def test_giou_against_area_oracle_random():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = (*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.5, 2))
        b = (*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.5, 2))
        assert giou(Box(*a), Box(*b)) == pytest.approx(area_oracle(a, b), abs=1e-2)


def test_degenerate_box_rejected():
    with pytest.raises(GeometryError):
        Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(GeometryError):
        giou(torch.tensor([0.5, 0.5, 0.0, 0.1]), torch.tensor([0.5, 0.5, 0.2, 0.1]))


boxes = st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.9), st.floats(0.01, 0.9))


@settings(max_examples=300, deadline=None)
@given(boxes, boxes)
def test_giou_symmetric_and_in_range(a, b):
    ta = torch.tensor(a, dtype=torch.float64)
    tb = torch.tensor(b, dtype=torch.float64)
    g_ab, g_ba = float(giou(ta, tb)), float(giou(tb, ta))
    assert g_ab == g_ba
    assert -1.0 < g_ab <= 1.0
    if a != b:
        assert g_ab < 1.0


def test_giou_symmetry_bulk():
    g = torch.Generator().manual_seed(0)
    a = torch.cat([torch.rand(1000, 2, generator=g), torch.rand(1000, 2, generator=g) * 0.5 + 0.01], 1).double()
    b = torch.cat([torch.rand(1000, 2, generator=g), torch.rand(1000, 2, generator=g) * 0.5 + 0.01], 1).double()
    assert torch.equal(giou(a, b), giou(b, a))
    assert bool((giou(a, b) > -1).all() and (giou(a, b) <= 1).all())


@settings(max_examples=200, deadline=None)
@given(boxes)
def test_box_conversion_round_trip(b):
    t = torch.tensor(b, dtype=torch.float64)
    back = box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(t))
    assert torch.allclose(back, t, rtol=0, atol=1e-15)


def test_box_conversion_exact_on_dyadic_values():
    t = torch.tensor([[0.5, 0.25, 0.125, 0.375], [0.75, 0.5, 0.5, 0.25]], dtype=torch.float64)
    assert torch.equal(box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(t)), t)
    b = Box(0.5, 0.25, 0.125, 0.375)
    assert Box.from_xyxy(*b.to_xyxy()) == b


def test_pairwise_giou_matches_elementwise():
    a = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.6, 0.5, 0.3, 0.4]], dtype=torch.float64)
    b = torch.tensor([[0.4, 0.4, 0.2, 0.3], [0.7, 0.6, 0.1, 0.1], [0.3, 0.3, 0.2, 0.2]], dtype=torch.float64)
    m = pairwise_giou(a, b)
    for i in range(2):
        for j in range(3):
            assert float(m[i, j]) == pytest.approx(float(giou(a[i], b[j])), abs=1e-15)


def test_oks_identity_and_example():
    gt = torch.tensor([[0.2, 0.3], [0.5, 0.5]], dtype=torch.float64)
    vis = torch.tensor([True, True])
    assert float(oks(gt.clone(), gt, vis, 0.3, 0.1)) == 1.0
    pred = torch.tensor([[0.3, 0.3]], dtype=torch.float64)
    val = float(oks(pred, torch.tensor([[0.2, 0.3]], dtype=torch.float64), torch.tensor([True]), 1.0, 0.1))
    d = 0.1
    scalar_oracle = math.exp(-(d * d) / (2 * 1.0 * 0.1 * 0.1))
    assert val == pytest.approx(scalar_oracle, rel=1e-12)
    assert val == pytest.approx(0.6065, abs=1e-4)


def test_oks_all_invisible_is_domain_error():
    gt = torch.zeros(3, 2, dtype=torch.float64)
    with pytest.raises(GeometryError):
        oks(gt, gt, torch.zeros(3, dtype=torch.bool), 1.0, 0.1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=4, max_size=4).filter(any),
       st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 3))
def test_oks_ignores_invisible_pred_slots(vis, dx, dy, slot):
    g = torch.Generator().manual_seed(1)
    gt = torch.rand(4, 2, generator=g, dtype=torch.float64)
    pred = torch.rand(4, 2, generator=g, dtype=torch.float64)
    v = torch.tensor(vis)
    base = oks(pred, gt, v, 0.2, 0.1)
    if not vis[slot]:
        moved = pred.clone()
        moved[slot] += torch.tensor([dx, dy], dtype=torch.float64)
        assert torch.equal(oks(moved, gt, v, 0.2, 0.1), base)


def test_giou_and_oks_gradients_finite_difference():
    g = torch.Generator().manual_seed(2)
    for _ in range(5):
        a = torch.cat([torch.rand(2, generator=g) * 0.4 + 0.3, torch.rand(2, generator=g) * 0.3 + 0.2]).double()
        b = torch.cat([torch.rand(2, generator=g) * 0.4 + 0.3, torch.rand(2, generator=g) * 0.3 + 0.2]).double()
        assert torch.autograd.gradcheck(lambda x, y: giou(x, y), (a.requires_grad_(), b.requires_grad_()),
                                        eps=1e-5, atol=1e-8, rtol=1e-4)
        pred = torch.rand(5, 2, generator=g, dtype=torch.float64).requires_grad_()
        gt = torch.rand(5, 2, generator=g, dtype=torch.float64)
        vis = torch.tensor([True, False, True, True, False])
        assert torch.autograd.gradcheck(lambda p: oks(p, gt, vis, 0.2, 0.3), (pred,), eps=1e-5, atol=1e-8,
                                        rtol=1e-4)


def test_fourier_examples():
    z = fourier_embed(torch.zeros(2, dtype=torch.float64), bands=3)
    assert z.tolist() == [0.0, 1.0, 0.0, 1.0] * 3
    e = fourier_embed(torch.tensor([0.25, 0.0], dtype=torch.float64), bands=1, scale=2 * math.pi)
    assert torch.allclose(e, torch.tensor([1.0, 0.0, 0.0, 1.0], dtype=torch.float64), atol=1e-15)
    assert fourier_embed(torch.rand(2), bands=8).shape == (32,)
    with pytest.raises(ValueError):
        fourier_embed(torch.rand(2), bands=0)


def test_fourier_injective_on_grid():
    xs = (torch.arange(64, dtype=torch.float64) + 0.5) / 64
    gy, gx = torch.meshgrid(xs, xs, indexing="ij")
    pts = torch.stack([gx, gy], -1).reshape(-1, 2)
    for bands in (6, 8):
        emb = fourier_embed(pts, bands=bands)
        d = torch.cdist(emb, emb)
        d.fill_diagonal_(float("inf"))
        assert float(d.min()) > 1e-6


def _sample():
    pixels = np.arange(4 * 6 * 3, dtype=np.uint8).reshape(4, 6, 3)
    boxes = np.array([[0.25, 0.5, 0.25, 0.5]])
    kpts = [np.array([[0.25, 0.5, 1.0], [0.75, 0.25, 1.0], [0.5, 0.5, 0.0]])]
    return AnnotatedImage(pixels, boxes, kpts, [1])


def test_hflip_involution_and_swap():
    s = _sample()
    perm = [1, 0, 2]  # slot 0 "left eye", slot 1 "right eye", slot 2 "nose"
    once = hflip(s, perm)
    assert once.boxes[0, 0] == 0.75
    assert once.keypoints[0][1, 0] == 0.75  # left eye at 0.25 moves to the right-eye slot
    assert hflip(once, perm) == s


def test_hflip_left_eye_example():
    s = AnnotatedImage(np.zeros((2, 2, 3), np.uint8), np.array([[0.5, 0.5, 0.5, 0.5]]),
                       [np.array([[0.3, 0.4, 1.0], [0.6, 0.4, 1.0]])], [0])
    out = hflip(s, [1, 0])
    assert out.keypoints[0][1, 0] == pytest.approx(0.7)


def test_hflip_rejects_three_cycle():
    with pytest.raises(SwapMapError):
        hflip(_sample(), [1, 2, 0])
    with pytest.raises(SwapMapError):
        swap_map_from_pairs(3, [(0, 1), (1, 2)])


dyadic = st.integers(0, 4096).map(lambda i: i / 4096)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(dyadic, dyadic, st.booleans()), min_size=4, max_size=4))
def test_hflip_round_trip_exact_on_dyadic_grid(points):
    kp = np.array([[x, y, float(v)] for x, y, v in points])
    s = AnnotatedImage(np.zeros((3, 5, 3), np.uint8), np.array([[0.5, 0.5, 0.25, 0.25]]), [kp], [0])
    assert hflip(hflip(s, [3, 2, 1, 0]), [3, 2, 1, 0]) == s


def test_keypoint_primitives():
    with pytest.raises(GeometryError):
        Keypoint(1.2, 0.5, True)
    Keypoint(1.2, 0.5, False)  # placeholder coordinates allowed when invisible
    ks = KeypointSet.from_array([[0.1, 0.2, 1], [0.0, 0.0, 0]])
    assert ks.visible.tolist() == [True, False]
    assert np.array_equal(ks.to_array(), np.array([[0.1, 0.2, 1.0], [0.0, 0.0, 0.0]]))
    assert visibility_from_raw([0, 1, 2]).tolist() == [False, True, True]
