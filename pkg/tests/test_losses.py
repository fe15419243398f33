import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from spinedet import losses as L
from oracles import autograd_gradient, bce_loop, fd_gradient, focal_loop, mse_loop, relative_error

D = torch.float64


def _heat_gt(rng, shape=(2, 6, 6, 6)):
    gt = torch.as_tensor(rng.uniform(0, 0.9, size=shape))
    gt[0, 2, 3, 1] = 1.0
    gt[1, 3, 1, 2] = 1.0
    return gt


def test_focal_examples():
    gt = torch.zeros((1, 3, 3, 3), dtype=D)
    gt[0, 1, 1, 1] = 1.0
    pred = torch.full_like(gt, 1e-12)
    pred[0, 1, 1, 1] = 1 - 1e-12
    assert L.variant_focal(pred.clamp(1e-6, 1 - 1e-6), gt).item() < 1e-9
    # lone peak at p=0.5, background probabilities ~0
    pred = torch.full_like(gt, 1e-6)
    pred[0, 1, 1, 1] = 0.5
    assert L.variant_focal(pred, gt).item() == pytest.approx(0.25 * math.log(2), rel=1e-6)
    # near-peak background is suppressed by (1-y)^beta
    gt2 = gt.clone()
    gt2[0, 0, 0, 0] = 1 - 1e-9
    pred2 = pred.clone()
    pred2[0, 0, 0, 0] = 0.9
    assert L.variant_focal(pred2, gt2).item() == pytest.approx(L.variant_focal(pred, gt).item(), abs=1e-9)


def test_focal_matches_loop_and_requires_peak(rng):
    gt = _heat_gt(rng)
    p = torch.as_tensor(rng.uniform(0.05, 0.95, size=gt.shape))
    assert L.variant_focal(p, gt).item() == pytest.approx(focal_loop(p.numpy(), gt.numpy()), rel=1e-10)
    with pytest.raises(L.DegenerateTargetError):
        L.variant_focal(p, torch.zeros_like(gt))


def test_focal_monotone_in_peak_probability():
    gt = torch.zeros((1, 3, 3, 3), dtype=D)
    gt[0, 1, 1, 1] = 1
    vals = []
    for q in np.linspace(0.05, 0.99, 20):
        p = torch.full_like(gt, 0.1)
        p[0, 1, 1, 1] = q
        vals.append(L.variant_focal(p, gt).item())
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_mse_examples(rng):
    a = torch.as_tensor(rng.normal(size=(2, 3, 4, 5)))
    assert L.mse_loss(a, a).item() == 0
    assert L.mse_loss(a + 1, a).item() == pytest.approx(1.0)
    b = torch.as_tensor(rng.normal(size=a.shape))
    assert L.mse_loss(a, b).item() == pytest.approx(mse_loop(a.numpy(), b.numpy()), abs=1e-7)


def test_lambda_and_weights():
    cfg = L.HeatLossConfig()
    assert L.lambda_scale(1, cfg) == pytest.approx(1e-4, abs=1e-12)
    assert L.lambda_scale(100, cfg) == pytest.approx(1.0, abs=1e-12)
    lit = L.HeatLossConfig(lambda_form="literal")
    for e in (1, 37, 99):
        assert L.lambda_scale(e, lit) == pytest.approx(1.0, abs=1e-12)
    assert L.heat_weights(0, cfg) == (0.0, 1.0)
    assert L.heat_weights(100, cfg) == (1.0, 0.0)
    assert L.heat_weights(250, cfg) == (1.0, 0.0)
    a, b = L.heat_weights(50, cfg)
    assert a == pytest.approx(0.5 * L.lambda_scale(50, cfg)) and b == pytest.approx(0.5)
    assert L.heat_weights(3, L.HeatLossConfig(mode="focal_only")) == (1.0, 0.0)
    assert L.heat_weights(300, L.HeatLossConfig(mode="mse_only")) == (0.0, 1.0)


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(beta=-1), dict(epsilon_prime=0), dict(gamma=1.0), dict(mode="x"),
                                dict(lambda_form="y")])
def test_heat_config_rejects(kw):
    with pytest.raises(ValueError):
        L.HeatLossConfig(**kw)


def test_heatmap_loss_boundaries(rng):
    gt = _heat_gt(rng)
    logits = torch.as_tensor(rng.normal(size=gt.shape))
    p = L.heat_probabilities(logits)
    cfg = L.HeatLossConfig()
    assert L.heatmap_loss(logits, gt, 0, cfg).item() == L.mse_loss(p, gt).item()
    assert L.heatmap_loss(logits, gt, 100, cfg).item() == L.variant_focal(p, gt).item()
    assert L.heatmap_loss(logits, gt, 400, cfg).item() == L.variant_focal(p, gt).item()
    # continuous into the focal regime
    near = L.heatmap_loss(logits, gt, 100 - 1e-9, cfg).item()
    assert near == pytest.approx(L.variant_focal(p, gt).item(), rel=1e-6)
    with pytest.raises(ValueError):
        L.heatmap_loss(logits, gt, -1, cfg)


def test_offset_examples():
    z = torch.zeros((1, 3), dtype=D)
    assert L.offset_loss(z, z).item() == 0
    assert L.offset_loss(torch.tensor([[0.5, 0, 0]], dtype=D), z).item() == pytest.approx(0.125)
    assert L.offset_loss(torch.tensor([[2.0, 0, 0]], dtype=D), z).item() == pytest.approx(1.5)
    # sum over vertebrae
    two = torch.tensor([[0.5, 0, 0], [0, 0.5, 0]], dtype=D)
    assert L.offset_loss(two, torch.zeros_like(two)).item() == pytest.approx(0.25)


def test_bbox_examples():
    c = torch.tensor([[5.0, 5.0, 5.0]], dtype=D)
    s = torch.tensor([[1.0, 1, 1, 1, 1, 1]], dtype=D)
    gt = L.boxes_from_sizes(c, s)
    assert L.bbox_loss(s, gt, c).item() == 0
    gt_shift = gt + torch.tensor([[1.0, 1, 0, 0, 0, 0]], dtype=D)  # unit shift along x of a 2-wide box
    assert L.bbox_loss(s, gt_shift, c).item() == pytest.approx(-math.log(1 / 3))
    far = gt + 100
    assert L.bbox_loss(s, far, c).item() == pytest.approx(-math.log(1e-6))


def test_class_and_seg_examples(rng):
    act = torch.zeros(26, dtype=torch.bool)
    act[[3, 4, 5]] = True
    big = torch.where(act, 40.0, -40.0).to(D)
    assert L.class_loss(big, act).item() < 1e-12
    assert L.class_loss(torch.zeros(26, dtype=D), act).item() == pytest.approx(math.log(2))
    z = torch.as_tensor(rng.normal(size=26))
    assert L.class_loss(z, act).item() == pytest.approx(bce_loop(z.numpy(), act.numpy()), abs=1e-7)
    m = torch.as_tensor(rng.normal(size=(2, 4, 4, 3)))
    y = torch.as_tensor(rng.random((2, 4, 4, 3)) > 0.5)
    assert L.seg_loss(m, y).item() == pytest.approx(bce_loop(m.numpy(), y.numpy()), abs=1e-7)
    assert L.seg_loss(torch.zeros_like(m), y).item() == pytest.approx(math.log(2))
    assert L.seg_loss(torch.where(y, 40.0, -40.0).to(D), y).item() < 1e-12


def test_dist_examples():
    shape = (8, 8, 16)
    diag = math.sqrt(64 + 64 + 256)
    gt = torch.zeros((26, 3), dtype=D)
    gt[3] = torch.tensor([4.0, 4, 10])
    gt[4] = torch.tensor([4.0, 4, 6])
    act = torch.zeros(26, dtype=torch.bool)
    act[[3, 4]] = True
    assert L.dist_loss(gt, gt, act, shape).item() == 0
    one = act.clone()
    one[4] = False
    assert L.dist_loss(gt, gt, one, shape).item() == 0
    pred = gt.clone()
    pred[4] = pred[3] - torch.tensor([0, 0, 4 + diag], dtype=D)
    assert L.dist_loss(pred, gt, act, shape).item() == pytest.approx(1.0)
    assert L.dist_loss(gt, gt, act, shape, form="raw").item() == pytest.approx(4 / diag)


def test_total_loss():
    t = {k: torch.tensor(v) for k, v in zip(["heat", "offset", "bbox", "class", "dist"], [0.1, 0.2, 0.3, 0.1, 0.05])}
    assert L.total_loss(t).item() == pytest.approx(0.75)
    assert L.total_loss(t, enabled={"dist": False}).item() == pytest.approx(0.70)
    assert L.total_loss({k: torch.tensor(0.0) for k in t}).item() == 0


def _check(fn, x, tol=1e-4):
    assert relative_error(autograd_gradient(fn, x), fd_gradient(fn, x)) < tol


def test_gradients_small(rng):
    gt = _heat_gt(rng, (2, 4, 4, 4))
    cfg = L.HeatLossConfig()
    for epoch in (0, 40, 120):
        _check(lambda z: L.heatmap_loss(z, gt, epoch, cfg), torch.as_tensor(rng.normal(size=gt.shape)))
    c = torch.as_tensor(rng.uniform(4, 8, (3, 3)))
    gtb = L.boxes_from_sizes(c, torch.as_tensor(rng.uniform(1, 3, (3, 6))))
    _check(lambda s: L.bbox_loss(s, gtb, c), torch.as_tensor(rng.uniform(1, 3, (3, 6))))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99))
def test_losses_nonnegative(q):
    gt = torch.zeros((1, 2, 2, 2), dtype=D)
    gt[0, 0, 0, 0] = 1
    p = torch.full_like(gt, q)
    assert L.variant_focal(p, gt).item() >= 0
    assert L.mse_loss(p, gt).item() >= 0
