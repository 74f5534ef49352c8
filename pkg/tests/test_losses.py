import math

import numpy as np
import pytest
import torch

from perceptflow.losses import (keypoint_loss, l2_loss, normal_cosine_term, normal_loss,
                                rectified_flow_loss, ssi_depth_loss)
from perceptflow.perception import KeypointSet

from oracles import finite_difference_grad, relative_error, ssi_reference


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def T(x):
    return torch.tensor(x, dtype=torch.float64)


# -- examples -----------------------------------------------------------------

def test_rectified_flow_examples():
    g = torch.Generator().manual_seed(0)
    x0, eps = torch.randn(3, 4, generator=g), torch.randn(3, 4, generator=g)
    assert rectified_flow_loss(eps - x0, x0, eps).item() == 0
    assert rectified_flow_loss(torch.zeros(3, 4), x0, x0.clone()).item() == 0
    assert rectified_flow_loss(eps - x0 + 0.3, x0, eps).item() == pytest.approx(0.09, abs=1e-12)
    with pytest.raises(ValueError):
        rectified_flow_loss(torch.zeros(2), torch.zeros(3), torch.zeros(3))


def test_normal_loss_examples():
    n = T([[[[0.0, 0.6, 0.8]]]])
    assert normal_loss(n, n).item() == pytest.approx(0, abs=1e-12)
    assert normal_loss(T([[[[1.0, 0, 0]]]]), T([[[[0, 1.0, 0]]]])).item() == pytest.approx(math.sqrt(2) + 1, abs=1e-6)
    assert normal_loss(T([[[[0, 0, 1.0]]]]), T([[[[0, 0, -1.0]]]])).item() == pytest.approx(4.0, abs=1e-12)


def test_normal_loss_empty_mask():
    with pytest.raises(ValueError):
        normal_loss(torch.ones(1, 2, 2, 3), torch.ones(1, 2, 2, 3), torch.zeros(1, 2, 2))


def test_normal_cosine_term_is_scale_invariant():
    g = torch.Generator().manual_seed(1)
    p, y = torch.randn(2, 3, 3, 3, generator=g), torch.randn(2, 3, 3, 3, generator=g)
    y = y / y.norm(dim=-1, keepdim=True)
    assert normal_cosine_term(3.7 * p, y).item() == pytest.approx(normal_cosine_term(p, y).item(), abs=1e-12)
    assert normal_loss(3.7 * p, y).item() != pytest.approx(normal_loss(p, y).item(), abs=1e-6)


def test_normal_loss_guards_zero_prediction():
    val = normal_loss(torch.zeros(1, 1, 1, 3), T([[[[0, 0, 1.0]]]]))
    assert math.isfinite(val.item())
    assert val.item() == pytest.approx(2.0)


def test_ssi_identity_and_affine():
    g = torch.Generator().manual_seed(2)
    d = torch.rand(2, 4, 4, generator=g) + 0.1
    assert ssi_depth_loss(d, d).item() == 0
    assert ssi_depth_loss(2.5 * d + 0.7, d).item() == pytest.approx(0, abs=1e-9)


def test_ssi_pinned_2x2_case():
    gt = T([[[1.0, 2.0], [3.0, 4.0]]])
    pred = T([[[1.0, 2.0], [3.0, 5.0]]])
    oracle = ssi_reference([1, 2, 3, 5], [1, 2, 3, 4])
    assert oracle == pytest.approx(0.25, abs=1e-15)
    assert ssi_depth_loss(pred, gt).item() == pytest.approx(oracle, abs=1e-9)


def test_ssi_constant_both_sides_is_zero():
    assert ssi_depth_loss(torch.full((1, 2, 2), 3.0), torch.full((1, 2, 2), 1.0)).item() == 0


def test_ssi_constant_pred_is_finite():
    val = ssi_depth_loss(torch.full((1, 2, 2), 3.0), T([[[1.0, 2.0], [3.0, 4.0]]]))
    assert math.isfinite(val.item()) and val.item() > 0


def test_ssi_uses_whole_video_statistics():
    # per-frame normalisation would make this zero; the shared statistics do not
    gt = T([[[1.0, 2.0]], [[1.0, 2.0]]])
    pred = T([[[1.0, 2.0]], [[2.0, 4.0]]])
    assert ssi_depth_loss(pred, gt).item() > 0.1


def test_ssi_mask_selects_pixels():
    gt = T([[[1.0, 2.0], [3.0, 4.0]]])
    pred = T([[[1.0, 2.0], [3.0, 100.0]]])
    mask = torch.tensor([[[True, True], [True, False]]])
    assert ssi_depth_loss(pred, gt, mask).item() == pytest.approx(0, abs=1e-12)


def test_l2_examples():
    x = torch.rand(2, 3, 3, 3)
    assert l2_loss(x, x).item() == 0
    assert l2_loss(x + 0.2, x).item() == pytest.approx(0.04, abs=1e-12)
    half = x.clone()
    half[0] += 0.2
    assert l2_loss(half, x, torch.ones(2, 3, 3)).item() == pytest.approx(0.02, abs=1e-12)
    with pytest.raises(ValueError):
        l2_loss(x, x, torch.zeros(2, 3, 3))


def _kps(coords, space="image", vis=None):
    return KeypointSet(coords, space, vis)


def test_keypoint_examples():
    gt = torch.rand(1, 16, 2)
    assert keypoint_loss(_kps(gt), _kps(gt, vis=np.ones((1, 16)))).item() == 0
    pred = gt.clone()
    pred[0, 5] += T([0.3, 0.4])
    val = keypoint_loss(_kps(pred), _kps(gt, vis=np.ones((1, 16))))
    assert val.item() == pytest.approx(0.0078125, abs=1e-12)


def test_keypoint_all_invisible(caplog):
    gt = torch.rand(2, 16, 2)
    with caplog.at_level("WARNING"):
        val = keypoint_loss(_kps(gt + 1), _kps(gt, vis=np.zeros((2, 16))))
    assert val.item() == 0
    assert "no visible joints" in caplog.text


def test_keypoint_space_mismatch():
    with pytest.raises(ValueError):
        keypoint_loss(_kps(torch.zeros(1, 2, 3), "root_relative"), _kps(torch.zeros(1, 2, 3)))


def test_keypoint_3d_is_root_relative():
    gt = torch.rand(2, 16, 3)
    val = keypoint_loss(_kps(gt + T([1.0, -2.0, 0.5]), "root_relative"), _kps(gt, "root_relative"))
    assert val.item() == pytest.approx(0, abs=1e-12)


# -- properties -----------------------------------------------------------------

def _instances(n, seed):
    g = torch.Generator().manual_seed(seed)
    for _ in range(n):
        yield g


LOSS_CASES = {
    "normal": lambda g: (torch.randn(2, 2, 2, 3, generator=g),
                         torch.nn.functional.normalize(torch.randn(2, 2, 2, 3, generator=g), dim=-1),
                         lambda p, y: normal_loss(p, y)),
    "ssi": lambda g: (torch.rand(2, 2, 2, generator=g), torch.rand(2, 2, 2, generator=g),
                      lambda p, y: ssi_depth_loss(p, y)),
    "l2": lambda g: (torch.randn(2, 2, 2, 3, generator=g), torch.randn(2, 2, 2, 3, generator=g),
                     lambda p, y: l2_loss(p, y, torch.ones(2, 2, 2))),
    "kp2d": lambda g: (torch.rand(2, 4, 2, generator=g), torch.rand(2, 4, 2, generator=g),
                       lambda p, y: keypoint_loss(_kps(p), _kps(y, vis=np.array([[1, 0, 1, 1], [1, 1, 1, 0]])))),
    "kp3d": lambda g: (torch.randn(2, 4, 3, generator=g), torch.randn(2, 4, 3, generator=g),
                       lambda p, y: keypoint_loss(_kps(p, "root_relative"), _kps(y, "root_relative"))),
    "flow": lambda g: (torch.randn(2, 2, 2, 2, generator=g), torch.randn(2, 2, 2, 2, generator=g),
                       lambda p, y: rectified_flow_loss(p, torch.zeros_like(y), y)),
}


def loss_gradient_errors(name, n=20, seed=0):
    errs = []
    for g in _instances(n, seed):
        pred, gt, fn = LOSS_CASES[name](g)
        p = pred.clone().requires_grad_(True)
        fn(p, gt).backward()
        fd = finite_difference_grad(lambda x: fn(torch.from_numpy(x), gt).item(), pred.numpy())
        errs.append(relative_error(p.grad.numpy(), fd))
    return errs


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients_match_finite_differences(name):
    assert max(loss_gradient_errors(name, n=5, seed=11)) < 1e-4


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_losses_nonnegative_zero_at_gt_and_permutation_equivariant(name):
    g = torch.Generator().manual_seed(3)
    pred, gt, fn = LOSS_CASES[name](g)
    assert fn(pred, gt).item() >= 0
    assert fn(gt, gt).item() == pytest.approx(0, abs=1e-12)
    if name in ("kp2d", "kp3d", "flow"):
        return
    perm = torch.randperm(4, generator=g)
    shuffle = lambda x: x.reshape(2, 4, *x.shape[3:])[:, perm].reshape(x.shape)
    assert fn(shuffle(pred), shuffle(gt)).item() == pytest.approx(fn(pred, gt).item(), abs=1e-12)
