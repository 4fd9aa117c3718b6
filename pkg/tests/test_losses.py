import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from cadet.assignment import BACKGROUND
from cadet.losses import centerness_loss, detection_loss, focal_loss, iou_loss
from cadet.network import HeadOutputs
from gradutil import assert_grad_close

D = torch.float64


def test_focal_scalar_example():
    logit = torch.tensor([[math.log(9.0)]], dtype=D)  # sigmoid = 0.9
    loss = focal_loss(logit, torch.tensor([0]), n_pos=1)
    assert loss.item() == pytest.approx(0.25 * 0.01 * -math.log(0.9), rel=1e-12)
    assert loss.item() == pytest.approx(2.6341e-4, abs=1e-8)


def test_focal_limits():
    target = torch.tensor([1, BACKGROUND, 0])
    perfect = torch.tensor([[-40, 40, -40], [-40, -40, -40], [40, -40, -40]], dtype=D)
    assert focal_loss(perfect, target, 2).item() < 1e-12
    bg = torch.full((5, 5, 3), -20.0, dtype=D)
    assert focal_loss(bg, torch.full((5, 5), BACKGROUND), 0).item() < 1e-8


def test_focal_gamma0_alpha1_is_bce():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(4, 4, 3, generator=g, dtype=D) * 3
    target = torch.randint(-1, 3, (4, 4), generator=g)
    onehot = torch.zeros_like(logits)
    fg = target >= 0
    onehot[fg, target[fg]] = 1
    bce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="sum")
    n_pos = int(fg.sum())
    got = focal_loss(logits, target, n_pos, gamma=0.0, alpha=1.0)
    assert abs(got.item() - bce.item() / max(n_pos, 1)) < 1e-10


def test_focal_rejects_non_finite():
    with pytest.raises(ValueError):
        focal_loss(torch.tensor([[float("nan")]], dtype=D), torch.tensor([0]), 1)


def test_iou_loss_examples():
    pos = torch.tensor([True])
    pred = torch.tensor([[1.0, 1, 1, 1]], dtype=D)
    target = torch.tensor([[2.0, 2, 2, 2]], dtype=D)
    assert iou_loss(pred, target, pos).item() == pytest.approx(math.log(4), rel=1e-12)
    assert iou_loss(target, target, pos).item() == 0.0
    assert iou_loss(pred, target, torch.tensor([False])).item() == 0.0


def test_centerness_loss_examples():
    pos = torch.tensor([True, False])
    v = centerness_loss(torch.tensor([0.0, 3.0], dtype=D), torch.tensor([0.5, 0.1], dtype=D), pos)
    assert v.item() == pytest.approx(math.log(2), rel=1e-12)
    sat = centerness_loss(torch.tensor([50.0], dtype=D), torch.tensor([1.0], dtype=D), torch.tensor([True]))
    assert sat.item() < 1e-20
    assert centerness_loss(torch.zeros(3, dtype=D), torch.zeros(3, dtype=D), torch.zeros(3, dtype=bool)).item() == 0


@given(st.floats(-30, 30), st.floats(0.01, 1.0))
@settings(max_examples=50, deadline=None)
def test_losses_non_negative(logit, ctr):
    pos = torch.tensor([True])
    assert centerness_loss(torch.tensor([logit], dtype=D), torch.tensor([ctr], dtype=D), pos).item() >= -1e-15
    assert focal_loss(torch.tensor([[logit]], dtype=D), torch.tensor([0]), 1).item() >= 0


def _levels(seed, shapes=((4, 4), (2, 2)), classes=3):
    g = torch.Generator().manual_seed(seed)
    outs, tgts = [], []
    from cadet.assignment import LevelTargets

    for h, w in shapes:
        cls = torch.randint(-1, classes, (1, h, w), generator=g)
        pos = cls >= 0
        reg_t = torch.rand(1, h, w, 4, generator=g, dtype=D) * 10 + 1
        ctr_t = torch.rand(1, h, w, generator=g, dtype=D) * pos
        raw = torch.randn(1, h, w, 4, generator=g, dtype=D)
        outs.append(HeadOutputs(torch.randn(1, h, w, classes, generator=g, dtype=D) * 2,
                                torch.randn(1, h, w, generator=g, dtype=D), raw, raw.exp() * 8))
        tgts.append(LevelTargets(cls, ctr_t, reg_t, pos))
    return outs, tgts


def test_detection_total_is_sum_and_global_normalization():
    outs, tgts = _levels(1)
    lb = detection_loss(outs, tgts)
    assert lb.total.item() == (lb.cls + lb.reg + lb.ctr).item()
    n_pos = sum(int(t.pos_mask.sum()) for t in tgts)
    from cadet.losses import focal_loss_sum

    cls = sum(focal_loss_sum(o.cls_logits, t.cls_target) for o, t in zip(outs, tgts)) / n_pos
    assert lb.cls.item() == pytest.approx(cls.item(), rel=1e-14)


def test_detection_perfect_scene_is_small():
    from cadet.assignment import PyramidSpec, assign_targets
    from cadet.geometry import Box
    from cadet.training import stack_targets

    spec = PyramidSpec()
    tg = stack_targets([assign_targets([(Box(20, 30, 70, 90), 1)], spec, 128, 128, 3)], D)
    outs = []
    for t in tg:
        cls = torch.full(t.cls_target.shape + (3,), -20.0, dtype=D)
        fg = t.pos_mask
        cls[fg, t.cls_target[fg]] = 20.0
        ctr = torch.logit(t.ctr_target.clamp(1e-12, 1 - 1e-12))
        reg = torch.where(fg.unsqueeze(-1), t.reg_target, torch.ones_like(t.reg_target))
        outs.append(HeadOutputs(cls, ctr, reg.log(), reg))
    lb = detection_loss(outs, tg)
    # the centerness BCE floor is the target entropy, so compare against it
    ent = sum(F.binary_cross_entropy(t.ctr_target[t.pos_mask], t.ctr_target[t.pos_mask], reduction="sum")
              for t in tg) / sum(int(t.pos_mask.sum()) for t in tg)
    assert lb.cls.item() < 1e-3 and lb.reg.item() < 1e-12
    assert lb.ctr.item() - ent.item() < 1e-9


def test_detection_empty_scene():
    outs, tgts = _levels(2)
    for t in tgts:
        t.pos_mask.zero_()
        t.cls_target.fill_(BACKGROUND)
    for o in outs:
        o.cls_logits.fill_(-20.0)
    lb = detection_loss(outs, tgts)
    assert lb.cls.item() < 1e-6 and lb.reg.item() == 0 and lb.ctr.item() == 0


def test_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(3)
    target = torch.randint(-1, 3, (4, 4), generator=g)
    assert_grad_close(lambda x: focal_loss(x, target, 5), torch.randn(4, 4, 3, generator=g, dtype=D))

    pos = torch.rand(4, 4, generator=g) > 0.4
    reg_t = torch.rand(4, 4, 4, generator=g, dtype=D) * 5 + 0.5
    assert_grad_close(lambda x: iou_loss(x, reg_t, pos), torch.rand(4, 4, 4, generator=g, dtype=D) * 5 + 0.5)

    ctr_t = torch.rand(4, 4, generator=g, dtype=D)
    assert_grad_close(lambda x: centerness_loss(x, ctr_t, pos), torch.randn(4, 4, generator=g, dtype=D))
