import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fasttcm import tensor as T
from fasttcm.head import SegHead, dice_loss, task_loss
from fasttcm.tensor import DimensionError, Tensor

rng = np.random.default_rng


def head(C=8, s=4, seed=0):
    return SegHead(C, s, rng(seed))


def inputs(C=8, h=3, w=3, seed=1):
    r = rng(seed)
    return r.normal(size=(h, w, C)), r.uniform(size=(h, w, 1))


def test_output_shape_and_range():
    fused, P = inputs()
    out = head()(Tensor(fused), Tensor(P)).data
    assert out.shape == (12, 12, 1)
    assert ((out > 0) & (out < 1)).all()


def test_batched_output_shape():
    r = rng(2)
    out = head()(Tensor(r.normal(size=(2, 3, 3, 8))), Tensor(r.uniform(size=(2, 3, 3, 1))))
    assert out.shape == (2, 12, 12, 1)


def test_zero_weights_give_half():
    h = head()
    for p in h.parameters():
        p.data[...] = 0.0
    fused, P = inputs()
    np.testing.assert_array_equal(h(Tensor(fused), Tensor(P)).data, 0.5)


def test_literal_layer_order_gives_same_map():
    h = head()
    fused, P = inputs()
    x = np.concatenate([fused, P], axis=-1) @ h.reduce.weight.data + h.reduce.bias.data
    x = np.maximum(x, 0).repeat(4, axis=0).repeat(4, axis=1)
    literal = 1 / (1 + np.exp(-(x @ h.classify.weight.data + h.classify.bias.data)))
    np.testing.assert_allclose(h(Tensor(fused), Tensor(P)).data, literal, rtol=0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_argmax_cell_maps_into_argmax_block(seed):
    h = head(seed=seed % 7)
    fused, P = inputs(seed=seed)
    out = h(Tensor(fused), Tensor(P)).data[..., 0]
    coarse = out[::4, ::4]
    ci, cj = np.unravel_index(np.argmax(coarse), coarse.shape)
    fi, fj = np.unravel_index(np.argmax(out), out.shape)
    assert out[fi, fj] == coarse[ci, cj]
    assert out[4 * ci : 4 * ci + 4, 4 * cj : 4 * cj + 4].max() == out.max()


def test_mismatched_inputs():
    fused, P = inputs()
    with pytest.raises(DimensionError):
        head()(Tensor(fused), Tensor(P[:2]))
    with pytest.raises(DimensionError):
        head()(Tensor(fused[..., :4]), Tensor(P))


def test_head_gradient():
    h = head()
    fused, P = inputs()
    f, p = Tensor(fused, requires_grad=True), Tensor(P, requires_grad=True)
    gt = (rng(3).uniform(size=(12, 12, 1)) > 0.5).astype(float)
    assert T.grad_check(lambda: task_loss(h(f, p), gt), [f, p, *h.parameters()]) < 1e-4


# ---------------------------------------------------------------- task loss


def test_bce_part_at_half_is_ln2():
    gt = (rng(4).uniform(size=(4, 4, 1)) > 0.5).astype(float)
    pred = Tensor(np.full((4, 4, 1), 0.5))
    dice = dice_loss(pred, gt).item()
    assert task_loss(pred, gt).item() - dice == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_prediction_hits_floor():
    gt = np.zeros((4, 4, 1))
    gt[1:3, 1:3] = 1.0
    assert task_loss(Tensor(np.clip(gt, 1e-7, 1 - 1e-7)), gt).item() == pytest.approx(0.0, abs=1e-6)


def test_task_loss_direct_oracle():
    pred = rng(5).uniform(0.02, 0.98, size=(4, 4, 1))
    gt = (rng(6).uniform(size=(4, 4, 1)) > 0.6).astype(float)
    p, g = pred.reshape(-1).tolist(), gt.reshape(-1).tolist()
    bce = -math.fsum(y * math.log(q) + (1 - y) * math.log(1 - q) for q, y in zip(p, g)) / 16
    dice = 1 - (2 * math.fsum(q * y for q, y in zip(p, g)) + 1) / (math.fsum(p) + math.fsum(g) + 1)
    assert task_loss(Tensor(pred), gt).item() == pytest.approx(bce + dice, abs=1e-10)


def test_dice_averages_over_batch():
    pred = rng(7).uniform(size=(2, 4, 4, 1))
    gt = (rng(8).uniform(size=(2, 4, 4, 1)) > 0.5).astype(float)
    per = [dice_loss(Tensor(pred[i]), gt[i]).item() for i in range(2)]
    assert dice_loss(Tensor(pred), gt).item() == pytest.approx(sum(per) / 2, abs=1e-15)


def test_task_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        task_loss(Tensor(np.full((4, 4, 1), 0.5)), np.zeros((2, 2, 1)))
