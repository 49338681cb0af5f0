import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gdip.detect import (DEFAULT_ALPHA, LAMBDA_COORD, LAMBDA_NOOBJ, LossBreakdown, Target,
                         decode_cells, decode_detections, encode_target, head_forward,
                         loss_obj, loss_obj_with_grad, loss_rec, loss_total, responsible_cell)
from gdip.gradcheck import check_head, check_loss_obj, check_loss_rec


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def logit(p):
    return math.log(p / (1.0 - p))


class TestTarget:
    def test_validation(self):
        with pytest.raises(ValueError):
            Target([[1.2, 0.5, 0.1, 0.1]], [0])
        with pytest.raises(ValueError):
            Target([[0.5, 0.5, 0.0, 0.1]], [0])
        with pytest.raises(ValueError):
            Target([[0.5, 0.5, 0.1, 0.1]], [0, 1])

    def test_text_roundtrip(self, tmp_path):
        t = Target([[0.25, 0.5, 0.125, 0.5], [0.75, 0.25, 0.5, 0.25]], [2, 0])
        assert t.to_text().splitlines()[0] == "2 0.250000 0.500000 0.125000 0.500000"
        t.save(tmp_path / "t.txt")
        back = Target.load(tmp_path / "t.txt")
        np.testing.assert_array_equal(back.boxes, t.boxes)
        np.testing.assert_array_equal(back.classes, t.classes)
        assert len(Target.from_text("")) == 0


class TestHead:
    def test_zero_weights(self, rng):
        out, _ = head_forward(rng.normal(size=(16, 4, 4)), np.zeros((8, 16)), np.zeros(8), 4)
        np.testing.assert_array_equal(out, 0.0)
        np.testing.assert_array_equal(decode_cells(out)[..., 0], 0.5)

    def test_desk_shape(self, rng):
        out, _ = head_forward(rng.normal(size=(128, 4, 4)), rng.normal(size=(8, 128)),
                              np.zeros(8), 4)
        assert out.shape == (4, 4, 8)

    def test_grid_too_large(self, rng):
        with pytest.raises(ValueError):
            head_forward(rng.normal(size=(4, 3, 3)), np.zeros((8, 4)), np.zeros(8), 4)

    def test_responsible_cell(self):
        assert responsible_cell(0.3, 0.8, 4) == (3, 1)
        assert responsible_cell(1.0, 1.0, 4) == (3, 3)
        _, resp = encode_target(Target([[0.3, 0.8, 0.2, 0.2]], [1]), 4)
        assert np.argwhere(resp).tolist() == [[3, 1]]

    def test_larger_box_wins(self):
        t = Target([[0.1, 0.1, 0.1, 0.1], [0.2, 0.2, 0.3, 0.3]], [0, 2])
        enc, resp = encode_target(t, 2)
        assert resp.sum() == 1 and enc[0, 0, 7] == 1.0 and enc[0, 0, 5] == 0.0

    def test_gradcheck(self):
        assert check_head().passed


class TestLossObj:
    def test_exact_prediction_is_zero(self):
        t = Target([[0.3, 0.6, 0.25, 0.16]], [2])
        pred = np.full((2, 2, 8), -40.0)
        pred[1, 0, 0] = 40.0
        pred[1, 0, 1] = logit(0.3 * 2 - 0)
        pred[1, 0, 2] = logit(0.6 * 2 - 1)
        pred[1, 0, 3] = logit(0.25)
        pred[1, 0, 4] = logit(0.16)
        pred[1, 0, 7] = 40.0
        loss, grad = loss_obj_with_grad(pred, t)
        assert loss == pytest.approx(0.0, abs=1e-20)
        assert np.all(np.isfinite(grad))

    def test_empty_target(self):
        assert loss_obj(np.full((3, 3, 8), -1e3), Target.empty()) == 0.0

    def test_hand_computation(self):
        t = Target([[0.3, 0.2, 0.36, 0.25]], [1])
        pred = np.zeros((2, 2, 8))
        pred[0, 0, :] = [0.0, 0.0, math.log(3), 0.0, 0.0, 0.0, 0.0, math.log(3)]
        pred[1, 1, 0] = 2.0
        # responsible cell (0, 0): targets x 0.6, y 0.4, sqrt w 0.6, sqrt h 0.5, class 1
        obj = (0.5 - 1.0) ** 2
        coord = (0.5 - 0.6) ** 2 + (0.75 - 0.4) ** 2 + (math.sqrt(0.5) - 0.6) ** 2 \
            + (math.sqrt(0.5) - 0.5) ** 2
        cls = 0.5 ** 2 + (0.5 - 1.0) ** 2 + 0.75 ** 2
        noobj = 2 * 0.5 ** 2 + sig(2.0) ** 2
        expect = obj + LAMBDA_COORD * coord + cls + LAMBDA_NOOBJ * noobj
        assert loss_obj(pred, t) == pytest.approx(expect, rel=1e-12)

    @given(hnp.arrays(np.float64, (3, 3, 8), elements=st.floats(-8, 8)))
    def test_non_negative(self, pred):
        assert loss_obj(pred, Target([[0.5, 0.5, 0.3, 0.4]], [0])) >= 0.0

    def test_gradcheck(self):
        assert check_loss_obj().passed


class TestLossRec:
    def test_equal(self, rng):
        z = rng.uniform(size=(4, 4, 3))
        assert loss_rec(z, z) == (0.0, 0.0)

    def test_uniform_difference(self):
        l1, mse = loss_rec(np.full((2, 2, 3), 0.75), np.full((2, 2, 3), 0.25))
        assert (l1, mse) == (0.5, 0.25)
        assert LossBreakdown(0.0, l1, mse).l_reg == 0.75

    def test_elementwise_oracle(self, rng):
        z, c = rng.uniform(size=(2, 5, 4, 3))
        diffs = [float(a) - float(b) for a, b in zip(z.ravel(), c.ravel())]
        l1, mse = loss_rec(z, c)
        assert l1 == pytest.approx(math.fsum(abs(d) for d in diffs) / len(diffs), abs=1e-12)
        assert mse == pytest.approx(math.fsum(d * d for d in diffs) / len(diffs), abs=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            loss_rec(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))

    def test_gradcheck(self):
        assert check_loss_rec().passed


class TestLossTotal:
    def test_default_alpha(self):
        assert DEFAULT_ALPHA == 1e-4

    def test_values(self):
        assert loss_total(1.5, 0.0) == 1.5
        assert loss_total(2.0, 10.0, 0.1) == pytest.approx(3.0)
        with pytest.raises(ValueError):
            loss_total(1.0, 1.0, -0.1)

    @given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1))
    def test_breakdown_invariants(self, l_obj, l1, mse, alpha):
        b = LossBreakdown(l_obj, l1, mse, alpha)
        assert b.l_reg == l1 + mse
        assert b.l_total == l_obj + alpha * b.l_reg >= b.l_obj


def test_decode_detections_nms():
    pred = np.full((2, 2, 8), -10.0)
    pred[0, 0, 0] = pred[0, 1, 0] = 5.0
    pred[0, 0, 5] = pred[0, 1, 5] = 5.0
    pred[0, :, 3:5] = 5.0
    pred[0, 0, 1], pred[0, 1, 1] = 10.0, -10.0  # both centres at the shared cell edge
    dets = decode_detections(pred)
    assert len([d for d in dets if d.confidence > 0.5]) == 1
