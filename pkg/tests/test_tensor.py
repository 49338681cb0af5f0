import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gdip.ipops import OPS, IpKind
from gdip.tensor import (DiffOp, as_image, count_ops, from_uint8, grad_check, normalize_minmax,
                         normalize_minmax_vjp, read_image, read_ppm, tick, to_uint8, write_image,
                         write_ppm)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
tensors = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                     elements=finite)


class TestNormalize:
    def test_linear_map(self):
        np.testing.assert_allclose(normalize_minmax([0.2, 0.45, 0.7]), [0.0, 0.5, 1.0])

    def test_constant_maps_to_zero(self):
        np.testing.assert_array_equal(normalize_minmax([0.3, 0.3]), [0.0, 0.0])

    def test_unit_span_unchanged(self):
        t = np.array([0.0, 0.25, 1.0, 0.6])
        np.testing.assert_array_equal(normalize_minmax(t), t)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            normalize_minmax([0.0, np.nan])
        with pytest.raises(ValueError):
            normalize_minmax([])

    @given(tensors)
    def test_idempotent(self, t):
        once = normalize_minmax(t)
        if np.ptp(t) > 1e-6:
            np.testing.assert_allclose(normalize_minmax(once), once, atol=1e-12)

    @given(tensors, st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariance(self, t, a, b):
        if np.ptp(t) > 1e-3:
            np.testing.assert_allclose(normalize_minmax(a * t + b), normalize_minmax(t), atol=1e-9)

    @given(tensors)
    def test_output_range(self, t):
        out = normalize_minmax(t)
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-15


class TestNormalizeVjp:
    def test_scaling(self):
        t = np.array([0.1, 0.3, 0.6])
        np.testing.assert_allclose(normalize_minmax_vjp(t, np.ones(3)), 2.0)

    def test_degenerate_zero(self):
        np.testing.assert_array_equal(normalize_minmax_vjp(np.full(4, 0.2), np.ones(4)), 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            normalize_minmax_vjp(np.zeros(3), np.zeros(4))

    def test_matches_stop_gradient_fd(self, rng):
        t = rng.uniform(size=(4, 4))
        bounds = (t.min(), t.max())
        op = DiffOp(lambda x: normalize_minmax(x, bounds),
                    lambda g, x: [normalize_minmax_vjp(x, g, bounds)], "N")
        assert grad_check(op, [t], tol=1e-6).passed


class TestGradCheck:
    def test_gamma_op(self, rng):
        img = rng.uniform(0.1, 0.9, (8, 8, 3))
        op = OPS[IpKind.GAMMA]
        const = op.forward(img, [1.7])[1]["const"]
        diff = DiffOp(lambda x, p: op.forward(x, p, const)[0],
                      lambda g, x, p: op.backward(g, op.forward(x, p, const)[1]), "gamma")
        assert grad_check(diff, [img, [1.7]]).max_rel_error < 1e-4

    def test_identity_exact(self, rng):
        img = rng.uniform(size=(5, 5, 3))
        kind = OPS[IpKind.IDENTITY]
        g = rng.standard_normal(img.shape)
        g_img, g_p = kind.backward(g, kind.forward(img)[1])
        assert np.array_equal(g_img, g) and g_p.size == 0
        op = DiffOp(lambda x: kind.forward(x)[0], lambda g, x: [kind.backward(g, None)[0]],
                    "identity")
        # analytic side is exact; what remains is roundoff in the probe sums
        assert grad_check(op, [img]).max_rel_error < 1e-8

    def test_sharpen_half(self, rng):
        img = rng.uniform(0.3, 0.7, (8, 8, 3))
        op = OPS[IpKind.SHARPEN]
        const = op.forward(img, [0.5])[1]["const"]
        diff = DiffOp(lambda x, p: op.forward(x, p, const)[0],
                      lambda g, x, p: op.backward(g, op.forward(x, p, const)[1]), "sharpen")
        assert grad_check(diff, [img, [0.5]]).max_rel_error < 1e-4

    def test_detects_wrong_gradient(self, rng):
        op = DiffOp(lambda x: x ** 2, lambda g, x: [g * x], "wrong")
        assert not grad_check(op, [rng.uniform(1, 2, 5)]).passed

    def test_rejects_nondeterminism(self):
        state = {"n": 0}

        def fwd(x):
            state["n"] += 1
            return x * state["n"]

        with pytest.raises(RuntimeError):
            grad_check(DiffOp(fwd, lambda g, x: [g]), [np.ones(2)])

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(DiffOp(lambda x: x, lambda g, x: [g]), [np.ones(2)], step=0.0)


class TestImage:
    def test_as_image_validates(self):
        with pytest.raises(ValueError):
            as_image(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            as_image(np.full((2, 2, 3), 1.5))
        np.testing.assert_array_equal(as_image(np.full((2, 2, 3), 1.5), clip=True), 1.0)

    def test_uint8_conversion(self):
        np.testing.assert_array_equal(to_uint8(np.array([-0.1, 0.5, 1.2])), [0, 128, 255])
        assert from_uint8(np.array([255]))[0] == 1.0

    def test_ppm_roundtrip_bitexact(self, tmp_path, rng):
        raw = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        path = tmp_path / "a.ppm"
        write_ppm(path, from_uint8(raw))
        np.testing.assert_array_equal(to_uint8(read_ppm(path)), raw)
        assert path.read_bytes().startswith(b"P6\n7 5\n255\n")

    def test_ppm_header_comments(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# comment\n1 1\n255\n" + bytes([10, 20, 30]))
        np.testing.assert_array_equal(to_uint8(read_ppm(path))[0, 0], [10, 20, 30])

    def test_png_roundtrip(self, tmp_path, rng):
        img = from_uint8(rng.integers(0, 256, (4, 4, 3), dtype=np.uint8))
        write_image(tmp_path / "a.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)


def test_count_ops_scoped():
    tick("outside")
    with count_ops() as c:
        tick("x")
        tick("x", 2)
    assert c == {"x": 3}
