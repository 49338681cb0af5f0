import numpy as np
import pytest
from hypothesis import given, strategies as st

from gdip.encoder import (EncoderConfig, avg_pool, avg_pool_vjp, conv3x3, conv_layer,
                          encoder_forward, encoder_forward_cached, encoder_vjp, init_encoder,
                          pooled_size)
from gdip.gradcheck import check_encoder


class TestShapes:
    def test_layer0_desk(self, rng):
        w = rng.normal(size=(8, 3, 3, 3))
        assert conv_layer(rng.normal(size=(3, 128, 128)), w, np.zeros(8)).shape == (8, 64, 64)

    def test_full_scale_channels(self):
        cfg = EncoderConfig.full_scale()
        assert cfg.channels(4) == 1024
        assert cfg.embedding_dim == 256

    def test_desk_config(self, rng):
        cfg = EncoderConfig()
        taps = encoder_forward(cfg, init_encoder(cfg, rng), rng.uniform(size=(128, 128, 3)))
        assert taps.taps[4].shape == (1, 128, 4, 4)
        assert taps.embedding.shape == (1, 64)

    @given(st.integers(1, 40), st.integers(1, 4))
    def test_shape_arithmetic(self, size, base):
        cfg = EncoderConfig(size, base, embedding_dim=3)
        taps = encoder_forward(cfg, init_encoder(cfg, np.random.default_rng(0)),
                               np.zeros((size, size, 3)))
        for layer, t in enumerate(taps.taps):
            assert t.shape == (1, cfg.channels(layer), cfg.spatial(layer), cfg.spatial(layer))
            if layer:
                assert cfg.channels(layer) == 2 * cfg.channels(layer - 1)
        assert cfg.spatial(0) == pooled_size(size) == -(-size // 2)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            conv_layer(rng.normal(size=(4, 8, 8)), rng.normal(size=(8, 3, 3, 3)), np.zeros(8))

    def test_layer_count_fixed(self):
        with pytest.raises(ValueError):
            EncoderConfig(num_layers=4)


class TestForward:
    def test_delta_kernel(self, rng):
        x = rng.uniform(size=(1, 3, 6, 6))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out, _ = conv3x3(x, w, np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_zero_image_gives_fc_bias(self, rng):
        cfg = EncoderConfig(32, 2, embedding_dim=5)
        params = init_encoder(cfg, rng)
        params["enc.fc.b"] = rng.normal(size=5)
        taps = encoder_forward(cfg, params, np.zeros((32, 32, 3)))
        np.testing.assert_array_equal(taps.embedding[0], params["enc.fc.b"])

    def test_deterministic(self, rng):
        cfg = EncoderConfig(24, 2, embedding_dim=4)
        params = init_encoder(cfg, rng)
        img = rng.uniform(size=(24, 24, 3))
        a, b = encoder_forward(cfg, params, img), encoder_forward(cfg, params, img)
        for x, y in zip(a.taps, b.taps):
            assert np.array_equal(x, y)
        assert np.array_equal(a.embedding, b.embedding)

    def test_batch_matches_single(self, rng):
        cfg = EncoderConfig(16, 2, embedding_dim=4)
        params = init_encoder(cfg, rng)
        imgs = rng.uniform(size=(3, 16, 16, 3))
        batch = encoder_forward(cfg, params, imgs)
        for i in range(3):
            np.testing.assert_allclose(encoder_forward(cfg, params, imgs[i]).embedding[0],
                                       batch.embedding[i], atol=1e-12)


class TestVjp:
    def test_gradcheck(self):
        assert check_encoder().passed

    def test_zero_upstream(self, rng):
        cfg = EncoderConfig(16, 2, embedding_dim=4)
        params = init_encoder(cfg, rng)
        _, cache = encoder_forward_cached(cfg, params, rng.uniform(size=(16, 16, 3)))
        grads, g_img = encoder_vjp(params, cache, g_embedding=np.zeros((1, 4)))
        assert not np.any(g_img)
        assert all(not np.any(g) for g in grads.values())

    def test_avg_pool_spreads_evenly(self):
        shape = (1, 1, 6, 6)
        g = np.zeros((1, 1, 3, 3))
        g[0, 0, 1, 1] = 1.0  # interior window centred at (2, 2)
        gx = avg_pool_vjp(g, shape)[0, 0]
        np.testing.assert_allclose(gx[1:4, 1:4], 1 / 9)
        assert gx.sum() == pytest.approx(1.0)
        corner = np.zeros((1, 1, 3, 3))
        corner[0, 0, 0, 0] = 1.0  # window clipped to 2x2 by the padding
        np.testing.assert_allclose(avg_pool_vjp(corner, shape)[0, 0, :2, :2], 1 / 4)

    def test_avg_pool_adjoint(self, rng):
        x = rng.normal(size=(2, 3, 7, 5))
        g = rng.normal(size=avg_pool(x).shape)
        assert np.sum(avg_pool(x) * g) == pytest.approx(np.sum(x * avg_pool_vjp(g, x.shape)))
