"""Five-layer convolutional vision encoder with per-layer taps.

Each layer is a 3x3 stride-1 convolution (zero padding 1), leaky ReLU (slope
0.1) and 3x3 stride-2 average pooling (padding 1, padded taps excluded from
the mean).  Channels double from layer to layer.  The last map is globally
average pooled and projected to the embedding by a fully connected layer.

All functions work on batches shaped ``(B, C, H, W)``; images enter as
``(B, H, W, 3)`` or a single ``(H, W, 3)``.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import tick

LEAKY_SLOPE = 0.1
NUM_LAYERS = 5


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 128
    base_channels: int = 8
    num_layers: int = NUM_LAYERS
    embedding_dim: int = 64

    def __post_init__(self):
        if self.num_layers != NUM_LAYERS:
            raise ValueError(f"the encoder has exactly {NUM_LAYERS} layers")
        if min(self.input_size, self.base_channels, self.embedding_dim) < 1:
            raise ValueError("encoder sizes must be positive")

    def channels(self, layer: int) -> int:
        return self.base_channels * 2 ** layer

    def spatial(self, layer: int) -> int:
        size = self.input_size
        for _ in range(layer + 1):
            size = pooled_size(size)
        return size

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(input_size=448, base_channels=64, embedding_dim=256)


def pooled_size(n: int) -> int:
    return (n - 1) // 2 + 1


@dataclasses.dataclass
class EncoderTaps:
    taps: list[np.ndarray]  # C1..C5, each (B, C_l, H_l, W_l)
    embedding: np.ndarray | None  # (B, embedding_dim)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def conv3x3(x, w, b):
    """3x3 stride-1 convolution with zero padding 1.  Returns (out, cols)."""
    bsz, c, h, wd = x.shape
    o = w.shape[0]
    if w.shape[1] != c:
        raise ValueError(f"weights expect {w.shape[1]} input channels, got {c}")
    tick("conv3x3")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(bsz * h * wd, c * 9)
    out = cols @ w.reshape(o, -1).T + b
    return out.reshape(bsz, h, wd, o).transpose(0, 3, 1, 2), cols


def conv3x3_vjp(g, x_shape, cols, w, input_grad=True):
    bsz, c, h, wd = x_shape
    o = w.shape[0]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    g_w = (gm.T @ cols).reshape(w.shape)
    g_b = gm.sum(axis=0)
    if not input_grad:
        return None, g_w, g_b
    gcols = (gm @ w.reshape(o, -1)).reshape(bsz, h, wd, c, 3, 3)
    gxp = np.zeros((bsz, c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            gxp[:, :, i:i + h, j:j + wd] += gcols[..., i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, 1:-1, 1:-1], g_w, g_b


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_vjp(g, x):
    return np.where(x > 0, g, LEAKY_SLOPE * g)


def _pool_counts(h, w):
    ones = np.pad(np.ones((h, w)), 1)
    return sliding_window_view(ones, (3, 3))[::2, ::2].sum(axis=(-1, -2))


def avg_pool(x):
    """3x3 stride-2 average pooling, padding 1, mean over in-bounds taps only."""
    tick("avg_pool")
    h, w = x.shape[-2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    sums = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2].sum(axis=(-1, -2))
    return sums / _pool_counts(h, w)


def avg_pool_vjp(g, x_shape):
    bsz, c, h, w = x_shape
    ho, wo = g.shape[-2:]
    share = g / _pool_counts(h, w)
    gxp = np.zeros((bsz, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            gxp[:, :, i:i + 2 * ho - 1:2, j:j + 2 * wo - 1:2] += share
    return gxp[:, :, 1:-1, 1:-1]


def global_avg_pool(x):
    tick("global_avg_pool")
    return x.mean(axis=(-1, -2))


def global_avg_pool_vjp(g, x_shape):
    h, w = x_shape[-2:]
    return np.broadcast_to(g[..., None, None] / (h * w), x_shape).copy()


def linear(x, w, b):
    tick("linear")
    return x @ w.T + b


def linear_vjp(g, x, w):
    return g @ w, g.T @ x, g.sum(axis=0)


def conv_layer(x, w, b):
    """conv3x3 -> leaky ReLU -> avg_pool on a ``(B, C, H, W)`` map (or ``(C, H, W)``)."""
    single = x.ndim == 3
    out, cache = _conv_layer_forward(x[None] if single else x, w, b)
    return out[0] if single else out


def _conv_layer_forward(x, w, b):
    pre, cols = conv3x3(x, w, b)
    act = leaky_relu(pre)
    out = avg_pool(act)
    return out, (x.shape, cols, pre, act.shape)


def _conv_layer_backward(g, cache, w, input_grad=True):
    x_shape, cols, pre, act_shape = cache
    g_act = avg_pool_vjp(g, act_shape)
    g_pre = leaky_relu_vjp(g_act, pre)
    return conv3x3_vjp(g_pre, x_shape, cols, w, input_grad)


# ---------------------------------------------------------------------------
# encoder / backbone
# ---------------------------------------------------------------------------


def init_conv_stack(cfg: EncoderConfig, rng: np.random.Generator, prefix: str,
                    embed: bool = True) -> dict[str, np.ndarray]:
    """Kaiming-uniform fan-in initialization; zero biases."""
    params = {}
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
    c_in = 3
    for layer in range(cfg.num_layers):
        c_out = cfg.channels(layer)
        bound = gain * math.sqrt(3.0 / (c_in * 9))
        params[f"{prefix}conv{layer}.w"] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
        params[f"{prefix}conv{layer}.b"] = np.zeros(c_out)
        c_in = c_out
    if embed:
        bound = math.sqrt(3.0 / c_in)
        params[f"{prefix}fc.w"] = rng.uniform(-bound, bound, (cfg.embedding_dim, c_in))
        params[f"{prefix}fc.b"] = np.zeros(cfg.embedding_dim)
    return params


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc.") -> dict:
    return init_conv_stack(cfg, rng, prefix, embed=True)


def _as_batch(img):
    img = np.asarray(img, dtype=np.float64)
    single = img.ndim == 3
    batch = img[None] if single else img
    if batch.ndim != 4 or batch.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {img.shape}")
    return batch.transpose(0, 3, 1, 2), single


def conv_stack_forward(params, imgs, prefix: str, num_layers: int = NUM_LAYERS,
                       embed: bool = True):
    """Batched forward; returns ``(EncoderTaps, cache)``."""
    x, single = _as_batch(imgs)
    taps, caches = [], []
    for layer in range(num_layers):
        x, c = _conv_layer_forward(x, params[f"{prefix}conv{layer}.w"],
                                   params[f"{prefix}conv{layer}.b"])
        taps.append(x)
        caches.append(c)
    emb = pooled = None
    if embed:
        pooled = global_avg_pool(x)
        emb = linear(pooled, params[f"{prefix}fc.w"], params[f"{prefix}fc.b"])
    cache = {"prefix": prefix, "layers": caches, "pooled": pooled, "last_shape": x.shape,
             "num_layers": num_layers, "embed": embed, "single": single}
    return EncoderTaps(taps, emb), cache


def conv_stack_backward(params, cache, g_taps=None, g_embedding=None, input_grad=True):
    """Reverse pass.  ``g_taps`` holds per-layer upstream gradients (or None).

    Returns ``(grads, g_img)`` where ``g_img`` has the input image layout
    (``None`` when ``input_grad`` is false).
    """
    prefix, n = cache["prefix"], cache["num_layers"]
    grads = {}
    g = np.zeros(cache["last_shape"])
    if cache["embed"]:
        kw, kb = f"{prefix}fc.w", f"{prefix}fc.b"
        if g_embedding is None:
            grads[kw] = np.zeros_like(params[kw])
            grads[kb] = np.zeros_like(params[kb])
        else:
            g_emb = np.asarray(g_embedding, dtype=np.float64).reshape(-1, params[kw].shape[0])
            g_pooled, grads[kw], grads[kb] = linear_vjp(g_emb, cache["pooled"], params[kw])
            g = g + global_avg_pool_vjp(g_pooled, cache["last_shape"])
    g_taps = g_taps or [None] * n
    for layer in reversed(range(n)):
        if g_taps[layer] is not None:
            g = g + np.asarray(g_taps[layer]).reshape(g.shape)
        w = params[f"{prefix}conv{layer}.w"]
        g, grads[f"{prefix}conv{layer}.w"], grads[f"{prefix}conv{layer}.b"] = \
            _conv_layer_backward(g, cache["layers"][layer], w, input_grad or layer > 0)
    if not input_grad:
        return grads, None
    g_img = g.transpose(0, 2, 3, 1)
    return grads, (g_img[0] if cache["single"] else g_img)


def encoder_forward(cfg: EncoderConfig, params, img, prefix: str = "enc."):
    """Run the encoder on one image or a batch; returns :class:`EncoderTaps`."""
    taps, _ = conv_stack_forward(params, img, prefix, cfg.num_layers, embed=True)
    return taps


def encoder_forward_cached(cfg: EncoderConfig, params, img, prefix: str = "enc."):
    return conv_stack_forward(params, img, prefix, cfg.num_layers, embed=True)


def encoder_vjp(params, cache, g_taps=None, g_embedding=None, input_grad=True):
    return conv_stack_backward(params, cache, g_taps, g_embedding, input_grad)
