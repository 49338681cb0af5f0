"""Multi-level GDIP: a chain of GDIP blocks, one per encoder layer.

The encoder (convolutional layers only, no embedding head) runs once on the
input image.  Level ``l`` projects the globally pooled tap ``C_l`` to an
embedding and enhances the previous level's output:

    x_0 = img,   x_l = GDIP_l(x_{l-1}, W_l gap(C_l) + b_l),   z = x_L
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from .block import (GateReport, GdipConfig, gdip_forward_cached, gdip_vjp, init_gdip_params,
                    module_grads_to_dict, modules_from_params)
from .encoder import (EncoderConfig, conv_stack_backward, conv_stack_forward, global_avg_pool,
                      global_avg_pool_vjp, init_conv_stack, linear, linear_vjp)


@dataclasses.dataclass(frozen=True)
class MgdipConfig:
    encoder: EncoderConfig = EncoderConfig()
    gdip: GdipConfig = GdipConfig()
    levels: tuple[int, ...] = (0, 1, 2, 3, 4)  # encoder taps feeding GDIP_1..GDIP_L
    level_ops: tuple[tuple, ...] | None = None  # optional per-level op lists

    def __post_init__(self):
        levels = tuple(int(t) for t in self.levels)
        if not levels:
            raise ValueError("MGDIP needs at least one level")
        if any(t < 0 or t >= self.encoder.num_layers for t in levels):
            raise ValueError(f"tap indices must lie in [0, {self.encoder.num_layers})")
        object.__setattr__(self, "levels", levels)
        if self.level_ops is not None and len(self.level_ops) != len(levels):
            raise ValueError("level_ops must give one op list per level")

    def block(self, i: int) -> GdipConfig:
        if self.level_ops is None:
            return self.gdip
        return dataclasses.replace(self.gdip, ops=tuple(self.level_ops[i]))


def level_prefix(i: int, root: str = "mgdip") -> str:
    return f"{root}{i}."


def init_level_params(cfg: MgdipConfig, rng: np.random.Generator, tap_channels: Sequence[int],
                      root: str = "mgdip") -> dict[str, np.ndarray]:
    """Projection and GDIP parameters for every level (encoder excluded)."""
    params = {}
    for i, tap in enumerate(cfg.levels):
        pre = level_prefix(i, root)
        c = tap_channels[tap]
        bound = math.sqrt(3.0 / c)
        params[f"{pre}proj.w"] = rng.uniform(-bound, bound, (cfg.gdip.embedding_dim, c))
        params[f"{pre}proj.b"] = np.zeros(cfg.gdip.embedding_dim)
        params.update(init_gdip_params(cfg.block(i), rng, prefix=pre))
    return params


def init_mgdip(cfg: MgdipConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = init_conv_stack(cfg.encoder, rng, prefix="enc.", embed=False)
    channels = [cfg.encoder.channels(l) for l in range(cfg.encoder.num_layers)]
    params.update(init_level_params(cfg, rng, channels))
    return params


def chain_forward(cfg: MgdipConfig, params, img, taps, root: str = "mgdip", const=None):
    """Run the GDIP chain on one image given its encoder taps (each ``(C, H, W)``).

    Returns ``(z, reports, cache)``.
    """
    const = const or [None] * len(cfg.levels)
    x = np.asarray(img, dtype=np.float64)
    reports, levels = [], []
    for i, tap in enumerate(cfg.levels):
        pre = level_prefix(i, root)
        pooled = global_avg_pool(taps[tap])
        e = linear(pooled, params[f"{pre}proj.w"], params[f"{pre}proj.b"])
        block_cfg = cfg.block(i)
        x, rep, c = gdip_forward_cached(block_cfg, modules_from_params(block_cfg, params, pre),
                                        x, e, const[i])
        reports.append(rep)
        levels.append({"pooled": pooled, "tap_shape": taps[tap].shape, "gdip": c})
    return x, reports, {"levels": levels, "root": root,
                        "const": [lv["gdip"]["const"] for lv in levels]}


def chain_backward(cfg: MgdipConfig, params, cache, g_z, n_taps: int):
    """Returns ``(grads, g_img, g_taps)``; ``g_taps`` is indexed like the encoder taps."""
    grads: dict[str, np.ndarray] = {}
    g_taps: list = [None] * n_taps
    g = g_z
    for i in reversed(range(len(cfg.levels))):
        pre = level_prefix(i, cache["root"])
        lv = cache["levels"][i]
        gg = gdip_vjp(lv["gdip"], g)
        grads.update(module_grads_to_dict(cfg.block(i), gg.modules, prefix=pre))
        g_pooled, grads[f"{pre}proj.w"], grads[f"{pre}proj.b"] = linear_vjp(
            gg.embedding[None], lv["pooled"][None], params[f"{pre}proj.w"])
        g_tap = global_avg_pool_vjp(g_pooled[0], lv["tap_shape"])
        tap = cfg.levels[i]
        g_taps[tap] = g_tap if g_taps[tap] is None else g_taps[tap] + g_tap
        g = gg.img
    return grads, g, g_taps


def mgdip_forward_cached(cfg: MgdipConfig, params, img, const=None):
    img = np.asarray(img, dtype=np.float64)
    enc, enc_cache = conv_stack_forward(params, img[None], "enc.", cfg.encoder.num_layers,
                                        embed=False)
    taps = [t[0] for t in enc.taps]
    z, reports, chain = chain_forward(cfg, params, img, taps, const=const)
    return z, reports, {"enc": enc_cache, "chain": chain, "const": chain["const"]}


def mgdip_forward(cfg: MgdipConfig, params, img) -> tuple[np.ndarray, list[GateReport]]:
    """Enhance ``img`` progressively; returns ``(z, one GateReport per level)``."""
    z, reports, _ = mgdip_forward_cached(cfg, params, img)
    return z, reports


def mgdip_vjp(cfg: MgdipConfig, params, cache, g_z):
    """Gradients for every parameter (encoder included) and the input image."""
    n_taps = cfg.encoder.num_layers
    grads, g_img, g_taps = chain_backward(cfg, params, cache["chain"], g_z, n_taps)
    enc_grads, g_img_enc = conv_stack_backward(params, cache["enc"],
                                               [None if t is None else t[None] for t in g_taps])
    grads.update(enc_grads)
    return grads, g_img + g_img_enc[0]
