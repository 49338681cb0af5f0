"""Differentiable image-processing operations.

Every operation comes as a forward/backward pair working on a single
``(H, W, 3)`` image and a flat parameter vector in its valid range:

    out, cache = OPS[kind].forward(img, params)
    g_img, g_params = OPS[kind].backward(g_out, cache)

``forward`` accepts ``const`` to freeze the quantities that are treated as
constants by the backward pass (atmospheric light, dark channel, luminance
extremes) together with the active pieces of every piecewise map (clamp
masks, tone segments, the transmission floor).  Passing the
``cache["const"]`` of an earlier call reproduces the exact smooth surrogate
the backward pass differentiates, which is what the finite-difference checks
evaluate.

Outputs are clamped to ``[0, 1]``; clamped pixels get zero gradient.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from typing import Callable

import numpy as np
from scipy import ndimage

from .tensor import DEGENERATE_RANGE, minmax_range

TONE_SEGMENTS = 8
GAMMA_EPS = 1e-8
LUM_EPS = 1e-6
LUM_WEIGHTS = np.array([0.27, 0.67, 0.06])
DEFOG_PATCH = 7
DEFOG_T_FLOOR = 0.1
ATMOS_FRACTION = 0.001


class IpKind(str, enum.Enum):
    TONE = "T"
    CONTRAST = "C"
    SHARPEN = "S"
    DEFOG = "DF"
    GAMMA = "G"
    WHITE_BALANCE = "WB"
    IDENTITY = "I"

    @classmethod
    def parse(cls, name: "str | IpKind") -> "IpKind":
        if isinstance(name, IpKind):
            return name
        key = str(name).strip()
        for kind in cls:
            if key.upper() in (kind.value, kind.name) or key.lower() == kind.label.lower():
                return kind
        raise ValueError(f"unknown IP operation {name!r}")

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    IpKind.TONE: "Tone",
    IpKind.CONTRAST: "Contrast",
    IpKind.SHARPEN: "Sharpen",
    IpKind.DEFOG: "Defog",
    IpKind.GAMMA: "Gamma",
    IpKind.WHITE_BALANCE: "WhiteBalance",
    IpKind.IDENTITY: "Identity",
}

ALL_KINDS: tuple[IpKind, ...] = tuple(IpKind)


def _clamp(raw: np.ndarray, frozen=None) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Clamp to [0, 1].  ``frozen = (mask, fixed)`` keeps an earlier active set."""
    if frozen is None:
        mask = (raw >= 0.0) & (raw <= 1.0)
        fixed = np.clip(raw, 0.0, 1.0)
    else:
        mask, fixed = frozen
    return np.where(mask, raw, fixed), mask, (mask, fixed)


def _part(const, key):
    return None if const is None else const[key]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# raw linear-layer outputs -> parameters in range
# ---------------------------------------------------------------------------


def _log_range(raw, log_half_width):
    return np.exp(np.tanh(raw) * log_half_width)


def _log_range_vjp(raw, g, log_half_width):
    th = np.tanh(raw)
    return g * np.exp(th * log_half_width) * log_half_width * (1.0 - th * th)


_RANGE_MAPS: dict[IpKind, tuple[Callable, Callable]] = {
    IpKind.TONE: (
        lambda r: np.logaddexp(0.0, r) + 1e-3,
        lambda r, g: g * _sigmoid(r),
    ),
    IpKind.CONTRAST: (
        _sigmoid,
        lambda r, g: g * _sigmoid(r) * (1.0 - _sigmoid(r)),
    ),
    IpKind.SHARPEN: (
        lambda r: 2.0 * _sigmoid(r),
        lambda r, g: 2.0 * g * _sigmoid(r) * (1.0 - _sigmoid(r)),
    ),
    IpKind.DEFOG: (
        lambda r: 0.1 + 0.9 * _sigmoid(r),
        lambda r, g: 0.9 * g * _sigmoid(r) * (1.0 - _sigmoid(r)),
    ),
    IpKind.GAMMA: (
        lambda r: _log_range(r, math.log(3.0)),
        lambda r, g: _log_range_vjp(r, g, math.log(3.0)),
    ),
    IpKind.WHITE_BALANCE: (
        lambda r: _log_range(r, math.log(2.0)),
        lambda r, g: _log_range_vjp(r, g, math.log(2.0)),
    ),
    IpKind.IDENTITY: (
        lambda r: np.zeros(0),
        lambda r, g: np.zeros(0),
    ),
}

PARAM_COUNTS: dict[IpKind, int] = {
    IpKind.TONE: TONE_SEGMENTS,
    IpKind.CONTRAST: 1,
    IpKind.SHARPEN: 1,
    IpKind.DEFOG: 1,
    IpKind.GAMMA: 1,
    IpKind.WHITE_BALANCE: 3,
    IpKind.IDENTITY: 0,
}


def map_raw_params(kind, raw) -> np.ndarray:
    """Map unconstrained linear-layer outputs to the op's parameter range."""
    kind = IpKind.parse(kind)
    raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    if raw.shape != (PARAM_COUNTS[kind],):
        raise ValueError(f"{kind.label} expects {PARAM_COUNTS[kind]} raw values, got {raw.shape}")
    return _RANGE_MAPS[kind][0](raw)


def map_raw_params_vjp(kind, raw, g_params) -> np.ndarray:
    kind = IpKind.parse(kind)
    raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    return _RANGE_MAPS[kind][1](raw, np.asarray(g_params, dtype=np.float64))


# ---------------------------------------------------------------------------
# tone curve
# ---------------------------------------------------------------------------


def _tone_forward(img, t, const=None):
    t = np.asarray(t, dtype=np.float64)
    k = t.size
    if k < 2:
        raise ValueError("tone curve needs at least two segments")
    if np.any(t <= 0):
        raise ValueError("tone curve weights must be positive")
    scaled = k * img[..., None] - np.arange(k)
    if const is None:
        active = (scaled > 0.0) & (scaled < 1.0)
        fixed = np.clip(scaled, 0.0, 1.0)
    else:
        active, fixed = const["seg"]
    seg = np.where(active, scaled, fixed)
    total = t.sum()
    out = seg @ t / total
    return out, {"seg": seg, "active": active, "t": t, "out": out,
                 "const": {"seg": (active, fixed)}}


def _tone_backward(g, c):
    t, total = c["t"], c["t"].sum()
    k = t.size
    g_img = g * (c["active"] @ t) * (k / total)
    g_t = np.tensordot(g, c["seg"], axes=g.ndim) / total - np.sum(g * c["out"]) / total
    return g_img, g_t


def apply_tone(img, t) -> np.ndarray:
    return _tone_forward(np.asarray(img, dtype=np.float64), t)[0]


# ---------------------------------------------------------------------------
# contrast
# ---------------------------------------------------------------------------


def luminance(img):
    return np.asarray(img, dtype=np.float64) @ LUM_WEIGHTS


def _contrast_forward(img, p, const=None):
    alpha = float(np.ravel(p)[0])
    lum = luminance(img)
    lo, hi = minmax_range(lum) if const is None else const["lum"]
    rng = hi - lo
    if rng < DEGENERATE_RANGE:
        q = np.zeros_like(lum)
        dq = np.zeros_like(lum)
    else:
        q = (lum - lo) / (rng * (lum + LUM_EPS))
        dq = (lo + LUM_EPS) / (rng * (lum + LUM_EPS) ** 2)
    enhanced = img * q[..., None]
    out, mask, clamp = _clamp(alpha * enhanced + (1.0 - alpha) * img, _part(const, "clamp"))
    return out, {"img": img, "alpha": alpha, "q": q, "dq": dq, "en": enhanced,
                 "mask": mask, "const": {"lum": (lo, hi), "clamp": clamp}}


def _contrast_backward(g, c):
    g = g * c["mask"]
    img, alpha = c["img"], c["alpha"]
    g_alpha = np.sum(g * (c["en"] - img))
    g_img = (1.0 - alpha) * g + alpha * g * c["q"][..., None]
    g_lum = alpha * np.sum(g * img, axis=-1) * c["dq"]
    g_img = g_img + g_lum[..., None] * LUM_WEIGHTS
    return g_img, np.array([g_alpha])


def apply_contrast(img, alpha) -> np.ndarray:
    return _contrast_forward(np.asarray(img, dtype=np.float64), [alpha])[0]


# ---------------------------------------------------------------------------
# sharpening (unsharp mask, 5x5 Gaussian, sigma 1, replicate padding)
# ---------------------------------------------------------------------------

_GAUSS_1D = np.exp(-0.5 * np.arange(-2, 3) ** 2)
_GAUSS_1D /= _GAUSS_1D.sum()
GAUSSIAN_KERNEL = np.outer(_GAUSS_1D, _GAUSS_1D)


def _blur_axis(x, axis):
    r = _GAUSS_1D.size // 2
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="edge")
    out = np.zeros_like(x)
    for i, w in enumerate(_GAUSS_1D):
        out += w * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def _blur_axis_adjoint(g, axis):
    r = _GAUSS_1D.size // 2
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0]
    gp = np.zeros((n + 2 * r,) + g.shape[1:])
    for i, w in enumerate(_GAUSS_1D):
        gp[i:i + n] += w * g
    out = gp[r:r + n].copy()
    out[0] += gp[:r].sum(axis=0)
    out[-1] += gp[r + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def gaussian_blur(img) -> np.ndarray:
    """5x5 Gaussian (sigma 1) with replicate padding, applied per channel."""
    return _blur_axis(_blur_axis(np.asarray(img, dtype=np.float64), 0), 1)


def gaussian_blur_adjoint(g) -> np.ndarray:
    return _blur_axis_adjoint(_blur_axis_adjoint(np.asarray(g, dtype=np.float64), 1), 0)


def _sharpen_forward(img, p, const=None):
    lam = float(np.ravel(p)[0])
    detail = img - gaussian_blur(img)
    out, mask, clamp = _clamp(img + lam * detail, _part(const, "clamp"))
    return out, {"lam": lam, "detail": detail, "mask": mask, "const": {"clamp": clamp}}


def _sharpen_backward(g, c):
    g = g * c["mask"]
    lam = c["lam"]
    g_img = (1.0 + lam) * g - lam * gaussian_blur_adjoint(g)
    return g_img, np.array([np.sum(g * c["detail"])])


def apply_sharpen(img, lam) -> np.ndarray:
    return _sharpen_forward(np.asarray(img, dtype=np.float64), [lam])[0]


# ---------------------------------------------------------------------------
# defogging via the dark channel prior
# ---------------------------------------------------------------------------


def dark_channel(img, patch: int = DEFOG_PATCH) -> np.ndarray:
    """Per-pixel min over channels, then min over a ``patch`` x ``patch`` window."""
    if patch < 1 or patch % 2 == 0:
        raise ValueError("patch size must be a positive odd integer")
    mins = np.asarray(img, dtype=np.float64).min(axis=-1)
    return ndimage.minimum_filter(mins, size=patch, mode="nearest")


def estimate_atmospheric_light(img, patch: int = DEFOG_PATCH) -> np.ndarray:
    """Mean colour of the brightest 0.1% dark-channel pixels (at least one)."""
    img = np.asarray(img, dtype=np.float64)
    dc = dark_channel(img, patch).ravel()
    n = max(1, int(dc.size * ATMOS_FRACTION))
    top = np.argsort(-dc, kind="stable")[:n]
    return img.reshape(-1, 3)[top].mean(axis=0)


def defog_constants(img, patch: int = DEFOG_PATCH):
    """Atmospheric light and dark channel of ``img / A``; both stop-gradient."""
    atmos = estimate_atmospheric_light(img, patch)
    dc = dark_channel(img / np.maximum(atmos, 1e-6), patch)
    return atmos, dc


def _defog_forward(img, p, const=None):
    omega = float(np.ravel(p)[0])
    atmos, dc = defog_constants(img) if const is None else const["prior"]
    t = 1.0 - omega * dc
    floored = t < DEFOG_T_FLOOR if const is None else const["floored"]
    tt = np.where(floored, DEFOG_T_FLOOR, t)
    diff = img - atmos
    out, mask, clamp = _clamp(diff / tt[..., None] + atmos, _part(const, "clamp"))
    return out, {"dc": dc, "tt": tt, "floored": floored, "diff": diff, "mask": mask,
                 "const": {"prior": (atmos, dc), "floored": floored, "clamp": clamp}}


def _defog_backward(g, c):
    g = g * c["mask"]
    tt = c["tt"][..., None]
    g_img = g / tt
    dt_domega = np.where(c["floored"], 0.0, -c["dc"])[..., None]
    g_omega = np.sum(g * (-c["diff"] / tt ** 2) * dt_domega)
    return g_img, np.array([g_omega])


def apply_defog(img, omega) -> np.ndarray:
    return _defog_forward(np.asarray(img, dtype=np.float64), [omega])[0]


# ---------------------------------------------------------------------------
# gamma, white balance, identity
# ---------------------------------------------------------------------------


def _gamma_forward(img, p, const=None):
    gamma = float(np.ravel(p)[0])
    # black pixels sit on the floor of the power law and pass no image gradient
    live = img > 0.0 if const is None else const["live"]
    base = np.where(live, img, 0.0)
    log_img = np.log(base + GAMMA_EPS)
    raw = np.exp(gamma * log_img)
    out, mask, clamp = _clamp(raw, _part(const, "clamp"))
    return out, {"gamma": gamma, "log": log_img, "raw": raw, "img": base, "mask": mask,
                 "live": live, "const": {"live": live, "clamp": clamp}}


def _gamma_backward(g, c):
    g = g * c["mask"]
    g_img = np.where(c["live"], g * c["gamma"] * c["raw"] / (c["img"] + GAMMA_EPS), 0.0)
    return g_img, np.array([np.sum(g * c["raw"] * c["log"])])


def apply_gamma(img, gamma) -> np.ndarray:
    return _gamma_forward(np.asarray(img, dtype=np.float64), [gamma])[0]


def _wb_forward(img, p, const=None):
    w = np.asarray(p, dtype=np.float64).reshape(3)
    out, mask, clamp = _clamp(img * w, _part(const, "clamp"))
    return out, {"w": w, "img": img, "mask": mask, "const": {"clamp": clamp}}


def _wb_backward(g, c):
    g = g * c["mask"]
    return g * c["w"], np.sum(g * c["img"], axis=(0, 1))


def apply_white_balance(img, w) -> np.ndarray:
    return _wb_forward(np.asarray(img, dtype=np.float64), w)[0]


def _identity_forward(img, p=None, const=None):
    return img, {"const": None}


def _identity_backward(g, c):
    return g, np.zeros(0)


def apply_identity(img) -> np.ndarray:
    return img


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class IpOp:
    kind: IpKind
    n_params: int
    forward: Callable
    backward: Callable


OPS: dict[IpKind, IpOp] = {
    IpKind.TONE: IpOp(IpKind.TONE, TONE_SEGMENTS, _tone_forward, _tone_backward),
    IpKind.CONTRAST: IpOp(IpKind.CONTRAST, 1, _contrast_forward, _contrast_backward),
    IpKind.SHARPEN: IpOp(IpKind.SHARPEN, 1, _sharpen_forward, _sharpen_backward),
    IpKind.DEFOG: IpOp(IpKind.DEFOG, 1, _defog_forward, _defog_backward),
    IpKind.GAMMA: IpOp(IpKind.GAMMA, 1, _gamma_forward, _gamma_backward),
    IpKind.WHITE_BALANCE: IpOp(IpKind.WHITE_BALANCE, 3, _wb_forward, _wb_backward),
    IpKind.IDENTITY: IpOp(IpKind.IDENTITY, 0, _identity_forward, _identity_backward),
}


def apply_op(kind, img, params) -> np.ndarray:
    kind = IpKind.parse(kind)
    return OPS[kind].forward(np.asarray(img, dtype=np.float64), params)[0]
