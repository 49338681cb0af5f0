"""Finite-difference verification of every hand-written backward pass.

Each check wraps a forward/backward pair as a :class:`DiffOp` over flat
arguments and runs :func:`grad_check` on a small random fixture.  Forward
passes are evaluated with the stop-gradient constants and piecewise active
sets of the unperturbed point frozen, so the finite differences see exactly
the function the backward pass differentiates.
"""

from __future__ import annotations

import numpy as np

from .block import (GdipConfig, Mode, gate, gate_vjp, gdip_forward_cached, gdip_vjp,
                    init_gdip_params, module_grads_to_dict, modules_from_params)
from .detect import Target, head_forward, head_vjp, loss_obj_with_grad, loss_rec, loss_rec_vjp
from .encoder import EncoderConfig, conv_stack_backward, conv_stack_forward, init_conv_stack
from .ipops import ALL_KINDS, OPS, PARAM_COUNTS, IpKind, map_raw_params, map_raw_params_vjp
from .mgdip import MgdipConfig, init_mgdip, mgdip_forward_cached, mgdip_vjp
from .model import ModelConfig, forward_backward, init_model
from .tensor import DiffOp, GradCheckReport, grad_check, normalize_minmax, normalize_minmax_vjp

SCOPES = ("ops", "gdip", "encoder", "mgdip", "losses")
STEP = 1e-5
TOL = 1e-4


class _Flat:
    """Pack a parameter dict into one vector and back."""

    def __init__(self, params: dict):
        self.keys = sorted(params)
        self.shapes = [np.shape(params[k]) for k in self.keys]
        self.sizes = [int(np.prod(s, dtype=np.int64)) for s in self.shapes]

    def pack(self, d: dict) -> np.ndarray:
        return np.concatenate([np.ravel(d[k]) for k in self.keys])

    def unpack(self, v) -> dict:
        out, i = {}, 0
        for k, shape, n in zip(self.keys, self.shapes, self.sizes):
            out[k] = np.asarray(v[i:i + n]).reshape(shape)
            i += n
        return out


# ---------------------------------------------------------------------------
# primitives and ops
# ---------------------------------------------------------------------------


def check_normalize(seed: int = 0) -> GradCheckReport:
    t = np.random.default_rng(seed).uniform(-1, 2, (4, 4))
    bounds = (float(t.min()), float(t.max()))
    op = DiffOp(lambda x: normalize_minmax(x, bounds),
                lambda g, x: [normalize_minmax_vjp(x, g, bounds)], "normalize_minmax")
    return grad_check(op, [t], step=STEP, tol=TOL)


def check_gate(seed: int = 0) -> GradCheckReport:
    s = np.random.default_rng(seed).normal(0, 1.5, 16)
    return grad_check(DiffOp(gate, lambda g, x: [gate_vjp(x, g)], "gate"), [s],
                      step=STEP, tol=TOL)


def check_range_map(kind: IpKind, seed: int = 0) -> GradCheckReport:
    n = PARAM_COUNTS[kind]
    raw = np.random.default_rng(seed).normal(0, 1, max(n, 1))[:n]
    op = DiffOp(lambda r: map_raw_params(kind, r),
                lambda g, r: [map_raw_params_vjp(kind, r, g)], f"range_map.{kind.value}")
    return grad_check(op, [raw], step=STEP, tol=TOL)


def op_fixture(kind: IpKind, seed: int = 0, size: int = 8):
    """Random interior image and interior parameters for one op."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.05, 0.95, (size, size, 3))
    raw = rng.normal(0, 0.5, PARAM_COUNTS[kind])
    return img, map_raw_params(kind, raw)


def check_op(kind: IpKind, seed: int = 0, size: int = 8) -> GradCheckReport:
    img, p = op_fixture(kind, seed, size)
    spec = OPS[kind]
    const = spec.forward(img, p)[1]["const"]

    def vjp(g, x, q):
        g_img, g_p = spec.backward(g, spec.forward(x, q, const)[1])
        return [g_img, g_p]

    op = DiffOp(lambda x, q: spec.forward(x, q, const)[0], vjp, f"op.{kind.value}")
    return grad_check(op, [img, p], step=STEP, tol=TOL)


# ---------------------------------------------------------------------------
# GDIP block
# ---------------------------------------------------------------------------


def check_gdip(mode: Mode = Mode.FULL, seed: int = 0, size: int = 12,
               embedding_dim: int = 6) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    cfg = GdipConfig(ALL_KINDS, mode, embedding_dim)
    params = init_gdip_params(cfg, rng, scale=0.5)
    flat = _Flat(params)
    img = rng.uniform(0.05, 0.95, (size, size, 3))
    e = rng.normal(0, 1, embedding_dim)
    _, _, cache0 = gdip_forward_cached(cfg, modules_from_params(cfg, params), img, e)
    const = cache0["const"]

    def run(x, emb, v):
        gbs = modules_from_params(cfg, flat.unpack(v))
        return gdip_forward_cached(cfg, gbs, x, emb, const)

    def vjp(g, x, emb, v):
        grads = gdip_vjp(run(x, emb, v)[2], g)
        return [grads.img, grads.embedding,
                flat.pack(module_grads_to_dict(cfg, grads.modules))]

    op = DiffOp(lambda x, emb, v: run(x, emb, v)[0], vjp, f"gdip.{mode.value}")
    return grad_check(op, [img, e, flat.pack(params)], step=STEP, tol=TOL)


# ---------------------------------------------------------------------------
# encoder and MGDIP
# ---------------------------------------------------------------------------


def _min_preactivation(params, img, prefix, embed) -> float:
    _, cache = conv_stack_forward(params, img, prefix, embed=embed)
    return min(float(np.abs(c[2]).min()) for c in cache["layers"])


def kink_free_fixture(make, prefix: str, embed: bool, margin: float = 50 * STEP,
                      seed: int = 0, tries: int = 200):
    """Scan seeds until no leaky-ReLU pre-activation sits within ``margin`` of zero.

    ``make(rng)`` returns ``(params, img, extra)``.  Finite differences that
    straddle the kink would measure a one-sided slope, not the derivative.
    """
    for k in range(tries):
        params, img, extra = make(np.random.default_rng([seed, k]))
        if _min_preactivation(params, img, prefix, embed) > margin:
            return params, img, extra
    raise RuntimeError("no kink-free fixture found")


def check_encoder(seed: int = 0, size: int = 16, base: int = 2) -> GradCheckReport:
    cfg = EncoderConfig(size, base, embedding_dim=6)

    def make(rng):
        return init_conv_stack(cfg, rng, "enc."), rng.uniform(0, 1, (size, size, 3)), None

    params, img, _ = kink_free_fixture(make, "enc.", True, seed=seed)
    flat = _Flat(params)

    def fwd(x, v):
        taps, _ = conv_stack_forward(flat.unpack(v), x, "enc.")
        return np.concatenate([t.ravel() for t in taps.taps] + [taps.embedding.ravel()])

    def vjp(g, x, v):
        p = flat.unpack(v)
        taps, cache = conv_stack_forward(p, x, "enc.")
        g_taps, i = [], 0
        for t in taps.taps:
            g_taps.append(g[i:i + t.size].reshape(t.shape))
            i += t.size
        grads, g_img = conv_stack_backward(p, cache, g_taps, g[i:].reshape(1, -1))
        return [g_img, flat.pack(grads)]

    return grad_check(DiffOp(fwd, vjp, "encoder"), [img, flat.pack(params)], step=STEP, tol=TOL)


def check_mgdip(seed: int = 0, size: int = 16, base: int = 2,
                levels: tuple[int, ...] = (0, 1)) -> GradCheckReport:
    cfg = MgdipConfig(EncoderConfig(size, base, embedding_dim=6), GdipConfig(embedding_dim=6),
                      levels)

    def make(rng):
        params = init_mgdip(cfg, rng)
        for k in params:
            if "conv" not in k and k.endswith(".w"):
                params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
        return params, rng.uniform(0.05, 0.95, (size, size, 3)), None

    params, img, _ = kink_free_fixture(make, "enc.", False, seed=seed)
    flat = _Flat(params)
    const = mgdip_forward_cached(cfg, params, img)[2]["const"]

    def vjp(g, x, v):
        p = flat.unpack(v)
        _, _, cache = mgdip_forward_cached(cfg, p, x, const)
        grads, g_img = mgdip_vjp(cfg, p, cache, g)
        return [g_img, flat.pack(grads)]

    op = DiffOp(lambda x, v: mgdip_forward_cached(cfg, flat.unpack(v), x, const)[0], vjp,
                f"mgdip.{len(levels)}-level")
    return grad_check(op, [img, flat.pack(params)], step=STEP, tol=TOL)


# ---------------------------------------------------------------------------
# head and losses
# ---------------------------------------------------------------------------


def _fixture_target() -> Target:
    return Target(np.array([[0.3, 0.35, 0.25, 0.3], [0.72, 0.6, 0.4, 0.2]]), np.array([0, 2]))


def check_loss_obj(seed: int = 0) -> GradCheckReport:
    logits = np.random.default_rng(seed).normal(0, 1, (4, 4, 8))
    target = _fixture_target()
    op = DiffOp(lambda x: np.array(loss_obj_with_grad(x, target)[0]),
                lambda g, x: [g * loss_obj_with_grad(x, target)[1]], "loss_obj")
    return grad_check(op, [logits], step=STEP, tol=TOL)


def check_loss_rec(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    z, clear = rng.uniform(0, 1, (2, 6, 6, 3))

    def fwd(x, c):
        l1, mse = loss_rec(x, c)
        return np.array([l1, mse])

    def vjp(g, x, c):
        gz = loss_rec_vjp(x, c, g[0], g[1])
        return [gz, -gz]

    return grad_check(DiffOp(fwd, vjp, "loss_rec"), [z, clear], step=STEP, tol=TOL)


def check_head(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    c5 = rng.normal(0, 1, (2, 5, 5, 5))
    w = rng.normal(0, 0.3, (8, 5))
    b = rng.normal(0, 0.1, 8)

    def vjp(g, x, ww, bb):
        return list(head_vjp(g, head_forward(x, ww, bb, 3)[1]))

    op = DiffOp(lambda x, ww, bb: head_forward(x, ww, bb, 3)[0], vjp, "head")
    return grad_check(op, [c5, w, b], step=STEP, tol=TOL)


def check_total_loss(variant: str = "regularizer", seed: int = 0, size: int = 16,
                     max_coords: int = 400) -> GradCheckReport:
    """L_obj + alpha L_reg through the whole model, sampled coordinates."""
    cfg = ModelConfig(variant=variant, image_size=size, base_channels=2, embedding_dim=6)

    def make(rng):
        params = init_model(cfg, int(rng.integers(2 ** 31)))
        imgs = rng.uniform(0.05, 0.95, (2, size, size, 3))
        return params, imgs, rng.uniform(0, 1, (2, size, size, 3))

    params, imgs, clears = kink_free_fixture(make, "det.", False, seed=seed)
    targets = [_fixture_target(), Target(np.array([[0.5, 0.5, 0.3, 0.3]]), np.array([1]))]
    flat = _Flat(params)
    kw = dict(alpha=0.5, aux_reconstruction=True)
    const = forward_backward(cfg, params, imgs, targets, clears, want_grads=False, **kw)[2]

    def fwd(v):
        lb = forward_backward(cfg, flat.unpack(v), imgs, targets, clears, want_grads=False,
                              const=const, **kw)[0]
        return np.array(lb.l_total)

    def vjp(g, v):
        _, grads, _ = forward_backward(cfg, flat.unpack(v), imgs, targets, clears,
                                       const=const, **kw)
        return [g * flat.pack(grads)]

    return grad_check(DiffOp(fwd, vjp, f"loss_total.{variant}"), [flat.pack(params)],
                      step=STEP, tol=TOL, max_coords=max_coords)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def _scope_checks(scope: str):
    if scope == "ops":
        yield check_normalize
        yield check_gate
        for kind in ALL_KINDS:
            if PARAM_COUNTS[kind]:
                yield lambda k=kind: check_range_map(k)
            yield lambda k=kind: check_op(k)
    elif scope == "gdip":
        for mode in Mode:
            yield lambda m=mode: check_gdip(m)
    elif scope == "encoder":
        yield check_encoder
    elif scope == "mgdip":
        yield check_mgdip
    elif scope == "losses":
        yield check_head
        yield check_loss_obj
        yield check_loss_rec
        yield lambda: check_total_loss("regularizer")
        yield lambda: check_total_loss("gdip")
    else:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES + ('all',)}")


def run_suite(scope: str = "all", report=None) -> list[GradCheckReport]:
    """Run every check in ``scope``; ``report`` is called with each result as it lands."""
    scopes = SCOPES if scope == "all" else (scope,)
    results = []
    for s in scopes:
        for check in _scope_checks(s):
            r = check()
            results.append(r)
            if report is not None:
                report(r)
    return results
