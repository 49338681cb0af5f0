"""Gated differentiable image processing block.

A block holds one gated module per IP operation.  Each module maps the shared
embedding through a linear layer to the op's raw parameters plus one gate
pre-activation; the gated, normalized op outputs are summed and normalized
again.  Three ablation modes change the aggregation:

* ``Mode.MAX``          keep only the op with the largest gate
* ``Mode.UNNORMALIZED`` skip the per-op normalization
* ``Mode.NO_GATES``     weight every op by one
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
from typing import Sequence

import numpy as np

from .ipops import ALL_KINDS, OPS, PARAM_COUNTS, IpKind, map_raw_params, map_raw_params_vjp
from .tensor import minmax_range, normalize_minmax, normalize_minmax_vjp, tick


class Mode(str, enum.Enum):
    FULL = "Full"
    MAX = "Max"
    UNNORMALIZED = "Unnormalized"
    NO_GATES = "NoGates"

    @classmethod
    def parse(cls, name: "str | Mode") -> "Mode":
        if isinstance(name, Mode):
            return name
        for mode in cls:
            if str(name).lower() in (mode.value.lower(), mode.name.lower()):
                return mode
        raise ValueError(f"unknown GDIP mode {name!r}; expected one of "
                         f"{[m.value for m in cls]}")


@dataclasses.dataclass(frozen=True)
class GdipConfig:
    ops: tuple[IpKind, ...] = ALL_KINDS
    mode: Mode = Mode.FULL
    embedding_dim: int = 64

    def __post_init__(self):
        ops = tuple(IpKind.parse(k) for k in self.ops)
        if not ops:
            raise ValueError("a GDIP block needs at least one op")
        if len(set(ops)) != len(ops):
            raise ValueError("duplicate ops in GDIP config")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")
        object.__setattr__(self, "ops", ops)
        object.__setattr__(self, "mode", Mode.parse(self.mode))


@dataclasses.dataclass
class GbModule:
    kind: IpKind
    weight: np.ndarray  # (n_params + 1, embedding_dim)
    bias: np.ndarray  # (n_params + 1,)

    def __post_init__(self):
        self.kind = IpKind.parse(self.kind)
        expected = PARAM_COUNTS[self.kind] + 1
        if self.weight.shape[0] != expected or self.bias.shape != (expected,):
            raise ValueError(f"{self.kind.label} module needs {expected} outputs, "
                             f"got weight {self.weight.shape}, bias {self.bias.shape}")


@dataclasses.dataclass
class GateReport:
    ops: tuple[IpKind, ...]
    values: np.ndarray

    def __post_init__(self):
        self.ops = tuple(IpKind.parse(k) for k in self.ops)
        self.values = np.asarray(self.values, dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return {k.value: float(v) for k, v in zip(self.ops, self.values)}


def gate(s):
    """Shifted tanh squashing a pre-activation into (0, 1)."""
    return 0.5 * (np.tanh(s) + 1.0)


def gate_vjp(s, g):
    th = np.tanh(s)
    return 0.5 * g * (1.0 - th * th)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def module_keys(prefix: str, kind: IpKind) -> tuple[str, str]:
    return f"{prefix}{kind.value}.w", f"{prefix}{kind.value}.b"


def init_gdip_params(cfg: GdipConfig, rng: np.random.Generator, prefix: str = "gdip.",
                     scale: float = 0.01) -> dict[str, np.ndarray]:
    params = {}
    for kind in cfg.ops:
        kw, kb = module_keys(prefix, kind)
        n_out = PARAM_COUNTS[kind] + 1
        params[kw] = rng.uniform(-scale, scale, size=(n_out, cfg.embedding_dim))
        params[kb] = np.zeros(n_out)
    return params


def modules_from_params(cfg: GdipConfig, params, prefix: str = "gdip.") -> list[GbModule]:
    mods = []
    for kind in cfg.ops:
        kw, kb = module_keys(prefix, kind)
        mods.append(GbModule(kind, params[kw], params[kb]))
    return mods


def module_grads_to_dict(cfg: GdipConfig, grads, prefix: str = "gdip.") -> dict[str, np.ndarray]:
    out = {}
    for kind, (gw, gb) in zip(cfg.ops, grads):
        kw, kb = module_keys(prefix, kind)
        out[kw], out[kb] = gw, gb
    return out


# ---------------------------------------------------------------------------
# gated module
# ---------------------------------------------------------------------------


def _gb_forward(gb: GbModule, img, e, const=None, normalize=True):
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (gb.weight.shape[1],):
        raise ValueError(f"embedding has shape {e.shape}, expected ({gb.weight.shape[1]},)")
    raw = gb.weight @ e + gb.bias
    raw_params, s = raw[:-1], raw[-1]
    params = map_raw_params(gb.kind, raw_params)
    const = const or {}
    tick(f"ip.{gb.kind.value}")
    f, op_cache = OPS[gb.kind].forward(img, params, const.get("op"))
    bounds = const.get("inner") or minmax_range(f)
    out = normalize_minmax(f, bounds) if normalize else f
    cache = {"gb": gb, "e": e, "raw": raw, "f": f, "op": op_cache, "bounds": bounds,
             "normalize": normalize}
    return out, float(gate(s)), raw, cache


def gb_forward(gb: GbModule, img, e):
    """Run one gated module; returns ``(N(f(img)), gate value, raw outputs)``."""
    out, w, raw, _ = _gb_forward(gb, np.asarray(img, dtype=np.float64), e)
    return out, w, raw


def _gb_backward(cache, g_out, g_w):
    """Returns ``(g_img, g_e, g_weight, g_bias)``."""
    gb = cache["gb"]
    g_f = normalize_minmax_vjp(cache["f"], g_out, cache["bounds"]) if cache["normalize"] else g_out
    g_img, g_params = OPS[gb.kind].backward(g_f, cache["op"])
    raw = cache["raw"]
    g_raw = np.empty_like(raw)
    g_raw[:-1] = map_raw_params_vjp(gb.kind, raw[:-1], g_params)
    g_raw[-1] = gate_vjp(raw[-1], g_w)
    g_e = gb.weight.T @ g_raw
    return g_img, g_e, np.outer(g_raw, cache["e"]), g_raw


# ---------------------------------------------------------------------------
# block
# ---------------------------------------------------------------------------


def gdip_forward_cached(cfg: GdipConfig, gbs: Sequence[GbModule], img, e, const=None):
    """Forward pass keeping everything the backward pass needs.

    ``const`` (the ``cache["const"]`` of an earlier call) freezes every
    stop-gradient quantity so the forward becomes the exact surrogate that
    :func:`gdip_vjp` differentiates.
    """
    if len(gbs) != len(cfg.ops) or any(g.kind != k for g, k in zip(gbs, cfg.ops)):
        raise ValueError("GbModules do not match the configured op list")
    img = np.asarray(img, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    const = const or {}
    op_consts = const.get("modules", [None] * len(gbs))
    mode = cfg.mode
    tick("gdip_block")

    gate_pre = np.array([gb.weight[-1] @ e + gb.bias[-1] for gb in gbs])
    w = gate(gate_pre)
    report = GateReport(cfg.ops, w.copy())

    if mode is Mode.MAX:
        active = [int(np.argmax(w))]
        weights = {active[0]: 1.0}
    else:
        active = list(range(len(gbs)))
        weights = {i: (1.0 if mode is Mode.NO_GATES else w[i]) for i in active}

    normalize_inner = mode is not Mode.UNNORMALIZED
    mod_caches: list = [None] * len(gbs)
    outputs = {}
    mixed = np.zeros_like(img)
    for i in active:
        y, _, _, mc = _gb_forward(gbs[i], img, e, op_consts[i], normalize=normalize_inner)
        mod_caches[i] = mc
        outputs[i] = y
        mixed += weights[i] * y
    outer = const.get("outer") or minmax_range(mixed)
    z = normalize_minmax(mixed, outer)

    cache = {
        "cfg": cfg, "gbs": gbs, "img": img, "e": e, "w": w, "active": active,
        "weights": weights, "mods": mod_caches, "mixed": mixed, "outer": outer,
        "outputs": outputs,
    }
    cache["const"] = {
        "outer": outer,
        "modules": [None if mc is None else {"op": mc["op"]["const"], "inner": mc["bounds"]}
                    for mc in mod_caches],
    }
    return z, report, cache


def gdip_forward(cfg: GdipConfig, gbs: Sequence[GbModule], img, e):
    """Enhance ``img`` given embedding ``e``; returns ``(z, GateReport)``."""
    z, report, _ = gdip_forward_cached(cfg, gbs, img, e)
    return z, report


@dataclasses.dataclass
class GdipGrads:
    img: np.ndarray
    embedding: np.ndarray
    modules: list[tuple[np.ndarray, np.ndarray]]


def gdip_vjp(cache, g_z) -> GdipGrads:
    cfg, gbs = cache["cfg"], cache["gbs"]
    g_mixed = normalize_minmax_vjp(cache["mixed"], g_z, cache["outer"])
    g_img = np.zeros_like(cache["img"])
    g_e = np.zeros_like(cache["e"])
    mods = [(np.zeros_like(gb.weight), np.zeros_like(gb.bias)) for gb in gbs]
    gated = cfg.mode in (Mode.FULL, Mode.UNNORMALIZED)
    for i in cache["active"]:
        g_w = float(np.sum(g_mixed * cache["outputs"][i])) if gated else 0.0
        gi, ge, gw, gb = _gb_backward(cache["mods"][i], cache["weights"][i] * g_mixed, g_w)
        g_img += gi
        g_e += ge
        mods[i] = (gw, gb)
    return GdipGrads(g_img, g_e, mods)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = tuple(k.value for k in ALL_KINDS)


def reports_to_csv(reports: Sequence[GateReport], labels: Sequence[str] | None = None,
                   label_column: str = "image") -> str:
    """One row per report, one column per IP kind (blank when not configured)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ([label_column] if labels is not None else []) + list(REPORT_COLUMNS)
    writer.writerow(header)
    for i, rep in enumerate(reports):
        vals = rep.as_dict()
        row = [labels[i]] if labels is not None else []
        row += [f"{vals[c]:.6f}" if c in vals else "" for c in REPORT_COLUMNS]
        writer.writerow(row)
    return buf.getvalue()
