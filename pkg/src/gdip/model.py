"""Detector variants: plain backbone, GDIP and MGDIP front-ends, and the
training-time GDIP regularizer.

Parameters live in one flat ``{name: array}`` dict with prefixes:

``enc.``     vision encoder (gdip, mgdip)
``gdip.``    single GDIP block (gdip)
``mgdip{i}.`` per-level projection and GDIP block (mgdip)
``reg{i}.``  regularizer projections and GDIP blocks (regularizer, training only)
``det.``     detector backbone
``head.``    detection head
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .block import (GateReport, GdipConfig, Mode, gdip_forward_cached, gdip_vjp,
                    init_gdip_params, module_grads_to_dict, modules_from_params)
from .detect import (CLASS_NAMES, DEFAULT_ALPHA, LossBreakdown, Target, decode_detections,
                     head_forward, head_vjp, init_head, loss_obj_with_grad, loss_rec,
                     loss_rec_vjp)
from .encoder import EncoderConfig, conv_stack_backward, conv_stack_forward, init_conv_stack
from .ipops import IpKind
from .mgdip import MgdipConfig, chain_backward, chain_forward, init_level_params
from .tensor import normalize_minmax

VARIANTS = ("baseline", "gdip", "mgdip", "regularizer")
REG_PREFIX = "reg"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    variant: str = "gdip"
    image_size: int = 96
    base_channels: int = 8
    embedding_dim: int = 64
    mode: str = "Full"
    ops: tuple[str, ...] = tuple(k.value for k in IpKind)
    grid: int | None = None  # None: the backbone's last map size
    num_classes: int = len(CLASS_NAMES)
    mgdip_levels: tuple[int, ...] = (0, 1, 2, 3, 4)
    mgdip_order: str = "bottom-up"
    reg_taps: tuple[int, ...] = (1, 3)  # C2 and C4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mgdip_order not in ("bottom-up", "top-down"):
            raise ValueError("mgdip_order must be 'bottom-up' or 'top-down'")
        object.__setattr__(self, "mode", Mode.parse(self.mode).value)
        object.__setattr__(self, "ops", tuple(IpKind.parse(k).value for k in self.ops))
        object.__setattr__(self, "mgdip_levels", tuple(self.mgdip_levels))
        object.__setattr__(self, "reg_taps", tuple(self.reg_taps))
        if self.grid is not None and self.grid > self.backbone.spatial(4):
            raise ValueError(f"grid {self.grid} exceeds the backbone map size "
                             f"{self.backbone.spatial(4)}")

    @property
    def backbone(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.base_channels, embedding_dim=self.embedding_dim)

    @property
    def grid_size(self) -> int:
        return self.backbone.spatial(4) if self.grid is None else self.grid

    @property
    def gdip(self) -> GdipConfig:
        return GdipConfig(self.ops, Mode.parse(self.mode), self.embedding_dim)

    @property
    def mgdip(self) -> MgdipConfig:
        levels = self.mgdip_levels
        if self.mgdip_order == "top-down":
            levels = tuple(reversed(levels))
        return MgdipConfig(self.backbone, self.gdip, levels)

    @property
    def regularizer(self) -> MgdipConfig:
        return MgdipConfig(self.backbone, self.gdip, self.reg_taps)

    @property
    def has_enhancer(self) -> bool:
        return self.variant in ("gdip", "mgdip")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("ops", "mgdip_levels", "reg_taps"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v)
                      for k, v in d.items() if k in fields})


def init_model(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    bb = cfg.backbone
    params = init_conv_stack(bb, rng, "det.", embed=False)
    params.update(init_head(rng, bb.channels(4), cfg.num_classes))
    channels = [bb.channels(l) for l in range(bb.num_layers)]
    if cfg.variant == "gdip":
        params.update(init_conv_stack(bb, rng, "enc.", embed=True))
        params.update(init_gdip_params(cfg.gdip, rng, "gdip."))
    elif cfg.variant == "mgdip":
        params.update(init_conv_stack(bb, rng, "enc.", embed=False))
        params.update(init_level_params(cfg.mgdip, rng, channels, root="mgdip"))
    elif cfg.variant == "regularizer":
        params.update(init_level_params(cfg.regularizer, rng, channels, root=REG_PREFIX))
    return params


def strip_regularizer(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Drop the training-only regularizer groups, leaving a plain detector."""
    return {k: v for k, v in params.items() if not k.startswith(REG_PREFIX)}


# ---------------------------------------------------------------------------
# enhancement
# ---------------------------------------------------------------------------


def _enhance_batch(cfg: ModelConfig, params, imgs, const=None):
    """Returns ``(Z, reports per image, cache)`` for the gdip/mgdip variants.

    ``const`` (a previous ``cache["const"]``) freezes the stop-gradient values.
    """
    const = const or [None] * len(imgs)
    if cfg.variant == "gdip":
        enc, enc_cache = conv_stack_forward(params, imgs, "enc.", embed=True)
        zs, reports, caches = [], [], []
        gbs = modules_from_params(cfg.gdip, params, "gdip.")
        for b in range(len(imgs)):
            z, rep, c = gdip_forward_cached(cfg.gdip, gbs, imgs[b], enc.embedding[b], const[b])
            zs.append(z)
            reports.append([rep])
            caches.append(c)
        return np.stack(zs), reports, {"enc": enc_cache, "blocks": caches,
                                       "const": [c["const"] for c in caches]}
    if cfg.variant == "mgdip":
        mcfg = cfg.mgdip
        enc, enc_cache = conv_stack_forward(params, imgs, "enc.", embed=False)
        zs, reports, caches = [], [], []
        for b in range(len(imgs)):
            z, reps, c = chain_forward(mcfg, params, imgs[b], [t[b] for t in enc.taps],
                                       const=const[b])
            zs.append(z)
            reports.append(reps)
            caches.append(c)
        return np.stack(zs), reports, {"enc": enc_cache, "chains": caches,
                                       "const": [c["const"] for c in caches]}
    raise ValueError(f"variant {cfg.variant!r} has no enhancement path at inference")


def _enhance_backward(cfg: ModelConfig, params, cache, g_z):
    grads: dict[str, np.ndarray] = {}
    if cfg.variant == "gdip":
        g_e = np.zeros((len(g_z), cfg.embedding_dim))
        acc = None
        for b, c in enumerate(cache["blocks"]):
            gg = gdip_vjp(c, g_z[b])
            g_e[b] = gg.embedding
            d = module_grads_to_dict(cfg.gdip, gg.modules, "gdip.")
            acc = d if acc is None else {k: acc[k] + d[k] for k in acc}
        grads.update(acc)
        enc_grads, _ = conv_stack_backward(params, cache["enc"], None, g_e, input_grad=False)
        grads.update(enc_grads)
        return grads
    mcfg = cfg.mgdip
    n_layers = mcfg.encoder.num_layers
    g_taps: list = [None] * n_layers
    acc = None
    for b, c in enumerate(cache["chains"]):
        d, _, gt = chain_backward(mcfg, params, c, g_z[b], n_layers)
        acc = d if acc is None else {k: acc[k] + d[k] for k in acc}
        for l, t in enumerate(gt):
            if t is None:
                continue
            if g_taps[l] is None:
                g_taps[l] = np.zeros((len(g_z),) + t.shape)
            g_taps[l][b] = t
    grads.update(acc)
    enc_grads, _ = conv_stack_backward(params, cache["enc"], g_taps, None, input_grad=False)
    grads.update(enc_grads)
    return grads


def mean_report(reports: Sequence[GateReport]) -> GateReport:
    """Average gate values over levels (a single GDIP block passes through)."""
    if len(reports) == 1:
        return reports[0]
    return GateReport(reports[0].ops, np.mean([r.values for r in reports], axis=0))


def gate_values(cfg: ModelConfig, params, imgs, batch: int = 16) -> np.ndarray:
    """``(N, n_ops)`` gate activations per image, level-averaged for MGDIP."""
    rows = []
    for start in range(0, len(imgs), batch):
        _, reports, _ = _enhance_batch(cfg, params, np.asarray(imgs[start:start + batch]))
        rows.extend(mean_report(reps).values for reps in reports)
    return np.array(rows)


def enhance(cfg: ModelConfig, params, img) -> tuple[np.ndarray, list[GateReport]]:
    """Enhanced image and per-level gate reports for one image."""
    z, reports, _ = _enhance_batch(cfg, params, np.asarray(img, dtype=np.float64)[None])
    return z[0], reports[0]


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def detector_logits(cfg: ModelConfig, params, imgs):
    """Backbone + head on already-enhanced (or raw) images; ``(B, G, G, D)``."""
    taps, _ = conv_stack_forward(params, imgs, "det.", embed=False)
    logits, _ = head_forward(taps.taps[-1], params["head.w"], params["head.b"], cfg.grid_size)
    return logits


def predict(cfg: ModelConfig, params, imgs) -> np.ndarray:
    """Inference path: enhancement first for gdip/mgdip, never for the regularizer."""
    imgs = np.asarray(imgs, dtype=np.float64)
    single = imgs.ndim == 3
    batch = imgs[None] if single else imgs
    if cfg.has_enhancer:
        batch, _, _ = _enhance_batch(cfg, params, batch)
    logits = detector_logits(cfg, params, batch)
    return logits[0] if single else logits


def detect(cfg: ModelConfig, params, img, nms_iou: float = 0.45):
    return decode_detections(predict(cfg, params, img), nms_iou)


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------


def reconstruction_target(clear) -> np.ndarray:
    return normalize_minmax(clear)


def forward_backward(cfg: ModelConfig, params, imgs, targets: Sequence[Target], clears=None,
                     alpha: float = DEFAULT_ALPHA, aux_reconstruction: bool = False,
                     want_grads: bool = True, const=None):
    """Batch loss (means over the batch) and parameter gradients.

    The reconstruction term is active for the regularizer variant and, when
    ``aux_reconstruction`` is set, for gdip/mgdip.  ``alpha = 0`` disables it.
    Returns ``(LossBreakdown, grads, const)``; passing ``const`` back in
    evaluates the frozen surrogate the gradients belong to.
    """
    const = const or {}
    imgs = np.asarray(imgs, dtype=np.float64)
    bsz = len(imgs)
    use_rec = alpha > 0 and (cfg.variant == "regularizer" or
                             (aux_reconstruction and cfg.has_enhancer))
    if use_rec and clears is None:
        raise ValueError("the reconstruction loss needs paired clear images")

    enh_cache = None
    det_in = imgs
    if cfg.has_enhancer:
        det_in, _, enh_cache = _enhance_batch(cfg, params, imgs, const.get("enhance"))
    taps, det_cache = conv_stack_forward(params, det_in, "det.", embed=False)
    logits, head_cache = head_forward(taps.taps[-1], params["head.w"], params["head.b"],
                                      cfg.grid_size)
    l_obj = 0.0
    g_logits = np.zeros_like(logits)
    for b in range(bsz):
        l, g = loss_obj_with_grad(logits[b], targets[b])
        l_obj += l / bsz
        g_logits[b] = g / bsz

    l1 = mse = 0.0
    g_rec = None
    recon_caches = []
    if use_rec:
        recon_in = det_in if cfg.has_enhancer else None
        g_rec = np.zeros_like(imgs)
        for b in range(bsz):
            if cfg.variant == "regularizer":
                frozen = const["reg"][b] if "reg" in const else None
                z, _, c = chain_forward(cfg.regularizer, params, imgs[b],
                                        [t[b] for t in taps.taps], root=REG_PREFIX, const=frozen)
                recon_caches.append(c)
            else:
                z = recon_in[b]
            ref = reconstruction_target(clears[b])
            a, m = loss_rec(z, ref)
            l1 += a / bsz
            mse += m / bsz
            g_rec[b] = loss_rec_vjp(z, ref) * alpha / bsz
    breakdown = LossBreakdown(l_obj, l1, mse, alpha if use_rec else 0.0)
    frozen = {}
    if enh_cache is not None:
        frozen["enhance"] = enh_cache["const"]
    if recon_caches:
        frozen["reg"] = [c["const"] for c in recon_caches]
    if not want_grads:
        return breakdown, None, frozen

    grads: dict[str, np.ndarray] = {}
    g_c5, grads["head.w"], grads["head.b"] = head_vjp(g_logits, head_cache)
    g_taps: list = [None] * 4 + [g_c5]
    if use_rec and cfg.variant == "regularizer":
        rcfg = cfg.regularizer
        acc = None
        for b, c in enumerate(recon_caches):
            d, _, gt = chain_backward(rcfg, params, c, g_rec[b], len(g_taps))
            acc = d if acc is None else {k: acc[k] + d[k] for k in acc}
            for l, t in enumerate(gt):
                if t is None:
                    continue
                if g_taps[l] is None:
                    g_taps[l] = np.zeros((bsz,) + t.shape)
                g_taps[l][b] += t
        grads.update(acc)
    elif cfg.variant == "regularizer":
        for k, v in params.items():
            if k.startswith(REG_PREFIX):
                grads[k] = np.zeros_like(v)
    det_grads, g_in = conv_stack_backward(params, det_cache, g_taps, None,
                                          input_grad=cfg.has_enhancer)
    grads.update(det_grads)
    if cfg.has_enhancer:
        g_z = g_in if g_rec is None else g_in + g_rec
        grads.update(_enhance_backward(cfg, params, enh_cache, g_z))
    return breakdown, grads, frozen


def regularizer_forward(cfg: ModelConfig, params, adverse, clear, target: Target,
                        alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    """Loss breakdown for one paired example under the regularizer variant."""
    if cfg.variant != "regularizer":
        raise ValueError("regularizer_forward needs a regularizer model")
    if clear is None and alpha > 0:
        raise ValueError("the reconstruction loss needs a paired clear image")
    clears = None if clear is None else np.asarray(clear, dtype=np.float64)[None]
    loss, _, _ = forward_backward(cfg, params, np.asarray(adverse)[None], [target], clears,
                               alpha=alpha, want_grads=False)
    return loss


def reconstruct(cfg: ModelConfig, params, img) -> np.ndarray:
    """Training-time reconstruction of the regularizer's GDIP chain (not used at inference)."""
    img = np.asarray(img, dtype=np.float64)
    taps, _ = conv_stack_forward(params, img[None], "det.", embed=False)
    z, _, _ = chain_forward(cfg.regularizer, params, img, [t[0] for t in taps.taps],
                            root=REG_PREFIX)
    return z
