"""Image containers, min-max normalization, image I/O and gradient checking.

Images are plain ``float64`` numpy arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``.  Feature maps and parameters are plain arrays as well; nothing here
wraps numpy in a custom class.
"""

from __future__ import annotations

import collections
import contextlib
import contextvars
import dataclasses
import os
from typing import Callable, Iterator, Sequence

import numpy as np

DEGENERATE_RANGE = 1e-12


def as_image(data, *, clip: bool = False) -> np.ndarray:
    """Validate ``data`` as an RGB image and return a float64 copy."""
    img = np.array(data, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have at least one pixel")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if clip:
        np.clip(img, 0.0, 1.0, out=img)
    elif img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def minmax_range(t: np.ndarray) -> tuple[float, float]:
    """Return ``(min, max)`` of ``t``, rejecting empty or non-finite input."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("cannot normalize an empty tensor")
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot normalize a tensor with non-finite values")
    return float(t.min()), float(t.max())


def normalize_minmax(t, bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Rescale ``t`` affinely so that it spans ``[0, 1]``.

    ``bounds`` freezes the extremes to precomputed values; the backward pass
    always treats them as constants.  A range below ``1e-12`` maps to zeros.
    """
    t = np.asarray(t, dtype=np.float64)
    lo, hi = minmax_range(t) if bounds is None else bounds
    if hi - lo < DEGENERATE_RANGE:
        return np.zeros_like(t)
    return (t - lo) / (hi - lo)


def normalize_minmax_vjp(t, g_out, bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Gradient of :func:`normalize_minmax` with min and max held fixed."""
    t = np.asarray(t, dtype=np.float64)
    g_out = np.asarray(g_out, dtype=np.float64)
    if t.shape != g_out.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {g_out.shape}")
    lo, hi = minmax_range(t) if bounds is None else bounds
    if hi - lo < DEGENERATE_RANGE:
        return np.zeros_like(g_out)
    return g_out / (hi - lo)


_OP_COUNTER: contextvars.ContextVar[collections.Counter | None] = contextvars.ContextVar(
    "gdip_op_counter", default=None)


@contextlib.contextmanager
def count_ops() -> Iterator[collections.Counter]:
    """Count primitive forward operations executed inside the block."""
    counter: collections.Counter = collections.Counter()
    token = _OP_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _OP_COUNTER.reset(token)


def tick(name: str, n: int = 1) -> None:
    counter = _OP_COUNTER.get()
    if counter is not None:
        counter[name] += n


# ---------------------------------------------------------------------------
# differentiable-op contract and finite-difference checking
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DiffOp:
    """A forward map together with its vector-Jacobian product.

    ``forward(*args)`` returns an array; ``vjp(g, *args)`` returns one gradient
    per argument (``None`` for arguments that are not differentiated).
    """

    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[np.ndarray | None]]
    name: str = "op"

    def __call__(self, *args):
        return self.forward(*args)


@dataclasses.dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_arg: list[float]
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"over {self.checked} coords (tol {self.tol:g})")


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(op: DiffOp, args: Sequence, *, step: float = 1e-5, tol: float = 1e-4,
               seed: int = 0, max_coords: int | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare ``op.vjp`` against central finite differences.

    The output is contracted with a fixed random cotangent so one VJP call
    yields the full gradient of a scalar.  ``max_coords`` caps the number of
    coordinates probed per argument (sampled without replacement).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    args = [np.array(a, dtype=np.float64) if a is not None else None for a in args]
    out = np.asarray(op.forward(*args), dtype=np.float64)
    again = np.asarray(op.forward(*args), dtype=np.float64)
    if out.shape != again.shape or not np.array_equal(out, again):
        raise RuntimeError(f"{op.name}: forward is not deterministic")

    rng = np.random.default_rng(seed)
    cot = rng.standard_normal(out.shape)
    grads = op.vjp(cot, *args)
    if len(grads) != len(args):
        raise ValueError(f"{op.name}: vjp returned {len(grads)} grads for {len(args)} args")

    per_arg: list[float] = []
    checked = 0
    for k, (arg, grad) in enumerate(zip(args, grads)):
        if arg is None or grad is None:
            per_arg.append(0.0)
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != arg.shape:
            raise ValueError(f"{op.name}: gradient shape {grad.shape} != arg shape {arg.shape}")
        flat_idx = np.arange(arg.size)
        if max_coords is not None and arg.size > max_coords:
            flat_idx = np.sort(rng.choice(arg.size, size=max_coords, replace=False))
        worst = 0.0
        for i in flat_idx:
            idx = np.unravel_index(i, arg.shape)
            orig = arg[idx]
            arg[idx] = orig + step
            up = float(np.sum(cot * op.forward(*args)))
            arg[idx] = orig - step
            down = float(np.sum(cot * op.forward(*args)))
            arg[idx] = orig
            fd = (up - down) / (2.0 * step)
            worst = max(worst, float(relative_error(grad[idx], fd, floor)))
        per_arg.append(worst)
        checked += len(flat_idx)
    return GradCheckReport(op.name, max(per_arg, default=0.0), per_arg, checked, tol)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write a binary P6 PPM with maxval 255."""
    data = to_uint8(img)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1  # single whitespace byte ends the header


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    (w, h, maxval), pos = _ppm_tokens(buf, 3, 2)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return from_uint8(raw.reshape(h, w, 3))


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PPM or any Pillow-readable image as float RGB in [0, 1]."""
    if str(path).lower().endswith((".ppm", ".pnm")):
        return read_ppm(path)
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    if str(path).lower().endswith((".ppm", ".pnm")):
        write_ppm(path, img)
        return
    from PIL import Image as PILImage

    PILImage.fromarray(to_uint8(img), mode="RGB").save(path)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to ``size`` x ``size``; no-op when already that size."""
    if img.shape[0] == size and img.shape[1] == size:
        return img
    from PIL import Image as PILImage

    chans = [np.asarray(PILImage.fromarray(img[..., c].astype(np.float32), mode="F")
                        .resize((size, size), PILImage.BILINEAR), dtype=np.float64)
             for c in range(3)]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)
