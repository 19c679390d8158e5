"""Dense flow fields, block matching, token-resolution warping and FB masks.

Convention: a flow ``F_{t->t-1}`` stores, at each position ``p`` of frame
``t``, the displacement ``(dx, dy)`` that lands on the corresponding point of
frame ``t-1``. Backward warping frame ``t-1`` with it reproduces frame ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateTarget, ResolutionMismatch, SizeMismatch, ValidationError

PIXEL = "pixel"
TOKEN = "token"

DEFAULT_ALPHA = 0.01
DEFAULT_BETA = 0.5


@dataclass(frozen=True, eq=False)
class FlowField:
    data: np.ndarray  # (h, w, 2), (dx, dy)
    level: str = PIXEL

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValidationError(f"flow data must be (h, w, 2), got {self.data.shape}")
        if self.level not in (PIXEL, TOKEN):
            raise ValidationError(f"unknown flow level {self.level!r}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("flow contains non-finite displacements")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @classmethod
    def zeros(cls, h: int, w: int, level: str = PIXEL) -> "FlowField":
        return cls(np.zeros((h, w, 2)), level)

    @classmethod
    def constant(cls, h: int, w: int, dx: float, dy: float, level: str = PIXEL) -> "FlowField":
        data = np.empty((h, w, 2))
        data[..., 0], data[..., 1] = dx, dy
        return cls(data, level)


class Warped(NamedTuple):
    values: np.ndarray
    inbounds: np.ndarray


def sample(arr: np.ndarray, x: np.ndarray, y: np.ndarray, mode: str = "bilinear") -> Warped:
    """Sample ``arr`` (h, w, c) at real coordinates; outside corners read as zero.

    A sample is flagged in bounds when it lies in ``[0, w-1] x [0, h-1]``.
    Samples entirely off the map come back as zero vectors.
    """
    h, w, c = arr.shape
    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    if mode == "nearest":
        xi, yi = np.rint(x).astype(int), np.rint(y).astype(int)
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.where(ok[..., None], arr[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
    elif mode == "bilinear":
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        fx = (x - x0)[..., None]
        fy = (y - y0)[..., None]

        def corner(yy, xx):
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            vals = arr[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            return np.where(ok[..., None], vals, 0.0)

        out = ((1 - fy) * ((1 - fx) * corner(y0, x0) + fx * corner(y0, x0 + 1))
               + fy * ((1 - fx) * corner(y0 + 1, x0) + fx * corner(y0 + 1, x0 + 1)))
    else:
        raise ValidationError(f"unknown interpolation mode {mode!r}")
    return Warped(out, inb)


def backward_warp(flow: np.ndarray, source: np.ndarray, mode: str = "bilinear") -> Warped:
    """``out(x, y) = source(x + dx, y + dy)`` for a raw ``(h, w, 2)`` flow."""
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample(source, xs + flow[..., 0], ys + flow[..., 1], mode)


def warp_tokens(flow: FlowField, prev_tokens: np.ndarray, mode: str = "bilinear") -> Warped:
    """Backward-warp a token map with a token-level flow."""
    if flow.level != TOKEN:
        raise ResolutionMismatch("token warping needs a token-level flow; downsample first")
    if flow.shape != prev_tokens.shape[:2]:
        raise ResolutionMismatch(f"flow {flow.shape} vs tokens {prev_tokens.shape[:2]}")
    return backward_warp(flow.data, np.asarray(prev_tokens, dtype=np.float64), mode)


def estimate_flow_block_matching(src: np.ndarray, dst: np.ndarray, patch: int = 7,
                                 radius: int = 4) -> FlowField:
    """Integer SSD block matching; returns ``F_{dst->src}`` on ``dst``'s pixels.

    With ``src`` = frame t-1 and ``dst`` = frame t this is ``F_{t->t-1}``.
    Images are edge-padded. Ties prefer the smaller displacement, then the
    lexicographically smaller ``(dy, dx)``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape:
        raise SizeMismatch(f"frame sizes differ: {src.shape} vs {dst.shape}")
    if patch < 1 or patch % 2 == 0:
        raise ValidationError("patch size must be a positive odd number")
    if radius < 0:
        raise ValidationError("search radius must be >= 0")
    if src.ndim == 2:
        src, dst = src[..., None], dst[..., None]
    h, w = dst.shape[:2]
    half = patch // 2
    pad = half + radius
    src_p = np.pad(src, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    dst_p = np.pad(dst, ((half, half), (half, half), (0, 0)), mode="edge")
    span = np.arange(-radius, radius + 1)
    candidates = sorted(((dy, dx) for dy in span for dx in span),
                        key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    best = np.full((h, w), np.inf)
    flow = np.zeros((h, w, 2))
    for dy, dx in candidates:
        shifted = src_p[radius + dy: radius + dy + h + 2 * half,
                        radius + dx: radius + dx + w + 2 * half]
        sq = ((dst_p - shifted) ** 2).sum(axis=2)
        cost = sliding_window_view(sq, (patch, patch)).sum(axis=(-2, -1))
        better = cost < best
        best[better] = cost[better]
        flow[better] = (dx, dy)
    return FlowField(flow, PIXEL)


def downsample_flow(pixel_flow: FlowField, token_h: int, token_w: int) -> FlowField:
    """Average each token cell's pixel block and rescale to token units.

    Pixel row ``i`` belongs to cell ``floor(i * token_h / h)`` (columns alike),
    which also covers sizes that do not divide evenly.
    """
    if pixel_flow.level != PIXEL:
        raise ResolutionMismatch("downsampling expects a pixel-level flow")
    h, w = pixel_flow.shape
    if not (1 <= token_h <= h and 1 <= token_w <= w):
        raise DegenerateTarget(f"cannot downsample {h}x{w} flow to {token_h}x{token_w}")
    rows = (np.arange(h) * token_h) // h
    cols = (np.arange(w) * token_w) // w
    cell = (rows[:, None] * token_w + cols[None, :]).ravel()
    counts = np.bincount(cell, minlength=token_h * token_w)
    out = np.empty((token_h * token_w, 2))
    for c in range(2):
        out[:, c] = np.bincount(cell, weights=pixel_flow.data[..., c].ravel(),
                                minlength=token_h * token_w) / counts
    out[:, 0] *= token_w / w
    out[:, 1] *= token_h / h
    return FlowField(out.reshape(token_h, token_w, 2), TOKEN)


def fb_consistency_mask(forward: FlowField, backward: FlowField, alpha: float = DEFAULT_ALPHA,
                        beta: float = DEFAULT_BETA) -> np.ndarray:
    """Valid where ``|f + b(p + f)|^2 < alpha (|f|^2 + |b(p + f)|^2) + beta``.

    ``b`` is sampled bilinearly; lookups leaving the field are invalid.
    """
    if forward.shape != backward.shape or forward.level != backward.level:
        raise ResolutionMismatch("forward and backward flows must share resolution")
    f = forward.data
    b, inb = backward_warp(f, backward.data)
    residual = np.sum((f + b) ** 2, axis=2)
    bound = alpha * (np.sum(f * f, axis=2) + np.sum(b * b, axis=2)) + beta
    return (residual < bound) & inb
