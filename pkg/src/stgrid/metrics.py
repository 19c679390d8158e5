"""Temporal consistency (warping error) and fidelity (PSNR, SSIM) metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AlignmentError, ShapeMismatch
from .flow import FlowField, backward_warp
from .grid import TraversalPlan

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# reserved for pipelines that attach pretrained-network scores
RESERVED_METRICS = ("lpips", "clip_dir", "clip_sim", "met3r")


@dataclass
class MetricReport:
    name: str
    value: float
    scale: str = "1"
    per_frame: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        value = self.value
        if isinstance(value, float) and math.isinf(value):
            value = "inf"
        return {"metric": self.name, "value": value, "scale": self.scale, "per_frame": self.per_frame}


def _flow_array(flow) -> np.ndarray:
    return flow.data if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)


def pair_warping_error(prev: np.ndarray, cur: np.ndarray, flow, valid=None) -> float | None:
    """Mean over valid pixels of the squared RGB norm of ``cur - warp(prev)``.

    Returns ``None`` when no pixel is valid.
    """
    f = _flow_array(flow)
    if f.shape[:2] != cur.shape[:2] or prev.shape != cur.shape:
        raise AlignmentError(f"flow {f.shape[:2]} does not align with frames {cur.shape[:2]}")
    warped, inb = backward_warp(f, prev)
    ok = inb if valid is None else (inb & np.asarray(valid, dtype=bool))
    if not ok.any():
        return None
    err = np.sum((cur - warped) ** 2, axis=2)
    return float(err[ok].mean())


def _warping_error(frames, flows, masks, pairs, name) -> MetricReport | None:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[None]
    per_frame = []
    for v, t in pairs:
        if (v, t) not in flows:
            raise AlignmentError(f"no flow for view {v}, time {t}->{t - 1}", cell=[v, t])
        fwd = flows[(v, t)]
        if isinstance(fwd, tuple):
            fwd = fwd[0]
        valid = None if masks is None else masks.get((v, t))
        e = pair_warping_error(frames[v, t - 1], frames[v, t], fwd, valid)
        if e is not None:
            per_frame.append({"v": v, "t": t, "value": e})
    if not per_frame:
        return None
    value = float(np.mean([p["value"] for p in per_frame]))
    return MetricReport(name, value, "1", per_frame)


def warping_error(frames, flows, masks=None, name: str = "warp_err_local") -> MetricReport:
    """Average of per-pair warping errors over every view and every t >= 1.

    ``frames`` is ``(V, T, H, W, 3)`` (or ``(T, H, W, 3)`` for one view);
    ``flows[(v, t)]`` is ``F_{t->t-1}`` (or a ``(forward, backward)`` pair);
    ``masks[(v, t)]`` is an optional validity mask on frame ``t``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[None]
    V, T = frames.shape[:2]
    pairs = [(v, t) for v in range(V) for t in range(1, T)]
    report = _warping_error(frames, flows, masks, pairs, name)
    if report is None:
        raise AlignmentError("no valid pixels in any frame pair")
    return report


def boundary_pairs(plan: TraversalPlan) -> list[tuple[int, int]]:
    """Temporal pairs ``(v, t-1 -> t)`` whose two frames are introduced by
    different plan steps, i.e. that straddle a sub-grid boundary."""
    first = plan.first_step()
    pairs = []
    for v in range(plan.views):
        for t in range(1, plan.times):
            if first[(v, t)] != first[(v, t - 1)]:
                pairs.append((v, t))
    return pairs


def boundary_warping_error(plan: TraversalPlan, frames, flows, masks=None) -> MetricReport | None:
    """Warping error restricted to boundary pairs; ``None`` when there are none."""
    pairs = boundary_pairs(plan)
    if not pairs:
        return None
    return _warping_error(frames, flows, masks, pairs, "warp_err_global")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"frames differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` positions and channels.

    Window statistics are uniform-weighted population moments.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeMismatch(f"frames smaller than the {window}x{window} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())
