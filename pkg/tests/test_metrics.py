import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stgrid.errors import AlignmentError, ShapeMismatch
from stgrid.flow import FlowField, backward_warp
from stgrid.grid import asymmetric_traversal, monocular_traversal
from stgrid.metrics import (MetricReport, boundary_pairs, boundary_warping_error,
                            pair_warping_error, psnr, ssim, warping_error)
from stgrid.synth import generate, preset


def zero_flows(V, T, h, w):
    return {(v, t): FlowField.zeros(h, w) for v in range(V) for t in range(1, T)}


def ssim_loop(a, b, win=8, c1=0.01 ** 2, c2=0.03 ** 2):
    h, w, C = a.shape
    vals = []
    for ch in range(C):
        for y in range(h - win + 1):
            for x in range(w - win + 1):
                pa = a[y:y + win, x:x + win, ch].ravel().tolist()
                pb = b[y:y + win, x:x + win, ch].ravel().tolist()
                n = len(pa)
                ma, mb = sum(pa) / n, sum(pb) / n
                va = sum((p - ma) ** 2 for p in pa) / n
                vb = sum((p - mb) ** 2 for p in pb) / n
                cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / n
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


# psnr / ssim ------------------------------------------------------------------

def test_psnr_closed_form(rng):
    a = rng.uniform(0, 0.9, size=(16, 16, 3))
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    assert psnr(a, a) == math.inf


def test_psnr_monotone_in_mse(rng):
    a = rng.uniform(size=(8, 8, 3))
    vals = [psnr(a, a + d) for d in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.uniform(size=(12, 14, 3)), rng.uniform(size=(12, 14, 3))
    assert ssim(a, a) == 1.0
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_matches_loop(rng):
    a = rng.uniform(size=(10, 11, 3))
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-9


def test_fidelity_errors():
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))


# warping error ------------------------------------------------------------------

def test_static_video_zero_error():
    frames = np.repeat(np.random.default_rng(0).uniform(size=(2, 1, 8, 8, 3)), 4, axis=1)
    rep = warping_error(frames, zero_flows(2, 4, 8, 8))
    assert rep.value == 0.0 and rep.name == "warp_err_local"


def test_residual_delta_convention():
    delta = 0.05
    r = np.random.default_rng(3)
    base = r.uniform(0.2, 0.7, size=(6, 7, 3))
    frames = np.stack([base, base + delta, base + 2 * delta])[None]
    rep = warping_error(frames, zero_flows(1, 3, 6, 7))
    # loop oracle: squared RGB norm summed over channels, mean over pixels, mean over pairs
    vals = []
    for t in (1, 2):
        s = 0.0
        for y in range(6):
            for x in range(7):
                s += sum((frames[0, t, y, x, c] - frames[0, t - 1, y, x, c]) ** 2 for c in range(3))
        vals.append(s / 42)
    assert abs(rep.value - sum(vals) / 2) < 1e-12
    assert abs(rep.value - 3 * delta ** 2) < 1e-12


def test_warping_error_uses_flow_and_mask():
    r = np.random.default_rng(2)
    prev = r.uniform(size=(6, 6, 3))
    flow = FlowField.constant(6, 6, 1.0, 0.0)
    cur, inb = backward_warp(flow.data, prev)
    assert pair_warping_error(prev, cur, flow) == 0.0
    cur[:, :2] += 0.3
    valid = np.ones((6, 6), bool)
    valid[:, :2] = False
    assert pair_warping_error(prev, cur, flow, valid) == 0.0
    assert pair_warping_error(prev, cur, flow, np.zeros((6, 6), bool)) is None


def test_translating_sprite_error_small():
    scene = generate(preset("translating"))
    flows = {k: f for k, (f, _) in scene.flows.items()}
    valid = {k: ~m for k, m in scene.occlusion.items()}
    assert warping_error(scene.grid.frames, flows, valid).value < 1e-3


@given(st.integers(0, 2 ** 31), st.floats(-0.2, 0.2))
def test_warping_error_constant_invariance(seed, c):
    r = np.random.default_rng(seed)
    frames = r.uniform(0.25, 0.75, size=(1, 3, 6, 6, 3))
    flows = {(0, t): FlowField(r.integers(-1, 2, size=(6, 6, 2)).astype(float)) for t in (1, 2)}
    a = warping_error(frames, flows).value
    b = warping_error(frames + c, flows).value
    assert abs(a - b) < 1e-12


def test_warping_error_alignment():
    frames = np.zeros((1, 3, 6, 6, 3))
    with pytest.raises(AlignmentError):
        warping_error(frames, {(0, 1): FlowField.zeros(6, 6)})
    with pytest.raises(AlignmentError):
        warping_error(frames, zero_flows(1, 3, 5, 6))


def test_report_breakdown_mean():
    r = np.random.default_rng(5)
    frames = r.uniform(size=(2, 4, 6, 6, 3))
    rep = warping_error(frames, zero_flows(2, 4, 6, 6))
    assert abs(np.mean([p["value"] for p in rep.per_frame]) - rep.value) < 1e-9
    d = MetricReport("psnr", math.inf, "dB").to_dict()
    assert d["value"] == "inf"


# boundary variant -----------------------------------------------------------------

def test_boundary_pairs_hand_enumeration():
    assert boundary_pairs(asymmetric_traversal(2, 3)) == [(0, 2), (1, 2)]
    assert boundary_pairs(asymmetric_traversal(2, 2)) == []
    # V=3, T=3: row 2 is first introduced at t=0 by step 2 and at t=2 by step 3
    assert boundary_pairs(asymmetric_traversal(3, 3)) == [(0, 2), (1, 2), (2, 2)]
    assert boundary_pairs(monocular_traversal(6)) == [(0, 4)]


def test_boundary_metric_vacuous_and_zero():
    frames = np.zeros((2, 2, 6, 6, 3))
    assert boundary_warping_error(asymmetric_traversal(2, 2), frames, zero_flows(2, 2, 6, 6)) is None
    same = np.full((2, 3, 6, 6, 3), 0.4)
    rep = boundary_warping_error(asymmetric_traversal(2, 3), same, zero_flows(2, 3, 6, 6))
    assert rep.value == 0.0 and rep.name == "warp_err_global"
    assert [(p["v"], p["t"]) for p in rep.per_frame] == [(0, 2), (1, 2)]
