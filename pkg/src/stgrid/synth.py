"""Synthetic multi-view videos with closed-form optical flow.

A planar scene (smooth periodic background plus opaque textured sprites) is
seen by ``V`` cameras that differ only by a horizontal offset. Sprites move
rigidly, so the flow of every pixel follows from the motion of the layer
that is visible there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from .errors import SpecError
from .flow import PIXEL, FlowField
from .grid import CameraTimeGrid

BACKGROUND = -1


class Sprite(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["rect", "blob"] = "rect"
    center: tuple[float, float]
    size: tuple[float, float] = (8.0, 8.0)  # rect (w, h); blob uses size[0] as radius
    color: tuple[float, float, float] = (0.9, 0.3, 0.2)
    motion: Literal["linear", "sinusoidal"] = "linear"
    velocity: tuple[float, float] = (0.0, 0.0)  # px/frame, linear motion
    amplitude: tuple[float, float] = (0.0, 0.0)  # px, sinusoidal motion
    period: float = 8.0  # frames

    @model_validator(mode="after")
    def _check(self):
        if min(self.size) <= 0:
            raise ValueError("sprite size must be positive")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("sprite color must lie in [0, 1]")
        if self.period <= 0:
            raise ValueError("period must be positive")
        return self

    def position(self, t: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.motion == "linear":
            return c + np.asarray(self.velocity) * t
        return c + np.asarray(self.amplitude) * np.sin(2 * np.pi * t / self.period)

    def max_step(self) -> float:
        """Upper bound on per-frame displacement along either axis."""
        if self.motion == "linear":
            return float(max(abs(v) for v in self.velocity))
        return float(max(abs(a) for a in self.amplitude) * 2 * np.pi / self.period)


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    views: int = Field(3, ge=1)
    times: int = Field(4, ge=2)
    height: int = Field(32, ge=4, le=1024)
    width: int = Field(32, ge=4, le=1024)
    disparity: float = 4.0  # px horizontal offset between neighbouring views
    sprites: list[Sprite] = Field(default_factory=list)
    max_motion: float = Field(4.0, ge=0)
    quantize: bool = True
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        for i, s in enumerate(self.sprites):
            if s.max_step() > self.max_motion + 1e-12:
                raise ValueError(f"sprite {i} moves {s.max_step():.3g} px/frame, "
                                 f"more than max_motion={self.max_motion}")
        return self


def parse_spec(data) -> SceneSpec:
    try:
        return data if isinstance(data, SceneSpec) else SceneSpec.model_validate(data)
    except PydanticError as exc:
        raise SpecError(f"invalid scene spec: {exc.errors()[0]['msg']}",
                        issues=[e["msg"] for e in exc.errors()]) from None


@dataclass
class SynthScene:
    spec: SceneSpec
    grid: CameraTimeGrid
    flows: dict[tuple[int, int], tuple[FlowField, FlowField]]  # (v, t) -> (F_{t->t-1}, F_{t-1->t})
    occlusion: dict[tuple[int, int], np.ndarray]  # (v, t) -> True where F_{t->t-1} is unreliable
    labels: np.ndarray  # (V, T, H, W) visible layer index, -1 background

    def valid(self, v: int, t: int) -> np.ndarray:
        return ~self.occlusion[(v, t)]


class _Texture:
    """Band-limited periodic texture ``sum_k a_k sin(fx_k x + fy_k y + phase_k)``."""

    def __init__(self, rng: np.random.Generator, n: int = 6, max_freq: float = 0.6):
        self.fx = rng.uniform(-max_freq, max_freq, (n, 3))
        self.fy = rng.uniform(-max_freq, max_freq, (n, 3))
        self.phase = rng.uniform(0, 2 * np.pi, (n, 3))
        self.amp = rng.uniform(0.5, 1.0, (n, 3))
        self.amp /= self.amp.sum(axis=0)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = (x[..., None, None] * self.fx + y[..., None, None] * self.fy + self.phase)
        return (self.amp * np.sin(arg)).sum(axis=-2)  # in [-1, 1]


def _layers(spec: SceneSpec):
    rng = np.random.default_rng(spec.seed)
    background = _Texture(rng, n=6, max_freq=0.5)
    sprite_tex = [_Texture(rng, n=3, max_freq=0.9) for _ in spec.sprites]
    return background, sprite_tex


def _coverage(sprite: Sprite, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    if sprite.kind == "rect":
        hw, hh = sprite.size[0] / 2, sprite.size[1] / 2
        return (u >= -hw) & (u < hw) & (w >= -hh) & (w < hh)
    return u * u + w * w < sprite.size[0] ** 2


def render_view(spec: SceneSpec, v: int, t: int, textures=None) -> tuple[np.ndarray, np.ndarray]:
    """Frame and layer-label map of view ``v`` at time ``t``."""
    background, sprite_tex = textures or _layers(spec)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    X = xs + spec.disparity * v
    frame = 0.5 + 0.3 * background(X, ys)
    labels = np.full((spec.height, spec.width), BACKGROUND, dtype=np.int64)
    for i, (sprite, tex) in enumerate(zip(spec.sprites, sprite_tex)):
        cx, cy = sprite.position(t)
        u, w = X - cx, ys - cy
        inside = _coverage(sprite, u, w)
        if sprite.kind == "rect":
            shade = 0.75 + 0.25 * tex(u, w)
        else:
            sigma = sprite.size[0] / 2
            shade = (0.45 + 0.55 * np.exp(-(u * u + w * w) / (2 * sigma ** 2)))[..., None] \
                * (0.85 + 0.15 * tex(u, w))
        color = np.asarray(sprite.color) * shade
        frame = np.where(inside[..., None], color, frame)
        labels[inside] = i
    return np.clip(frame, 0.0, 1.0), labels


def layer_flow(spec: SceneSpec, labels: np.ndarray, t_from: int, t_to: int) -> np.ndarray:
    """Displacement from time ``t_from`` to ``t_to`` of the layer visible in ``labels``."""
    flow = np.zeros(labels.shape + (2,))
    for i, sprite in enumerate(spec.sprites):
        flow[labels == i] = sprite.position(t_to) - sprite.position(t_from)
    return flow


def occlusion_mask(flow: np.ndarray, labels_to: np.ndarray, labels_from: np.ndarray) -> np.ndarray:
    """True where a backward lookup ``p + flow`` leaves the canvas or touches a
    different layer in any bilinear corner with non-zero weight."""
    h, w = labels_to.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = xs + flow[..., 0], ys + flow[..., 1]
    occ = (sx < 0) | (sx > w - 1) | (sy < 0) | (sy > h - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    for dy in (0, 1):
        for dx in (0, 1):
            used = np.ones_like(occ)
            if dx:
                used &= sx > x0
            if dy:
                used &= sy > y0
            cx = np.clip(x0 + dx, 0, w - 1)
            cy = np.clip(y0 + dy, 0, h - 1)
            occ |= used & (labels_from[cy, cx] != labels_to)
    return occ


def generate(spec) -> SynthScene:
    """Render the grid, analytic flows and occlusion masks for ``spec``."""
    spec = parse_spec(spec)
    textures = _layers(spec)
    V, T = spec.views, spec.times
    frames = np.empty((V, T, spec.height, spec.width, 3))
    labels = np.empty((V, T, spec.height, spec.width), dtype=np.int64)
    for v in range(V):
        for t in range(T):
            frames[v, t], labels[v, t] = render_view(spec, v, t, textures)
    if spec.quantize:
        frames = np.rint(frames * 255.0) / 255.0
    flows, occlusion = {}, {}
    for v in range(V):
        for t in range(1, T):
            fwd = layer_flow(spec, labels[v, t], t, t - 1)
            bwd = layer_flow(spec, labels[v, t - 1], t - 1, t)
            flows[(v, t)] = (FlowField(fwd, PIXEL), FlowField(bwd, PIXEL))
            occlusion[(v, t)] = occlusion_mask(fwd, labels[v, t], labels[v, t - 1])
    return SynthScene(spec, CameraTimeGrid(frames), flows, occlusion, labels)


# presets --------------------------------------------------------------------

def preset(name: str, **overrides) -> SceneSpec:
    """Named scenes used by the tests, the acceptance suite and the CLI."""
    base: dict = {"views": 3, "times": 4, "height": 32, "width": 32, "seed": 7}
    if name == "static":
        base["sprites"] = [{"kind": "rect", "center": (15, 14), "size": (10, 8)}]
    elif name == "translating":
        base["sprites"] = [{"kind": "rect", "center": (11, 16), "size": (8, 10),
                            "velocity": (2.0, 0.0)}]
    elif name == "crossing":
        base["sprites"] = [
            {"kind": "rect", "center": (8, 14), "size": (8, 8), "velocity": (2.0, 0.0),
             "color": (0.9, 0.2, 0.2)},
            {"kind": "blob", "center": (24, 16), "size": (4, 4), "velocity": (-2.0, 0.0),
             "color": (0.2, 0.3, 0.9)},
        ]
    elif name == "acceptance":
        base.update(views=3, times=6, height=48, width=48)
        base["sprites"] = [
            {"kind": "rect", "center": (14, 18), "size": (10, 12), "velocity": (2.0, 0.0),
             "color": (0.9, 0.35, 0.2)},
            {"kind": "blob", "center": (32, 30), "size": (6, 6), "velocity": (0.0, -2.0),
             "color": (0.25, 0.4, 0.95)},
        ]
    else:
        raise SpecError(f"unknown preset {name!r}")
    base.update(overrides)
    return parse_spec(base)
