"""Dual-stream joint attention over a sub-grid, with 2D axial RoPE.

Token maps are ``(h, w, d)`` arrays. Text tokens are ``(L, d)`` and are
shared by every frame of a grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimMismatch, FormatError, NonFiniteLogit, ShapeMismatch, ValidationError

RMS_EPS = 1e-6


@dataclass(frozen=True)
class RopeSpec:
    """Axial rotary embedding: the first ``row_channels`` of each head encode
    the token row, the remaining ones the column."""

    head_dim: int
    base: float = 10000.0
    row_channels: int | None = None

    def __post_init__(self):
        row = self.row_channels
        if row is None:
            row = (self.head_dim // 4) * 2
            object.__setattr__(self, "row_channels", row)
        col = self.head_dim - row
        if row % 2 or col % 2 or row < 0 or col < 0:
            raise DimMismatch(f"RoPE axis split ({row}, {col}) of {self.head_dim} must be even")

    @property
    def col_channels(self) -> int:
        return self.head_dim - self.row_channels

    def angles(self, positions: np.ndarray) -> np.ndarray:
        """Rotation angle per position and channel pair, ``(n, head_dim // 2)``."""
        positions = np.asarray(positions, dtype=np.float64)
        parts = []
        for axis, c in ((0, self.row_channels), (1, self.col_channels)):
            if c == 0:
                continue
            inv_freq = self.base ** (-np.arange(0, c, 2, dtype=np.float64) / c)
            parts.append(positions[:, axis:axis + 1] * inv_freq[None, :])
        return np.concatenate(parts, axis=1)


def grid_positions(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def rope_embed(x: np.ndarray, positions: np.ndarray, spec: RopeSpec) -> np.ndarray:
    """Rotate consecutive channel pairs of ``x`` (``(..., n, head_dim)``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.head_dim:
        raise DimMismatch(f"vector dim {x.shape[-1]} != RoPE head dim {spec.head_dim}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2], 2):
        raise DimMismatch(f"positions {positions.shape} do not match {x.shape[-2]} vectors")
    theta = spec.angles(positions)
    cos, sin = np.cos(theta), np.sin(theta)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Per-layer projections. ``w*`` act on image tokens, ``t*`` on text tokens.

    ``wo`` of ``None`` means no output projection.
    """

    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    tq: np.ndarray
    tk: np.ndarray
    tv: np.ndarray
    wo: np.ndarray | None = None

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.heads < 1 or d % self.heads:
            raise DimMismatch(f"{self.heads} heads do not divide d={d}")
        for name in ("wq", "wk", "wv", "tq", "tk", "tv", "wo"):
            m = getattr(self, name)
            if m is None:
                continue
            if m.shape != (d, d):
                raise DimMismatch(f"{name} has shape {m.shape}, expected {(d, d)}")
            if not np.all(np.isfinite(m)):
                raise ValidationError(f"{name} contains non-finite weights")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    def tensors(self) -> dict[str, np.ndarray]:
        names = ("wq", "wk", "wv", "tq", "tk", "tv", "wo")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


def init_params(d: int, heads: int = 1, seed: int = 0, output_proj: bool = True,
                gain: float = 1.0) -> AttentionParams:
    rng = np.random.default_rng(seed)
    names = ["wq", "wk", "wv", "tq", "tk", "tv"] + (["wo"] if output_proj else [])
    mats = {n: rng.normal(0.0, gain / math.sqrt(d), size=(d, d)) for n in names}
    return AttentionParams(heads=heads, **mats)


def init_stack(d: int, depth: int, heads: int = 1, seed: int = 0, **kw) -> list[AttentionParams]:
    seeds = np.random.SeedSequence(seed).spawn(depth)
    return [init_params(d, heads, seed=int(s.generate_state(1)[0]), **kw) for s in seeds]


class JointKV(NamedTuple):
    keys: np.ndarray       # (n, d), un-rotated
    values: np.ndarray     # (n, d)
    positions: np.ndarray  # (n, 2) intra-frame (row, col)


def _check_maps(maps: Sequence[np.ndarray]) -> tuple[int, int, int]:
    if not maps:
        raise ShapeMismatch("need at least one token map")
    shape = np.shape(maps[0])
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeMismatch(f"token map must be (h, w, d), got {shape}")
    for m in maps[1:]:
        if np.shape(m) != shape:
            raise ShapeMismatch(f"token maps differ in shape: {np.shape(m)} vs {shape}")
    return shape


def build_joint_kv(member_tokens: Sequence[np.ndarray], params: AttentionParams) -> JointKV:
    """Concatenate keys/values of the member frames in the given order."""
    h, w, d = _check_maps(member_tokens)
    if d != params.d:
        raise ShapeMismatch(f"token dim {d} != parameter dim {params.d}")
    flat = np.concatenate([np.asarray(m, dtype=np.float64).reshape(h * w, d) for m in member_tokens])
    pos = np.tile(grid_positions(h, w), (len(member_tokens), 1))
    return JointKV(flat @ params.wk, flat @ params.wv, pos)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def stga(query_tokens: np.ndarray, joint: JointKV, text: np.ndarray, params: AttentionParams,
         rope: RopeSpec, return_weights: bool = False):
    """Attention of one frame's image queries over ``[text; sub-grid]`` keys.

    RoPE rotates image queries and image keys only. Returns the image-query
    rows as a token map, plus the ``(heads, hw, L + n)`` weights if asked.
    """
    h, w, d = _check_maps([query_tokens])
    text = np.asarray(text, dtype=np.float64) if np.size(text) else np.zeros((0, d))
    if text.ndim != 2 or d != params.d or joint.keys.shape[1] != d or text.shape[1] != d:
        raise ShapeMismatch("query, key and text dims must agree with the parameters")
    if rope.head_dim != params.d_k:
        raise ShapeMismatch(f"RoPE head dim {rope.head_dim} != d_k {params.d_k}")
    x = np.asarray(query_tokens, dtype=np.float64).reshape(h * w, d)
    H = params.heads
    q = rope_embed(_split_heads(x @ params.wq, H), grid_positions(h, w), rope)
    k_img = rope_embed(_split_heads(joint.keys, H), joint.positions, rope)
    k = np.concatenate([_split_heads(text @ params.tk, H), k_img], axis=1)
    v = np.concatenate([_split_heads(text @ params.tv, H), _split_heads(joint.values, H)], axis=1)
    with np.errstate(over="ignore", invalid="ignore"):  # reported below as a typed error
        logits = q @ k.transpose(0, 2, 1) / math.sqrt(params.d_k)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogit("attention logits are not finite")
    weights = softmax(logits)
    out = (weights @ v).transpose(1, 0, 2).reshape(h * w, d)
    if params.wo is not None:
        out = out @ params.wo
    out = out.reshape(h, w, d)
    return (out, weights) if return_weights else out


@dataclass(frozen=True)
class LayerRange:
    """Half-open block index range ``[start, end)`` where STGA is active."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValidationError(f"layer range [{self.start}, {self.end}) must satisfy 0 <= start < end")

    def __contains__(self, layer: int) -> bool:
        return self.start <= layer < self.end


def layer_gate(layer_index: int, vital: LayerRange) -> bool:
    return layer_index in vital


def default_vital_range(depth: int) -> LayerRange:
    if depth >= 60:
        return LayerRange(0, 30)
    return LayerRange(0, max(1, depth // 2))


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def run_block_stack(member_tokens: Sequence[np.ndarray], text: np.ndarray, depth: int,
                    vital: LayerRange, layer_params: Sequence[AttentionParams],
                    rope: RopeSpec | None = None) -> list[np.ndarray]:
    """Toy stack of attention blocks; gated layers attend over the whole sub-grid.

    Each block is ``x <- rms_norm(x + attn(x))``; ungated blocks attend only
    to the frame's own tokens plus text.
    """
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    if len(layer_params) < depth:
        raise ValidationError(f"{len(layer_params)} layer parameter sets for depth {depth}")
    tokens = [np.asarray(m, dtype=np.float64) for m in member_tokens]
    _check_maps(tokens)
    for layer in range(depth):
        params = layer_params[layer]
        rp = rope or RopeSpec(params.d_k)
        if layer_gate(layer, vital):
            joint = build_joint_kv(tokens, params)
            outs = [stga(x, joint, text, params, rp) for x in tokens]
        else:
            outs = [stga(x, build_joint_kv([x], params), text, params, rp) for x in tokens]
        tokens = [rms_norm(x + o) for x, o in zip(tokens, outs)]
    return tokens


# weight files ---------------------------------------------------------------

def save_params(path, layer_params: Sequence[AttentionParams]) -> None:
    """Raw little-endian float32 blob at ``path`` plus ``path + '.json'`` sidecar."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for i, p in enumerate(layer_params):
        for name, arr in p.tensors().items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": f"layer{i}.{name}", "shape": list(arr.shape), "offset": offset})
            chunks.append(data)
            offset += len(data)
    path.write_bytes(b"".join(chunks))
    heads = [p.heads for p in layer_params]
    Path(str(path) + ".json").write_text(json.dumps({"heads": heads, "tensors": entries}, indent=1))


def load_params(path) -> list[AttentionParams]:
    path = Path(path)
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
        blob = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read weights {path}: {exc}") from None
    layers: list[dict] = [dict() for _ in meta["heads"]]
    for e in meta["tensors"]:
        layer, name = e["name"].split(".")
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        layers[int(layer[5:])][name] = arr.reshape(e["shape"]).astype(np.float64)
    return [AttentionParams(heads=h, **mats) for h, mats in zip(meta["heads"], layers)]
