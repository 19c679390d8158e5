"""Context token propagation along a traversal plan.

Each plan step encodes its four member frames to tokens, inherits tokens of
frames already fused by earlier steps, runs the editor, and (for steps that
continue a temporal sweep) replaces the newly introduced frames with tokens
warped from the previous time step where the flow is trustworthy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .attention import AttentionParams, LayerRange, RopeSpec, run_block_stack
from .errors import (DimensionMismatch, EditorFailure, MissingCache, MissingFlow,
                     ResolutionMismatch, StgridError, ValidationError)
from .flow import (DEFAULT_ALPHA, DEFAULT_BETA, FlowField, downsample_flow,
                   fb_consistency_mask, warp_tokens)
from .grid import CameraTimeGrid, Cell, Step, TraversalPlan

log = logging.getLogger(__name__)

PENDING, FUSED, FINALIZED = "pending", "fused", "finalized"


# pixels <-> tokens ----------------------------------------------------------

def patchify(frame: np.ndarray, p: int = 2) -> np.ndarray:
    """Lossless non-overlapping ``p x p`` patches: (H, W, 3) -> (H/p, W/p, 3p^2)."""
    H, W, C = frame.shape
    if H % p or W % p:
        raise DimensionMismatch(f"frame {H}x{W} is not divisible by patch size {p}")
    x = frame.reshape(H // p, p, W // p, p, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(H // p, W // p, p * p * C).astype(np.float64)


def unpatchify(tokens: np.ndarray, p: int = 2) -> np.ndarray:
    h, w, d = tokens.shape
    C = d // (p * p)
    x = tokens.reshape(h, w, p, p, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(h * p, w * p, C)


# editors --------------------------------------------------------------------

class Editor(Protocol):
    def __call__(self, tokens: list[np.ndarray], text: np.ndarray, step: Step) -> list[np.ndarray]: ...


class IdentityEditor:
    def __call__(self, tokens, text, step):
        return [t.copy() for t in tokens]


class ConstantShiftEditor:
    """Adds one scalar to every token of a sub-grid.

    With ``jitter > 0`` the scalar varies per sub-grid (``shift + jitter * u``,
    ``u`` uniform in [-1, 1] seeded by the step anchor), mimicking an editor
    whose independent calls do not agree exactly.
    """

    def __init__(self, shift: float = 0.1, jitter: float = 0.0, seed: int = 0):
        self.shift, self.jitter, self.seed = shift, jitter, seed

    def amount(self, step: Step) -> float:
        if not self.jitter:
            return self.shift
        anchor = step.anchor if isinstance(step.anchor, tuple) else (0, step.anchor)
        rng = np.random.default_rng([self.seed, *anchor])
        return self.shift + self.jitter * rng.uniform(-1.0, 1.0)

    def __call__(self, tokens, text, step):
        c = self.amount(step)
        return [t + c for t in tokens]


class MockStackEditor:
    """Runs the toy attention stack and blends its output into the input tokens.

    The stack output is RMS-normalised, so it is rescaled to each input token's
    RMS before blending with weight ``mix``.
    """

    def __init__(self, layer_params: Sequence[AttentionParams], depth: int, vital: LayerRange,
                 text: np.ndarray | None = None, mix: float = 0.2, rope: RopeSpec | None = None):
        self.layer_params, self.depth, self.vital = list(layer_params), depth, vital
        self.text, self.mix, self.rope = text, mix, rope

    def __call__(self, tokens, text, step):
        text = self.text if text is None else text
        if text is None:
            text = np.zeros((0, tokens[0].shape[-1]))
        out = run_block_stack(tokens, text, self.depth, self.vital, self.layer_params, self.rope)
        res = []
        for x, y in zip(tokens, out):
            scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
            res.append(x + self.mix * (y * scale - x))
        return res


# state and the two propagation rules ----------------------------------------

@dataclass
class PropagationState:
    """Token cache of fused frames plus the working tokens of the current step."""

    cache: dict[Cell, np.ndarray] = field(default_factory=dict)
    status: dict[Cell, str] = field(default_factory=dict)
    working: dict[Cell, np.ndarray] = field(default_factory=dict)

    def store(self, cell: Cell, tokens: np.ndarray) -> None:
        if self.status.get(cell) == FINALIZED:
            raise ValidationError(f"frame {cell} is finalized and cannot be rewritten")
        self.cache[cell] = tokens
        self.status[cell] = FUSED


def full_token_inheritance(state: PropagationState, k: int, plan: TraversalPlan) -> list[Cell]:
    """Overwrite working tokens of step ``k``'s overlap frames with cached ones."""
    inherited = sorted(plan.overlap[k])
    for cell in inherited:
        if cell not in state.cache:
            raise MissingCache(f"step {k} {plan.steps[k]!r} overlaps {cell}, which has no cached tokens",
                               step=k, cell=list(cell))
        state.working[cell] = state.cache[cell].copy()
    return inherited


def flow_guided_replacement(current: np.ndarray, prev: np.ndarray, flow: FlowField,
                            mask: np.ndarray, mode: str = "bilinear") -> tuple[np.ndarray, np.ndarray]:
    """``M * warp(prev) + (1 - M) * current`` with ``M`` = mask & in-bounds.

    Returns the blended tokens and the effective mask.
    """
    if current.shape != prev.shape or mask.shape != current.shape[:2]:
        raise ResolutionMismatch("current tokens, previous tokens and mask must share resolution")
    warped, inb = warp_tokens(flow, prev, mode)
    m = (np.asarray(mask, dtype=bool) & inb)[..., None].astype(np.float64)
    return m * warped + (1.0 - m) * current, m[..., 0].astype(bool)


# orchestration --------------------------------------------------------------

FlowPair = tuple[FlowField, FlowField]
FlowSupplier = Callable[[int, int], FlowPair]


@dataclass(frozen=True)
class CTPConfig:
    patch: int = 2
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    inheritance: bool = True
    replacement: bool = True
    interpolation: str = "bilinear"


@dataclass
class PropagationResult:
    grid: CameraTimeGrid
    tokens: dict[Cell, np.ndarray]
    trace: list[dict]
    inheritance_log: list[tuple[int, Cell, np.ndarray, np.ndarray]]


def _flow_lookup(flows) -> FlowSupplier:
    if callable(flows):
        return flows
    if isinstance(flows, Mapping):
        return lambda v, t: flows[(v, t)]
    raise ValidationError("flows must be a mapping (v, t) -> (forward, backward) or a callable")


def propagate(grid: CameraTimeGrid, plan: TraversalPlan, editor: Editor, flows,
              config: CTPConfig = CTPConfig(), text: np.ndarray | None = None,
              record: bool = False) -> PropagationResult:
    """Run the editor over every plan step, propagating tokens between steps.

    ``flows(v, t)`` (or ``flows[(v, t)]``) must return the pixel-level pair
    ``(F_{t->t-1}, F_{t-1->t})`` for view ``v``. With ``record=True`` each
    inheritance is logged as ``(step, cell, inherited, cached)`` for checking.
    """
    if (plan.views, plan.times) != (grid.views, grid.times):
        raise ValidationError(f"plan is for a {plan.views}x{plan.times} grid, "
                              f"grid is {grid.views}x{grid.times}")
    missing = set(grid.cells()) - plan.covered()
    if missing:
        raise ValidationError(f"plan leaves {len(missing)} cells uncovered")
    lookup = _flow_lookup(flows)
    p = config.patch
    last = plan.last_step()
    state = PropagationState(status={c: PENDING for c in grid.cells()})
    out = np.empty_like(grid.frames)
    trace: list[dict] = []
    inheritance_log = []

    for k, step in enumerate(plan.steps):
        cells = list(step.cells)
        state.working = {c: patchify(grid[c], p) for c in cells}
        inherited: list[Cell] = []
        if config.inheritance:
            inherited = full_token_inheritance(state, k, plan)
            if record:
                inheritance_log.extend((k, c, state.working[c].copy(), state.cache[c].copy())
                                       for c in inherited)

        try:
            edited = editor([state.working[c] for c in cells], text, step)
        except StgridError:
            raise
        except Exception as exc:
            raise EditorFailure(f"editor failed on step {k} {step!r}: {exc}", step=k) from exc
        if len(edited) != len(cells) or any(np.shape(e) != state.working[c].shape
                                            for e, c in zip(edited, cells)):
            raise EditorFailure(f"editor returned malformed tokens on step {k} {step!r}", step=k)
        result = {c: np.asarray(e, dtype=np.float64) for c, e in zip(cells, edited)}
        for c in inherited:
            result[c] = state.cache[c]

        replaced, valid = [], []
        if config.replacement:
            for v, t in sorted(plan.replacement_region(k), key=lambda c: (c[1], c[0])):
                try:
                    fwd, bwd = lookup(v, t)
                except (KeyError, IndexError, FileNotFoundError) as exc:
                    raise MissingFlow(f"no flow for view {v}, time {t}->{t - 1} "
                                      f"needed by step {k} {step!r}", step=k, cell=[v, t]) from exc
                th, tw = result[(v, t)].shape[:2]
                ftok = downsample_flow(fwd, th, tw)
                btok = downsample_flow(bwd, th, tw)
                mask = fb_consistency_mask(ftok, btok, config.alpha, config.beta)
                result[(v, t)], eff = flow_guided_replacement(
                    result[(v, t)], result[(v, t - 1)], ftok, mask, config.interpolation)
                replaced.append((v, t))
                valid.append(eff.mean())

        for c in cells:
            if not (config.inheritance and c in plan.overlap[k]):
                state.store(c, result[c])
        for c in cells:
            if last[c] == k:
                v, t = c
                out[v, t] = unpatchify(state.cache[c], p)
                state.status[c] = FINALIZED

        entry = {"step": k, "anchor": list(step.anchor) if isinstance(step.anchor, tuple) else [step.anchor],
                 "inherited": [list(c) for c in inherited],
                 "replaced": [list(c) for c in replaced],
                 "mask_valid_fraction": float(np.mean(valid)) if valid else None}
        log.debug("step %s", entry)
        trace.append(entry)

    return PropagationResult(CameraTimeGrid(out), dict(state.cache), trace, inheritance_log)
