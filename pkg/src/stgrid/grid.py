"""Camera-time grid, 2x2 sub-grids and the asymmetric traversal plan.

Grid cells are addressed ``(v, t)`` with the view index as the slow axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DegenerateGrid, DimensionMismatch, MissingCell, OutOfBounds, TooFewFrames

Cell = tuple[int, int]


def check_frame(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] < 1 or frame.shape[1] < 1 or frame.shape[2] != 3:
        raise DimensionMismatch(f"frame must be HxWx3 with H,W > 0, got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise DimensionMismatch("frame contains non-finite values")
    return frame


@dataclass(frozen=True, eq=False)
class CameraTimeGrid:
    """V x T frames stored as one ``(V, T, H, W, 3)`` float array."""

    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 5 or self.frames.shape[-1] != 3:
            raise DimensionMismatch(f"expected (V, T, H, W, 3) frames, got {self.frames.shape}")

    @property
    def views(self) -> int:
        return self.frames.shape[0]

    @property
    def times(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def __getitem__(self, cell: Cell) -> np.ndarray:
        v, t = cell
        return self.frames[v, t]

    def cells(self):
        return [(v, t) for v in range(self.views) for t in range(self.times)]


def build_grid(frames: Iterable[tuple[int, int, np.ndarray]], V: int, T: int) -> CameraTimeGrid:
    """Place tagged frames ``(v, t, frame)`` into a complete V x T grid."""
    if V < 1 or T < 2:
        raise DegenerateGrid(f"grid needs V >= 1 and T >= 2, got V={V}, T={T}")
    placed: dict[Cell, np.ndarray] = {}
    shape = None
    for v, t, frame in frames:
        if not (0 <= v < V and 0 <= t < T):
            raise OutOfBounds(f"frame tag ({v}, {t}) outside {V}x{T} grid", cell=[v, t])
        if (v, t) in placed:
            raise DimensionMismatch(f"duplicate frame tag ({v}, {t})", cell=[v, t])
        frame = check_frame(frame)
        if shape is None:
            shape = frame.shape
        elif frame.shape != shape:
            raise DimensionMismatch(f"frame ({v}, {t}) has shape {frame.shape}, expected {shape}")
        placed[(v, t)] = frame
    missing = [(v, t) for v in range(V) for t in range(T) if (v, t) not in placed]
    if missing:
        raise MissingCell(f"{len(missing)} grid cells have no frame, first {missing[0]}",
                          cells=[list(c) for c in missing])
    data = np.stack([np.stack([placed[(v, t)] for t in range(T)]) for v in range(V)])
    return CameraTimeGrid(data)


@dataclass(frozen=True)
class SubGrid:
    """2x2 block anchored at ``(v, t)``; member order is fixed."""

    anchor: Cell

    @property
    def members(self) -> tuple[Cell, Cell, Cell, Cell]:
        v, t = self.anchor
        return ((v, t), (v + 1, t), (v, t + 1), (v + 1, t + 1))

    cells = members

    @property
    def rightmost(self) -> tuple[Cell, Cell]:
        v, t = self.anchor
        return ((v, t + 1), (v + 1, t + 1))

    def __repr__(self):
        return f"S{self.anchor}"


@dataclass(frozen=True)
class TemporalSubGrid:
    """Four consecutive frames ``t..t+3`` of a single-view video."""

    anchor: int

    @property
    def members(self) -> tuple[int, int, int, int]:
        t = self.anchor
        return (t, t + 1, t + 2, t + 3)

    @property
    def cells(self) -> tuple[Cell, Cell, Cell, Cell]:
        return tuple((0, t) for t in self.members)

    @property
    def rightmost(self) -> tuple[Cell, Cell]:
        return ((0, self.anchor + 2), (0, self.anchor + 3))

    def __repr__(self):
        return f"S({self.anchor})"


Step = Union[SubGrid, TemporalSubGrid]


def make_subgrid(grid: CameraTimeGrid, v: int, t: int) -> SubGrid:
    if not (0 <= v and v + 1 < grid.views and 0 <= t and t + 1 < grid.times):
        raise OutOfBounds(f"sub-grid at ({v}, {t}) exceeds {grid.views}x{grid.times} grid",
                          cell=[v, t])
    return SubGrid((v, t))


@dataclass(frozen=True)
class TraversalPlan:
    """Ordered sub-grids plus, per step, the cells already seen by earlier steps."""

    steps: tuple[Step, ...]
    overlap: tuple[frozenset, ...]
    views: int
    times: int

    @classmethod
    def from_steps(cls, steps: Sequence[Step], views: int, times: int) -> "TraversalPlan":
        seen: set[Cell] = set()
        overlap = []
        for step in steps:
            cells = set(step.cells)
            overlap.append(frozenset(cells & seen))
            seen |= cells
        return cls(tuple(steps), tuple(overlap), views, times)

    @property
    def monocular(self) -> bool:
        return bool(self.steps) and isinstance(self.steps[0], TemporalSubGrid)

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def is_temporal(self, k: int) -> bool:
        """Whether step ``k`` continues a temporal sweep from the step before it."""
        if k == 0:
            return False
        step = self.steps[k]
        if isinstance(step, TemporalSubGrid):
            return True
        return step.anchor[1] > 0

    def replacement_region(self, k: int) -> tuple[Cell, ...]:
        """Rightmost-column cells of step ``k`` not covered by its overlap set."""
        if not self.is_temporal(k):
            return ()
        return tuple(c for c in self.steps[k].rightmost if c not in self.overlap[k])

    def first_step(self) -> dict[Cell, int]:
        """Index of the step that first contains each cell."""
        first: dict[Cell, int] = {}
        for k, step in enumerate(self.steps):
            for c in step.cells:
                first.setdefault(c, k)
        return first

    def last_step(self) -> dict[Cell, int]:
        """Index of the last step containing each cell (when it becomes final)."""
        last: dict[Cell, int] = {}
        for k, step in enumerate(self.steps):
            for c in step.cells:
                last[c] = k
        return last

    def covered(self) -> set[Cell]:
        return set(self.first_step())


def asymmetric_traversal(V: int, T: int) -> TraversalPlan:
    """Even camera rows (and the last pair) sweep all times; odd rows bridge at t=0."""
    if V < 2 or T < 2:
        raise DegenerateGrid(f"asymmetric traversal needs V >= 2 and T >= 2, got V={V}, T={T}")
    steps: list[SubGrid] = []
    for v in range(V - 1):
        if v % 2 == 0 or v == V - 2:
            steps.extend(SubGrid((v, t)) for t in range(T - 1))
        else:
            steps.append(SubGrid((v, 0)))
    return TraversalPlan.from_steps(steps, V, T)


def monocular_traversal(T: int, stride: int = 2) -> TraversalPlan:
    """Four-frame windows at t = 0, 2, 4, ... overlapping by two frames.

    When ``T`` is odd the last frame is covered by one extra window anchored
    at ``T - 4`` so that no frame is left out.
    """
    if T < 4:
        raise TooFewFrames(f"monocular traversal needs T >= 4, got {T}")
    if stride != 2:
        raise ValueError("monocular traversal is defined for stride 2 only")
    anchors = list(range(0, T - 3, stride))
    if anchors[-1] + 3 < T - 1:
        anchors.append(T - 4)
    return TraversalPlan.from_steps([TemporalSubGrid(t) for t in anchors], 1, T)
