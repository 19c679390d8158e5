"""Pipeline configuration. Every numeric default used by a CLI stage lives here."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from .errors import SpecError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class Paths(_Section):
    grid: Optional[str] = None     # input manifest.json
    output: str = "out"            # run directory
    edited: Optional[str] = None   # edited manifest; default <output>/edited/manifest.json
    scene: Optional[str] = None    # fitted scene; default <output>/scene.json


class Traversal(_Section):
    mode: Literal["multiview", "monocular"] = "multiview"


class Editor(_Section):
    kind: Literal["identity", "mock-stack", "constant-shift"] = "identity"
    shift: float = Field(0.1, ge=-1.0, le=1.0)
    jitter: float = Field(0.0, ge=0.0, le=1.0)
    depth: int = Field(4, ge=1, le=64)
    heads: int = Field(1, ge=1, le=16)
    vital_start: int = Field(0, ge=0)
    vital_end: Optional[int] = None  # None: first half of the stack
    mix: float = Field(0.2, ge=0.0, le=1.0)
    gain: float = Field(1.0, gt=0.0, le=10.0)
    text_tokens: int = Field(4, ge=0, le=256)
    weights: Optional[str] = None  # raw weight blob with a .json sidecar


class Flow(_Section):
    source: Literal["analytic", "block_matching"] = "analytic"
    alpha: float = Field(0.01, ge=0.0, le=10.0)
    beta: float = Field(0.5, ge=0.0, le=1e4)
    block: int = Field(7, ge=1, le=31)
    radius: int = Field(4, ge=0, le=16)
    interpolation: Literal["bilinear", "nearest"] = "bilinear"

    @model_validator(mode="after")
    def _odd_block(self):
        if self.block % 2 == 0:
            raise ValueError("flow.block must be odd")
        return self


class CTP(_Section):
    patch: int = Field(2, ge=1, le=16)
    inheritance: bool = True
    replacement: bool = True


class Optimizer(_Section):
    view: int = Field(0, ge=0)
    gaussians: int = Field(48, ge=1, le=4096)
    iterations: int = Field(300, ge=1, le=100_000)
    lr_geometry: float = Field(1e-2, gt=0.0, le=10.0)
    lr_color: float = Field(5e-3, gt=0.0, le=10.0)
    lr_deform: float = Field(1e-3, ge=0.0, le=10.0)
    lr_final_fraction: float = Field(0.05, gt=0.0, le=1.0)
    lam_tv: float = Field(0.0, ge=0.0, le=100.0)
    norm: Literal["l1", "l2"] = "l1"
    safeguard: bool = True
    background: Optional[tuple[float, float, float]] = None  # None: median of the first frame

    @model_validator(mode="after")
    def _bg(self):
        if self.background is not None and not all(0.0 <= c <= 1.0 for c in self.background):
            raise ValueError("optimizer.background must lie in [0, 1]")
        return self


class Output(_Section):
    frame_format: Literal["png", "stgf"] = "png"
    dump_tokens: bool = False


class PipelineConfig(_Section):
    paths: Paths = Field(default_factory=Paths)
    traversal: Traversal = Field(default_factory=Traversal)
    editor: Editor = Field(default_factory=Editor)
    flow: Flow = Field(default_factory=Flow)
    ctp: CTP = Field(default_factory=CTP)
    optimizer: Optimizer = Field(default_factory=Optimizer)
    output: Output = Field(default_factory=Output)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    deterministic: bool = False
    workers: Optional[int] = Field(None, ge=1, le=1024)

    @model_validator(mode="after")
    def _cross(self):
        e = self.editor
        if e.kind == "mock-stack":
            d = 3 * self.ctp.patch ** 2
            if d % e.heads:
                raise ValueError(f"editor.heads={e.heads} does not divide token dim {d}")
            if (d // e.heads) % 2:
                raise ValueError(f"head dim {d // e.heads} must be even for rotary embedding")
            end = self.vital_range()[1]
            if not e.vital_start < end <= e.depth + 1:  # [depth, depth + 1) turns gating off
                raise ValueError(f"vital range [{e.vital_start}, {end}) must satisfy "
                                 f"start < end <= depth + 1 (depth {e.depth})")
        return self

    def vital_range(self) -> tuple[int, int]:
        e = self.editor
        end = e.vital_end if e.vital_end is not None else max(1, e.depth // 2)
        return e.vital_start, end

    # resolved paths

    def output_dir(self) -> Path:
        return Path(self.paths.output)

    def edited_manifest(self) -> Path:
        return Path(self.paths.edited) if self.paths.edited else self.output_dir() / "edited" / "manifest.json"

    def scene_path(self) -> Path:
        return Path(self.paths.scene) if self.paths.scene else self.output_dir() / "scene.json"


def _issues(exc: PydanticError) -> list[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]


def parse_config(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    """Validate ``data``; relative paths are resolved against ``base_dir``."""
    if not isinstance(data, dict):
        raise SpecError("config must be a JSON object")
    try:
        cfg = PipelineConfig.model_validate(data)
    except PydanticError as exc:
        issues = _issues(exc)
        raise SpecError(f"invalid config: {issues[0]}", issues=issues) from None
    if base_dir is not None:
        p = cfg.paths
        fixed = {k: str(base_dir / v) if v is not None and not Path(v).is_absolute() else v
                 for k, v in p.model_dump().items()}
        cfg = cfg.model_copy(update={"paths": Paths(**fixed)})
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise SpecError(f"cannot read config {path}: {exc.strerror}", path=str(path)) from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SpecError(f"config {path} is not valid JSON: {exc}", path=str(path)) from None
    return parse_config(data, path.parent)


def with_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Apply non-``None`` top-level overrides (CLI flags) and re-validate."""
    data = cfg.model_dump()
    data.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(data)


def dump_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=1, sort_keys=True) + "\n")
