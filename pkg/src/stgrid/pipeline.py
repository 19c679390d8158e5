"""Stage drivers behind the command line: synth, edit, optimize, render, evaluate.

Every stage reads its inputs from disk, validates them before computing, and
writes plain files (PNG or raw frames, JSON, CSV) into the run directory.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io, splat
from .attention import LayerRange, init_stack, load_params
from .config import PipelineConfig, dump_config
from .ctp import (CTPConfig, ConstantShiftEditor, IdentityEditor, MockStackEditor, propagate)
from .errors import AlignmentError, DegenerateGrid, FormatError, TooFewFrames, ValidationError
from .flow import PIXEL, FlowField, estimate_flow_block_matching, fb_consistency_mask
from .grid import CameraTimeGrid, asymmetric_traversal, monocular_traversal
from .metrics import (MetricReport, boundary_warping_error, psnr, ssim, warping_error)
from .synth import SynthScene, generate, parse_spec

log = logging.getLogger(__name__)

FlowTable = dict  # (v, t) -> (F_{t->t-1}, F_{t-1->t})


def worker_count(cfg: PipelineConfig) -> int:
    if cfg.deterministic:
        return 1
    return cfg.workers or os.cpu_count() or 1


def _suffix(cfg: PipelineConfig) -> str:
    return "." + cfg.output.frame_format


# synth ----------------------------------------------------------------------

def flow_paths(v: int, t: int) -> dict[str, str]:
    stem = f"flows/v{v:02d}_t{t:03d}"
    return {"forward": stem + ".fwd.stfl", "backward": stem + ".bwd.stfl", "occlusion": stem + ".occ.stmk"}


def write_synth(out_dir, scene: SynthScene, suffix: str = ".png") -> Path:
    """Frames, analytic flows and occlusion masks plus a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "flows").mkdir(parents=True, exist_ok=True)
    entries = []
    for (v, t), (fwd, bwd) in sorted(scene.flows.items()):
        rel = flow_paths(v, t)
        io.write_flow(out_dir / rel["forward"], fwd.data)
        io.write_flow(out_dir / rel["backward"], bwd.data)
        io.write_mask(out_dir / rel["occlusion"], scene.occlusion[(v, t)])
        entries.append({"v": v, "t": t, **rel})
    extra = {"flows": entries, "spec": scene.spec.model_dump(mode="json")}
    return io.write_grid(out_dir, scene.grid, suffix, extra)


def run_synth(spec_data, out_dir, seed: int | None = None, suffix: str = ".png") -> Path:
    spec = parse_spec(spec_data)
    if seed is not None:
        spec = parse_spec({**spec.model_dump(), "seed": seed})
    scene = generate(spec)
    path = write_synth(out_dir, scene, suffix)
    log.info("synth: %dx%d grid written to %s", spec.views, spec.times, path)
    return path


# inputs ---------------------------------------------------------------------

def load_input_grid(cfg: PipelineConfig) -> tuple[CameraTimeGrid, dict]:
    if not cfg.paths.grid:
        raise ValidationError("paths.grid is required")
    manifest = io.load_manifest(cfg.paths.grid)
    return io.read_grid(cfg.paths.grid), manifest


def analytic_flows(manifest_path, manifest: dict) -> tuple[FlowTable, dict]:
    """Flows and validity masks listed in a synth manifest."""
    entries = manifest.get("flows")
    if not entries:
        raise AlignmentError(f"{manifest_path} lists no flows; use flow.source=block_matching")
    root = Path(manifest_path).parent
    flows, valid = {}, {}
    try:
        for e in entries:
            key = (int(e["v"]), int(e["t"]))
            flows[key] = (FlowField(io.read_flow(root / e["forward"]), PIXEL),
                          FlowField(io.read_flow(root / e["backward"]), PIXEL))
            if "occlusion" in e:
                valid[key] = ~io.read_mask(root / e["occlusion"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{manifest_path}: malformed flow entry ({exc})") from None
    except FileNotFoundError as exc:
        raise FormatError(f"{manifest_path}: missing flow file {exc.filename}") from None
    return flows, valid


def estimated_flows(grid: CameraTimeGrid, cfg: PipelineConfig) -> tuple[FlowTable, dict]:
    """Block-matching flows for every temporal pair; validity from the FB check."""
    pairs = [(v, t) for v in range(grid.views) for t in range(1, grid.times)]

    def one(cell):
        v, t = cell
        fwd = estimate_flow_block_matching(grid[v, t - 1], grid[v, t], cfg.flow.block, cfg.flow.radius)
        bwd = estimate_flow_block_matching(grid[v, t], grid[v, t - 1], cfg.flow.block, cfg.flow.radius)
        return fwd, bwd

    workers = worker_count(cfg)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(c) for c in pairs]
    flows = dict(zip(pairs, results))
    valid = {c: fb_consistency_mask(f, b, cfg.flow.alpha, cfg.flow.beta) for c, (f, b) in flows.items()}
    return flows, valid


def input_flows(cfg: PipelineConfig, grid: CameraTimeGrid, manifest: dict) -> tuple[FlowTable, dict]:
    if cfg.flow.source == "analytic":
        flows, valid = analytic_flows(cfg.paths.grid, manifest)
        need = {(v, t) for v in range(grid.views) for t in range(1, grid.times)}
        missing = sorted(need - set(flows))
        if missing:
            raise AlignmentError(f"manifest has no flow for {len(missing)} pairs, first {missing[0]}")
        for (v, t), (fwd, _) in flows.items():
            if fwd.shape != grid.frame_shape:
                raise AlignmentError(f"flow {fwd.shape} for ({v}, {t}) does not match frames "
                                     f"{grid.frame_shape}", cell=[v, t])
        return flows, valid
    return estimated_flows(grid, cfg)


# edit -----------------------------------------------------------------------

def build_editor(cfg: PipelineConfig, token_dim: int):
    e = cfg.editor
    if e.kind == "identity":
        return IdentityEditor(), None
    if e.kind == "constant-shift":
        return ConstantShiftEditor(e.shift, e.jitter, seed=cfg.seed), None
    if e.weights:
        layers = load_params(e.weights)
        if len(layers) < e.depth or layers[0].d != token_dim:
            raise ValidationError(f"weights hold {len(layers)} layers of dim {layers[0].d}, "
                                  f"need {e.depth} of dim {token_dim}")
    else:
        layers = init_stack(token_dim, e.depth, e.heads, seed=cfg.seed, gain=e.gain)
    rng = np.random.default_rng([cfg.seed, 1])
    text = rng.normal(0.0, 1.0, (e.text_tokens, token_dim))
    vital = LayerRange(*cfg.vital_range())
    return MockStackEditor(layers, e.depth, vital, mix=e.mix), text


def _check_traversal(cfg: PipelineConfig, grid: CameraTimeGrid) -> None:
    p = cfg.ctp.patch
    h, w = grid.frame_shape
    if h % p or w % p:
        raise ValidationError(f"frames {h}x{w} are not divisible by patch size {p}")
    if cfg.traversal.mode == "multiview" and grid.views < 2:
        raise DegenerateGrid("multiview traversal needs at least two views; use traversal.mode=monocular")
    if cfg.traversal.mode == "monocular" and grid.times < 4:
        raise TooFewFrames(f"monocular traversal needs T >= 4, got {grid.times}")


def _propagate_all(cfg: PipelineConfig, grid: CameraTimeGrid, flows: FlowTable):
    """Run CTP over the configured traversal; returns frames, tokens and trace."""
    ctp_cfg = CTPConfig(patch=cfg.ctp.patch, alpha=cfg.flow.alpha, beta=cfg.flow.beta,
                        inheritance=cfg.ctp.inheritance, replacement=cfg.ctp.replacement,
                        interpolation=cfg.flow.interpolation)
    editor, text = build_editor(cfg, 3 * cfg.ctp.patch ** 2)
    if cfg.traversal.mode == "multiview":
        plan = asymmetric_traversal(grid.views, grid.times)
        res = propagate(grid, plan, editor, flows, ctp_cfg, text)
        return res.grid.frames, res.tokens, res.trace
    frames = np.empty_like(grid.frames)
    tokens, trace = {}, []
    plan = monocular_traversal(grid.times)
    for v in range(grid.views):
        sub = CameraTimeGrid(grid.frames[v:v + 1])
        res = propagate(sub, plan, editor, lambda _, t, v=v: flows[(v, t)], ctp_cfg, text)
        frames[v] = res.grid.frames[0]
        tokens.update({(v, t): tok for (_, t), tok in res.tokens.items()})
        trace.extend({"view": v, **entry} for entry in res.trace)
    return frames, tokens, trace


def run_edit(cfg: PipelineConfig) -> Path:
    grid, manifest = load_input_grid(cfg)
    _check_traversal(cfg, grid)
    flows, _ = input_flows(cfg, grid, manifest)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")

    frames, tokens, trace = _propagate_all(cfg, grid, flows)
    edited = cfg.edited_manifest()
    io.write_grid(edited.parent, CameraTimeGrid(frames), _suffix(cfg),
                  {"source": Path(os.path.relpath(Path(cfg.paths.grid).resolve(),
                                                  edited.parent.resolve())).as_posix()})
    with open(out / "trace.jsonl", "w") as f:
        for entry in trace:
            f.write(json.dumps(entry) + "\n")
    if cfg.output.dump_tokens:
        (out / "tokens").mkdir(exist_ok=True)
        for (v, t), tok in sorted(tokens.items()):
            io.write_tokens(out / "tokens" / f"v{v:02d}_t{t:03d}.sttk", tok)
    log.info("edit: %d steps, frames in %s", len(trace), edited)
    return edited


# optimize / render ----------------------------------------------------------

def initial_scene(cfg: PipelineConfig, first: np.ndarray) -> splat.GaussianScene:
    h, w = first.shape[:2]
    rng = np.random.default_rng([cfg.seed, 2])
    g = splat.random_gaussians(cfg.optimizer.gaussians, h, w, rng, frame=first)
    bg = cfg.optimizer.background
    if bg is None:
        bg = np.median(first.reshape(-1, 3), axis=0)
    deformation = splat.DeformationField.init(rng, splat.FEATURE_DIM)
    return splat.make_scene(g, h, w, bg, deformation)


def run_optimize(cfg: PipelineConfig) -> Path:
    edited = io.read_grid(cfg.edited_manifest())
    o = cfg.optimizer
    if o.view >= edited.views:
        raise ValidationError(f"optimizer.view={o.view} but the edited grid has {edited.views} views")
    targets = edited.frames[o.view]
    scene = initial_scene(cfg, targets[0])
    oc = splat.OptimConfig(iterations=o.iterations, lr_geometry=o.lr_geometry, lr_color=o.lr_color,
                           lr_deform=o.lr_deform, lr_final_fraction=o.lr_final_fraction,
                           lam_tv=o.lam_tv, norm=o.norm, safeguard=o.safeguard)
    fitted, losses = splat.optimize(scene, targets, oc)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    h, w = edited.frame_shape
    path = cfg.scene_path()
    splat.save_scene(path, fitted, frames=edited.times, height=h, width=w)
    with open(out / "loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        writer.writerows((i, repr(v)) for i, v in enumerate(losses))
    log.info("optimize: loss %.5g -> %.5g", losses[0], losses[-1])
    return path


def scene_meta(path) -> tuple[int, int, int]:
    try:
        doc = json.loads(Path(path).read_text())
        return int(doc["frames"]), int(doc["height"]), int(doc["width"])
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read scene {path}: {exc}") from None
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}: scene lacks frames/height/width metadata") from None


def run_render(scene_path, out_dir, times=None, suffix: str = ".png") -> Path:
    """Render time indices ``times`` (default all) of a fitted scene."""
    T, h, w = scene_meta(scene_path)
    scene = splat.load_scene(scene_path)
    times = list(range(T)) if times is None else list(times)
    bad = [t for t in times if not 0 <= t < T]
    if bad or not times:
        raise ValidationError(f"render times must lie in [0, {T}), got {times}")
    u = splat.normalized_times(T)[times]
    frames = splat.render_frames(scene, u, h, w)
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (t, frame) in enumerate(zip(times, frames)):
        rel = f"frames/{io.frame_name(0, t, suffix)}"
        io.write_frame(out_dir / rel, frame)
        entries.append({"v": 0, "t": i, "source_t": t, "path": rel})
    path = out_dir / "manifest.json"
    # a subset render is its own (1, len(times)) grid; source_t keeps the scene index
    path.write_text(json.dumps({"views": 1, "times": len(times), "source_times": times,
                                "frames": entries}, indent=1))
    return path


# evaluate -------------------------------------------------------------------

def _boundary(cfg: PipelineConfig, frames: np.ndarray, flows: FlowTable, valid) -> MetricReport | None:
    if cfg.traversal.mode == "multiview":
        return boundary_warping_error(asymmetric_traversal(frames.shape[0], frames.shape[1]),
                                      frames, flows, valid)
    plan = monocular_traversal(frames.shape[1])
    per_frame = []
    for v in range(frames.shape[0]):
        rep = boundary_warping_error(plan, frames[v:v + 1], {(0, t): f for (u, t), f in flows.items() if u == v},
                                     {(0, t): m for (u, t), m in valid.items() if u == v})
        if rep is not None:
            per_frame.extend({**p, "v": v} for p in rep.per_frame)
    if not per_frame:
        return None
    return MetricReport("warp_err_global", float(np.mean([p["value"] for p in per_frame])), "1", per_frame)


def evaluate_frames(cfg: PipelineConfig, frames: np.ndarray, reference: np.ndarray,
                    flows: FlowTable, valid) -> list[dict]:
    reports = [warping_error(frames, flows, valid).to_dict()]
    glob = _boundary(cfg, frames, flows, valid)
    reports.append(glob.to_dict() if glob is not None
                   else {"metric": "warp_err_global", "value": None, "scale": "1", "per_frame": []})
    fid = [(v, t, psnr(frames[v, t], reference[v, t]), ssim(frames[v, t], reference[v, t]))
           for v in range(frames.shape[0]) for t in range(frames.shape[1])]
    finite = [p for _, _, p, _ in fid if np.isfinite(p)]
    reports.append(MetricReport("psnr_vs_input", float(np.mean(finite)) if finite else float("inf"), "dB",
                                [{"v": v, "t": t, "value": p} for v, t, p, _ in fid]).to_dict())
    reports.append(MetricReport("ssim_vs_input", float(np.mean([s for *_, s in fid])), "1",
                                [{"v": v, "t": t, "value": s} for v, t, _, s in fid]).to_dict())
    for r in reports:
        for p in r["per_frame"]:
            if isinstance(p.get("value"), float) and not np.isfinite(p["value"]):
                p["value"] = "inf"
    return reports


def run_evaluate(cfg: PipelineConfig, rendered=None) -> Path:
    source, manifest = load_input_grid(cfg)
    edited = io.read_grid(cfg.edited_manifest())
    if edited.frames.shape != source.frames.shape:
        raise AlignmentError(f"edited grid {edited.frames.shape[:4]} does not match input "
                             f"{source.frames.shape[:4]}")
    flows, valid = input_flows(cfg, source, manifest)
    report = {"metrics": evaluate_frames(cfg, edited.frames, source.frames, flows, valid)}
    if rendered is not None:
        r = io.read_grid(rendered)
        v = cfg.optimizer.view
        if r.frames.shape[1:] != edited.frames.shape[1:]:
            raise AlignmentError("rendered frames do not match the edited view")
        p = float(np.mean([psnr(a, b) for a, b in zip(r.frames[0], edited.frames[v])]))
        report["render"] = {"view": v, "psnr": p if np.isfinite(p) else "inf",
                            "ssim": float(np.mean([ssim(a, b) for a, b in zip(r.frames[0], edited.frames[v])]))}
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=1) + "\n")
    return path
