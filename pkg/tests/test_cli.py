import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from stgrid import cli, io, pipeline
from stgrid.errors import EditorFailure
from stgrid.grid import asymmetric_traversal


def call(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    last = err.strip().splitlines()[-1] if err.strip() else ""
    return code, (json.loads(out) if out.strip() else None), (json.loads(last) if last.startswith("{") else None)


def write_config(tmp_path, **sections):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(sections))
    return path


@pytest.fixture()
def static_input(tmp_path, capsys):
    code, out, _ = call(capsys, "synth", "--preset", "static", "--out", tmp_path / "in")
    assert code == 0
    return out["manifest"]


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# happy paths --------------------------------------------------------------------

def test_synth_writes_frames_and_flows(tmp_path, capsys, static_input):
    manifest = json.loads((tmp_path / "in" / "manifest.json").read_text())
    assert manifest["views"] == 3 and manifest["times"] == 4
    entry = manifest["flows"][0]
    assert not io.read_flow(tmp_path / "in" / entry["forward"]).any()
    code, out, _ = call(capsys, "synth", "--preset", "translating", "--format", "stgf", "--out", tmp_path / "s")
    assert code == 0 and (tmp_path / "s" / "frames" / "v00_t000.stgf").exists()


def test_identity_edit_is_byte_identical(tmp_path, capsys, static_input):
    cfg = write_config(tmp_path, paths={"grid": static_input, "output": "run"})
    code, out, _ = call(capsys, "edit", "--config", cfg)
    assert code == 0
    src, dst = tmp_path / "in" / "frames", tmp_path / "run" / "edited" / "frames"
    names = sorted(p.name for p in src.iterdir())
    assert names == sorted(p.name for p in dst.iterdir())
    assert all((src / n).read_bytes() == (dst / n).read_bytes() for n in names)
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["editor"]["kind"] == "identity" and saved["seed"] == 0
    trace = [json.loads(l) for l in (tmp_path / "run" / "trace.jsonl").read_text().splitlines()]
    assert [e["anchor"] for e in trace] == [list(s.anchor) for s in asymmetric_traversal(3, 4).steps]


def test_evaluate_static_scene_zero(tmp_path, capsys, static_input):
    cfg = write_config(tmp_path, paths={"grid": static_input, "output": "run"})
    assert call(capsys, "edit", "--config", cfg)[0] == 0
    code, out, _ = call(capsys, "evaluate", "--config", cfg)
    assert code == 0
    report = {m["metric"]: m for m in json.loads((tmp_path / "run" / "report.json").read_text())["metrics"]}
    assert report["warp_err_local"]["value"] == 0.0
    assert report["warp_err_global"]["value"] == 0.0
    assert report["psnr_vs_input"]["value"] == "inf"
    assert report["ssim_vs_input"]["value"] == 1.0


def test_optimize_and_render(tmp_path, capsys, static_input):
    cfg = write_config(tmp_path, paths={"grid": static_input, "output": "run"},
                       optimizer={"gaussians": 8, "iterations": 15}, output={"frame_format": "stgf"})
    assert call(capsys, "edit", "--config", cfg)[0] == 0
    code, out, _ = call(capsys, "optimize", "--config", cfg)
    assert code == 0
    losses = [float(l.split(",")[1]) for l in (tmp_path / "run" / "loss.csv").read_text().splitlines()[1:]]
    assert len(losses) == 15 and losses[-1] <= losses[0]
    code, out, _ = call(capsys, "render", "--config", cfg, "--times", "0,2")
    assert code == 0
    grid = io.read_grid(out["manifest"])
    assert grid.frames.shape == (1, 2, 32, 32, 3)
    assert json.loads((tmp_path / "run" / "render" / "manifest.json").read_text())["source_times"] == [0, 2]
    code, out, _ = call(capsys, "evaluate", "--config", cfg, "--rendered", out["manifest"])
    assert code == 2  # a partial render cannot be scored against the full edit
    assert call(capsys, "render", "--config", cfg)[0] == 0
    code, out, _ = call(capsys, "evaluate", "--config", cfg, "--rendered", tmp_path / "run" / "render" / "manifest.json")
    assert code == 0
    render = json.loads((tmp_path / "run" / "report.json").read_text())["render"]
    assert render["view"] == 0 and render["psnr"] > 10


def test_monocular_and_block_matching(tmp_path, capsys):
    assert call(capsys, "synth", "--preset", "translating", "--out", tmp_path / "in")[0] == 0
    cfg = write_config(tmp_path, paths={"grid": "in/manifest.json", "output": "run"},
                       traversal={"mode": "monocular"}, flow={"source": "block_matching", "radius": 3},
                       editor={"kind": "constant-shift", "shift": 0.05})
    code, out, err = call(capsys, "edit", "--config", cfg, "--deterministic")
    assert code == 0, err
    trace = [json.loads(l) for l in (tmp_path / "run" / "trace.jsonl").read_text().splitlines()]
    assert {e["view"] for e in trace} == {0, 1, 2}
    assert call(capsys, "evaluate", "--config", cfg)[0] == 0


def test_token_dump(tmp_path, capsys, static_input):
    cfg = write_config(tmp_path, paths={"grid": static_input, "output": "run"}, output={"dump_tokens": True})
    assert call(capsys, "edit", "--config", cfg)[0] == 0
    dumps = sorted((tmp_path / "run" / "tokens").iterdir())
    assert len(dumps) == 12 and io.read_tokens(dumps[0]).shape == (16, 16, 12)


def test_pipeline_run_is_deterministic(tmp_path, capsys):
    cfg_a = write_config(tmp_path, paths={"output": "a"}, editor={"kind": "mock-stack"},
                         optimizer={"gaussians": 8, "iterations": 10})
    (tmp_path / "b").mkdir()
    cfg_b = tmp_path / "b" / "cfg.json"
    cfg_b.write_text(json.dumps({"paths": {"output": "."}, "editor": {"kind": "mock-stack"},
                                 "optimizer": {"gaussians": 8, "iterations": 10}}))
    t0 = time.perf_counter()
    assert call(capsys, "run", "--config", cfg_a, "--preset", "static", "--seed", 5)[0] == 0
    assert time.perf_counter() - t0 < 300
    assert call(capsys, "run", "--config", cfg_b, "--preset", "static", "--seed", 5)[0] == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    b.pop("cfg.json")
    for k in ("config.json",):  # the resolved config names its own output directory
        a.pop(k), b.pop(k)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_seed_changes_mock_edit(tmp_path, capsys, static_input):
    cfg = write_config(tmp_path, paths={"grid": static_input, "output": "run"}, editor={"kind": "mock-stack"})
    assert call(capsys, "edit", "--config", cfg, "--seed", 1)[0] == 0
    one = files(tmp_path / "run" / "edited" / "frames")
    assert call(capsys, "edit", "--config", cfg, "--seed", 2)[0] == 0
    assert one != files(tmp_path / "run" / "edited" / "frames")


# failures -----------------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["synth", "--out", "x"],
    ["synth", "--preset", "nope", "--out", "x"],
    ["edit", "--seed", "-1"],
    ["edit", "--workers", "0"],
    ["edit"],  # no input grid configured
    ["edit", "--config", "does-not-exist.json"],
])
def test_invalid_invocations_exit_2(tmp_path, capsys, argv, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, err = call(capsys, *argv)
    assert code == 2 and out is None
    assert err["error"] in ("spec", "validation", "format")


@pytest.mark.parametrize("body", [
    {"seed": -3},
    {"editor": {"kind": "mock-stack", "heads": 5}},
    {"flow": {"block": 4}},
    {"optimizer": {"iterations": 0}},
    {"surprise": True},
    {"ctp": {"patch": 3}},
])
def test_invalid_configs_exit_2(tmp_path, capsys, static_input, body):
    body = {**body, "paths": {"grid": static_input, "output": "run"}}
    code, _, err = call(capsys, "edit", "--config", write_config(tmp_path, **body))
    assert code == 2 and "message" in err


def test_bad_json_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{nope")
    code, _, err = call(capsys, "edit", "--config", tmp_path / "c.json")
    assert code == 2 and err["error"] == "spec"


def test_runtime_failure_exit_3(tmp_path, capsys, static_input, monkeypatch):
    def boom(cfg):
        raise EditorFailure("editor fell over", step=0)

    monkeypatch.setattr(pipeline, "run_edit", boom)
    code, _, err = call(capsys, "edit")
    assert code == 3 and err == {"error": "editor_failure", "message": "editor fell over", "step": 0}
    monkeypatch.setattr(pipeline, "run_edit", lambda cfg: 1 / 0)
    code, _, err = call(capsys, "edit")
    assert code == 3 and err["error"] == "internal"


def test_stgrid_log_and_entry_point(tmp_path):
    env = {**os.environ, "STGRID_LOG": "INFO"}
    proc = subprocess.run([sys.executable, "-m", "stgrid.cli", "synth", "--preset", "static",
                           "--out", str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "INFO" in proc.stderr
    assert "manifest" in json.loads(proc.stdout)
    quiet = subprocess.run([sys.executable, "-m", "stgrid.cli", "synth", "--preset", "static",
                            "--out", str(tmp_path / "q")], capture_output=True, text=True,
                           env={**os.environ, "STGRID_LOG": "ERROR"})
    assert quiet.returncode == 0 and quiet.stderr == ""


# fuzzed configs -------------------------------------------------------------------

values = st.one_of(st.none(), st.booleans(), st.integers(-5, 70), st.floats(-2, 2), st.just(float("nan")),
                   st.sampled_from(["identity", "mock-stack", "constant-shift", "monocular", "l2", "x"]))
sections = {
    "editor": ["kind", "shift", "jitter", "depth", "heads", "vital_start", "vital_end", "mix"],
    "flow": ["alpha", "beta", "block", "radius", "interpolation"],
    "ctp": ["patch", "inheritance", "replacement"],
    "traversal": ["mode"],
}


@st.composite
def fuzz_config(draw):
    body = {}
    for name, keys in sections.items():
        chosen = draw(st.lists(st.sampled_from(keys), unique=True, max_size=3))
        if chosen:
            body[name] = {k: draw(values) for k in chosen}
    if draw(st.booleans()):
        body["seed"] = draw(values)
    return body


@settings(max_examples=25, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(fuzz_config())
def test_fuzzed_configs_fail_cleanly_or_run(tmp_path, capsys, static_input, body):
    body = {**body, "paths": {"grid": static_input, "output": "fuzz"}}
    code, out, err = call(capsys, "edit", "--config", write_config(tmp_path, **body))
    assert code in (0, 2), err
    if code == 2:
        assert err["error"] in ("spec", "validation") or err["error"].endswith("mismatch")
    else:
        frames = io.read_grid(out["manifest"]).frames
        assert frames.shape == (3, 4, 32, 32, 3) and np.isfinite(frames).all()
