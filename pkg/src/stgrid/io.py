"""On-disk formats: grid manifests, frames, flows, masks and token dumps.

All binary headers are little-endian ``u32``; payloads are float32 or bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .grid import CameraTimeGrid, build_grid

FRAME_MAGIC = b"STGF"
FLOW_MAGIC = b"STFL"
MASK_MAGIC = b"STMK"
TOKEN_MAGIC = b"STTK"


def _write_header(f, magic: bytes, dims):
    f.write(magic)
    f.write(struct.pack("<" + "I" * len(dims), *dims))


def _read_header(buf: bytes, magic: bytes, ndims: int, path) -> tuple[tuple[int, ...], int]:
    size = 4 + 4 * ndims
    if len(buf) < size or buf[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()}", path=str(path))
    dims = struct.unpack("<" + "I" * ndims, buf[4:size])
    return dims, size


def _payload(buf, offset, dtype, count, path):
    arr = np.frombuffer(buf, dtype=dtype, offset=offset)
    if arr.size != count:
        raise FormatError(f"{path}: payload has {arr.size} values, header says {count}",
                          path=str(path))
    return arr


# frames ---------------------------------------------------------------------

def write_frame(path, frame: np.ndarray) -> None:
    """PNG (8-bit, values clipped and rounded) or raw ``.stgf`` float32 planar."""
    path = Path(path)
    if path.suffix == ".stgf":
        h, w, c = frame.shape
        with open(path, "wb") as f:
            _write_header(f, FRAME_MAGIC, (h, w, c))
            f.write(np.ascontiguousarray(frame.transpose(2, 0, 1), dtype="<f4").tobytes())
    else:
        Image.fromarray(to_uint8(frame), mode="RGB").save(path, format="PNG")


def read_frame(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".stgf":
        buf = path.read_bytes()
        (h, w, c), off = _read_header(buf, FRAME_MAGIC, 3, path)
        data = _payload(buf, off, "<f4", h * w * c, path)
        return data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float64)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})", path=str(path)) from None
    return arr / 255.0


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


# flows, masks, tokens -------------------------------------------------------

def write_flow(path, flow: np.ndarray) -> None:
    h, w, _ = flow.shape
    with open(path, "wb") as f:
        _write_header(f, FLOW_MAGIC, (h, w))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (h, w), off = _read_header(buf, FLOW_MAGIC, 2, path)
    return _payload(buf, off, "<f4", h * w * 2, path).reshape(h, w, 2).astype(np.float64)


def write_mask(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        _write_header(f, MASK_MAGIC, (h, w))
        f.write(np.asarray(mask, dtype=bool).astype(np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (h, w), off = _read_header(buf, MASK_MAGIC, 2, path)
    data = _payload(buf, off, np.uint8, h * w, path)
    if np.any(data > 1):
        raise FormatError(f"{path}: mask bytes must be 0 or 1", path=str(path))
    return data.reshape(h, w).astype(bool)


def write_tokens(path, tokens: np.ndarray) -> None:
    h, w, d = tokens.shape
    with open(path, "wb") as f:
        _write_header(f, TOKEN_MAGIC, (h, w, d))
        f.write(np.ascontiguousarray(tokens, dtype="<f4").tobytes())


def read_tokens(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (h, w, d), off = _read_header(buf, TOKEN_MAGIC, 3, path)
    return _payload(buf, off, "<f4", h * w * d, path).reshape(h, w, d).astype(np.float64)


# manifest -------------------------------------------------------------------

def frame_name(v: int, t: int, suffix: str = ".png") -> str:
    return f"v{v:02d}_t{t:03d}{suffix}"


def write_grid(out_dir, grid: CameraTimeGrid, suffix: str = ".png", extra: dict | None = None) -> Path:
    """Write every frame plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for v, t in grid.cells():
        rel = f"frames/{frame_name(v, t, suffix)}"
        write_frame(out_dir / rel, grid[v, t])
        entries.append({"v": v, "t": t, "path": rel})
    manifest = {"views": grid.views, "times": grid.times, "frames": entries}
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})", path=str(path)) from None
    for key in ("views", "times", "frames"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest lacks '{key}'", path=str(path))
    return manifest


def read_grid(manifest_path) -> CameraTimeGrid:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    try:
        tagged = [(int(e["v"]), int(e["t"]), read_frame(root / e["path"]))
                  for e in manifest["frames"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{manifest_path}: malformed frame entry ({exc})") from None
    except FileNotFoundError as exc:
        raise FormatError(f"{manifest_path}: missing frame file {exc.filename}") from None
    return build_grid(tagged, int(manifest["views"]), int(manifest["times"]))
