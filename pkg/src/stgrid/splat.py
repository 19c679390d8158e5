"""Time-deformable 2D Gaussian splats fitted directly to edited frames.

Image-plane Gaussians are composited front to back in list order. Three small
MLPs map a per-Gaussian temporal feature to position, rotation and scale
offsets. All gradients are derived by hand.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DivergenceDetected, FormatError, ValidationError

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-4
CUTOFF_SIGMA = 3.0
HIDDEN = 32
N_FREQ = 4
NETS = {"x": 2, "r": 1, "s": 2}  # output width of each offset network
GAUSSIAN_KEYS = ("mu", "scale", "rotation", "color", "opacity")
SCHEMA = 1


@dataclass(frozen=True, eq=False)
class Gaussians:
    """N Gaussians as parallel arrays; positions are ``(x, y)`` in pixels."""

    mu: np.ndarray        # (N, 2)
    scale: np.ndarray     # (N, 2) std-dev along the rotated axes
    rotation: np.ndarray  # (N,) radians
    color: np.ndarray     # (N, 3)
    opacity: np.ndarray   # (N,)

    def __post_init__(self):
        n = len(self.mu)
        if n == 0:
            raise ValidationError("a scene needs at least one Gaussian")
        shapes = {"mu": (n, 2), "scale": (n, 2), "rotation": (n,), "color": (n, 3), "opacity": (n,)}
        for k, s in shapes.items():
            if getattr(self, k).shape != s:
                raise ValidationError(f"{k} has shape {getattr(self, k).shape}, expected {s}")

    def __len__(self):
        return len(self.mu)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in GAUSSIAN_KEYS}


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Weights ``{net}.W1 .. {net}.b3`` for nets ``x``, ``r``, ``s``."""

    weights: dict[str, np.ndarray]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int = 6 * N_FREQ,
             hidden: int = HIDDEN, out_scale: float = 0.0) -> "DeformationField":
        w = {}
        for net, out in NETS.items():
            w[f"{net}.W1"] = rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden))
            w[f"{net}.b1"] = np.zeros(hidden)
            w[f"{net}.W2"] = rng.normal(0, 1 / np.sqrt(hidden), (hidden, hidden))
            w[f"{net}.b2"] = np.zeros(hidden)
            w[f"{net}.W3"] = rng.normal(0, out_scale / np.sqrt(hidden), (hidden, out)) if out_scale \
                else np.zeros((hidden, out))
            w[f"{net}.b3"] = np.zeros(out)
        return cls(w)


@dataclass(frozen=True, eq=False)
class GaussianScene:
    gaussians: Gaussians
    deformation: DeformationField
    anchors: np.ndarray  # (N, 2) canonical positions normalised to [0, 1], fixed
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def parameters(self) -> dict[str, np.ndarray]:
        p = dict(self.gaussians.arrays())
        p.update({f"deform.{k}": v for k, v in self.deformation.weights.items()})
        return p

    def with_parameters(self, p: dict[str, np.ndarray]) -> "GaussianScene":
        g = Gaussians(**{k: p[k] for k in GAUSSIAN_KEYS})
        d = DeformationField({k[7:]: v for k, v in p.items() if k.startswith("deform.")})
        return replace(self, gaussians=g, deformation=d)


# temporal feature -----------------------------------------------------------

def _sincos(x: np.ndarray) -> np.ndarray:
    freqs = (2.0 ** np.arange(N_FREQ)) * np.pi
    arg = x[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def temporal_feature(anchors: np.ndarray, t: float) -> np.ndarray:
    """``[enc(t), enc(anchor_x), enc(anchor_y)]`` per Gaussian, ``(N, 24)``."""
    n = len(anchors)
    et = np.broadcast_to(_sincos(np.asarray(float(t))), (n, 2 * N_FREQ))
    return np.concatenate([et, _sincos(anchors[:, 0]), _sincos(anchors[:, 1])], axis=1)


FEATURE_DIM = 6 * N_FREQ


def _mlp(w: dict, net: str, z: np.ndarray):
    h1 = np.tanh(z @ w[f"{net}.W1"] + w[f"{net}.b1"])
    h2 = np.tanh(h1 @ w[f"{net}.W2"] + w[f"{net}.b2"])
    return h2 @ w[f"{net}.W3"] + w[f"{net}.b3"], (z, h1, h2)


def _mlp_backward(w: dict, net: str, cache, dout: np.ndarray, grads: dict) -> None:
    z, h1, h2 = cache
    grads[f"deform.{net}.W3"] += h2.T @ dout
    grads[f"deform.{net}.b3"] += dout.sum(axis=0)
    da2 = (dout @ w[f"{net}.W3"].T) * (1 - h2 * h2)
    grads[f"deform.{net}.W2"] += h1.T @ da2
    grads[f"deform.{net}.b2"] += da2.sum(axis=0)
    da1 = (da2 @ w[f"{net}.W2"].T) * (1 - h1 * h1)
    grads[f"deform.{net}.W1"] += z.T @ da1
    grads[f"deform.{net}.b1"] += da1.sum(axis=0)


def _deform(scene: GaussianScene, t: float):
    z = temporal_feature(scene.anchors, t)
    w = scene.deformation.weights
    dx, cx = _mlp(w, "x", z)
    dr, cr = _mlp(w, "r", z)
    ds, cs = _mlp(w, "s", z)
    g = scene.gaussians
    raw_scale = g.scale + ds
    deformed = Gaussians(mu=g.mu + dx, scale=np.maximum(raw_scale, SCALE_FLOOR),
                         rotation=g.rotation + dr[:, 0], color=g.color, opacity=g.opacity)
    return deformed, (cx, cr, cs, raw_scale > SCALE_FLOOR)


def deform(scene: GaussianScene, t: float) -> Gaussians:
    """Canonical Gaussians moved to normalised time ``t`` in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"normalised time must lie in [0, 1], got {t}")
    return _deform(scene, t)[0]


# rendering ------------------------------------------------------------------

def _pixel_grid(height: int, width: int):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs.ravel(), ys.ravel()


def kernel(q: np.ndarray, cutoff: float | None = CUTOFF_SIGMA):
    """Gaussian falloff of squared Mahalanobis distance ``q`` and its derivative.

    With a cutoff ``c`` the Gaussian is tapered so that value and slope both
    reach zero at ``q = c^2`` (peak renormalised to 1); the loss then stays
    differentiable across the truncation boundary.
    """
    if cutoff is None:
        k = np.exp(-0.5 * q)
        return k, -0.5 * k
    c2 = cutoff * cutoff
    tail = np.exp(-0.5 * c2)
    norm = 1.0 - tail * (1.0 + 0.5 * c2)
    inside = q < c2
    e = np.exp(-0.5 * np.minimum(q, c2))
    k = np.where(inside, (e - tail * (1.0 + 0.5 * (c2 - q))) / norm, 0.0)
    dk = np.where(inside, 0.5 * (tail - e) / norm, 0.0)
    return k, dk


def _render_forward(g: Gaussians, height: int, width: int, background, cutoff):
    px, py = _pixel_grid(height, width)
    dx = px[None, :] - g.mu[:, 0:1]
    dy = py[None, :] - g.mu[:, 1:2]
    c = np.cos(g.rotation)[:, None]
    s = np.sin(g.rotation)[:, None]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    sx = g.scale[:, 0:1]
    sy = g.scale[:, 1:2]
    q = (u / sx) ** 2 + (v / sy) ** 2
    gauss, dgauss = kernel(q, cutoff)
    w = g.opacity[:, None] * gauss                      # (N, P)
    n, P = w.shape
    trans = np.ones((n + 1, P))
    trans[1:] = np.cumprod(1.0 - w, axis=0)
    bg = np.asarray(background, dtype=np.float64)
    behind = np.empty((n + 1, P, 3))                    # colour composited from i onwards
    behind[n] = bg
    for i in range(n - 1, -1, -1):
        behind[i] = w[i, :, None] * g.color[i] + (1.0 - w[i, :, None]) * behind[i + 1]
    image = behind[0].reshape(height, width, 3)
    cache = dict(u=u, v=v, c=c, s=s, sx=sx, sy=sy, gauss=gauss, dgauss=dgauss, w=w, trans=trans, behind=behind)
    return image, cache


def render(g: Gaussians, height: int, width: int, background=(0.0, 0.0, 0.0),
           cutoff: float | None = CUTOFF_SIGMA) -> np.ndarray:
    """Front-to-back alpha compositing; Gaussians are truncated beyond ``cutoff`` sigma."""
    return _render_forward(g, height, width, background, cutoff)[0]


def _render_backward(g: Gaussians, cache, grad_image: np.ndarray) -> dict[str, np.ndarray]:
    G = grad_image.reshape(-1, 3)
    w, trans, behind = cache["w"], cache["trans"], cache["behind"]
    # dC/dw_i = T_i (c_i - behind_{i+1})
    dw = trans[:-1] * np.einsum("pc,npc->np", G, g.color[:, None, :] - behind[1:])
    d_color = (w * trans[:-1]) @ G
    d_opacity = np.sum(dw * cache["gauss"], axis=1)
    dq = dw * g.opacity[:, None] * cache["dgauss"]
    u, v, c, s, sx, sy = (cache[k] for k in ("u", "v", "c", "s", "sx", "sy"))
    dq_du = 2 * u / sx ** 2
    dq_dv = 2 * v / sy ** 2
    d_mu = np.stack([np.sum(dq * (-c * dq_du + s * dq_dv), axis=1),
                     np.sum(dq * (-s * dq_du - c * dq_dv), axis=1)], axis=1)
    d_scale = np.stack([np.sum(dq * (-2 * u ** 2 / sx ** 3), axis=1),
                        np.sum(dq * (-2 * v ** 2 / sy ** 3), axis=1)], axis=1)
    d_rot = np.sum(dq * (dq_du * v - dq_dv * u), axis=1)
    return {"mu": d_mu, "scale": d_scale, "rotation": d_rot, "color": d_color, "opacity": d_opacity}


# losses ---------------------------------------------------------------------

def tv_loss(image: np.ndarray) -> float:
    """Mean squared horizontal and vertical neighbour difference."""
    image = np.asarray(image, dtype=np.float64)
    dh = np.diff(image, axis=1)
    dv = np.diff(image, axis=0)
    n = dh.size + dv.size
    return float((np.sum(dh * dh) + np.sum(dv * dv)) / n) if n else 0.0


def tv_grad(image: np.ndarray) -> np.ndarray:
    dh = np.diff(image, axis=1)
    dv = np.diff(image, axis=0)
    n = dh.size + dv.size
    g = np.zeros_like(image)
    if not n:
        return g
    g[:, 1:] += 2 * dh / n
    g[:, :-1] -= 2 * dh / n
    g[1:] += 2 * dv / n
    g[:-1] -= 2 * dv / n
    return g


def image_loss(image: np.ndarray, target: np.ndarray, lam_tv: float = 0.0, norm: str = "l1"):
    """Reconstruction + ``lam_tv`` * TV, and its gradient w.r.t. ``image``."""
    diff = image - target
    if norm == "l1":
        loss = np.mean(np.abs(diff))
        grad = np.sign(diff) / diff.size
    elif norm == "l2":
        loss = np.mean(diff * diff)
        grad = 2 * diff / diff.size
    else:
        raise ValidationError(f"unknown norm {norm!r}")
    if lam_tv:
        loss = loss + lam_tv * tv_loss(image)
        grad = grad + lam_tv * tv_grad(image)
    return float(loss), grad


def render_grad(deformed: Gaussians, target: np.ndarray, background=(0.0, 0.0, 0.0),
                lam_tv: float = 0.0, norm: str = "l1", cutoff: float | None = CUTOFF_SIGMA):
    """Loss of one rendered frame and its gradient w.r.t. the Gaussian arrays."""
    h, w = target.shape[:2]
    image, cache = _render_forward(deformed, h, w, background, cutoff)
    loss, g_img = image_loss(image, target, lam_tv, norm)
    return loss, _render_backward(deformed, cache, g_img)


def normalized_times(T: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)


def scene_loss_grad(scene: GaussianScene, targets: np.ndarray, times=None, lam_tv: float = 0.0,
                    norm: str = "l1", cutoff: float | None = CUTOFF_SIGMA):
    """Total loss over all frames and gradients for every scene parameter."""
    targets = np.asarray(targets, dtype=np.float64)
    times = normalized_times(len(targets)) if times is None else times
    params = scene.parameters()
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    w = scene.deformation.weights
    total = 0.0
    for t, target in zip(times, targets):
        deformed, (cx, cr, cs, scale_live) = _deform(scene, t)
        loss, g = render_grad(deformed, target, scene.background, lam_tv, norm, cutoff)
        total += loss
        d_scale = g["scale"] * scale_live
        for k in ("mu", "rotation", "color", "opacity"):
            grads[k] += g[k]
        grads["scale"] += d_scale
        _mlp_backward(w, "x", cx, g["mu"], grads)
        _mlp_backward(w, "r", cr, g["rotation"][:, None], grads)
        _mlp_backward(w, "s", cs, d_scale, grads)
    return total, grads


def scene_loss(scene: GaussianScene, targets, times=None, lam_tv: float = 0.0, norm: str = "l1",
               cutoff: float | None = CUTOFF_SIGMA) -> float:
    targets = np.asarray(targets, dtype=np.float64)
    times = normalized_times(len(targets)) if times is None else times
    h, w = targets.shape[1:3]
    total = 0.0
    for t, target in zip(times, targets):
        image = render(deform(scene, t), h, w, scene.background, cutoff)
        total += image_loss(image, target, lam_tv, norm)[0]
    return total


def render_frames(scene: GaussianScene, times, height: int, width: int) -> np.ndarray:
    return np.stack([render(deform(scene, t), height, width, scene.background) for t in times])


# optimisation ---------------------------------------------------------------

@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 1000
    lr_geometry: float = 1e-2
    lr_color: float = 5e-3
    lr_deform: float = 1e-3
    lr_opacity: float | None = None  # None: same as lr_color
    lr_final_fraction: float = 0.05  # exponential decay to this fraction of each lr
    safeguard: bool = True  # reject updates that raise the loss and shrink the step
    shrink: float = 0.5
    regrow: float = 1.1
    lam_tv: float = 0.0
    norm: str = "l1"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_for(self, key: str) -> float:
        if key.startswith("deform."):
            return self.lr_deform
        if key == "opacity":
            return self.lr_color if self.lr_opacity is None else self.lr_opacity
        if key == "color":
            return self.lr_color
        return self.lr_geometry


def _project(p: dict[str, np.ndarray]) -> None:
    np.clip(p["color"], 0.0, 1.0, out=p["color"])
    np.clip(p["opacity"], 1e-3, 1.0 - 1e-3, out=p["opacity"])
    np.maximum(p["scale"], 1e-2, out=p["scale"])


def optimize(scene: GaussianScene, targets, config: OptimConfig = OptimConfig(), times=None,
             callback=None) -> tuple[GaussianScene, list[float]]:
    """Adam on all parameters against ``targets`` (``(T, H, W, 3)``).

    With ``config.safeguard`` an update that raises the loss is undone, the
    first moment is reset and the step multiplier shrinks; it regrows (up to 1) after accepted updates. The
    returned history holds the loss of the parameters in effect at each
    iteration, so it never increases.
    """
    if config.iterations < 1:
        raise ValidationError("iterations must be >= 1")
    targets = np.asarray(targets, dtype=np.float64)
    params = {k: v.copy() for k, v in scene.parameters().items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    decay = config.lr_final_fraction ** (1.0 / max(config.iterations - 1, 1))
    accepted = None  # (loss, grads, params, m, s, step)
    mult, step = 1.0, 0
    losses = []
    for it in range(config.iterations):
        loss, grads = scene_loss_grad(scene.with_parameters(params), targets, times,
                                      config.lam_tv, config.norm)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            if accepted is None or not config.safeguard:
                raise DivergenceDetected(f"loss became non-finite at iteration {it}", iteration=it)
            loss = np.inf
        if config.safeguard and accepted is not None and loss > accepted[0]:
            loss, grads, params, _, s, step = accepted
            m = {k: np.zeros_like(v) for k, v in params.items()}  # retry along -g / sqrt(s)
            mult = max(mult * config.shrink, 1e-6)
        else:
            if config.safeguard:
                accepted = (loss, grads, params, m, s, step)
                mult = min(1.0, mult * config.regrow)
        losses.append(float(loss))
        if callback is not None:
            callback(it, loss)
        step += 1
        lr_scale = mult * decay ** it
        new_params, new_m, new_s = {}, {}, {}
        for k, g in grads.items():
            new_m[k] = config.beta1 * m[k] + (1 - config.beta1) * g
            new_s[k] = config.beta2 * s[k] + (1 - config.beta2) * g * g
            m_hat = new_m[k] / (1 - config.beta1 ** step)
            s_hat = new_s[k] / (1 - config.beta2 ** step)
            new_params[k] = params[k] - config.lr_for(k) * lr_scale * m_hat / (np.sqrt(s_hat) + config.eps)
        _project(new_params)
        params, m, s = new_params, new_m, new_s
    if config.safeguard:
        final = scene_loss(scene.with_parameters(params), targets, times, config.lam_tv, config.norm)
        if not final <= accepted[0]:
            params = accepted[2]
    return scene.with_parameters(params), losses


# construction ---------------------------------------------------------------

def make_scene(gaussians: Gaussians, height: int, width: int, background=(0.0, 0.0, 0.0),
               deformation: DeformationField | None = None, seed: int = 0) -> GaussianScene:
    anchors = gaussians.mu / np.array([width, height], dtype=np.float64)
    if deformation is None:
        deformation = DeformationField.init(np.random.default_rng(seed), FEATURE_DIM)
    return GaussianScene(gaussians, deformation, anchors, np.asarray(background, dtype=np.float64))


def random_gaussians(n: int, height: int, width: int, rng: np.random.Generator,
                     frame: np.ndarray | None = None) -> Gaussians:
    """Random Gaussians inside the canvas; colours are read from ``frame`` if given."""
    mu = np.stack([rng.uniform(2, width - 2, n), rng.uniform(2, height - 2, n)], axis=1)
    base = np.sqrt(height * width / max(n, 1)) / 2.5
    scale = base * rng.uniform(0.6, 1.4, (n, 2))
    rotation = rng.uniform(-np.pi, np.pi, n)
    if frame is not None:
        xi = np.clip(mu[:, 0].astype(int), 0, width - 1)
        yi = np.clip(mu[:, 1].astype(int), 0, height - 1)
        color = np.clip(frame[yi, xi], 0, 1)
    else:
        color = rng.uniform(0.05, 0.95, (n, 3))
    opacity = rng.uniform(0.5, 0.9, n)
    return Gaussians(mu, scale, rotation, color, opacity)


def random_scene(n: int, height: int, width: int, seed: int = 0, motion: float = 0.0,
                 background=(0.1, 0.1, 0.1)) -> GaussianScene:
    """Random scene; ``motion > 0`` gives the offset networks random output layers."""
    rng = np.random.default_rng(seed)
    g = random_gaussians(n, height, width, rng)
    d = DeformationField.init(rng, FEATURE_DIM, out_scale=motion)
    return make_scene(g, height, width, background, d)


# scene files ----------------------------------------------------------------

def _b64(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return {"shape": list(arr.shape), "dtype": "<f4", "data": base64.b64encode(data).decode("ascii")}


def _unb64(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype=entry.get("dtype", "<f4")).reshape(entry["shape"]).astype(np.float64)


def save_scene(path, scene: GaussianScene, **meta) -> None:
    g = scene.gaussians
    doc = {
        "schema": SCHEMA,
        "gaussians": {k: v.tolist() for k, v in g.arrays().items()},
        "anchors": scene.anchors.tolist(),
        "background": scene.background.tolist(),
        "deformation": {k: _b64(v) for k, v in scene.deformation.weights.items()},
        **meta,
    }
    Path(path).write_text(json.dumps(doc))


def load_scene(path) -> GaussianScene:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read scene {path}: {exc}") from None
    if doc.get("schema") != SCHEMA:
        raise FormatError(f"{path}: unsupported scene schema {doc.get('schema')!r}")
    try:
        g = Gaussians(**{k: np.asarray(doc["gaussians"][k], dtype=np.float64) for k in GAUSSIAN_KEYS})
        d = DeformationField({k: _unb64(v) for k, v in doc["deformation"].items()})
        return GaussianScene(g, d, np.asarray(doc["anchors"], dtype=np.float64),
                             np.asarray(doc["background"], dtype=np.float64))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: malformed scene ({exc})") from None
