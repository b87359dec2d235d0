"""Batch preparation, optimizers, the training loop and inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .anchors import DEFAULT_TAU, decode_predictions, encode_targets
from .data import Volume, network_input
from .heatmap import DEFAULT_PRESENCE_THRESHOLD, HeatmapVolume, decode_peaks, encode_heatmaps
from .landmarks import LandmarkSet
from .losses import LossWeights, cls_loss, heatmap_loss, offset_loss, total_loss
from .network import ModelState, forward_anchor_based, forward_anchor_free

OPTIMIZERS = ("gd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    optimizer: str = "adam"
    clip_norm: float | None = 1.0
    adam_eps: float = 1e-12  # small enough that rarely-touched head biases still move at full step size
    sigma: float = 2.0
    weights: LossWeights = LossWeights()
    log_every: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.steps < 0 or self.lr <= 0 or self.sigma <= 0 or self.adam_eps <= 0:
            raise ValueError("steps must be >= 0; lr, sigma and adam_eps > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")


@dataclass
class Batch:
    inputs: np.ndarray  # (B, H, W, D) in [0, 1]
    present: np.ndarray  # (B, L)
    heatmaps: np.ndarray | None = None  # (B, H, W, D, L)
    offsets: np.ndarray | None = None  # (B, H/4, W/4, D/4, 3 L n_a)
    labels: np.ndarray | None = None  # (B, H/4, W/4, D/4, L n_a)
    aux: np.ndarray | None = None  # (B, H/4, W/4, D/4, L)


def downsample_landmarks(lm: LandmarkSet, factor: int) -> LandmarkSet:
    """Landmarks on a ``factor``-times coarser voxel grid (rounded to nearest voxel)."""
    return lm.copy(coords=np.floor(lm.coords / factor))


def prepare_batch(model: ModelState, cases: Sequence[tuple[Volume, LandmarkSet]], sigma: float) -> Batch:
    cfg = model.config
    dt = cfg.np_dtype
    x = network_input([v.data for v, _ in cases], dtype=dt)
    present = np.stack([lm.present for _, lm in cases])
    batch = Batch(x, present)
    if cfg.variant == "anchor_free":
        batch.heatmaps = np.stack([encode_heatmaps(lm, cfg.input_dims, sigma, dt).values for _, lm in cases])
        return batch
    grid = cfg.anchor_grid()
    targets = [encode_targets(lm, grid) for _, lm in cases]
    batch.offsets = np.stack([t.offsets for t in targets]).astype(dt)
    batch.labels = np.stack([t.labels for t in targets]).astype(dt)
    if cfg.aux_heatmap:
        batch.aux = np.stack([encode_heatmaps(downsample_landmarks(lm, 4), grid.dims, sigma / 4, dt).values
                              for _, lm in cases])
    return batch


def compute_loss(model: ModelState, batch: Batch, weights: LossWeights = LossWeights()):
    """Total loss tensor and a dict of float-valued parts."""
    variant = model.config.variant
    if variant == "anchor_free":
        parts = {"heatmap": heatmap_loss(forward_anchor_free(model, batch.inputs), batch.heatmaps, batch.present)}
    else:
        off, probs, aux = forward_anchor_based(model, batch.inputs)
        parts = {"reg": offset_loss(off, batch.offsets, batch.labels > 0.5),
                 "cls": cls_loss(probs, batch.labels)}
        if aux is not None and batch.present.any():
            parts["heatmap"] = heatmap_loss(aux, batch.aux, batch.present)
    total = total_loss(parts, weights, variant)
    return total, {k: v.item() for k, v in parts.items()}


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None):
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: (p - self.lr * grads[k]).astype(p.dtype) for k, p in params.items()}


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k].astype(np.float64)
            m = self.m.get(k, 0.0) * self.b1 + (1.0 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = (p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return out


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr, eps=cfg.adam_eps) if cfg.optimizer == "adam" else GradientDescent(cfg.lr)


@dataclass
class TrainResult:
    model: ModelState
    curve: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.curve[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.curve[-1]["total"]

    def curve_records(self) -> str:
        keys = list(self.curve[0]) if self.curve else ["step", "total"]
        lines = [",".join(keys)]
        lines += [",".join(str(r[k]) if k == "step" else repr(float(r[k])) for k in keys) for r in self.curve]
        return "\n".join(lines) + "\n"


def train(model: ModelState, cases: Sequence[tuple[Volume, LandmarkSet]], cfg: TrainConfig = TrainConfig(),
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Full-batch training. ``curve[s]`` holds the loss evaluated before update ``s``;
    the last row (``step == steps``) is the loss after the final update."""
    batch = prepare_batch(model, cases, cfg.sigma)
    opt = make_optimizer(cfg)
    params = model.arrays()
    curve = []
    for step in range(cfg.steps + 1):
        current = model.with_params(params, requires_grad=step < cfg.steps)
        total, parts = compute_loss(current, batch, cfg.weights)
        row = {"step": step, "total": total.item(), **parts, "grad_norm": 0.0}
        if step < cfg.steps:
            g = T.backward(total)
            grads, row["grad_norm"] = clip_by_global_norm({k: g[t] for k, t in current.params.items()},
                                                         cfg.clip_norm)
            params = opt.step(params, grads)
        curve.append(row)
        if callback is not None and (cfg.log_every and step % cfg.log_every == 0 or step == cfg.steps):
            callback(row)
    return TrainResult(model.with_params(params), curve)


# ----------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------
def predict_heatmaps(model: ModelState, volume: Volume) -> HeatmapVolume:
    out = forward_anchor_free(model, network_input([volume.data], model.config.np_dtype))
    return HeatmapVolume(out.data[0], float("nan"))


def predict_landmarks(model: ModelState, volume: Volume, presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD,
                      tau: float = DEFAULT_TAU, names=()) -> LandmarkSet:
    """Decode one volume with either variant, in the volume's voxel frame and spacing."""
    if model.config.variant == "anchor_free":
        return decode_peaks(predict_heatmaps(model, volume), presence_threshold, volume.spacing, names=names)
    off, probs, _ = forward_anchor_based(model, network_input([volume.data], model.config.np_dtype))
    return decode_predictions(off.data[0], probs.data[0], model.config.anchor_grid(), tau, volume.spacing, names)
