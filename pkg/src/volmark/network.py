"""Encoder-decoder landmark networks built from V-BRA stages.

Encoder: a 3x3x3 stem conv gives ``E0`` at full resolution, then each stage
``i = 1..n`` halves the resolution with a stride-2 conv and applies one V-BRA
block, giving ``E_i`` at ``1 / 2**i``.

Decoder: starting from ``E_n``, each fusion upsamples by 2, concatenates the
matching encoder feature and applies conv3d + ReLU. The anchor-free variant
fuses all the way down to ``E0`` and emits sigmoid heatmaps at full
resolution; the anchor-based variant stops at ``E2`` (1/4 resolution) and
emits per-anchor offsets and sigmoid existence probabilities.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .anchors import AnchorGrid, build_grid, default_radii
from .data import _atomic_write
from .nn import ConvParams, MlpParams, NormParams, conv3d, linear, trilinear_upsample
from .tensor import ShapeError, Tensor
from .vbra import AttentionParams, BlockParams, VbraConfig, vbra_block

VARIANTS = ("anchor_free", "anchor_based")
ANCHOR_UNIT = 4  # anchor lattice lives at 1/4 input resolution
CHECKPOINT_MAGIC = b"volmark-checkpoint\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, int, int] = (32, 32, 16)
    landmarks: int = 2
    channels: tuple[int, ...] = (8, 16, 32, 64)
    stem_channels: int | None = None
    variant: str = "anchor_free"
    heads: int = 2
    region_size: tuple[int, int, int] = (4, 4, 4)
    top_k: int = 4
    mlp_ratio: float = 2.0
    anchor_radii: tuple[float, ...] | None = None
    aux_heatmap: bool = False
    head_prior: float | None = 0.01  # initial sigmoid-head output; None keeps a zero bias
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("input_dims", "channels", "region_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.anchor_radii is not None:
            object.__setattr__(self, "anchor_radii", tuple(float(r) for r in self.anchor_radii))
        if self.stages < 1:
            raise ValueError("model needs at least one encoder stage")
        if len(self.input_dims) != 3:
            raise ValueError(f"input_dims must have 3 entries, got {self.input_dims}")
        step = 2 ** self.stages
        for axis, n in enumerate(self.input_dims):
            if n % step:
                raise ValueError(f"input extent {n} on axis {axis} is not divisible by 2**{self.stages}")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"encoder channels must be nondecreasing, got {self.channels}")
        if any(c % self.heads for c in self.channels):
            raise ValueError(f"heads={self.heads} must divide every stage width {self.channels}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "anchor_based" and self.stages < 2:
            raise ValueError("anchor-based variant needs >= 2 stages (heads sit at 1/4 resolution)")
        if self.landmarks < 1:
            raise ValueError("landmarks must be >= 1")
        if self.head_prior is not None and not 0.0 < self.head_prior < 1.0:
            raise ValueError(f"head_prior must lie in (0, 1), got {self.head_prior}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def c0(self) -> int:
        return self.stem_channels or self.channels[0]

    def width(self, level: int) -> int:
        return self.c0 if level == 0 else self.channels[level - 1]

    def dims_at(self, level: int) -> tuple[int, int, int]:
        return tuple(n // 2 ** level for n in self.input_dims)

    def vbra_config(self, level: int) -> VbraConfig:
        """Stage config; regions shrink to the feature extent and k to the region count."""
        dims = self.dims_at(level)
        region = tuple(min(s, n) for s, n in zip(self.region_size, dims))
        if any(n % s for s, n in zip(region, dims)):
            region = dims
        cfg = VbraConfig(region, 1, self.heads, self.width(level))
        return replace(cfg, top_k=min(self.top_k, cfg.num_regions(dims)))

    @property
    def radii(self) -> tuple[float, ...]:
        return self.anchor_radii or default_radii(ANCHOR_UNIT)

    @property
    def n_anchors(self) -> int:
        return len(self.radii)

    @property
    def head_level(self) -> int:
        return 0 if self.variant == "anchor_free" else 2

    def anchor_grid(self) -> AnchorGrid:
        return build_grid(self.dims_at(2), ANCHOR_UNIT, self.radii, self.input_dims)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class ModelState:
    config: ModelConfig
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def with_params(self, arrays: Mapping[str, np.ndarray], requires_grad: bool = False) -> "ModelState":
        dt = self.config.np_dtype
        return ModelState(self.config, self.seed,
                          {k: Tensor(np.asarray(arrays[k]), requires_grad, dtype=dt) for k in self.params})

    def tracked(self) -> "ModelState":
        return self.with_params({k: v.data for k, v in self.params.items()}, requires_grad=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered key -> shape map; the key set is a pure function of the config."""
    shapes: dict[str, tuple] = {"stem.w": (3, 3, 3, 1, cfg.c0), "stem.b": (cfg.c0,)}
    for i in range(1, cfg.stages + 1):
        cin, c = cfg.width(i - 1), cfg.width(i)
        hid = int(round(cfg.mlp_ratio * c))
        p = f"enc{i}."
        shapes.update({
            p + "down.w": (3, 3, 3, cin, c), p + "down.b": (c,),
            p + "dw.w": (3, 3, 3, c), p + "dw.b": (c,),
            p + "norm1.gamma": (c,), p + "norm1.beta": (c,),
            p + "attn.wq": (c, c), p + "attn.wk": (c, c), p + "attn.wv": (c, c), p + "attn.wo": (c, c),
            p + "norm2.gamma": (c,), p + "norm2.beta": (c,),
            p + "mlp.w1": (c, hid), p + "mlp.b1": (hid,), p + "mlp.w2": (hid, c), p + "mlp.b2": (c,),
        })
    prev = cfg.width(cfg.stages)
    for level in range(cfg.stages - 1, cfg.head_level - 1, -1):
        c = cfg.width(level)
        shapes[f"dec{level}.w"] = (3, 3, 3, prev + c, c)
        shapes[f"dec{level}.b"] = (c,)
        prev = c
    n, na = cfg.landmarks, cfg.n_anchors
    if cfg.variant == "anchor_free":
        shapes.update({"head.w": (prev, n), "head.b": (n,)})
    else:
        shapes.update({"offset.w": (prev, 3 * n * na), "offset.b": (3 * n * na,),
                       "prob.w": (prev, n * na), "prob.b": (n * na,)})
        if cfg.aux_heatmap:
            shapes.update({"aux.w": (prev, n), "aux.b": (n,)})
    return shapes


def _init_param(rng: np.random.Generator, key: str, shape: tuple) -> np.ndarray:
    leaf = key.rsplit(".", 1)[1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta",) or leaf.startswith("b"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    if key.endswith("dw.w"):
        fan_in = int(np.prod(shape[:3]))
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


SIGMOID_HEAD_BIASES = ("head.b", "prob.b", "aux.b")


def build_model(config: ModelConfig, seed: int = 0) -> ModelState:
    """Fan-in scaled uniform weights, zero biases, unit LN scale; deterministic in ``seed``.

    Sigmoid heads start at ``logit(head_prior)`` so their initial output matches
    the sparse targets instead of sitting at 0.5.
    """
    rng = np.random.default_rng(seed)
    arrays = {k: _init_param(rng, k, s) for k, s in param_shapes(config).items()}
    if config.head_prior is not None:
        logit = math.log(config.head_prior / (1.0 - config.head_prior))
        for k in SIGMOID_HEAD_BIASES:
            if k in arrays:
                arrays[k] = np.full(arrays[k].shape, logit)
    params = {k: Tensor(a, dtype=config.np_dtype) for k, a in arrays.items()}
    return ModelState(config, int(seed), params)


# ----------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------
def _conv(p: Mapping[str, Tensor], prefix: str, stride: int = 1) -> ConvParams:
    return ConvParams(p[prefix + ".w"], p[prefix + ".b"], (stride,) * 3)


def _block(p: Mapping[str, Tensor], i: int) -> BlockParams:
    k = f"enc{i}."
    return BlockParams(
        dwconv=ConvParams(p[k + "dw.w"], p[k + "dw.b"]),
        norm1=NormParams(p[k + "norm1.gamma"], p[k + "norm1.beta"]),
        attn=AttentionParams(p[k + "attn.wq"], p[k + "attn.wk"], p[k + "attn.wv"], p[k + "attn.wo"]),
        norm2=NormParams(p[k + "norm2.gamma"], p[k + "norm2.beta"]),
        mlp=MlpParams(p[k + "mlp.w1"], p[k + "mlp.b1"], p[k + "mlp.w2"], p[k + "mlp.b2"]),
    )


def _as_input(model: ModelState, volume) -> Tensor:
    data = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    dims = model.config.input_dims
    if data.shape[-3:] != dims or data.ndim not in (3, 4):
        raise ShapeError(f"input {data.shape} does not match configured dims {dims}")
    if isinstance(volume, Tensor) and volume.dtype == model.config.np_dtype:
        return T.reshape(volume, data.shape + (1,))
    return Tensor(data[..., None], dtype=model.config.np_dtype)


def fuse(u_prev: Tensor, e_skip: Tensor, conv: ConvParams, stage: str = "") -> Tensor:
    """Upsample ``u_prev`` by 2, concatenate ``e_skip`` on channels, conv3d + ReLU."""
    up_dims = tuple(2 * n for n in u_prev.shape[-4:-1])
    if e_skip.shape[-4:-1] != up_dims or e_skip.shape[:-4] != u_prev.shape[:-4]:
        raise ShapeError(f"fusion {stage}: skip {e_skip.shape} does not match 2x upsampled {u_prev.shape}")
    cat = T.concat([trilinear_upsample(u_prev, 2), e_skip], axis=-1)
    return T.relu(conv3d(cat, conv))


def encode(model: ModelState, x: Tensor) -> list[Tensor]:
    cfg, p = model.config, model.params
    feats = [T.relu(conv3d(x, _conv(p, "stem")))]
    for i in range(1, cfg.stages + 1):
        down = conv3d(feats[-1], _conv(p, f"enc{i}.down", stride=2))
        feats.append(vbra_block(down, _block(p, i), cfg.vbra_config(i)))
    return feats


def decode(model: ModelState, feats: list[Tensor]) -> Tensor:
    cfg, p = model.config, model.params
    u = feats[-1]
    for level in range(cfg.stages - 1, cfg.head_level - 1, -1):
        u = fuse(u, feats[level], _conv(p, f"dec{level}"), stage=f"dec{level}")
    return u


def forward_anchor_free(model: ModelState, volume) -> Tensor:
    """Sigmoid heatmaps ``(B?, H, W, D, L)`` for a ``(B?, H, W, D)`` input in ``[0, 1]``."""
    if model.config.variant != "anchor_free":
        raise ValueError("model was built for the anchor-based variant")
    p = model.params
    u = decode(model, encode(model, _as_input(model, volume)))
    return T.sigmoid(linear(u, p["head.w"], p["head.b"]))


def forward_anchor_based(model: ModelState, volume) -> tuple[Tensor, Tensor, Tensor | None]:
    """Offsets ``(..., 3*L*n_a)``, sigmoid probabilities ``(..., L*n_a)`` at 1/4 resolution,
    and the auxiliary 1/4-resolution heatmap when enabled (else ``None``)."""
    if model.config.variant != "anchor_based":
        raise ValueError("model was built for the anchor-free variant")
    p = model.params
    u = decode(model, encode(model, _as_input(model, volume)))
    offsets = linear(u, p["offset.w"], p["offset.b"])
    probs = T.sigmoid(linear(u, p["prob.w"], p["prob.b"]))
    aux = T.sigmoid(linear(u, p["aux.w"], p["aux.b"])) if model.config.aux_heatmap else None
    return offsets, probs, aux


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def save_checkpoint(path, model: ModelState) -> None:
    """Magic line, u64 header length, JSON header with manifest, raw LE payload."""
    manifest, chunks, offset = [], [], 0
    for key, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes()
        manifest.append({"key": key, "shape": list(t.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "seed": model.seed,
                         "config": model.config.to_dict(), "dtype": model.config.dtype,
                         "manifest": manifest}, sort_keys=True).encode()
    _atomic_write(Path(path), CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks))


def load_checkpoint(path, expect: ModelConfig | None = None) -> ModelState:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a volmark checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    header = json.loads(blob[pos + 8:pos + 8 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    if expect is not None and expect != config:
        raise CheckpointError("checkpoint config does not match the requested model config")
    payload = memoryview(blob)[pos + 8 + hlen:]
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    shapes = param_shapes(config)
    params = {}
    for entry in header["manifest"]:
        key, shape = entry["key"], tuple(entry["shape"])
        if shapes.get(key) != shape:
            raise CheckpointError(f"parameter {key} has shape {shape}, config implies {shapes.get(key)}")
        end = entry["offset"] + entry["length"]
        if end > len(payload):
            raise CheckpointError(f"checkpoint payload truncated at {key}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=dt).reshape(shape)
        params[key] = Tensor(arr, dtype=config.np_dtype)
    if set(params) != set(shapes):
        raise CheckpointError("checkpoint parameter set does not match config")
    return ModelState(config, int(header["seed"]), {k: params[k] for k in shapes})
