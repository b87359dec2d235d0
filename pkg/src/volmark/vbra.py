"""Volumetric bi-level routing attention.

The feature volume is cut into equal regions. Mean-pooled query/key region
descriptors are scored against each other, every query region keeps its
``top_k`` best key regions, and token-level multi-head attention then runs
only over the tokens gathered from those regions.

Region ids and token order within a region are row-major over ``(h, w, d)``.
Routing is a hard selection made on detached values; gradients reach K and V
through the gathered rows only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConvParams, MlpParams, NormParams, Triple, _triple, dwconv3d, layer_norm, linear, mlp_block
from .tensor import ShapeError, Tensor

PADDING_POLICIES = ("reject", "zero_pad_mask")


@dataclass(frozen=True)
class VbraConfig:
    region_size: Triple
    top_k: int
    heads: int
    channels: int
    padding_policy: str = "reject"
    force_self_region: bool = False

    def __post_init__(self):
        object.__setattr__(self, "region_size", _triple(self.region_size))
        if any(s < 1 for s in self.region_size):
            raise ValueError(f"region_size must be positive, got {self.region_size}")
        if self.top_k < 1 or self.heads < 1 or self.channels < 1:
            raise ValueError("top_k, heads and channels must be positive")
        if self.channels % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.padding_policy not in PADDING_POLICIES:
            raise ValueError(f"padding_policy must be one of {PADDING_POLICIES}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def grid(self, dims) -> Triple:
        """Region counts per axis for spatial ``dims`` (after any padding)."""
        return tuple(-(-n // s) for n, s in zip(dims, self.region_size))

    def num_regions(self, dims) -> int:
        return int(np.prod(self.grid(dims)))


@dataclass(frozen=True)
class Partition:
    """Geometry of one partitioned volume.

    ``token_ids[r, s]`` is the flat row-major voxel index of token ``s`` of
    region ``r`` in the unpadded volume, or -1 for a padding token.
    """

    dims: Triple
    padded_dims: Triple
    region_size: Triple
    grid: Triple
    token_ids: np.ndarray
    valid: np.ndarray | None

    @property
    def num_regions(self) -> int:
        return int(np.prod(self.grid))

    @property
    def tokens_per_region(self) -> int:
        return int(np.prod(self.region_size))


@dataclass(frozen=True)
class RoutingIndex:
    """Per query region, the ``k`` selected key-region ids in ascending order."""

    selected: np.ndarray  # (B, R, k) int
    affinity: np.ndarray  # (B, R, R) row-stochastic coarse attention
    partition: Partition | None = None

    @property
    def k(self) -> int:
        return self.selected.shape[-1]

    def keys_per_query(self) -> int:
        if self.partition is None:
            raise ValueError("routing has no partition attached")
        return self.k * self.partition.tokens_per_region


@dataclass(frozen=True)
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ShapeError(f"{name} must be square, got {w.shape}")


@dataclass(frozen=True)
class BlockParams:
    dwconv: ConvParams
    norm1: NormParams
    attn: AttentionParams
    norm2: NormParams
    mlp: MlpParams


# (B, nh, sh, nw, sw, nd, sd, C) -> (B, nh, nw, nd, sh, sw, sd, C)
_TO_REGIONS = (0, 1, 3, 5, 2, 4, 6, 7)
_FROM_REGIONS = (0, 1, 4, 2, 5, 3, 6, 7)


def _pad_up(x: Tensor, padded) -> Tensor:
    for axis, target in zip((1, 2, 3), padded):
        extra = target - x.shape[axis]
        if extra > 0:
            shape = list(x.shape)
            shape[axis] = extra
            x = T.concat([x, Tensor(np.zeros(shape, dtype=x.dtype))], axis=axis)
    return x


def _token_ids(dims, padded, size, grid) -> np.ndarray:
    coords = np.stack(np.meshgrid(*(np.arange(n) for n in padded), indexing="ij"), axis=-1)
    inside = np.all(coords < np.array(dims), axis=-1)
    flat = np.ravel_multi_index(tuple(np.minimum(coords, np.array(dims) - 1)[..., i] for i in range(3)), dims)
    flat = np.where(inside, flat, -1)
    blocks = flat.reshape(grid[0], size[0], grid[1], size[1], grid[2], size[2])
    return blocks.transpose(0, 2, 4, 1, 3, 5).reshape(int(np.prod(grid)), int(np.prod(size)))


def make_partition(dims, cfg: VbraConfig) -> Partition:
    dims = _triple(dims)
    size = cfg.region_size
    if cfg.padding_policy == "reject":
        for axis, (n, s) in enumerate(zip(dims, size)):
            if n % s:
                raise ShapeError(f"partition: axis {axis} extent {n} not divisible by region extent {s}")
    grid = cfg.grid(dims)
    padded = tuple(g * s for g, s in zip(grid, size))
    ids = _token_ids(dims, padded, size, grid)
    valid = None if padded == dims else ids >= 0
    return Partition(dims, padded, size, grid, ids, valid)


def partition_regions(x: Tensor, cfg: VbraConfig) -> tuple[Tensor, Partition]:
    """Split ``(B?, H, W, D, C)`` into ``(B?, R, S, C)`` region-major tokens."""
    squeeze = x.ndim == 4
    x5 = T.reshape(x, (1,) + x.shape) if squeeze else x
    if x5.ndim != 5:
        raise ShapeError(f"partition: expected (H, W, D, C) or (B, H, W, D, C), got {x.shape}")
    part = make_partition(x5.shape[1:4], cfg)
    x5 = _pad_up(x5, part.padded_dims)
    b, c = x5.shape[0], x5.shape[-1]
    (nh, nw, nd), (sh, sw, sd) = part.grid, part.region_size
    y = T.reshape(x5, (b, nh, sh, nw, sw, nd, sd, c))
    y = T.permute(y, _TO_REGIONS)
    y = T.reshape(y, (b, part.num_regions, part.tokens_per_region, c))
    return (T.reshape(y, y.shape[1:]) if squeeze else y), part


def unpartition_regions(y: Tensor, part: Partition) -> Tensor:
    """Inverse of :func:`partition_regions`; padding tokens are dropped."""
    squeeze = y.ndim == 3
    y4 = T.reshape(y, (1,) + y.shape) if squeeze else y
    b, c = y4.shape[0], y4.shape[-1]
    (nh, nw, nd), (sh, sw, sd) = part.grid, part.region_size
    x = T.reshape(y4, (b, nh, nw, nd, sh, sw, sd, c))
    x = T.permute(x, _FROM_REGIONS)
    x = T.reshape(x, (b,) + part.padded_dims + (c,))
    if part.padded_dims != part.dims:
        h, w, d = part.dims
        x = T.slice_(x, (slice(None), slice(0, h), slice(0, w), slice(0, d), slice(None)))
    return T.reshape(x, x.shape[1:]) if squeeze else x


def region_descriptors(q: Tensor, k: Tensor, part: Partition | None = None) -> tuple[Tensor, Tensor]:
    """Mean over each region's valid tokens: ``(..., R, S, C) -> (..., R, C)``."""
    valid = None if part is None else part.valid
    if valid is None:
        return T.reduce_mean(q, axis=-2), T.reduce_mean(k, axis=-2)
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("region_descriptors: a region has no valid tokens")
    w = Tensor(np.broadcast_to((valid / counts[:, None])[..., None], q.shape), dtype=q.dtype)
    return T.reduce_sum(q * w, axis=-2), T.reduce_sum(k * w, axis=-2)


def coarse_route(qp: Tensor | np.ndarray, kp: Tensor | np.ndarray, k: int, head_dim: int,
                 force_self_region: bool = False, partition: Partition | None = None) -> RoutingIndex:
    """Pick, for each query region, the ``k`` key regions with highest affinity.

    Affinity is ``softmax(Qp Kp^T / sqrt(head_dim))``; selection is done on the
    raw scores (softmax is monotone) with ties going to the lower region id.
    """
    qd = qp.data if isinstance(qp, Tensor) else np.asarray(qp)
    kd = kp.data if isinstance(kp, Tensor) else np.asarray(kp)
    squeeze = qd.ndim == 2
    if squeeze:
        qd, kd = qd[None], kd[None]
    r = kd.shape[-2]
    if not 1 <= k <= r:
        raise ValueError(f"coarse_route: top_k={k} must be in [1, {r}] regions")
    scores = (qd @ np.swapaxes(kd, -1, -2)).astype(np.float64) / math.sqrt(head_dim)
    z = np.exp(scores - scores.max(axis=-1, keepdims=True))
    affinity = z / z.sum(axis=-1, keepdims=True)
    ranked = scores
    if force_self_region:
        ranked = scores.copy()
        diag = np.arange(r)
        ranked[:, diag, diag] = np.inf
    selected = np.sort(T.topk_indices(ranked, k, axis=-1), axis=-1)
    if squeeze:
        selected, affinity = selected[0], affinity[0]
    return RoutingIndex(selected, affinity, partition)


def gather_tokens(k: Tensor, v: Tensor, routing: RoutingIndex) -> tuple[Tensor, Tensor, np.ndarray | None]:
    """Concatenate the selected regions' tokens per query region.

    ``(B, R, S, C) -> (B, R, k*S, C)``; also returns the matching key-validity
    mask (``None`` when the partition has no padding).
    """
    squeeze = k.ndim == 3
    if squeeze:
        k, v = T.reshape(k, (1,) + k.shape), T.reshape(v, (1,) + v.shape)
    sel = routing.selected[None] if routing.selected.ndim == 2 else routing.selected
    b, r, s, c = k.shape
    if sel.shape[:2] != (b, r):
        raise ShapeError(f"gather_tokens: routing {sel.shape} does not match keys {k.shape}")
    if sel.min() < 0 or sel.max() >= r:
        raise IndexError(f"gather_tokens: region id out of range [0, {r})")
    flat = sel + (np.arange(b) * r)[:, None, None]
    n = sel.shape[-1] * s

    def pick(t):
        g = T.gather(T.reshape(t, (b * r, s, c)), flat, axis=0)
        return T.reshape(g, (b, r, n, c))

    ks, vs = pick(k), pick(v)
    mask = None
    part = routing.partition
    if part is not None and part.valid is not None:
        mask = part.valid[sel].reshape(b, r, n)
    if squeeze:
        ks, vs = T.reshape(ks, ks.shape[1:]), T.reshape(vs, vs.shape[1:])
        mask = None if mask is None else mask[0]
    return ks, vs, mask


def _split_heads(x: Tensor, heads: int, keys: bool = False) -> Tensor:
    *lead, n, c = x.shape
    y = T.reshape(x, tuple(lead) + (n, heads, c // heads))
    nd = y.ndim
    # (..., N, h, d) -> (..., h, N, d), or (..., h, d, N) for keys
    tail = (nd - 2, nd - 1, nd - 3) if keys else (nd - 2, nd - 3, nd - 1)
    return T.permute(y, tuple(range(nd - 3)) + tail)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    nd = x.ndim
    y = T.permute(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return T.reshape(y, tuple(lead) + (n, h * d))


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask=None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` per head over the last two axes, heads re-concatenated."""
    c = q.shape[-1]
    if c % heads:
        raise ShapeError(f"attention: {heads} heads do not divide {c} channels")
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads, keys=True)
    vh = _split_heads(v, heads)
    logits = T.matmul(qh, kh) * (1.0 / math.sqrt(c // heads))
    mask = None
    if key_mask is not None:
        m = np.asarray(key_mask, dtype=bool)
        m = m.reshape(m.shape[:-1] + (1, 1, m.shape[-1]))
        mask = np.broadcast_to(m, logits.shape)
    attn = T.softmax(logits, axis=-1, mask=mask)
    return _merge_heads(T.matmul(attn, vh))


def fine_attention(q: Tensor, k_star: Tensor, v_star: Tensor, wo: Tensor, heads: int,
                   partition: Partition | None = None, key_mask=None) -> Tensor:
    """Token-to-token attention of each region's queries over its gathered keys.

    ``q`` is ``(B?, R, S, C)``; ``k_star``/``v_star`` are ``(B?, R, k*S, C)``.
    Heads are concatenated and projected by ``wo``. With a ``partition`` the
    result is folded back to volume layout.
    """
    out = linear(multihead_attention(q, k_star, v_star, heads, key_mask), wo)
    if partition is not None:
        out = unpartition_regions(out, partition)
    return out


def vbra_attention(x: Tensor, p: AttentionParams, cfg: VbraConfig) -> tuple[Tensor, RoutingIndex]:
    """Project, route and attend; ``x`` is ``(B?, H, W, D, C)``, output has the same shape."""
    if x.shape[-1] != cfg.channels:
        raise ShapeError(f"vbra: input has {x.shape[-1]} channels, config expects {cfg.channels}")
    q, part = partition_regions(linear(x, p.wq), cfg)
    k, _ = partition_regions(linear(x, p.wk), cfg)
    v, _ = partition_regions(linear(x, p.wv), cfg)
    qp, kp = region_descriptors(q, k, part)
    top_k = cfg.top_k
    if top_k > part.num_regions:
        raise ValueError(f"vbra: top_k={top_k} exceeds {part.num_regions} regions")
    routing = coarse_route(qp, kp, top_k, cfg.head_dim, cfg.force_self_region, part)
    ks, vs, mask = gather_tokens(k, v, routing)
    return fine_attention(q, ks, vs, p.wo, cfg.heads, part, mask), routing


def dense_attention(x: Tensor, p: AttentionParams, heads: int) -> Tensor:
    """Full quadratic attention over all tokens of ``(B?, H, W, D, C)``, on the tape."""
    shape = x.shape
    c = shape[-1]
    tokens = T.reshape(x, shape[:-4] + (-1, c)) if x.ndim == 5 else T.reshape(x, (-1, c))
    out = multihead_attention(linear(tokens, p.wq), linear(tokens, p.wk), linear(tokens, p.wv), heads)
    return T.reshape(linear(out, p.wo), shape)


def dense_attention_reference(tokens: np.ndarray, wq, wk, wv, wo, heads: int) -> np.ndarray:
    """Plain-numpy multi-head attention over ``(T, C)`` tokens; the test oracle."""
    x = np.asarray(tokens, dtype=np.float64)
    wq, wk, wv, wo = (np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
                      for w in (wq, wk, wv, wo))
    n, c = x.shape
    d = c // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.empty_like(q)
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        s = q[:, cols] @ k[:, cols].T / math.sqrt(d)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        out[:, cols] = s @ v[:, cols]
    return out @ wo


def vbra_block(x: Tensor, p: BlockParams, cfg: VbraConfig) -> Tensor:
    """Residual stack: depthwise conv, routed attention on LN, MLP on LN."""
    y1 = x + dwconv3d(x, p.dwconv)
    attn, _ = vbra_attention(layer_norm(y1, p.norm1), p.attn, cfg)
    y2 = y1 + attn
    return y2 + mlp_block(layer_norm(y2, p.norm2), p.mlp)
