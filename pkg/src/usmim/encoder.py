"""Hierarchical vision state-space encoder.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names so the
same forward functions serve student and teacher copies.

The selective scan has two evaluation routes: the sequential recurrence
(:func:`scan_recurrence`) and the causal attention form
(:func:`scan_attention_form`), which materialises the ``T x T`` matrix
``[(Q*w)(K/w)^T] * M`` with the cumulative decay ``w`` kept in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]


@dataclass
class EncoderConfig:
    image_size: int = 64
    stem_patch: int = 4
    stages: int = 2
    stage_dims: tuple[int, ...] = (32, 64)
    state_dim: int = 8
    scan_directions: int = 2
    mlp_ratio: float = 4.0
    depths: tuple[int, ...] = (1, 1)
    attention_form: str = "weighted"  # or "qk"

    def __post_init__(self):
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        self.depths = tuple(int(d) for d in self.depths)
        self.validate()

    @property
    def down_total(self) -> int:
        return self.stem_patch * 2 ** (self.stages - 1)

    def validate(self) -> None:
        if self.image_size % self.stem_patch:
            raise ValueError("image_size must be divisible by stem_patch")
        if self.image_size % self.down_total:
            raise ValueError("image_size must be divisible by the total downsampling factor")
        if len(self.stage_dims) != self.stages or len(self.depths) != self.stages:
            raise ValueError("stage_dims and depths need one entry per stage")
        if any(d < self.state_dim for d in self.stage_dims):
            raise ValueError("every stage dim must be >= state_dim")
        if self.stage_dims[0] % 4:
            raise ValueError("first stage dim must be divisible by 4 (2-D sin-cos code)")
        if self.scan_directions not in (1, 2, 4):
            raise ValueError("scan_directions must be 1, 2 or 4")
        if self.attention_form not in ("weighted", "qk"):
            raise ValueError("attention_form must be 'weighted' or 'qk'")


def sub_params(params: Params, prefix: str) -> Params:
    prefix = prefix.rstrip(".") + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- init


def _dense(rng, fan_in: int, fan_out: int, dtype, scale: float = 1.0) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) * scale / math.sqrt(fan_in)).astype(dtype)


def init_block(rng: np.random.Generator, dim: int, state_dim: int, mlp_ratio: float, dtype=np.float32) -> dict[str, np.ndarray]:
    hidden = int(round(dim * mlp_ratio))
    # dt bias so that softplus(bias) is log-uniform in [1e-3, 1e-1]
    dt = math.exp(rng.uniform(math.log(1e-3), math.log(1e-1)))
    return {
        "ln1.g": np.ones(dim, dtype),
        "ln1.b": np.zeros(dim, dtype),
        "in_proj.w": _dense(rng, dim, 2 * dim, dtype),
        "in_proj.b": np.zeros(2 * dim, dtype),
        "delta.w": _dense(rng, dim, 1, dtype, 0.1),
        "delta.b": np.array([dt + math.log(-math.expm1(-dt))], dtype),
        "B.w": _dense(rng, dim, state_dim, dtype),
        "C.w": _dense(rng, dim, state_dim, dtype),
        "A_log": np.log(np.arange(1, state_dim + 1, dtype=np.float64)).astype(dtype),
        "out_proj.w": _dense(rng, dim, dim, dtype),
        "out_proj.b": np.zeros(dim, dtype),
        "ln2.g": np.ones(dim, dtype),
        "ln2.b": np.zeros(dim, dtype),
        "mlp1.w": _dense(rng, dim, hidden, dtype),
        "mlp1.b": np.zeros(hidden, dtype),
        "mlp2.w": _dense(rng, hidden, dim, dtype),
        "mlp2.b": np.zeros(dim, dtype),
    }


def init_encoder(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    arrays: dict[str, np.ndarray] = {}
    p2 = config.stem_patch**2
    d0 = config.stage_dims[0]
    arrays["stem.w"] = _dense(rng, p2, d0, dtype)
    arrays["stem.b"] = np.zeros(d0, dtype)
    arrays["mask_token"] = (rng.standard_normal(d0) * 0.02).astype(dtype)
    for s in range(config.stages):
        dim = config.stage_dims[s]
        if s > 0:
            prev = config.stage_dims[s - 1]
            arrays[f"stage{s}.down.w"] = _dense(rng, 4 * prev, dim, dtype)
            arrays[f"stage{s}.down.b"] = np.zeros(dim, dtype)
        for k in range(config.depths[s]):
            for name, arr in init_block(rng, dim, config.state_dim, config.mlp_ratio, dtype).items():
                arrays[f"stage{s}.block{k}.{name}"] = arr
    arrays["norm.g"] = np.ones(config.stage_dims[-1], dtype)
    arrays["norm.b"] = np.zeros(config.stage_dims[-1], dtype)
    return {k: T.parameter(v, name=k) for k, v in arrays.items()}


# ---------------------------------------------------------------- stem


_POS_CACHE: dict[tuple, np.ndarray] = {}


def sincos_position_code(grid_h: int, grid_w: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D sin-cos code, ``[grid_h*grid_w, dim]``; first half encodes rows."""
    key = (grid_h, grid_w, dim, np.dtype(dtype).str)
    if key not in _POS_CACHE:
        quarter = dim // 4
        omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
        rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")

        def enc(pos):
            out = pos.reshape(-1, 1).astype(np.float64) * omega[None, :]
            return np.concatenate([np.sin(out), np.cos(out)], axis=1)

        code = np.concatenate([enc(rows), enc(cols)], axis=1)
        _POS_CACHE[key] = code.astype(dtype)
    return _POS_CACHE[key]


def patchify(images: Tensor, patch: int) -> Tensor:
    """``[B, H, W]`` -> ``[B, (H/p)*(W/p), p*p]`` in row-major patch order."""
    b, h, w = images.shape
    if h % patch or w % patch:
        raise T.ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    x = T.reshape(images, (b, h // patch, patch, w // patch, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, (h // patch) * (w // patch), patch * patch))


def patchify_stem(images, config: EncoderConfig, params: Params, mask: np.ndarray | None = None) -> Tensor:
    """Embed non-overlapping stem patches, swap in the mask token, add position code."""
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=params["stem.w"].dtype))
    if images.ndim == 2:
        images = T.reshape(images, (1, *images.shape))
    b, h, w = images.shape
    p = config.stem_patch
    gh, gw = h // p, w // p
    tokens = T.linear(patchify(images, p), params["stem.w"], params["stem.b"])
    d0 = tokens.shape[-1]
    if mask is not None:
        m = np.asarray(mask, dtype=tokens.dtype).reshape(b, gh * gw, 1)
        if m.shape[1] != gh * gw:
            raise T.ShapeError("mask is not on the stem grid")
        m = np.broadcast_to(m, tokens.shape)
        mt = T.expand(T.reshape(params["mask_token"], (1, 1, d0)), tokens.shape)
        tokens = T.mul(tokens, Tensor(1.0 - m)) + T.mul(mt, Tensor(m))
    pos = sincos_position_code(gh, gw, d0, tokens.dtype)
    return tokens + Tensor(np.broadcast_to(pos, tokens.shape))


# ---------------------------------------------------------------- selective scan


@dataclass
class ScanInputs:
    """Per-token SSM quantities: Δ ``[B,T,1]``, A ``[N]``, B/C ``[B,T,N]``."""

    delta: Tensor
    A: Tensor
    B: Tensor
    C: Tensor


@dataclass
class ScanIntermediates:
    log_w: np.ndarray  # cumulative Σ Δ_i A, [B, T, N]
    M: np.ndarray  # [T, T] lower triangular incl. diagonal
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray


def scan_inputs(u: Tensor, p: Params) -> ScanInputs:
    delta = T.softplus(T.linear(u, p["delta.w"], p["delta.b"]))
    A = T.neg(T.exp(p["A_log"]))
    return ScanInputs(delta, A, T.linear(u, p["B.w"]), T.linear(u, p["C.w"]))


def scan_recurrence(u, delta, A, B, C) -> np.ndarray:
    """Sequential ZOH recurrence ``h_i = exp(Δ_i A) h_{i-1} + Δ_i B_i u_i``, ``y_i = C_i h_i``.

    Arrays: u ``[B,T,D]``, delta ``[B,T,1]``, A ``[N]``, B and C ``[B,T,N]``.
    """
    u, delta, A, B, C = (np.asarray(getattr(a, "data", a), dtype=np.float64) for a in (u, delta, A, B, C))
    if np.any(delta <= 0):
        raise T.DomainError("non-positive step size Δ")
    nb, nt, d = u.shape
    h = np.zeros((nb, A.shape[0], d))
    ys = np.empty((nb, nt, d))
    for i in range(nt):
        decay = np.exp(delta[:, i, :] * A[None, :])  # [B, N]
        h = decay[:, :, None] * h + (delta[:, i, :, None] * B[:, i, :, None]) * u[:, i, None, :]
        ys[:, i] = np.einsum("bn,bnd->bd", C[:, i], h)
    return ys


def scan_closed_form(u, delta, A, B, C, h_a=None) -> np.ndarray:
    """Evaluate every ``y_i`` from the interval solution ``h_i = w_i h_a + Σ_j (w_i/w_j) K_j^T V_j``."""
    u, delta, A, B, C = (np.asarray(getattr(a, "data", a), dtype=np.float64) for a in (u, delta, A, B, C))
    nb, nt, d = u.shape
    log_w = np.cumsum(delta * A[None, None, :], axis=1)  # [B,T,N]
    V = delta * u
    h_a = np.zeros((nb, A.shape[0], d)) if h_a is None else np.asarray(h_a, dtype=np.float64)
    ys = np.empty((nb, nt, d))
    for i in range(nt):
        ratio = np.exp(log_w[:, i : i + 1, :] - log_w[:, : i + 1, :])  # [B, i+1, N]
        h = np.exp(log_w[:, i, :])[:, :, None] * h_a
        h = h + np.einsum("bjn,bjn,bjd->bnd", ratio, B[:, : i + 1], V[:, : i + 1])
        ys[:, i] = np.einsum("bn,bnd->bd", C[:, i], h)
    return ys


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def scan_attention_form(u: Tensor, si: ScanInputs) -> tuple[Tensor, Tensor]:
    """Return ``(Y, attention)`` with ``Y = ([(Q*w)(K/w)^T] * M) V``.

    Q = C, K = B, V = Δ*u. The ratio ``w_i / w_j`` is formed as
    ``exp(log_w_i - log_w_j)`` on the causal support only, so nothing
    underflows for long sequences.
    """
    nb, nt, d = u.shape
    n = si.A.shape[0]
    if np.any(si.delta.data <= 0):
        raise T.DomainError("non-positive step size Δ")
    dA = T.expand(si.delta, (nb, nt, n)) * T.expand(T.reshape(si.A, (1, 1, n)), (nb, nt, n))
    log_w = T.cumsum(dA, axis=1)
    full = (nb, nt, nt, n)
    mask = Tensor(np.broadcast_to(causal_mask(nt).astype(u.dtype)[None, :, :, None], full))
    li = T.expand(T.reshape(log_w, (nb, nt, 1, n)), full)
    lj = T.expand(T.reshape(log_w, (nb, 1, nt, n)), full)
    ratio = T.exp((li - lj) * mask) * mask
    q = T.expand(T.reshape(si.C, (nb, nt, 1, n)), full)
    k = T.expand(T.reshape(si.B, (nb, 1, nt, n)), full)
    attn = T.sum(q * ratio * k, axis=-1)
    v = T.expand(si.delta, (nb, nt, d)) * u
    return T.matmul(attn, v), attn


def scan_intermediates(u: Tensor, si: ScanInputs) -> ScanIntermediates:
    log_w = np.cumsum(si.delta.data * si.A.data[None, None, :], axis=1)
    return ScanIntermediates(
        log_w=log_w,
        M=causal_mask(u.shape[1]),
        Q=si.C.data,
        K=si.B.data,
        V=si.delta.data * u.data,
    )


def qk_attention(si: ScanInputs) -> np.ndarray:
    """Undecayed ``(Q K^T) * M`` variant of the attention matrix."""
    q, k = si.C.data, si.B.data
    return (q @ np.swapaxes(k, -1, -2)) * causal_mask(q.shape[1])


def scan_orders(grid_h: int, grid_w: int, directions: int) -> list[np.ndarray]:
    """Token permutations: row-major, reversed, column-major, reversed column-major."""
    idx = np.arange(grid_h * grid_w).reshape(grid_h, grid_w)
    row = idx.reshape(-1)
    col = idx.T.reshape(-1)
    orders = [row, row[::-1].copy(), col, col[::-1].copy()]
    return orders[:directions]


def _as_batch(u: Tensor) -> tuple[Tensor, bool]:
    if u.ndim == 2:
        return T.reshape(u, (1, *u.shape)), True
    return u, False


def selective_scan(u: Tensor, p: Params, direction: str = "forward") -> np.ndarray:
    """Recurrence route for tokens ``[T, D]`` or ``[B, T, D]``; ``direction`` is forward or reverse."""
    u, squeeze = _as_batch(u)
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")
    if direction == "reverse":
        u = T.gather(u, np.arange(u.shape[1])[::-1], axis=1)
    with T.no_grad():
        si = scan_inputs(u, p)
    y = scan_recurrence(u, si.delta, si.A, si.B, si.C)
    if direction == "reverse":
        y = y[:, ::-1]
    return y[0] if squeeze else y


def ssm_attention_form(u: Tensor, p: Params, direction: str = "forward") -> tuple[Tensor, Tensor]:
    """Attention route; returns ``(Y, attention_matrix)`` in scan order."""
    u, squeeze = _as_batch(u)
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")
    rev = np.arange(u.shape[1])[::-1]
    if direction == "reverse":
        u = T.gather(u, rev, axis=1)
    y, attn = scan_attention_form(u, scan_inputs(u, p))
    if direction == "reverse":
        y = T.gather(y, rev, axis=1)
    if squeeze:
        y = T.reshape(y, y.shape[1:])
        attn = T.reshape(attn, attn.shape[1:])
    return y, attn


# ---------------------------------------------------------------- blocks


@dataclass
class BlockTrace:
    orders: list[np.ndarray]
    attention: list[np.ndarray]  # per direction, [B, T, T] in scan order


def vss_block(x: Tensor, p: Params, grid: tuple[int, int], directions: int = 2,
              attention_form: str = "weighted", trace: bool = False):
    """Two residual branches: selective-scan mixing then MLP, each behind a layernorm."""
    nb, nt, d = x.shape
    h = T.layernorm(x, p["ln1.g"], p["ln1.b"])
    xz = T.linear(h, p["in_proj.w"], p["in_proj.b"])
    u = T.silu(T.gather(xz, np.arange(d), axis=-1))
    z = T.gather(xz, np.arange(d, 2 * d), axis=-1)
    orders = scan_orders(grid[0], grid[1], directions)
    y = None
    maps = []
    for order in orders:
        uo = T.gather(u, order, axis=1)
        si = scan_inputs(uo, p)
        yo, attn = scan_attention_form(uo, si)
        if trace:
            maps.append(qk_attention(si) if attention_form == "qk" else attn.data)
        yo = T.gather(yo, np.argsort(order), axis=1)
        y = yo if y is None else y + yo
    y = y * T.silu(z)
    x = x + T.linear(y, p["out_proj.w"], p["out_proj.b"])
    h = T.layernorm(x, p["ln2.g"], p["ln2.b"])
    x = x + T.linear(T.silu(T.linear(h, p["mlp1.w"], p["mlp1.b"])), p["mlp2.w"], p["mlp2.b"])
    if trace:
        return x, BlockTrace(orders, maps)
    return x


def downsample(x: Tensor, grid: tuple[int, int], w: Tensor, b: Tensor) -> Tensor:
    """Merge 2x2 token neighbourhoods and project ``4*D -> D'``."""
    nb, _, d = x.shape
    gh, gw = grid
    x = T.reshape(x, (nb, gh // 2, 2, gw // 2, 2, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (nb, (gh // 2) * (gw // 2), 4 * d))
    return T.linear(x, w, b)


@dataclass
class EncoderOutput:
    patch_tokens: Tensor  # [B, T_final, D_last]
    cls_token: Tensor  # [B, D_last]
    stage_features: list[Tensor]
    final_grid: tuple[int, int]
    stem_grid: tuple[int, int]
    trace: BlockTrace | None = None
    attention_map: np.ndarray | None = None  # [B, stem tokens]
    attention_flags: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def encode(images, config: EncoderConfig, params: Params, mask: np.ndarray | None = None,
           with_attention: bool = False) -> EncoderOutput:
    tokens = patchify_stem(images, config, params, mask)
    nb = tokens.shape[0]
    if not isinstance(images, Tensor):
        images = np.asarray(images)
    h_img, w_img = images.shape[-2:]
    if h_img % config.down_total or w_img % config.down_total:
        raise T.ShapeError(f"image {h_img}x{w_img} not divisible by {config.down_total}")
    stem_grid = (h_img // config.stem_patch, w_img // config.stem_patch)
    grid = stem_grid
    feats = []
    trace = None
    x = tokens
    for s in range(config.stages):
        if s > 0:
            x = downsample(x, grid, params[f"stage{s}.down.w"], params[f"stage{s}.down.b"])
            grid = (grid[0] // 2, grid[1] // 2)
        for k in range(config.depths[s]):
            last = s == config.stages - 1 and k == config.depths[s] - 1
            bp = sub_params(params, f"stage{s}.block{k}")
            if last and with_attention:
                x, trace = vss_block(x, bp, grid, config.scan_directions, config.attention_form, trace=True)
            else:
                x = vss_block(x, bp, grid, config.scan_directions)
        feats.append(x)
    x = T.layernorm(x, params["norm.g"], params["norm.b"])
    out = EncoderOutput(x, T.mean(x, axis=1), feats, grid, stem_grid, trace)
    if with_attention:
        out.attention_map, out.attention_flags = extract_attention_map(out)
    assert out.cls_token.shape == (nb, x.shape[-1])
    return out


def minmax(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Rescale to [0, 1]; a constant vector maps to 0.5 everywhere and is flagged."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.full_like(v, 0.5), True
    return (v - lo) / (hi - lo), False


def extract_attention_map(output: EncoderOutput) -> tuple[np.ndarray, np.ndarray]:
    """Attention received per token (column mean over queries), upsampled to the stem grid."""
    if output.trace is None:
        raise ValueError("encode(..., with_attention=True) retains the attention matrices")
    gh, gw = output.final_grid
    sh, sw = output.stem_grid
    fy, fx = sh // gh, sw // gw
    nb = output.patch_tokens.shape[0]
    received = np.zeros((nb, gh * gw))
    for order, attn in zip(output.trace.orders, output.trace.attention):
        col = attn.mean(axis=1)  # [B, T] indexed by scan position
        received[:, order] += col
    received /= len(output.trace.orders)
    maps = np.empty((nb, sh * sw))
    flags = np.zeros(nb, dtype=bool)
    for b in range(nb):
        grid = received[b].reshape(gh, gw)
        up = np.repeat(np.repeat(grid, fy, axis=0), fx, axis=1).reshape(-1)
        maps[b], flags[b] = minmax(up)
    return maps, flags
