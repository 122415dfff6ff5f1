"""One-layer pixel reconstruction head and masked-pixel losses."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import Params, _dense
from .tensor import Tensor


def init_recon_head(in_dim: int, down_total: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    return {
        "recon.w": T.parameter(_dense(rng, in_dim, down_total**2, dtype), name="recon.w"),
        "recon.b": T.parameter(np.zeros(down_total**2, dtype), name="recon.b"),
    }


def reconstruct(features: Tensor, params: Params, final_grid: tuple[int, int], down_total: int) -> Tensor:
    """Map each final-stage token to its ``down_total x down_total`` pixel block and tile."""
    nb, n, _ = features.shape
    gh, gw = final_grid
    f = down_total
    if gh * gw != n or params["recon.w"].shape[1] != f * f:
        raise T.ShapeError(f"token grid {gh}x{gw} / head width {params['recon.w'].shape[1]} mismatch")
    x = T.linear(features, params["recon.w"], params["recon.b"])
    x = T.reshape(x, (nb, gh, gw, f, f))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (nb, gh * f, gw * f))


def pixel_mask(mask, image_hw: tuple[int, int], patch: int) -> np.ndarray:
    """Expand stem-grid masks ``[..., n]`` to pixel masks ``[..., H, W]``."""
    m = np.asarray(mask)
    h, w = image_hw
    gh, gw = h // patch, w // patch
    m = m.reshape(*m.shape[:-1], gh, gw)
    return np.repeat(np.repeat(m, patch, axis=-2), patch, axis=-1)


def _as_batch(x):
    if isinstance(x, Tensor):
        return x if x.ndim == 3 else T.reshape(x, (1, *x.shape))
    x = np.asarray(x)
    return x if x.ndim == 3 else x[None]


def masked_mse(pred: Tensor, target, mask, patch: int) -> tuple[Tensor, np.ndarray]:
    """Per-image MSE over pixels of masked stem patches.

    Returns ``(per_image_loss [B], has_mask [B])``; images with an empty mask
    contribute 0.
    """
    pred = _as_batch(pred)
    target = _as_batch(target)
    mask = np.asarray(mask)
    if mask.ndim == 1:
        mask = mask[None]
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    pm = pixel_mask(mask, pred.shape[1:], patch).astype(pred.dtype)
    counts = pm.sum(axis=(1, 2))
    has = counts > 0
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    sq = T.sum(diff * diff * Tensor(pm), axis=(1, 2))
    return sq / Tensor(np.where(has, counts, 1.0).astype(pred.dtype)), has


def _views_loss(preds, targets, masks, patch: int) -> tuple[Tensor, bool]:
    if not isinstance(preds, (list, tuple)):
        preds, targets, masks = [preds], [targets], [masks]
    per_view = []
    any_mask = False
    for p, t, m in zip(preds, targets, masks):
        losses, has = masked_mse(p, t, m, patch)
        any_mask = any_mask or bool(has.any())
        per_view.append(T.mean(losses))
    if not any_mask:
        return Tensor(np.zeros((), dtype=per_view[0].dtype)), True
    total = per_view[0]
    for v in per_view[1:]:
        total = total + v
    return total / float(len(per_view)), False


def loss_recon_global(preds, targets, masks, patch: int) -> tuple[Tensor, bool]:
    """Masked-pixel MSE averaged over global views; ``(loss, empty_mask_flag)``."""
    return _views_loss(preds, targets, masks, patch)


def loss_recon_local(preds, targets, masks, patch: int) -> tuple[Tensor, bool]:
    """Same reduction as :func:`loss_recon_global`, applied to the local views."""
    return _views_loss(preds, targets, masks, patch)


def rec_loss_map(pred, target, mask, patch: int) -> np.ndarray:
    """Per-stem-patch MSE ``[..., n]``; NaN at unmasked patches."""
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    h, w = p.shape[-2:]
    gh, gw = h // patch, w // patch
    sq = (p - t) ** 2
    sq = sq.reshape(*sq.shape[:-2], gh, patch, gw, patch).mean(axis=(-3, -1))
    sq = sq.reshape(*sq.shape[:-2], gh * gw)
    return np.where(m.reshape(sq.shape), sq, np.nan)


def rank_patches(loss_map: np.ndarray) -> np.ndarray:
    """Masked patch indices sorted by loss, hardest first (ties: lower index first)."""
    v = np.asarray(loss_map).reshape(-1)
    idx = np.flatnonzero(~np.isnan(v))
    return idx[np.argsort(-v[idx], kind="stable")]
