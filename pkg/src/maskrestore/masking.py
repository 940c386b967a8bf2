"""Adaptive pixel-mask generation and the two pre-training objectives.

Token scores from the scoring network are spread uniformly over each
token's pixels to form a pixel-level categorical distribution; masked
pixel sets are drawn from it without replacement (Gumbel-top-k, which has
the same set distribution as sequential renormalized draws). The
restoration loss supervises the masked region only; the mask loss rewards
placing probability mass where reconstruction error is high.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class MaskPlan:
    """One sampled mask: scores, pixel distribution, index set and mask."""

    pixel_map: np.ndarray          # (H, W), sums to 1
    ratio: float
    n_mask: int
    indices: np.ndarray            # flat pixel ids, len == n_mask, unique
    mask: np.ndarray               # (H, W) in {0,1}; 1 = masked
    token_scores: np.ndarray | None = field(default=None)

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.mask


def importance_map(scores, h: int, w: int, patch: int):
    """Spread token scores uniformly over their patch pixels.

    Accepts a Tensor (stays on the graph, for the mask loss) or an ndarray.
    Token layout is row-major over the (h/patch, w/patch) grid; the result
    sums to 1 and is constant within each patch region.
    """
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"{h}x{w} not divisible by patch {patch}")
    nh, nw = h // patch, w // patch
    per_pixel = 1.0 / (patch * patch)
    if isinstance(scores, Tensor):
        lead = scores.shape[:-1]
        s = ad.reshape(scores, (*lead, nh, 1, nw, 1))
        ones = Tensor(np.ones((1, patch, 1, patch), dtype=scores.dtype))
        s = ad.mul(s, ones)
        s = ad.reshape(s, (*lead, h, w))
        return ad.mul(s, Tensor(np.asarray(per_pixel, dtype=scores.dtype)))
    s = np.asarray(scores)
    lead = s.shape[:-1]
    s = s.reshape(*lead, nh, 1, nw, 1) * np.ones((1, patch, 1, patch), dtype=s.dtype)
    return s.reshape(*lead, h, w) * per_pixel


def sample_mask(pixel_map: np.ndarray, ratio: float, seed,
                token_scores: np.ndarray | None = None) -> MaskPlan:
    """Draw floor(H*W*ratio) distinct pixels from the pixel distribution.

    Zero-probability pixels are never selected. Deterministic per seed.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0,1), got {ratio}")
    pm = np.asarray(pixel_map, dtype=np.float64)
    if pm.ndim != 2:
        raise ShapeError(f"pixel map must be 2-D, got shape {pm.shape}")
    h, w = pm.shape
    n_mask = int(h * w * ratio)
    flat = pm.reshape(-1)
    positive = flat > 0.0
    if int(positive.sum()) < n_mask:
        raise ValueError(
            f"cannot mask {n_mask} pixels: only {int(positive.sum())} have "
            "positive selection probability"
        )
    gen = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, "mask")
    gumbel = gen.gumbel(size=flat.shape)
    keys = np.where(positive, np.log(flat, where=positive, out=np.full_like(flat, -np.inf)) + gumbel, -np.inf)
    indices = np.argpartition(-keys, n_mask - 1)[:n_mask] if n_mask else np.empty(0, dtype=int)
    indices = np.sort(indices)
    mask = np.zeros(h * w)
    mask[indices] = 1.0
    return MaskPlan(
        pixel_map=pm,
        ratio=float(ratio),
        n_mask=n_mask,
        indices=indices,
        mask=mask.reshape(h, w),
        token_scores=None if token_scores is None else np.asarray(token_scores),
    )


def apply_mask(image, mask: np.ndarray, fill: float = 0.0):
    """Set masked pixels to ``fill`` across channels; keep the rest.

    ``mask`` broadcasts against the trailing (H, W) axes, so one 2-D mask
    covers all channels of one image and (B,1,H,W) masks a batch.
    """
    m = np.asarray(mask)
    if isinstance(image, Tensor):
        if m.shape[-2:] != image.shape[-2:]:
            raise ShapeError(f"mask {m.shape} does not match image {image.shape}")
        keep = Tensor((1.0 - m).astype(image.dtype))
        filled = Tensor((m * fill).astype(image.dtype))
        return ad.add(ad.mul(image, keep), filled)
    if m.shape[-2:] != image.shape[-2:]:
        raise ShapeError(f"mask {m.shape} does not match image {image.shape}")
    return image * (1.0 - m) + m * fill


def twin_mask_pair(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A mask and its complement: together they cover every pixel once."""
    m = np.asarray(mask)
    return m, 1.0 - m


def restoration_loss(pred: Tensor, clean, region_mask: np.ndarray) -> Tensor:
    """Mean absolute error over the supervised pixel region only.

    ``region_mask`` selects the supervised pixels (the masked region during
    pre-training); gradient is exactly zero elsewhere.
    """
    target = clean if isinstance(clean, Tensor) else Tensor(np.asarray(clean, dtype=pred.dtype))
    if target.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    m = np.asarray(region_mask, dtype=pred.data.dtype)
    weights = np.broadcast_to(m, pred.shape)
    denom = float(weights.sum())
    if denom == 0:
        raise ValueError("empty supervised region")
    diff = ad.absolute(ad.sub(pred, target))
    weighted = ad.mul(diff, Tensor(np.ascontiguousarray(weights), dtype=pred.dtype))
    return ad.div(ad.sum_(weighted), Tensor(np.asarray(denom, dtype=pred.dtype)))


def mask_loss(per_pixel_error, pixel_map: Tensor, region_mask: np.ndarray,
              weight: float = 1e-4) -> Tensor:
    """Weighted negative log-score objective for the scoring network.

    L = -weight * sum over the region of e_i * log(s_i), averaged over the
    batch. ``per_pixel_error`` must be detached from the restorer graph;
    ``pixel_map`` must be the live (graph-recorded) pixel distribution.
    """
    if isinstance(per_pixel_error, Tensor):
        if per_pixel_error.requires_grad:
            raise ValueError("per-pixel error must be detached from the restorer graph")
        err = per_pixel_error.data
    else:
        err = np.asarray(per_pixel_error)
    m = np.asarray(region_mask)
    if err.shape[-2:] != pixel_map.shape[-2:]:
        raise ShapeError(f"error map {err.shape} vs pixel map {pixel_map.shape}")
    region = np.broadcast_to(m, pixel_map.shape)
    svals = np.broadcast_to(pixel_map.data, pixel_map.shape)
    if np.any(svals[region > 0] <= 0.0):
        raise ValueError("zero selection probability inside the masked region (log singularity)")
    batch = int(np.prod(pixel_map.shape[:-2])) or 1
    weighted = Tensor((np.broadcast_to(err, pixel_map.shape) * region / batch).astype(pixel_map.dtype))
    log_s = ad.log(pixel_map)
    return ad.mul(ad.neg(ad.sum_(ad.mul(weighted, log_s))), Tensor(np.asarray(weight, dtype=pixel_map.dtype)))


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    """Encode a mask as an 8-bit P5 image: 0 = visible, 255 = masked."""
    m = np.asarray(mask)
    data = (m * 255).round().astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode()
    return header + data.tobytes()


def write_mask_image(path, mask: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(mask_to_png_bytes(mask))
