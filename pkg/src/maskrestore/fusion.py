"""Gated blending, projection and residual fusion of extractor features.

Per level i in {1,2,3}: channel descriptors of the two adjacent extractor
features gate a convex blend, a two-conv projection aligns the blend with
the restorer's level-i representation (resizing spatially first), and a
zero-initialized 1x1 conv fuses it residually so enabling fusion is a
no-op at the start of fine-tuning.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .models import (
    ParamSet,
    _conv_group,
    _linear_group,
    _conv,
    _linear,
    extractor_pair_channels,
    restorer_channels,
)
from . import rng

LEVELS = (1, 2, 3)


def build_fusion(seed: int, base_channels: int = 16, dtype=np.float32) -> ParamSet:
    gen = rng.stream(seed, "fusion-init")
    p = ParamSet()
    feat_ch = extractor_pair_channels()
    rest_ch = restorer_channels(base_channels)
    for lvl, (c_feat, c_rest) in enumerate(zip(feat_ch, rest_ch), start=1):
        _linear_group(p, f"gate{lvl}.fc1", 2 * c_feat, c_feat, gen, dtype)
        _linear_group(p, f"gate{lvl}.fc2", c_feat, c_feat, gen, dtype)
        _conv_group(p, f"proj{lvl}.conv1", c_feat, c_feat, 3, gen, dtype)
        _conv_group(p, f"proj{lvl}.conv2", c_feat, c_rest, 3, gen, dtype)
        # zero init keeps the restorer output bit-identical until trained
        _conv_group(p, f"fuse{lvl}", 2 * c_rest, c_rest, 1, gen, dtype, zero=True)
    return p


def gate_weight(f1: Tensor, f2: Tensor, params: ParamSet, level: int) -> Tensor:
    """Per-channel fusion weight in (0,1) from pooled descriptors."""
    if f1.shape != f2.shape:
        raise ShapeError(f"feature pair shapes differ: {f1.shape} vs {f2.shape}")
    desc = ad.concat([ad.global_avg_pool(f1), ad.global_avg_pool(f2)], axis=-1)
    if desc.ndim == 1:
        desc = ad.reshape(desc, (1, -1))
        squeeze = True
    else:
        squeeze = False
    hidden = ad.relu(_linear(params, f"gate{level}.fc1", desc))
    w = ad.sigmoid(_linear(params, f"gate{level}.fc2", hidden))
    return ad.reshape(w, (w.shape[-1],)) if squeeze else w


def blend(f1: Tensor, f2: Tensor, w: Tensor) -> Tensor:
    """Convex per-channel combination w*f1 + (1-w)*f2."""
    if f1.shape != f2.shape:
        raise ShapeError(f"cannot blend {f1.shape} with {f2.shape}")
    spatial = (1,) * (f1.ndim - w.ndim)
    wb = ad.reshape(w, (*w.shape, *spatial))
    one = Tensor(np.ones((), dtype=w.dtype))
    return ad.add(ad.mul(wb, f1), ad.mul(ad.sub(one, wb), f2))


def project(fbar: Tensor, params: ParamSet, level: int,
            out_hw: tuple[int, int]) -> Tensor:
    """Resize to the restorer level's resolution, then conv-relu-conv."""
    x = ad.resize_bilinear(fbar, out_hw)
    x = ad.relu(_conv(params, f"proj{level}.conv1", x))
    return _conv(params, f"proj{level}.conv2", x)


def fuse(fhat: Tensor, fr: Tensor, params: ParamSet, level: int) -> Tensor:
    """Residual fusion: fr + 1x1-conv of the channel concatenation."""
    if fhat.shape[-2:] != fr.shape[-2:]:
        raise ShapeError(
            f"spatial mismatch: projected {fhat.shape} vs restorer {fr.shape}"
        )
    cat = ad.concat([fhat, fr], axis=-3)
    return ad.add(fr, _conv(params, f"fuse{level}", cat, padding=0))


def fused_injector(params: ParamSet, feature_pairs):
    """Build the encoder-level injection callback for the restorer.

    ``feature_pairs`` are the three extractor activation pairs; the
    returned callable maps (level, restorer activation) to the fused
    activation that replaces it.
    """
    if len(feature_pairs) != len(LEVELS):
        raise ValueError(f"expected {len(LEVELS)} feature pairs, got {len(feature_pairs)}")

    def inject(level: int, fr: Tensor) -> Tensor:
        f1, f2 = feature_pairs[level - 1]
        w = gate_weight(f1, f2, params, level)
        fbar = blend(f1, f2, w)
        fhat = project(fbar, params, level, fr.shape[-2:])
        return fuse(fhat, fr, params, level)

    return inject
