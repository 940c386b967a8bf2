"""The three networks of the pipeline.

* restoration backbone: 3-level conv encoder, latent block, 3-level decoder,
  block-local residuals only (output is produced directly, with no global
  input-to-output skip),
* mask scoring network: patch embedding, one multi-head attention block and
  a scoring head producing one softmax weight per token,
* frozen feature extractor: 6 conv blocks, stride-2 at every odd block,
  emitting activation pairs at three scales.

Parameters live in a :class:`ParamSet`: named groups (one conv/linear plus
its bias per group) with per-group trainable flags. Group names are stable
and serve as the unit of checkpointing, freezing and layer attribution.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import ShapeError, Tensor


class ParamSet:
    """Ordered named parameter groups with per-group trainable flags."""

    def __init__(self):
        self._groups: dict[str, dict[str, Tensor]] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, **tensors: Tensor) -> None:
        if name in self._groups:
            raise ValueError(f"duplicate parameter group {name!r}")
        self._groups[name] = dict(tensors)
        self._trainable[name] = True

    def names(self) -> list[str]:
        return list(self._groups)

    def group(self, name: str) -> dict[str, Tensor]:
        if name not in self._groups:
            raise KeyError(f"unknown parameter group {name!r}")
        return self._groups[name]

    def __contains__(self, name: str) -> bool:
        return name in self._groups

    def replace(self, name: str, key: str, tensor: Tensor) -> None:
        self.group(name)[key] = tensor

    def flat(self) -> dict[str, Tensor]:
        """All tensors keyed as 'group/key'."""
        return {
            f"{g}/{k}": t for g, ts in self._groups.items() for k, t in ts.items()
        }

    def trainable(self, name: str) -> bool:
        if name not in self._trainable:
            raise KeyError(f"unknown parameter group {name!r}")
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, f in self._trainable.items() if f]

    def param_count(self) -> int:
        return sum(t.size for ts in self._groups.values() for t in ts.values())

    def group_bytes(self, name: str) -> bytes:
        """Concatenated raw bytes of a group, for freeze-contract hashing."""
        ts = self.group(name)
        return b"".join(ts[k].data.tobytes() for k in sorted(ts))


def set_trainable(params: ParamSet, group_names: Iterable[str], trainable: bool) -> ParamSet:
    """Mark groups (only) as trainable; the optimizer must skip the rest.

    Gradient bookkeeping is synced so frozen groups never receive grads.
    """
    for name in group_names:
        if name not in params:
            raise KeyError(f"unknown parameter group {name!r}")
        params._trainable[name] = trainable
        for t in params.group(name).values():
            t.requires_grad = trainable
    return params


def _kaiming_uniform(shape: tuple[int, ...], fan_in: int, gen: np.random.Generator, dtype) -> Tensor:
    bound = float(np.sqrt(6.0 / fan_in))
    return Tensor(gen.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _conv_group(params: ParamSet, name: str, c_in: int, c_out: int, k: int,
                gen: np.random.Generator, dtype, zero: bool = False) -> None:
    if zero:
        w = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype), requires_grad=True)
    else:
        w = _kaiming_uniform((c_out, c_in, k, k), c_in * k * k, gen, dtype)
    b = Tensor(np.zeros((c_out,), dtype=dtype), requires_grad=True)
    params.add(name, w=w, b=b)


def _linear_group(params: ParamSet, name: str, d_in: int, d_out: int,
                  gen: np.random.Generator, dtype) -> None:
    w = _kaiming_uniform((d_in, d_out), d_in, gen, dtype)
    b = Tensor(np.zeros((d_out,), dtype=dtype), requires_grad=True)
    params.add(name, w=w, b=b)


def _conv(params: ParamSet, name: str, x: Tensor, padding: int = 1, stride: int = 1) -> Tensor:
    g = params.group(name)
    y = ad.conv2d(x, g["w"], padding=padding, stride=stride)
    bias = ad.reshape(g["b"], (-1, 1, 1))
    return ad.add(y, bias)


def _linear(params: ParamSet, name: str, x: Tensor) -> Tensor:
    g = params.group(name)
    return ad.add(ad.matmul(x, g["w"]), g["b"])


# ---------------------------------------------------------------------------
# restoration backbone


RESTORER_LEVELS = 3
BLOCKS_PER_LEVEL = 2
# residual branches are damped so activation variance stays near the input's
# across all blocks at init (otherwise it doubles per residual add)
RES_SCALE = 0.1


def build_restorer(seed: int, in_channels: int = 3, base_channels: int = 16,
                   dtype=np.float32) -> ParamSet:
    gen = rng.stream(seed, "restorer-init")
    p = ParamSet()
    ch = base_channels
    _conv_group(p, "head", in_channels, ch, 3, gen, dtype)
    for lvl in range(1, RESTORER_LEVELS + 1):
        for blk in range(1, BLOCKS_PER_LEVEL + 1):
            _conv_group(p, f"enc{lvl}.block{blk}", ch, ch, 3, gen, dtype)
        _conv_group(p, f"down{lvl}", ch, ch * 2, 3, gen, dtype)
        ch *= 2
    for blk in range(1, BLOCKS_PER_LEVEL + 1):
        _conv_group(p, f"latent.block{blk}", ch, ch, 3, gen, dtype)
    for lvl in range(RESTORER_LEVELS, 0, -1):
        _conv_group(p, f"up{lvl}", ch, ch // 2, 3, gen, dtype)
        ch //= 2
        for blk in range(1, BLOCKS_PER_LEVEL + 1):
            _conv_group(p, f"dec{lvl}.block{blk}", ch, ch, 3, gen, dtype)
    _conv_group(p, "tail", ch, in_channels, 3, gen, dtype)
    return p


def restorer_channels(base_channels: int = 16) -> tuple[int, int, int]:
    """Channel width of the three encoder levels (injection sites)."""
    return (base_channels, base_channels * 2, base_channels * 4)


def _res_block(params: ParamSet, name: str, x: Tensor, acts: dict | None) -> Tensor:
    y = _conv(params, name, x)
    if acts is not None:
        acts[name] = y
    scale = Tensor(np.asarray(RES_SCALE, dtype=x.dtype))
    return ad.add(x, ad.mul(ad.relu(y), scale))


def restorer_forward(
    params: ParamSet,
    image: Tensor,
    inject: Callable[[int, Tensor], Tensor] | None = None,
    collect_activations: bool = False,
):
    """Run the backbone; output has the input's shape (no global residual).

    ``inject(level, activation)``, when given, replaces each encoder level's
    output with the fused feature it returns. With ``collect_activations``
    the per-group conv outputs are returned alongside the image.
    """
    h, w = image.shape[-2:]
    if h % 8 != 0 or w % 8 != 0:
        raise ShapeError(f"spatial size must be divisible by 8, got {h}x{w}")
    acts: dict[str, Tensor] | None = {} if collect_activations else None

    def step(name, x, padding=1, stride=1, act=True):
        y = _conv(params, name, x, padding=padding, stride=stride)
        if acts is not None:
            acts[name] = y
        return ad.relu(y) if act else y

    x = step("head", image)
    for lvl in range(1, RESTORER_LEVELS + 1):
        for blk in range(1, BLOCKS_PER_LEVEL + 1):
            x = _res_block(params, f"enc{lvl}.block{blk}", x, acts)
        if inject is not None:
            x = inject(lvl, x)
        x = step(f"down{lvl}", x, stride=2)
    for blk in range(1, BLOCKS_PER_LEVEL + 1):
        x = _res_block(params, f"latent.block{blk}", x, acts)
    for lvl in range(RESTORER_LEVELS, 0, -1):
        up_h, up_w = x.shape[-2] * 2, x.shape[-1] * 2
        x = ad.resize_bilinear(x, (up_h, up_w))
        x = step(f"up{lvl}", x)
        for blk in range(1, BLOCKS_PER_LEVEL + 1):
            x = _res_block(params, f"dec{lvl}.block{blk}", x, acts)
    out = step("tail", x, act=False)
    if collect_activations:
        return out, acts
    return out


# ---------------------------------------------------------------------------
# mask scoring network


SCORER_DIM = 64
SCORER_HEADS = 4


def build_scorer(seed: int, patch: int = 8, in_channels: int = 3,
                 dim: int = SCORER_DIM, dtype=np.float32) -> ParamSet:
    gen = rng.stream(seed, "scorer-init")
    p = ParamSet()
    _linear_group(p, "embed", in_channels * patch * patch, dim, gen, dtype)
    for proj in ("q", "k", "v", "out"):
        _linear_group(p, f"attn.{proj}", dim, dim, gen, dtype)
    _linear_group(p, "score", dim, 1, gen, dtype)
    return p


def _patchify(image: Tensor, patch: int) -> Tensor:
    """(B,C,H,W) -> (B, N, C*patch*patch) token matrix."""
    b, c, h, w = image.shape
    nh, nw = h // patch, w // patch
    x = ad.reshape(image, (b, c, nh, patch, nw, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (b, nh * nw, c * patch * patch))


def scorer_forward(params: ParamSet, image: Tensor, patch: int = 8) -> Tensor:
    """Token importance scores: softmax over tokens, one weight per token.

    Accepts (C,H,W) -> (N,) or (B,C,H,W) -> (B,N) with N=(H/patch)*(W/patch).
    """
    single = image.ndim == 3
    x = ad.reshape(image, (1, *image.shape)) if single else image
    b, c, h, w = x.shape
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"spatial size {h}x{w} not divisible by patch {patch}")
    tokens = _linear(params, "embed", _patchify(x, patch))
    n = tokens.shape[1]
    dim = tokens.shape[2]
    dh = dim // SCORER_HEADS

    def heads(t):
        t = ad.reshape(t, (b, n, SCORER_HEADS, dh))
        return ad.transpose(t, (0, 2, 1, 3))

    q = heads(_linear(params, "attn.q", tokens))
    k = heads(_linear(params, "attn.k", tokens))
    v = heads(_linear(params, "attn.v", tokens))
    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), Tensor(1.0 / np.sqrt(dh)))
    attn = ad.softmax(logits, axis=-1)
    mixed = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    mixed = ad.reshape(mixed, (b, n, dim))
    attended = ad.add(tokens, _linear(params, "attn.out", mixed))
    scores = ad.softmax(ad.reshape(_linear(params, "score", attended), (b, n)), axis=-1)
    return ad.reshape(scores, (n,)) if single else scores


# ---------------------------------------------------------------------------
# frozen feature extractor


EXTRACTOR_CHANNELS = (16, 16, 32, 32, 64, 64)
EXTRACTOR_STRIDES = (2, 1, 2, 1, 2, 1)
MIN_EXTRACTOR_INPUT = 32


def build_extractor(seed: int, in_channels: int = 3, dtype=np.float32) -> ParamSet:
    gen = rng.stream(seed, "extractor-init")
    p = ParamSet()
    c_prev = in_channels
    for i, c in enumerate(EXTRACTOR_CHANNELS, start=1):
        _conv_group(p, f"block{i}", c_prev, c, 3, gen, dtype)
        c_prev = c
    return p


def extractor_pair_channels() -> tuple[int, int, int]:
    return (EXTRACTOR_CHANNELS[1], EXTRACTOR_CHANNELS[3], EXTRACTOR_CHANNELS[5])


def extractor_features(params: ParamSet, image: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Three activation pairs from adjacent blocks at /2, /4 and /8 scale."""
    h, w = image.shape[-2:]
    if h < MIN_EXTRACTOR_INPUT or w < MIN_EXTRACTOR_INPUT:
        raise ShapeError(
            f"extractor needs spatial size >= {MIN_EXTRACTOR_INPUT}, got {h}x{w}"
        )
    x = image
    blocks = []
    for i, stride in enumerate(EXTRACTOR_STRIDES, start=1):
        x = ad.relu(_conv(params, f"block{i}", x, stride=stride))
        blocks.append(x)
    return [(blocks[0], blocks[1]), (blocks[2], blocks[3]), (blocks[4], blocks[5])]


def freeze_all(params: ParamSet) -> ParamSet:
    return set_trainable(params, params.names(), False)


def grads_by_group(params: ParamSet) -> Mapping[str, dict[str, np.ndarray | None]]:
    """Snapshot of accumulated gradients, keyed like the parameter groups."""
    return {
        g: {k: (t.grad if t.grad is not None else None) for k, t in ts.items()}
        for g, ts in params._groups.items()
    }
