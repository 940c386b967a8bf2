"""Procedural clean images and paired degradation synthesis.

Clean images are composed of gradients, polygons and sinusoidal textures
spanning several spatial frequency bands, so texture-sensitive behavior
can be probed without external data. Degradations cover additive Gaussian
noise, Gaussian blur, JPEG quantization artifacts, and three
out-of-distribution noise families (pepper, poisson, speckle). All outputs
stay in [0,1]; noise kinds draw from exactly one seeded stream, blur and
JPEG are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .ppm import read_ppm, write_ppm

KINDS = ("gaussian_noise", "gaussian_blur", "jpeg", "pepper", "speckle", "poisson")
OOD_KINDS = ("pepper", "poisson", "speckle")

NOISE_SIGMA_RANGE = (0.0, 50.0)        # 8-bit units, exclusive low end
BLUR_SIGMA_RANGE = (0.1, 3.1)
JPEG_QUALITY_RANGE = (20, 90)          # sampling range; op itself accepts [1,100]
PEPPER_DENSITY_RANGE = (0.0, 0.5)
POISSON_PEAK_RANGE = (10.0, 255.0)
SPECKLE_SIGMA_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class DegradationSpec:
    """A fully determined degradation: kind, parameters, seed."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; known: {KINDS}")


@dataclass(frozen=True)
class ImagePair:
    """A clean image, its degraded counterpart, and how it was degraded."""

    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec


# ---------------------------------------------------------------------------
# clean image synthesis


def _polygon_mask(xx, yy, vertices) -> np.ndarray:
    """Inside test for a convex polygon given in CCW order."""
    inside = np.ones_like(xx, dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def gen_clean(seed: int, size: int = 32) -> np.ndarray:
    """Deterministic procedural clean image, (3,size,size) in [0,1]."""
    if size % 8 != 0:
        raise ValueError(f"size must be divisible by 8, got {size}")
    gen = rng.stream(seed, "clean")
    yy, xx = np.mgrid[0:size, 0:size] / size

    # smooth background: oriented linear gradient per channel
    img = np.empty((3, size, size))
    for c in range(3):
        theta = gen.uniform(0, 2 * np.pi)
        ramp = xx * np.cos(theta) + yy * np.sin(theta)
        img[c] = 0.35 + 0.3 * (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)

    # sinusoidal textures across low / mid / high frequency bands
    for freq in (gen.uniform(1.0, 2.5), gen.uniform(4.0, 7.0), gen.uniform(9.0, 14.0)):
        theta = gen.uniform(0, 2 * np.pi)
        phase = gen.uniform(0, 2 * np.pi)
        amp = gen.uniform(0.05, 0.16)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        weights = gen.uniform(0.4, 1.0, size=3)[:, None, None]
        img += amp * weights * wave

    # a few filled convex polygons with their own texture
    for _ in range(gen.integers(2, 5)):
        cx, cy = gen.uniform(0.15, 0.85, size=2)
        radius = gen.uniform(0.08, 0.3)
        k = int(gen.integers(3, 7))
        angles = np.sort(gen.uniform(0, 2 * np.pi, size=k))
        verts = [(cx + radius * np.cos(a), cy + radius * np.sin(a)) for a in angles]
        mask = _polygon_mask(xx, yy, verts)
        color = gen.uniform(0.1, 0.9, size=3)
        tex_freq = gen.uniform(6.0, 12.0)
        tex = 0.5 + 0.5 * np.sin(2 * np.pi * tex_freq * (xx + yy))
        blendf = gen.uniform(0.5, 1.0)
        for c in range(3):
            layer = color[c] * (0.7 + 0.3 * tex)
            img[c] = np.where(mask, (1 - blendf) * img[c] + blendf * layer, img[c])

    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# in-distribution degradations


def add_gaussian_noise(image: np.ndarray, sigma: float, seed) -> np.ndarray:
    """i.i.d. Gaussian noise with std ``sigma`` in 8-bit units, then clip."""
    lo, hi = NOISE_SIGMA_RANGE
    if not lo < sigma <= hi:
        raise ValueError(f"noise sigma must be in ({lo},{hi}], got {sigma}")
    gen = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, "gaussian_noise")
    noise = gen.normal(0.0, sigma / 255.0, size=image.shape)
    return np.clip(image + noise, 0.0, 1.0)


def _gauss_kernel_1d(k: int, sigma: float) -> np.ndarray:
    x = np.arange(k) - (k - 1) / 2.0
    kern = np.exp(-0.5 * (x / sigma) ** 2)
    return kern / kern.sum()


def gaussian_blur(image: np.ndarray, sigma: float, k: int = 15) -> np.ndarray:
    """Separable normalized Gaussian blur with reflective padding."""
    lo, hi = BLUR_SIGMA_RANGE
    if not lo <= sigma <= hi:
        raise ValueError(f"blur sigma must be in [{lo},{hi}], got {sigma}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    kern = _gauss_kernel_1d(k, sigma)
    pad = k // 2

    def conv_axis(arr, axis):
        padding = [(0, 0)] * arr.ndim
        padding[axis] = (pad, pad)
        padded = np.pad(arr, padding, mode="reflect")
        windows = sliding_window_view(padded, k, axis=axis)
        return windows @ kern

    out = conv_axis(conv_axis(image, -2), -1)
    return np.clip(out, 0.0, 1.0)


# standard luminance / chrominance quantization tables
_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
_CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix() -> np.ndarray:
    n = 8
    m = np.zeros((n, n))
    for u in range(n):
        scale = math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)
        for x in range(n):
            m[u, x] = scale * math.cos((2 * x + 1) * u * math.pi / (2 * n))
    return m


_DCT = _dct_matrix()


def _quality_scale(q: float) -> float:
    return 5000.0 / q if q < 50 else 200.0 - 2.0 * q


def _scaled_table(table: np.ndarray, q: float) -> np.ndarray:
    scaled = np.floor((table * _quality_scale(q) + 50.0) / 100.0)
    return np.maximum(scaled, 1.0)


def _blockwise_quant(channel: np.ndarray, table: np.ndarray) -> np.ndarray:
    """8x8 block DCT, quantize/dequantize, inverse DCT; edge-pad to a multiple of 8."""
    h, w = channel.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(channel, ((0, ph), (0, pw)), mode="edge")
    hh, ww = padded.shape
    blocks = padded.reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
    coeffs = _DCT @ blocks @ _DCT.T
    quantized = np.round(coeffs / table) * table
    recon = _DCT.T @ quantized @ _DCT
    out = recon.transpose(0, 2, 1, 3).reshape(hh, ww)
    return out[:h, :w]


def jpeg_artifact(image: np.ndarray, quality: float) -> np.ndarray:
    """Quantization-only JPEG round trip (4:4:4, no entropy coding)."""
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in [1,100], got {quality}")
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {image.shape}")
    r, g, b = image * 255.0
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0

    luma_t = _scaled_table(_LUMA_TABLE, quality)
    chroma_t = _scaled_table(_CHROMA_TABLE, quality)
    y = _blockwise_quant(y - 128.0, luma_t) + 128.0
    cb = _blockwise_quant(cb - 128.0, chroma_t) + 128.0
    cr = _blockwise_quant(cr - 128.0, chroma_t) + 128.0

    cb -= 128.0
    cr -= 128.0
    out = np.stack(
        [
            y + 1.402 * cr,
            y - 0.344136 * cb - 0.714136 * cr,
            y + 1.772 * cb,
        ]
    )
    return np.clip(out / 255.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# out-of-distribution noise


def ood_noise(image: np.ndarray, kind: str, param: float, seed) -> np.ndarray:
    """Pepper / poisson / speckle noise, each within its sampling range."""
    gen = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, f"ood-{kind}")
    if kind == "pepper":
        lo, hi = PEPPER_DENSITY_RANGE
        if not lo < param <= hi:
            raise ValueError(f"pepper density must be in ({lo},{hi}], got {param}")
        h, w = image.shape[-2:]
        hit = gen.random((h, w)) < param
        value = (gen.random((h, w)) < 0.5).astype(np.float64)
        out = image.copy()
        out[..., hit] = value[hit]
        return out
    if kind == "poisson":
        lo, hi = POISSON_PEAK_RANGE
        if not lo <= param <= hi:
            raise ValueError(f"poisson peak must be in [{lo},{hi}], got {param}")
        counts = gen.poisson(np.clip(image, 0, 1) * param)
        return np.clip(counts / param, 0.0, 1.0)
    if kind == "speckle":
        lo, hi = SPECKLE_SIGMA_RANGE
        if not lo < param <= hi:
            raise ValueError(f"speckle sigma must be in ({lo},{hi}], got {param}")
        noise = gen.normal(0.0, param, size=image.shape)
        return np.clip(image * (1.0 + noise), 0.0, 1.0)
    raise ValueError(f"unknown OOD noise kind {kind!r}; known: {OOD_KINDS}")


# ---------------------------------------------------------------------------
# pair synthesis


def apply_spec(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    if spec.kind == "gaussian_noise":
        return add_gaussian_noise(clean, spec.params["sigma"], spec.seed)
    if spec.kind == "gaussian_blur":
        return gaussian_blur(clean, spec.params["sigma"], int(spec.params.get("k", 15)))
    if spec.kind == "jpeg":
        return jpeg_artifact(clean, spec.params["quality"])
    if spec.kind == "pepper":
        return ood_noise(clean, "pepper", spec.params["density"], spec.seed)
    if spec.kind == "poisson":
        return ood_noise(clean, "poisson", spec.params["peak"], spec.seed)
    if spec.kind == "speckle":
        return ood_noise(clean, "speckle", spec.params["sigma"], spec.seed)
    raise ValueError(f"unknown degradation kind {spec.kind!r}")


def sample_spec(kind: str, gen: np.random.Generator, seed: int) -> DegradationSpec:
    """Draw parameters for one kind from its documented sampling range."""
    if kind == "gaussian_noise":
        return DegradationSpec(kind, {"sigma": float(gen.uniform(1.0, 50.0))}, seed)
    if kind == "gaussian_blur":
        return DegradationSpec(kind, {"sigma": float(gen.uniform(*BLUR_SIGMA_RANGE)), "k": 15}, seed)
    if kind == "jpeg":
        return DegradationSpec(kind, {"quality": float(gen.integers(JPEG_QUALITY_RANGE[0], JPEG_QUALITY_RANGE[1] + 1))}, seed)
    if kind == "pepper":
        return DegradationSpec(kind, {"density": float(gen.uniform(0.05, 0.3))}, seed)
    if kind == "poisson":
        return DegradationSpec(kind, {"peak": float(gen.uniform(20.0, 120.0))}, seed)
    if kind == "speckle":
        return DegradationSpec(kind, {"sigma": float(gen.uniform(0.1, 0.5))}, seed)
    raise ValueError(f"unknown degradation kind {kind!r}")


def fixed_spec(kind: str, seed: int) -> DegradationSpec:
    """Evaluation-time parameters: one representative level per kind."""
    levels = {
        "gaussian_noise": {"sigma": 25.0},
        "gaussian_blur": {"sigma": 2.0, "k": 15},
        "jpeg": {"quality": 50.0},
        "pepper": {"density": 0.1},
        "poisson": {"peak": 30.0},
        "speckle": {"sigma": 0.2},
    }
    return DegradationSpec(kind, dict(levels[kind]), seed)


def make_pair(seed: int, size: int, kinds: tuple[str, ...], fixed_params: bool = False) -> ImagePair:
    clean = gen_clean(seed, size)
    gen = rng.stream(seed, "pair")
    kind = kinds[int(gen.integers(len(kinds)))]
    spec = fixed_spec(kind, seed) if fixed_params else sample_spec(kind, gen, seed)
    return ImagePair(clean=clean, degraded=apply_spec(clean, spec), spec=spec)


def make_pair_batch(seeds, mix, size: int = 32, fixed_params: bool = False) -> list[ImagePair]:
    """One pair per seed; the degradation kind is drawn uniformly from ``mix``."""
    kinds = tuple(mix)
    if not kinds:
        raise ValueError("degradation mix must be non-empty")
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown degradation kind {kind!r}; known: {KINDS}")
    return [make_pair(int(s), size, kinds, fixed_params) for s in seeds]


def make_eval_sets(seeds, kinds, size: int = 32) -> dict[str, list[ImagePair]]:
    """Per-kind test sets that degrade the same clean images with each kind.

    Index-aligned across kinds so representation-similarity comparisons can
    pair samples.
    """
    cleans = [gen_clean(int(s), size) for s in seeds]
    sets: dict[str, list[ImagePair]] = {}
    for kind in kinds:
        pairs = []
        for s, clean in zip(seeds, cleans):
            spec = fixed_spec(kind, int(s))
            pairs.append(ImagePair(clean=clean, degraded=apply_spec(clean, spec), spec=spec))
        sets[kind] = pairs
    return sets


# ---------------------------------------------------------------------------
# dataset export / import


def _format_params(params: dict) -> str:
    # repr keeps full float precision so the manifest round-trips exactly
    return ",".join(f"{k}={params[k]!r}" for k in sorted(params))


def _parse_params(text: str) -> dict:
    out = {}
    if text:
        for item in text.split(","):
            k, v = item.split("=")
            out[k] = float(v)
    return out


def export_dataset(directory, pairs: list[ImagePair]) -> None:
    """Write pairs as P6 files plus one manifest line per pair."""
    root = Path(directory)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "degraded").mkdir(parents=True, exist_ok=True)
    lines = ["# index clean degraded kind params seed"]
    for i, pair in enumerate(pairs):
        cpath = f"clean/{i:06d}.ppm"
        dpath = f"degraded/{i:06d}.ppm"
        write_ppm(root / cpath, pair.clean)
        write_ppm(root / dpath, pair.degraded)
        lines.append(
            f"{i} {cpath} {dpath} {pair.spec.kind} "
            f"{_format_params(pair.spec.params)} {pair.spec.seed}"
        )
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> list[ImagePair]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    pairs = []
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        _, cpath, dpath, kind, params, seed = line.split(" ")
        spec = DegradationSpec(kind, _parse_params(params), int(seed))
        pairs.append(
            ImagePair(
                clean=read_ppm(root / cpath),
                degraded=read_ppm(root / dpath),
                spec=spec,
            )
        )
    return pairs
