"""Two-stage training, twin-mask inference and evaluation.

Stage 1 trains the restorer on adaptively masked degraded inputs
(supervised on the masked region) while the scoring network learns, from
detached reconstruction errors, where masks are worth placing. Stage 2
fine-tunes only the attribution-selected layer groups on full images,
optionally with gated extractor-feature fusion. Evaluation reports PSNR /
SSIM per degradation kind plus a kind-by-kind similarity matrix of latent
representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .attribution import (
    LayerReport,
    PathSpec,
    assign_unmask_times,
    mac_scores,
    rank_and_select,
)
from .degrade import ImagePair
from .fusion import fused_injector
from .masking import apply_mask, importance_map, mask_loss, restoration_loss, sample_mask
from .metrics import cka, psnr_detail, ssim
from .models import ParamSet, extractor_features, restorer_forward, scorer_forward, set_trainable


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimizer


@dataclass(frozen=True)
class ScheduleSpec:
    """Cosine learning-rate decay from lr_max at step 0 to lr_min at the end."""

    lr_max: float
    lr_min: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_max <= 0 or self.lr_min <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(step: int, spec: ScheduleSpec) -> float:
    if not 0 <= step <= spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    cos = math.cos(math.pi * step / spec.total_steps)
    return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + cos)


class AdamState:
    """First/second moment estimates per parameter tensor plus a step count."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: ParamSet, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected moment update over the trainable groups.

    Groups that are frozen, or whose tensors carry no gradient, are left
    bitwise untouched. A non-finite gradient halts the run.
    """
    state.step += 1
    t = state.step
    for gname in params.trainable_names():
        group = params.group(gname)
        for key, tensor in group.items():
            grad = tensor.grad
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise TrainingDiverged(
                    f"non-finite gradient in group {gname!r} ({key}) at step {t}"
                )
            name = f"{gname}/{key}"
            m = state.m.get(name)
            if m is None:
                m = np.zeros_like(tensor.data)
                v = np.zeros_like(tensor.data)
            else:
                v = state.v[name]
            g = grad.astype(tensor.dtype, copy=False)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * (g * g)
            state.m[name], state.v[name] = m, v
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            new_data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
            params.replace(gname, key, Tensor(new_data.astype(tensor.dtype), requires_grad=True))


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainSettings:
    """Knobs shared by the two training stages (desk-scale step budgets)."""

    steps: int = 200
    batch_size: int = 8
    seed: int = 0
    rho: float = 0.5
    patch: int = 8
    mask_fill: float = 0.0
    mask_loss_weight: float = 1e-4
    lr_max: float = 2e-4
    lr_min: float = 1e-6
    scorer_lr_max: float = 1e-4
    scorer_lr_min: float = 1e-6
    checkpoint_every: int = 0
    log_every: int = 0


@dataclass
class TrainResult:
    restoration_curve: list[float] = field(default_factory=list)
    mask_curve: list[float] = field(default_factory=list)


def _batch_arrays(pairs: Sequence[ImagePair], indices, dtype):
    clean = np.stack([pairs[i].clean for i in indices]).astype(dtype)
    degraded = np.stack([pairs[i].degraded for i in indices]).astype(dtype)
    return clean, degraded


def _batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    gen = rng.stream(seed, "batch", step)
    return gen.choice(n, size=min(batch, n), replace=n < batch)


def pretrain(restorer: ParamSet, scorer: ParamSet, pairs: Sequence[ImagePair],
             settings: TrainSettings,
             on_checkpoint: Callable[[int], None] | None = None) -> TrainResult:
    """Joint stage-1 optimization of the restorer and the mask scorer.

    Both objectives are computed on the same batch each step; stop-gradients
    keep them separate (the masked input is a constant for the restorer
    loss, the reconstruction error is detached for the mask loss). Halts if
    the restoration loss exceeds 10x its initial value for 100 straight
    steps.
    """
    if not pairs:
        raise ValueError("empty training set")
    dtype = next(iter(restorer.flat().values())).dtype
    rest_sched = ScheduleSpec(settings.lr_max, settings.lr_min, settings.steps)
    scor_sched = ScheduleSpec(settings.scorer_lr_max, settings.scorer_lr_min, settings.steps)
    rest_state, scor_state = AdamState(), AdamState()
    result = TrainResult()
    initial_loss = None
    over_budget = 0

    for step in range(settings.steps):
        idx = _batch_indices(len(pairs), settings.batch_size, settings.seed, step)
        clean, degraded = _batch_arrays(pairs, idx, dtype)
        b, _, h, w = degraded.shape

        with ad.record() as g:
            scores = scorer_forward(scorer, Tensor(degraded), patch=settings.patch)
            s_map = importance_map(scores, h, w, settings.patch)
            masks = np.stack(
                [
                    sample_mask(
                        s_map.data[i].astype(np.float64),
                        settings.rho,
                        rng.stream(settings.seed, "mask", step, i),
                    ).mask
                    for i in range(b)
                ]
            )[:, None]  # (B,1,H,W)
            masked_in = apply_mask(Tensor(degraded), masks, settings.mask_fill)
            pred = restorer_forward(restorer, masked_in)
            rest_loss = restoration_loss(pred, Tensor(clean), masks)
            pixel_err = np.abs(clean - pred.data).mean(axis=1)  # detached (B,H,W)
            m_loss = mask_loss(pixel_err, s_map, masks[:, 0], settings.mask_loss_weight)
            total = ad.add(rest_loss, m_loss)
        g.backward(total)

        adam_step(restorer, rest_state, lr_at(step, rest_sched))
        adam_step(scorer, scor_state, lr_at(step, scor_sched))

        rl = float(rest_loss.data)
        result.restoration_curve.append(rl)
        result.mask_curve.append(float(m_loss.data))
        if initial_loss is None:
            initial_loss = rl
        over_budget = over_budget + 1 if rl > 10.0 * initial_loss else 0
        if over_budget >= 100:
            raise TrainingDiverged(
                f"restoration loss {rl:.4g} above 10x initial for 100 consecutive steps"
            )
        if on_checkpoint and settings.checkpoint_every and (step + 1) % settings.checkpoint_every == 0:
            on_checkpoint(step + 1)
    return result


def finetune(restorer: ParamSet, pairs: Sequence[ImagePair], settings: TrainSettings,
             report: LayerReport | None = None,
             fusion_params: ParamSet | None = None,
             extractor: ParamSet | None = None,
             on_checkpoint: Callable[[int], None] | None = None) -> TrainResult:
    """Stage-2 fine-tuning on full images with whole-image L1 loss.

    With a layer report, only the selected restorer groups train (the rest
    stay bitwise frozen); fusion parameters always train; the extractor
    never does.
    """
    if not pairs:
        raise ValueError("empty training set")
    if (fusion_params is None) != (extractor is None):
        raise ValueError("feature fusion needs both fusion parameters and an extractor")
    if report is not None:
        model_names = set(restorer.names())
        report_names = set(report.names())
        if report_names != model_names:
            missing = sorted(model_names ^ report_names)
            raise ValueError(f"layer report does not match the model; mismatched groups: {missing}")
        set_trainable(restorer, restorer.names(), False)
        set_trainable(restorer, report.selected_names, True)
    else:
        set_trainable(restorer, restorer.names(), True)
    if extractor is not None:
        set_trainable(extractor, extractor.names(), False)

    dtype = next(iter(restorer.flat().values())).dtype
    sched = ScheduleSpec(settings.lr_max, settings.lr_min, settings.steps)
    rest_state, fuse_state = AdamState(), AdamState()
    result = TrainResult()

    for step in range(settings.steps):
        idx = _batch_indices(len(pairs), settings.batch_size, settings.seed, step)
        clean, degraded = _batch_arrays(pairs, idx, dtype)
        with ad.record() as g:
            x = Tensor(degraded)
            inject = None
            if fusion_params is not None:
                feats = extractor_features(extractor, x)
                inject = fused_injector(fusion_params, feats)
            pred = restorer_forward(restorer, x, inject=inject)
            loss = ad.mean(ad.absolute(ad.sub(pred, Tensor(clean))))
        g.backward(loss)
        lr = lr_at(step, sched)
        adam_step(restorer, rest_state, lr)
        if fusion_params is not None:
            adam_step(fusion_params, fuse_state, lr)
        result.restoration_curve.append(float(loss.data))
        if on_checkpoint and settings.checkpoint_every and (step + 1) % settings.checkpoint_every == 0:
            on_checkpoint(step + 1)
    return result


# ---------------------------------------------------------------------------
# layer attribution over the trained restorer


def mac_rank_restorer(restorer: ParamSet, scorer: ParamSet,
                      probe_pairs: Sequence[ImagePair], *, rho: float = 0.5,
                      patch: int = 8, sharpness: float = 100.0,
                      partial_ratio: float = 0.5, steps: int = 64,
                      k_percent: float = 30.0, seed: int = 0,
                      aggregate: str = "abs") -> LayerReport:
    """Rank restorer groups by path conductance over a fixed probe batch.

    The path runs from the rho-masked degraded probe inputs to the whole
    inputs; the scalar under attribution is the probe's mean absolute
    reconstruction error against the clean targets.
    """
    if not probe_pairs:
        raise ValueError("empty probe batch")
    clean = np.stack([p.clean for p in probe_pairs]).astype(np.float64)
    degraded = np.stack([p.degraded for p in probe_pairs]).astype(np.float64)
    b, _, h, w = degraded.shape

    masks = []
    for i in range(b):
        scores = scorer_forward(scorer, Tensor(degraded[i].astype(np.float32)), patch=patch)
        pix = importance_map(scores.data.astype(np.float64), h, w, patch)
        masks.append(sample_mask(pix, rho, rng.stream(seed, "probe-mask", i)).mask)
    masks = np.stack(masks)[:, None]  # (B,1,H,W)

    times = np.stack(
        [
            assign_unmask_times(
                (1, h, w),
                rng.stream(seed, "probe-times", i),
                masked=masks[i].astype(bool),
                partial_ratio=partial_ratio,
            )
            for i in range(b)
        ]
    )
    spec = PathSpec(
        baseline=np.zeros_like(degraded),
        target=degraded,
        unmask_times=times,  # (B,1,H,W), shared across channels
        sharpness=sharpness,
        partial_ratio=partial_ratio,
        steps=steps,
    )
    # attribution runs in 64-bit for quadrature headroom
    restorer64 = _cast_params(restorer, np.float64)
    clean_t = Tensor(clean)

    def fn(x: Tensor):
        out, acts = restorer_forward(restorer64, x, collect_activations=True)
        return ad.mean(ad.absolute(ad.sub(out, clean_t))), acts

    scores, _ = mac_scores(fn, spec, aggregate=aggregate)
    return rank_and_select(scores, k_percent)


def _cast_params(params: ParamSet, dtype) -> ParamSet:
    out = ParamSet()
    for name in params.names():
        out.add(name, **{
            k: Tensor(t.data.astype(dtype), requires_grad=False)
            for k, t in params.group(name).items()
        })
    return out


# ---------------------------------------------------------------------------
# inference and evaluation


def twin_mask_infer(restorer: ParamSet, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Composite two complementary-mask passes, each pixel taken while masked."""
    dtype = next(iter(restorer.flat().values())).dtype
    img = np.asarray(image, dtype=dtype)
    m = np.asarray(mask, dtype=dtype)
    pass_a = restorer_forward(restorer, Tensor(apply_mask(img, m, 0.0))).data
    pass_b = restorer_forward(restorer, Tensor(apply_mask(img, 1.0 - m, 0.0))).data
    return m * pass_a + (1.0 - m) * pass_b


@dataclass(frozen=True)
class MetricRecord:
    kind: str
    psnr: float
    ssim: float
    n: int


@dataclass(frozen=True)
class EvalResult:
    records: tuple[MetricRecord, ...]
    psnr_mean: float
    ssim_mean: float
    psnr_variance: float
    ssim_variance: float
    kinds: tuple[str, ...]
    cka_matrix: np.ndarray


def restore_images(restorer: ParamSet, images: np.ndarray,
                   fusion_params: ParamSet | None = None,
                   extractor: ParamSet | None = None,
                   collect_latent: bool = False):
    """Full-image single-pass restoration, optionally with feature fusion."""
    dtype = next(iter(restorer.flat().values())).dtype
    x = Tensor(np.asarray(images, dtype=dtype))
    inject = None
    if fusion_params is not None:
        if extractor is None:
            raise ValueError("feature fusion needs an extractor")
        inject = fused_injector(fusion_params, extractor_features(extractor, x))
    if collect_latent:
        out, acts = restorer_forward(restorer, x, inject=inject, collect_activations=True)
        latent = acts["latent.block2"].data.mean(axis=(-2, -1))
        return out.data, latent
    return restorer_forward(restorer, x, inject=inject).data


def evaluate(restorer: ParamSet, test_sets: Mapping[str, Sequence[ImagePair]],
             fusion_params: ParamSet | None = None,
             extractor: ParamSet | None = None) -> EvalResult:
    """Per-kind PSNR/SSIM, across-kind variance and kind-by-kind latent CKA.

    CKA pairs samples by index, so comparable test sets should degrade the
    same clean images with each kind.
    """
    if not test_sets:
        raise ValueError("no test sets supplied")
    records = []
    latents = {}
    kinds = tuple(test_sets)
    for kind in kinds:
        pairs = list(test_sets[kind])
        if not pairs:
            raise ValueError(f"empty test set for kind {kind!r}")
        degraded = np.stack([p.degraded for p in pairs])
        restored, latent = restore_images(
            restorer, degraded, fusion_params, extractor, collect_latent=True
        )
        latents[kind] = latent.astype(np.float64)
        ps = [psnr_detail(r, p.clean).value for r, p in zip(restored, pairs)]
        ss = [ssim(r, p.clean) for r, p in zip(restored, pairs)]
        records.append(MetricRecord(kind, float(np.mean(ps)), float(np.mean(ss)), len(pairs)))

    n = len(kinds)
    matrix = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = cka(latents[kinds[i]], latents[kinds[j]])

    psnrs = np.array([r.psnr for r in records])
    ssims = np.array([r.ssim for r in records])
    return EvalResult(
        records=tuple(records),
        psnr_mean=float(psnrs.mean()),
        ssim_mean=float(ssims.mean()),
        psnr_variance=float(psnrs.var()),
        ssim_variance=float(ssims.var()),
        kinds=kinds,
        cka_matrix=matrix,
    )
