"""Training and loading of the frozen feature extractor fixture.

The extractor stands in for a large pre-trained backbone: it is trained
once on an 8-way classification task over procedural texture classes
(clean images only), shipped as a checkpoint inside the package, and
never updated afterwards. Run ``python -m maskrestore.extractor_fixture``
to regenerate the fixture file.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .models import (
    ParamSet,
    _linear,
    _linear_group,
    build_extractor,
    extractor_features,
    freeze_all,
)
from .pipeline import AdamState, adam_step

N_TEXTURE_CLASSES = 8
FIXTURE_NAME = "extractor.ckpt"


def fixture_path() -> Path:
    return Path(__file__).parent / "fixtures" / FIXTURE_NAME


def texture_image(class_id: int, seed: int, size: int = 32) -> np.ndarray:
    """One sample of a procedural texture class, (3,size,size) in [0,1]."""
    gen = rng.stream(seed, "texture", class_id)
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = gen.uniform(3.0, 6.0)
    phase = gen.uniform(0, 2 * np.pi)
    if class_id == 0:      # horizontal stripes
        base = np.sin(2 * np.pi * freq * yy + phase)
    elif class_id == 1:    # vertical stripes
        base = np.sin(2 * np.pi * freq * xx + phase)
    elif class_id == 2:    # diagonal stripes
        base = np.sin(2 * np.pi * freq * (xx + yy) / np.sqrt(2) + phase)
    elif class_id == 3:    # checkerboard
        base = np.sign(np.sin(2 * np.pi * freq * xx + phase)) * np.sign(
            np.sin(2 * np.pi * freq * yy + phase)
        )
    elif class_id == 4:    # polka dots
        fx, fy = xx * freq % 1.0 - 0.5, yy * freq % 1.0 - 0.5
        base = np.where(fx * fx + fy * fy < 0.08, 1.0, -1.0)
    elif class_id == 5:    # concentric rings
        cx, cy = gen.uniform(0.3, 0.7, size=2)
        radius = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        base = np.sin(2 * np.pi * freq * 2 * radius + phase)
    elif class_id == 6:    # smooth oriented gradient
        theta = gen.uniform(0, 2 * np.pi)
        base = 2 * (xx * np.cos(theta) + yy * np.sin(theta)) - 1
    elif class_id == 7:    # multi-frequency plasma
        base = (
            np.sin(2 * np.pi * freq * xx + phase)
            + np.sin(2 * np.pi * (freq * 0.6) * yy + 2 * phase)
            + np.sin(2 * np.pi * (freq * 1.7) * (xx - yy))
        ) / 3.0
    else:
        raise ValueError(f"texture class must be in [0,{N_TEXTURE_CLASSES}), got {class_id}")
    lo = gen.uniform(0.05, 0.35, size=3)[:, None, None]
    hi = gen.uniform(0.65, 0.95, size=3)[:, None, None]
    return lo + (hi - lo) * (base * 0.5 + 0.5)


def _texture_batch(seed: int, step: int, batch: int, size: int):
    gen = rng.stream(seed, "texture-batch", step)
    labels = gen.integers(N_TEXTURE_CLASSES, size=batch)
    images = np.stack(
        [texture_image(int(c), int(gen.integers(1 << 30)), size) for c in labels]
    )
    return images.astype(np.float32), labels


def train_extractor_fixture(seed: int = 0, steps: int = 400, batch: int = 16,
                            size: int = 32, lr: float = 1e-3) -> tuple[ParamSet, float]:
    """Train extractor + linear head on texture classification; return both.

    The classification head is discarded; only the conv blocks ship. The
    returned accuracy is measured on a held-out batch.
    """
    extractor = build_extractor(seed=seed)
    head = ParamSet()
    gen = rng.stream(seed, "head-init")
    _linear_group(head, "cls", 64, N_TEXTURE_CLASSES, gen, np.float32)
    ext_state, head_state = AdamState(), AdamState()

    def logits_of(images: Tensor) -> Tensor:
        pairs = extractor_features(extractor, images)
        pooled = ad.mean(pairs[2][1], axis=(-2, -1))
        return _linear(head, "cls", pooled)

    for step in range(steps):
        images, labels = _texture_batch(seed, step, batch, size)
        onehot = np.zeros((batch, N_TEXTURE_CLASSES), dtype=np.float32)
        onehot[np.arange(batch), labels] = 1.0
        with ad.record() as g:
            log_probs = ad.log_softmax(logits_of(Tensor(images)), axis=-1)
            loss = ad.neg(ad.mean(ad.sum_(ad.mul(log_probs, Tensor(onehot)), axis=-1)))
        g.backward(loss)
        adam_step(extractor, ext_state, lr)
        adam_step(head, head_state, lr)

    images, labels = _texture_batch(seed, 10_000_019, 64, size)
    pred = logits_of(Tensor(images)).data.argmax(axis=-1)
    accuracy = float((pred == labels).mean())
    return extractor, accuracy


def regenerate_fixture(path: Path | None = None, seed: int = 0) -> float:
    extractor, accuracy = train_extractor_fixture(seed=seed)
    target = Path(path) if path is not None else fixture_path()
    target.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(target, {"extractor": extractor}, step=0,
                    rng_state={"seed": seed})
    return accuracy


def load_fixture_extractor() -> ParamSet:
    """The shipped frozen extractor; parameters never train."""
    path = fixture_path()
    if not path.exists():
        raise FileNotFoundError(
            f"extractor fixture missing at {path}; regenerate it with "
            "`python -m maskrestore.extractor_fixture`"
        )
    _, tensors = load_checkpoint(path)
    extractor = build_extractor(seed=0)
    load_into(extractor, tensors, "extractor")
    return freeze_all(extractor)


if __name__ == "__main__":
    acc = regenerate_fixture()
    print(f"extractor fixture written to {fixture_path()} "
          f"(held-out texture accuracy {acc:.3f})")
