"""Path-integrated gradient attribution and layer ranking.

Three attribution primitives, in increasing order of structure:

* integrated gradients along the straight baseline-to-input path,
* conductance of hidden activations along the same path,
* conductance along a mask-attribute path, where each pixel switches from
  baseline to target value at its own time, smoothed by a sharp sigmoid so
  the path is differentiable. Restricting the path parameter to [1-r, 1]
  attributes the transition from an r-masked input to the whole input.

Layer scores aggregate per-neuron path conductance; ranking them and
keeping the top k percent drives selective fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor

ScalarFn = Callable[[Tensor], Tensor]
ActivationFn = Callable[[Tensor], tuple[Tensor, Mapping[str, Tensor]]]


def integrated_gradients(f: ScalarFn, x: np.ndarray, baseline: np.ndarray,
                         steps: int = 64) -> np.ndarray:
    """Midpoint-rule integrated gradients of a scalar function.

    IG_i = (x_i - x'_i) * mean_j dF/dx_i evaluated at the path midpoints;
    exact for linear integrands at any step count, and satisfies the
    completeness axiom sum(IG) ~= F(x) - F(x') as steps grow.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    total = np.zeros_like(x)
    diff = x - baseline
    for j in range(1, steps + 1):
        alpha = (j - 0.5) / steps
        point = Tensor(baseline + alpha * diff, requires_grad=True)
        with ad.record() as g:
            out = f(point)
        g.backward(out)
        total += point.grad
    return diff * total / steps


def neuron_conductance(f: Callable[[Tensor], tuple[Tensor, Tensor]],
                       x: np.ndarray, baseline: np.ndarray,
                       steps: int = 256) -> np.ndarray:
    """Conductance of a designated hidden activation along the straight path.

    ``f`` maps the input tensor to ``(F, y)`` where ``y`` is an activation
    recorded while computing the scalar ``F``. Returns one conductance value
    per element of ``y``; their sum over a full separating layer telescopes
    to F(x) - F(x').
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    diff = x - baseline

    def at(alpha: float, want_grad: bool):
        point = Tensor(baseline + alpha * diff, requires_grad=True)
        with ad.record() as g:
            out, y = f(point)
        if want_grad:
            g.backward(out, retain=[y])
            if y.grad is None:
                raise ValueError("designated activation is not part of the output's graph")
            return y.grad, y.data
        return None, y.data

    total = None
    _, y_prev = at(0.0, want_grad=False)
    for j in range(steps):
        grad, _ = at((j + 0.5) / steps, want_grad=True)
        _, y_next = at((j + 1) / steps, want_grad=False)
        contrib = grad * (y_next - y_prev)
        total = contrib if total is None else total + contrib
        y_prev = y_next
    return total


# ---------------------------------------------------------------------------
# mask-attribute path


@dataclass(frozen=True)
class PathSpec:
    """A per-pixel switching path from baseline to target.

    ``unmask_times`` holds each coordinate's switch time in (0,1); the
    smoothed path is x' + (x - x') * sigmoid(sharpness * (alpha - t_i)).
    ``partial_ratio`` restricts integration to alpha in [1-r, 1], i.e. from
    an r-masked input to the whole input. ``steps`` is the quadrature count.
    """

    baseline: np.ndarray
    target: np.ndarray
    unmask_times: np.ndarray
    sharpness: float = 100.0
    partial_ratio: float = 1.0
    steps: int = 64

    def __post_init__(self):
        if self.sharpness <= 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")
        if not 0.0 < self.partial_ratio <= 1.0:
            raise ValueError(f"partial ratio must be in (0,1], got {self.partial_ratio}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        times = np.asarray(self.unmask_times)
        if np.any(times <= 0.0) or np.any(times > 1.0):
            raise ValueError("unmask times must lie in (0, 1]")
        # distinct per path: rows are the pixel grids of each leading index
        pixels = times.shape[-1] if times.ndim == 1 else times.shape[-2] * times.shape[-1]
        for row in times.reshape(-1, pixels):
            if np.unique(row).size != row.size:
                raise ValueError(
                    "unmask times must be distinct per path (break ties by pixel index)"
                )


def assign_unmask_times(shape: Sequence[int], seed,
                        masked: np.ndarray | None = None,
                        partial_ratio: float = 1.0) -> np.ndarray:
    """Stratified switch times: one distinct slot midpoint per coordinate.

    When a boolean ``masked`` map is given, masked coordinates receive the
    top slots (inside (1-r, 1]) so they transition within the integration
    window; visible coordinates switch earlier.
    """
    n = int(np.prod(shape))
    gen = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, "unmask-times")
    # uniform jitter inside each slot keeps the times off any regular
    # quadrature grid; the margin keeps them away from slot boundaries
    slots = (np.arange(n) + gen.uniform(0.2, 0.8, size=n)) / n
    times = np.empty(n)
    if masked is None:
        times[gen.permutation(n)] = slots
    else:
        flags = np.broadcast_to(np.asarray(masked, dtype=bool), shape).reshape(-1)
        n_masked = int(flags.sum())
        if partial_ratio < 1.0 and n_masked > 0:
            window = slots[slots > 1.0 - partial_ratio]
            if n_masked > window.size:
                raise ValueError(
                    f"{n_masked} masked pixels cannot fit the {window.size} "
                    f"slots inside (1-r, 1] with r={partial_ratio}"
                )
        vis_idx = np.flatnonzero(~flags)
        mask_idx = np.flatnonzero(flags)
        times[vis_idx[gen.permutation(vis_idx.size)]] = slots[: vis_idx.size]
        times[mask_idx[gen.permutation(mask_idx.size)]] = slots[vis_idx.size :]
    return times.reshape(shape)


def map_path_point(spec: PathSpec, alpha: float) -> np.ndarray:
    """Evaluate the smoothed mask-attribute path at one parameter value."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    gate = _stable_sigmoid(spec.sharpness * (alpha - spec.unmask_times))
    return spec.baseline + (spec.target - spec.baseline) * gate


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x, dtype=np.float64)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def step_path_point(spec: PathSpec, alpha: float) -> np.ndarray:
    """The discontinuous limit path: each pixel jumps at its switch time."""
    gate = (alpha >= spec.unmask_times).astype(np.float64)
    return spec.baseline + (spec.target - spec.baseline) * gate


def mac_scores(fn: ActivationFn, spec: PathSpec,
               aggregate: str = "abs") -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Per-layer path conductance along the mask-attribute path.

    ``fn`` maps an input tensor to ``(F, activations)``. For every named
    activation the per-neuron conductance is accumulated over an N-step
    grid spanning [1-r, 1]: gradient at the left grid point times the
    activation increment to the next point. Layer scores aggregate neurons
    by sum of absolute values ("abs", default) or plain sum ("signed").

    Returns (layer scores, per-neuron conductance arrays).
    """
    if spec.steps < 4:
        raise ValueError(f"quadrature needs at least 4 steps, got {spec.steps}")
    if aggregate not in ("abs", "signed"):
        raise ValueError(f"aggregate must be 'abs' or 'signed', got {aggregate!r}")
    n = spec.steps
    r = spec.partial_ratio
    grid = 1.0 - r + r * np.arange(n + 1) / n

    def evaluate(alpha: float):
        point = Tensor(map_path_point(spec, alpha), requires_grad=True)
        with ad.record() as g:
            out, acts = fn(point)
        return g, out, dict(acts)

    per_neuron: dict[str, np.ndarray] = {}
    g, out, acts = evaluate(grid[0])
    for j in range(n):
        g_next, out_next, acts_next = evaluate(grid[j + 1])
        g.backward(out, retain=list(acts.values()))
        for name, act in acts.items():
            if act.grad is None:
                raise ValueError(f"activation {name!r} is not part of the output's graph")
            delta = acts_next[name].data - act.data
            contrib = act.grad * delta
            if name in per_neuron:
                per_neuron[name] += contrib
            else:
                per_neuron[name] = contrib
        g, out, acts = g_next, out_next, acts_next

    if aggregate == "abs":
        scores = {name: float(np.abs(v).sum()) for name, v in per_neuron.items()}
    else:
        scores = {name: float(v.sum()) for name, v in per_neuron.items()}
    return scores, per_neuron


# ---------------------------------------------------------------------------
# ranking and report


@dataclass(frozen=True)
class LayerEntry:
    name: str
    score: float
    rank: int
    selected: bool


@dataclass(frozen=True)
class LayerReport:
    """Layers in descending score order with the top-k% selection."""

    entries: tuple[LayerEntry, ...]
    k_percent: float

    @property
    def selected_names(self) -> list[str]:
        return [e.name for e in self.entries if e.selected]

    def names(self) -> list[str]:
        return [e.name for e in self.entries]


def rank_and_select(scores: Mapping[str, float], k_percent: float) -> LayerReport:
    """Order layers by descending score and select the top ceil(k% * L).

    Ties break deterministically by layer name.
    """
    if not scores:
        raise ValueError("cannot rank an empty score list")
    if not 0.0 < k_percent <= 100.0:
        raise ValueError(f"k_percent must be in (0,100], got {k_percent}")
    ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    n_select = math.ceil(k_percent / 100.0 * len(ordered))
    entries = tuple(
        LayerEntry(name=name, score=float(score), rank=i + 1, selected=i < n_select)
        for i, (name, score) in enumerate(ordered)
    )
    return LayerReport(entries=entries, k_percent=float(k_percent))


def write_report(path, report: LayerReport) -> None:
    """Ordered text records: name, score, rank, selected flag."""
    lines = [f"# layer report, k_percent={report.k_percent!r}"]
    lines += [
        f"{e.name} {e.score!r} {e.rank} {int(e.selected)}" for e in report.entries
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> LayerReport:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# layer report"):
        raise ValueError(f"{path} is not a layer report")
    k_percent = float(text[0].split("k_percent=")[1])
    entries = []
    for line in text[1:]:
        if not line:
            continue
        name, score, rank_s, selected = line.split(" ")
        entries.append(
            LayerEntry(name=name, score=float(score), rank=int(rank_s),
                       selected=bool(int(selected)))
        )
    return LayerReport(entries=tuple(entries), k_percent=k_percent)
