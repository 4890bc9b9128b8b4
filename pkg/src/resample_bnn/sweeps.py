"""Factor sweeps over trained checkpoints, with per-patch CSV emission.

A sweep walks a grid of rescaling factors; at each factor it draws M fresh
patches from held-out test sources, rescales them with the configured
kernel (optionally JPEG-compressing afterwards), runs the model, and
records one CSV row per patch. All per-factor statistics are pure functions
of those rows, so results recompute identically from the emitted CSV.

Evaluation patches are sampled at uniformly random positions without the
dataset builder's non-overlap constraint: tiny rescaled images (s near 0.1)
cannot host 32 disjoint patches, and sweep statistics do not need them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .images import RESAMPLE_KERNELS, resample
from .inference import mc_predict
from .jpeg import jpeg_cycle
from .models import LABEL_ORIGINAL, LABEL_RESCALED, Model
from .rng import fold_seed, substream
from .tensor import no_grad, softmax

FACTOR_GUARD = (0.1, 4.1)
OOD_SUITES = ("jpeg85", "jpeg50", "nearest", "areal")
ROWS_HEADER = "patch_id,scale,kernel,jpeg_q,label,mean_p_rescaled,std_p_rescaled,n_draws,correct"
LABEL_NAMES = ("original", "rescaled")


@dataclass(frozen=True)
class SweepSpec:
    start: float
    stop: float
    step: float
    patches_per_factor: int = 32
    kernel: str = "bilinear"
    jpeg_quality: int | None = None
    n_draws: int = 50
    seed: int = 0
    pooled_std: bool = False
    mix_originals: bool = False

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.patches_per_factor < 2:
            raise ValueError("need at least 2 patches per factor")
        if self.kernel not in RESAMPLE_KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.n_draws < 2:
            raise ValueError("need at least 2 MC draws")
        if not self.factors():
            raise ValueError(
                f"factor grid [{self.start}, {self.stop}] step {self.step} has "
                f"no points inside the guard {FACTOR_GUARD}")

    def factors(self) -> list[float]:
        n = int(math.floor((self.stop - self.start) / self.step + 0.5))
        raw = [round(self.start + i * self.step, 10) for i in range(n + 1)]
        lo, hi = FACTOR_GUARD
        return [s for s in raw if lo - 1e-9 <= s <= hi + 1e-9]


@dataclass(frozen=True)
class PatchRow:
    patch_id: str
    scale: float          # the sweep factor this row belongs to
    kernel: str
    jpeg_q: str           # "none" or the quality as text
    label: str            # "original" | "rescaled"
    mean_p_rescaled: float
    std_p_rescaled: float
    n_draws: int
    correct: int


@dataclass(frozen=True)
class FactorStats:
    scale: float
    accuracy: float
    confidence: float      # mean max-class probability
    mean_p_rescaled: float
    band: float            # mean 2*std half-width (pooled when configured)
    count: int
    n_draws: int


@dataclass
class SweepResult:
    rows: list[PatchRow]
    per_factor: list[FactorStats]
    training_scales: list[float]
    pooled_std: bool
    originals: FactorStats | None = None  # pooled stats at s = 1.0


def write_rows_csv(rows, path) -> None:
    lines = [ROWS_HEADER]
    for r in rows:
        lines.append(f"{r.patch_id},{r.scale!r},{r.kernel},{r.jpeg_q},{r.label},"
                     f"{r.mean_p_rescaled!r},{r.std_p_rescaled!r},{r.n_draws},"
                     f"{r.correct}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_rows_csv(path) -> list[PatchRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ROWS_HEADER:
        raise ValueError(f"{path}: missing sweep CSV header")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        p = line.split(",")
        if len(p) != 9:
            raise ValueError(f"{path}: expected 9 fields, got {len(p)}")
        rows.append(PatchRow(p[0], float(p[1]), p[2], p[3], p[4], float(p[5]),
                             float(p[6]), int(p[7]), int(p[8])))
    return rows


def aggregate_rows(rows, pooled_std: bool = False) -> list[FactorStats]:
    """Per-factor statistics; a pure function of the CSV rows.

    Pooled mode recovers the variance over all draws of all patches from the
    per-patch moments (law of total variance with equal draw counts).
    """
    by_scale: dict[float, list[PatchRow]] = {}
    for r in rows:
        by_scale.setdefault(r.scale, []).append(r)
    stats = []
    for scale in sorted(by_scale):
        group = by_scale[scale]
        means = np.array([r.mean_p_rescaled for r in group])
        stds = np.array([r.std_p_rescaled for r in group])
        if pooled_std:
            pooled_var = float((stds ** 2).mean() + means.var())
            band = 2.0 * math.sqrt(max(pooled_var, 0.0))
        else:
            band = float((2.0 * stds).mean())
        stats.append(FactorStats(
            scale=scale,
            accuracy=float(np.mean([r.correct for r in group])),
            confidence=float(np.maximum(means, 1.0 - means).mean()),
            mean_p_rescaled=float(means.mean()),
            band=band,
            count=len(group),
            n_draws=group[0].n_draws))
    return stats


def _factor_batch(source_images, s: float | None, kernel: str, m: int,
                  patch: int, jpeg_quality, rng: np.random.Generator) -> np.ndarray:
    """M evaluation patches at factor s (None = originals, no resampling).

    Sources are rescaled one at a time (a 768px source at s = 4.1 is ~80 MB
    as float64) and each contributes ceil-share patches in source order.
    """
    k = len(source_images)
    batch = np.empty((m, 1, patch, patch))
    pos = 0
    for j, img in enumerate(source_images):
        share = (m - j - 1) // k + 1  # patches for source j under round-robin
        if share <= 0:
            continue
        scaled = img if s is None else resample(img, s, kernel)
        if scaled.shape[0] < patch or scaled.shape[1] < patch:
            raise ValueError(
                f"source {img.shape} rescaled by {s} gives {scaled.shape}, "
                f"smaller than the {patch}px patch; use larger test sources")
        for _ in range(share):
            y = int(rng.integers(0, scaled.shape[0] - patch + 1))
            x = int(rng.integers(0, scaled.shape[1] - patch + 1))
            window = scaled[y:y + patch, x:x + patch]
            if jpeg_quality is not None:
                window = jpeg_cycle(window, jpeg_quality)
            batch[pos, 0] = window
            pos += 1
    assert pos == m
    return batch


def _baseline_rows(model, batch, scale, label_idx, spec, tag) -> list[PatchRow]:
    with no_grad():
        probs = softmax(model.forward(batch).data)
    rows = []
    q = "none" if spec.jpeg_quality is None else str(spec.jpeg_quality)
    for i, p in enumerate(probs):
        rows.append(PatchRow(
            patch_id=f"s{scale:g}_{tag}_{i}", scale=scale, kernel=spec.kernel,
            jpeg_q=q, label=LABEL_NAMES[label_idx],
            mean_p_rescaled=float(p[LABEL_RESCALED]), std_p_rescaled=0.0,
            n_draws=1, correct=int(p.argmax() == label_idx)))
    return rows


def run_baseline_sweep(model: Model, source_images, spec: SweepSpec,
                       training_scales) -> SweepResult:
    """Accuracy and mean max-softmax confidence per factor (point model)."""
    if model.bayesian:
        raise ValueError("run_baseline_sweep expects the baseline model")
    patch = model.spec.patch_size
    rows: list[PatchRow] = []
    for fi, s in enumerate(spec.factors()):
        rng = substream(spec.seed, 0x51, fi)
        batch = _factor_batch(source_images, s, spec.kernel,
                              spec.patches_per_factor, patch,
                              spec.jpeg_quality, rng)
        rows.extend(_baseline_rows(model, batch, s, LABEL_RESCALED, spec, "resc"))
        if spec.mix_originals:
            obatch = _factor_batch(source_images, None, spec.kernel,
                                   spec.patches_per_factor, patch,
                                   spec.jpeg_quality, rng)
            rows.extend(_baseline_rows(model, obatch, s, LABEL_ORIGINAL,
                                       spec, "orig"))
    orig_rng = substream(spec.seed, 0x52)
    obatch = _factor_batch(source_images, None, spec.kernel,
                           spec.patches_per_factor, patch,
                           spec.jpeg_quality, orig_rng)
    orig_rows = _baseline_rows(model, obatch, 1.0, LABEL_ORIGINAL, spec, "origpool")
    originals = aggregate_rows(orig_rows, spec.pooled_std)[0]
    return SweepResult(rows=rows, per_factor=aggregate_rows(rows, spec.pooled_std),
                       training_scales=sorted(training_scales),
                       pooled_std=spec.pooled_std, originals=originals)


def run_bnn_sweep(model: Model, source_images, spec: SweepSpec,
                  training_scales) -> SweepResult:
    """Mean P(rescaled) and 2*std bands per factor via MC prediction."""
    if not model.bayesian:
        raise ValueError("run_bnn_sweep expects the bayesian model")
    patch = model.spec.patch_size
    rows: list[PatchRow] = []
    q = "none" if spec.jpeg_quality is None else str(spec.jpeg_quality)
    for fi, s in enumerate(spec.factors()):
        rng = substream(spec.seed, 0x51, fi)
        batch = _factor_batch(source_images, s, spec.kernel,
                              spec.patches_per_factor, patch,
                              spec.jpeg_quality, rng)
        summaries = mc_predict(model, batch, spec.n_draws,
                               seed=fold_seed(spec.seed, 0x53, fi))
        for i, summ in enumerate(summaries):
            p1 = float(summ.mean_probs[LABEL_RESCALED])
            rows.append(PatchRow(
                patch_id=f"s{s:g}_resc_{i}", scale=s, kernel=spec.kernel,
                jpeg_q=q, label=LABEL_NAMES[LABEL_RESCALED],
                mean_p_rescaled=p1, std_p_rescaled=summ.std_rescaled,
                n_draws=spec.n_draws,
                correct=int(summ.mean_probs.argmax() == LABEL_RESCALED)))
    return SweepResult(rows=rows, per_factor=aggregate_rows(rows, spec.pooled_std),
                       training_scales=sorted(training_scales),
                       pooled_std=spec.pooled_std)


def suite_spec(base: SweepSpec, suite: str) -> SweepSpec:
    if suite == "jpeg85":
        return replace(base, jpeg_quality=85)
    if suite == "jpeg50":
        return replace(base, jpeg_quality=50)
    if suite == "nearest":
        return replace(base, kernel="nearest")
    if suite == "areal":
        return replace(base, kernel="areal")
    raise ValueError(f"unknown OOD suite {suite!r}; choose from {OOD_SUITES}")


def run_ood_suite(model: Model, source_images, base: SweepSpec, suites,
                  training_scales) -> dict[str, SweepResult]:
    """BNN sweeps with the named post-rescale perturbations applied."""
    results = {}
    for suite in suites:
        results[suite] = run_bnn_sweep(model, source_images,
                                       suite_spec(base, suite), training_scales)
    return results


def mean_band(result: SweepResult) -> float:
    """Grand mean 2*std half-width over every patch row of a sweep."""
    return float(np.mean([2.0 * r.std_p_rescaled for r in result.rows]))
