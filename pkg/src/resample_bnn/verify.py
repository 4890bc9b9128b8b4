"""End-to-end determinism verification plus fast numeric self-checks.

``run_verify`` executes the dataset build, 200 training steps, and one
sweep twice with the same seed and asserts the byte-identity of every
artifact except the wall-clock column of the training log (wall time is
the one intentionally nondeterministic field). It also re-checks a handful
of cheap numeric oracles so a broken install fails loudly and early.
"""

from __future__ import annotations

import filecmp
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import (DatasetConfig, build_dataset, held_out_sources,
                      load_manifest, load_split, synth_textures, write_textures)
from .images import load_gray, resample
from .jpeg import dct2, idct2, quantization_table
from .layers import constrained_project
from .models import build, default_spec
from .sweeps import SweepSpec, run_bnn_sweep, write_rows_csv
from .train import TrainConfig, TrainData, train, write_train_log


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _numeric_checks(rng: np.random.Generator) -> list[CheckResult]:
    checks = []

    kernel = rng.standard_normal((3, 1, 5, 5))
    p1 = constrained_project(kernel)
    p2 = constrained_project(p1)
    ok = np.abs(p2 - p1).max() <= 1e-12 and all(
        p1[f, 0, 2, 2] == -1.0 and abs(p1[f, 0].sum() - p1[f, 0, 2, 2] - 1.0) < 1e-9
        for f in range(3))
    checks.append(CheckResult("constrained-projection-idempotent", ok))

    block = rng.standard_normal((8, 8)) * 50
    err = np.abs(idct2(dct2(block)) - block).max()
    checks.append(CheckResult("dct-roundtrip", err < 1e-10, f"max err {err:.2e}"))

    ok = (quantization_table(50)[0, 0] == 16.0
          and quantization_table(100).max() == 1.0
          and quantization_table(85)[0, 0] == np.floor((16 * 30 + 50) / 100))
    checks.append(CheckResult("ijg-quality-table", ok))

    img = rng.random((24, 24)) * 255
    ok = all(np.abs(resample(img, 1.0, k) - img).max() == 0.0
             for k in ("bilinear", "nearest", "areal"))
    checks.append(CheckResult("resample-identity-at-1", ok))

    down = resample(img, 0.5, "areal")
    checks.append(CheckResult("areal-mass-preservation",
                              abs(down.mean() - img.mean()) < 1e-9))
    return checks


def _pipeline_once(root: Path, seed: int) -> dict[str, Path]:
    sources = root / "sources"
    write_textures(sources, synth_textures(6, 256, seed=seed))
    manifest = build_dataset(
        sources,
        DatasetConfig(train_images=3, val_images=1, test_images=2,
                      patches_per_copy=4, patch_size=64, seed=seed),
        root / "data")
    x_train, y_train = load_split(manifest, "train")
    x_val, y_val = load_split(manifest, "val")

    model = build(default_spec(64), "bayesian", seed=seed)
    config = TrainConfig(max_iterations=200, batch_size=16,
                         validation_interval=100, val_mc_draws=4, seed=seed)
    result = train(model, TrainData(x_train, y_train, x_val, y_val), config)
    ckpt = root / "model.ckpt"
    save_checkpoint(ckpt, result.model, seed=seed,
                    iteration=result.best_iteration,
                    val_accuracy=result.best_val_accuracy)
    log_path = root / "trainlog.csv"
    write_train_log(result.log, log_path)

    held = [load_gray(p) for p in held_out_sources(manifest, sources)]
    sweep = run_bnn_sweep(result.model, held,
                          SweepSpec(0.8, 1.6, 0.2, patches_per_factor=8,
                                    n_draws=10, seed=seed),
                          manifest.training_scales())
    sweep_path = root / "sweep.csv"
    write_rows_csv(sweep.rows, sweep_path)
    return {"manifest": root / "data" / "manifest.txt",
            "patches": root / "data" / "patches",
            "trainlog": log_path, "sweep": sweep_path, "checkpoint": ckpt}


def _strip_wall_ms(path: Path) -> str:
    lines = path.read_text(encoding="utf-8").splitlines()
    return "\n".join(",".join(line.split(",")[:-1]) for line in lines)


def _compare_runs(a: dict[str, Path], b: dict[str, Path]) -> list[CheckResult]:
    checks = []
    checks.append(CheckResult(
        "determinism-manifest",
        a["manifest"].read_bytes() == b["manifest"].read_bytes()))

    blobs_a = sorted(p.relative_to(a["patches"])
                     for p in a["patches"].rglob("*.f64"))
    blobs_b = sorted(p.relative_to(b["patches"])
                     for p in b["patches"].rglob("*.f64"))
    same = blobs_a == blobs_b and all(
        filecmp.cmp(a["patches"] / p, b["patches"] / p, shallow=False)
        for p in blobs_a)
    checks.append(CheckResult("determinism-patch-blobs", same,
                              f"{len(blobs_a)} blobs"))

    checks.append(CheckResult(
        "determinism-trainlog",
        _strip_wall_ms(a["trainlog"]) == _strip_wall_ms(b["trainlog"]),
        "wall_ms column excluded"))
    checks.append(CheckResult(
        "determinism-sweep-csv",
        a["sweep"].read_bytes() == b["sweep"].read_bytes()))
    checks.append(CheckResult(
        "determinism-checkpoint",
        a["checkpoint"].read_bytes() == b["checkpoint"].read_bytes()))
    return checks


def run_verify(out_dir, seed: int = 0) -> list[CheckResult]:
    out_dir = Path(out_dir)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    checks = _numeric_checks(np.random.default_rng(seed))
    runs = []
    for tag in ("run1", "run2"):
        runs.append(_pipeline_once(out_dir / tag, seed=seed))
    checks.extend(_compare_runs(runs[0], runs[1]))
    return checks
