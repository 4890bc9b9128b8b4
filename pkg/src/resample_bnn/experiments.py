"""The reference desk-scale run: dataset, both trainings, sweeps, plots.

Everything is staged under one output directory and keyed by a hash of the
configuration, so re-running skips stages whose outputs already exist. This
is the run the acceptance suite evaluates and the run a user reproduces
with ``resample-bnn`` or ``scripts/run_reference_experiments.py``.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (DatasetConfig, build_dataset, held_out_sources,
                      load_manifest, load_split, synth_textures, write_textures)
from .images import load_gray
from .models import build, default_spec
from .plots import emit_plots
from .sweeps import (OOD_SUITES, SweepSpec, run_baseline_sweep, run_bnn_sweep,
                     run_ood_suite)
from .train import TrainConfig, TrainData, train, write_train_log

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class ReferenceConfig:
    seed: int = 7
    source_count: int = 50
    texture_size: int = 768
    train_images: int = 40
    val_images: int = 5
    test_images: int = 5
    patches_per_copy: int = 8
    patch_size: int = 64
    kernel: str = "bilinear"
    baseline_iterations: int = 6000
    bnn_iterations: int = 9000
    batch_size: int = 64
    learning_rate: float = 1e-3
    validation_interval: int = 1000
    val_mc_draws: int = 10
    kl_weight_mode: str = "constant"
    kl_weight: float = 0.0          # 0.0 = auto: 1 / n_train_patches
    sweep_patches: int = 32
    sweep_draws: int = 50
    baseline_grid: tuple = (0.1, 2.0, 0.1)
    bnn_grid: tuple = (0.1, 4.1, 0.05)
    ood_grid: tuple = (0.1, 4.1, 0.1)
    ood_suites: tuple = OOD_SUITES


@dataclass
class ReferenceArtifacts:
    root: Path
    sources_dir: Path
    data_dir: Path
    manifest_path: Path
    baseline_ckpt: Path
    bnn_ckpt: Path
    baseline_log: Path
    bnn_log: Path
    results_dir: Path
    sweep_csvs: dict = field(default_factory=dict)


def _config_hash(config: ReferenceConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True,
                                     default=list).encode()).hexdigest()[:16]


def _log(msg: str, quiet: bool) -> None:
    if not quiet:
        print(f"[reference] {msg}", file=sys.stderr, flush=True)


def _train_config(config: ReferenceConfig, iterations: int,
                  n_train: int) -> TrainConfig:
    kl_weight = config.kl_weight
    if config.kl_weight_mode == "constant" and kl_weight == 0.0:
        kl_weight = 1.0 / n_train
    return TrainConfig(learning_rate=config.learning_rate,
                       batch_size=config.batch_size,
                       max_iterations=iterations,
                       validation_interval=config.validation_interval,
                       kl_weight_mode=config.kl_weight_mode,
                       kl_weight=kl_weight,
                       val_mc_draws=config.val_mc_draws,
                       seed=config.seed)


def run_reference(out_dir, config: ReferenceConfig = ReferenceConfig(),
                  force: bool = False, quiet: bool = False) -> ReferenceArtifacts:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    stamp = root / "config.json"
    chash = _config_hash(config)
    if stamp.exists() and not force:
        recorded = json.loads(stamp.read_text())
        if recorded.get("hash") != chash:
            raise ValueError(
                f"{root} holds artifacts for a different configuration "
                f"({recorded.get('hash')} != {chash}); use force=True or a "
                f"fresh directory")
    stamp.write_text(json.dumps({"hash": chash, "config": asdict(config)},
                                indent=2, default=list))

    art = ReferenceArtifacts(
        root=root,
        sources_dir=root / "sources",
        data_dir=root / "data",
        manifest_path=root / "data" / MANIFEST_NAME,
        baseline_ckpt=root / "checkpoints" / "baseline.ckpt",
        bnn_ckpt=root / "checkpoints" / "bnn.ckpt",
        baseline_log=root / "checkpoints" / "baseline_trainlog.csv",
        bnn_log=root / "checkpoints" / "bnn_trainlog.csv",
        results_dir=root / "results",
    )

    # stage 1: synthetic source textures
    want = [art.sources_dir / f"tex_{i:04d}.png" for i in range(config.source_count)]
    if force or not all(p.exists() for p in want):
        _log(f"generating {config.source_count} textures "
             f"({config.texture_size}px)", quiet)
        write_textures(art.sources_dir,
                       synth_textures(config.source_count, config.texture_size,
                                      config.seed))

    # stage 2: dataset build
    if force or not art.manifest_path.exists():
        _log("building dataset", quiet)
        build_dataset(art.sources_dir,
                      DatasetConfig(train_images=config.train_images,
                                    val_images=config.val_images,
                                    test_images=config.test_images,
                                    patches_per_copy=config.patches_per_copy,
                                    patch_size=config.patch_size,
                                    kernel=config.kernel,
                                    seed=config.seed),
                      art.data_dir)
    manifest = load_manifest(art.manifest_path)
    x_train, y_train = load_split(manifest, "train")
    x_val, y_val = load_split(manifest, "val")
    data = TrainData(x_train, y_train, x_val, y_val)

    # stage 3/4: trainings
    spec = default_spec(config.patch_size)
    art.baseline_ckpt.parent.mkdir(parents=True, exist_ok=True)
    for mode, iterations, ckpt, logpath in (
            ("baseline", config.baseline_iterations, art.baseline_ckpt,
             art.baseline_log),
            ("bayesian", config.bnn_iterations, art.bnn_ckpt, art.bnn_log)):
        if not force and ckpt.exists():
            continue
        _log(f"training {mode} for {iterations} iterations", quiet)
        model = build(spec, mode, seed=config.seed)
        result = train(model, data,
                       _train_config(config, iterations, len(x_train)))
        save_checkpoint(ckpt, result.model, seed=config.seed,
                        iteration=result.best_iteration,
                        val_accuracy=result.best_val_accuracy)
        write_train_log(result.log, logpath)
        _log(f"{mode} best val accuracy "
             f"{result.best_val_accuracy:.4f} @ {result.best_iteration}", quiet)

    # stage 5: sweeps and plots
    art.results_dir.mkdir(parents=True, exist_ok=True)
    training_scales = manifest.training_scales()
    sources = [load_gray(p) for p in held_out_sources(manifest, art.sources_dir)]
    plots: dict = {}

    def needs(name: str) -> bool:
        art.sweep_csvs[name] = art.results_dir / f"{name}.csv"
        return force or not (art.results_dir / f"{name}.csv").exists()

    baseline_model = None
    if needs("baseline_sweep"):
        _log("baseline factor sweep", quiet)
        baseline_model, _ = load_checkpoint(art.baseline_ckpt)
        sweep = SweepSpec(*config.baseline_grid,
                          patches_per_factor=config.sweep_patches,
                          kernel=config.kernel, n_draws=config.sweep_draws,
                          seed=config.seed)
        plots["baseline_sweep"] = ("bar", run_baseline_sweep(
            baseline_model, sources, sweep, training_scales))

    bnn_model = None
    if needs("bnn_sweep"):
        _log("variational factor sweep", quiet)
        bnn_model, _ = load_checkpoint(art.bnn_ckpt)
        sweep = SweepSpec(*config.bnn_grid,
                          patches_per_factor=config.sweep_patches,
                          kernel=config.kernel, n_draws=config.sweep_draws,
                          seed=config.seed)
        plots["bnn_sweep"] = ("band", run_bnn_sweep(
            bnn_model, sources, sweep, training_scales))

    ood_base = SweepSpec(*config.ood_grid,
                         patches_per_factor=config.sweep_patches,
                         kernel=config.kernel, n_draws=config.sweep_draws,
                         seed=config.seed)
    missing_suites = [s for s in config.ood_suites if needs(f"ood_{s}")]
    if missing_suites:
        if bnn_model is None:
            bnn_model, _ = load_checkpoint(art.bnn_ckpt)
        _log(f"OOD suites: {', '.join(missing_suites)}", quiet)
        for name, result in run_ood_suite(bnn_model, sources, ood_base,
                                          missing_suites,
                                          training_scales).items():
            plots[f"ood_{name}"] = ("band", result)

    if plots:
        emit_plots(plots, art.results_dir)
    return art
