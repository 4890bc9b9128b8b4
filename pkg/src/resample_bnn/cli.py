"""Command-line interface.

Subcommands: synth, dataset, train, sweep, ood, plot, verify, reference.
Global flags: ``--config <file>``, ``--seed <u64>``, ``--out <dir>``.
Success exits 0; any failure prints one machine-readable JSON line to
stderr (``{"error": <type>, "message": <text>}``) and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (DatasetConfig, build_dataset, held_out_sources,
                      load_manifest, load_split, synth_textures, write_textures)
from .images import load_gray
from .models import build, default_spec
from .plots import band_chart_svg, bar_chart_svg, emit_plots
from .sweeps import (OOD_SUITES, SweepSpec, SweepResult, aggregate_rows,
                     read_rows_csv, run_baseline_sweep, run_bnn_sweep,
                     run_ood_suite)
from .train import TrainConfig, TrainData, train, write_train_log
from .verify import run_verify

_MODE_BY_NAME = {"baseline": "baseline", "bnn": "bayesian"}


class CliError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "usage", "message": message}),
              file=sys.stderr)
        raise SystemExit(2)


def _build_parser() -> _Parser:
    parser = _Parser(prog="resample-bnn",
                     description="Resampling detection with a variational CNN "
                                 "and its point-estimate twin.")
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value training config file")
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic source textures")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--size", type=int, default=768)

    p = sub.add_parser("dataset", help="build a patch dataset + manifest")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--train-images", type=int, default=40)
    p.add_argument("--val-images", type=int, default=5)
    p.add_argument("--test-images", type=int, default=5)
    p.add_argument("--patches-per-copy", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--kernel", default="bilinear")

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("model", choices=("baseline", "bnn"))
    p.add_argument("--dataset", type=Path, required=True,
                   help="directory containing manifest.txt")
    p.add_argument("--iterations", type=int, default=None,
                   help="override max_iterations")

    p = sub.add_parser("sweep", help="factor sweep over a trained checkpoint")
    p.add_argument("model", choices=("baseline", "bnn"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--source", type=Path, default=None,
                   help="override the source image directory")
    p.add_argument("--start", type=float, default=0.1)
    p.add_argument("--stop", type=float, default=2.0)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--patches", type=int, default=32)
    p.add_argument("--draws", type=int, default=50)
    p.add_argument("--kernel", default="bilinear")
    p.add_argument("--jpeg", type=int, default=None)
    p.add_argument("--pooled-std", action="store_true",
                   help="band from draws pooled over all patches")
    p.add_argument("--mix-originals", action="store_true",
                   help="mix original patches into each factor's statistics")

    p = sub.add_parser("ood", help="out-of-distribution perturbation suites")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--source", type=Path, default=None)
    p.add_argument("--suite", default=",".join(OOD_SUITES),
                   help=f"comma-separated subset of {OOD_SUITES}")
    p.add_argument("--start", type=float, default=0.1)
    p.add_argument("--stop", type=float, default=4.1)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--patches", type=int, default=32)
    p.add_argument("--draws", type=int, default=50)

    p = sub.add_parser("plot", help="re-render SVG charts from sweep CSVs")
    p.add_argument("--results", type=Path, required=True,
                   help="directory of sweep CSV files")
    p.add_argument("--dataset", type=Path, required=True,
                   help="dataset dir (training-range shading)")

    p = sub.add_parser("verify", help="determinism rerun + numeric self-checks")

    p = sub.add_parser("reference", help="full desk-scale experiment pipeline")
    p.add_argument("--force", action="store_true")
    return parser


def _load_train_config(args, **overrides) -> TrainConfig:
    overrides.setdefault("seed", args.seed)
    if args.config is not None:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**overrides)


def _cmd_synth(args) -> int:
    paths = write_textures(args.out, synth_textures(args.count, args.size,
                                                    args.seed))
    print(f"wrote {len(paths)} textures to {args.out}")
    return 0


def _cmd_dataset(args) -> int:
    config = DatasetConfig(train_images=args.train_images,
                           val_images=args.val_images,
                           test_images=args.test_images,
                           patches_per_copy=args.patches_per_copy,
                           patch_size=args.patch_size,
                           kernel=args.kernel, seed=args.seed)
    manifest = build_dataset(args.source, config, args.out)
    counts = {s: len(manifest.split_records(s)) for s in ("train", "val", "test")}
    print(f"dataset at {args.out}: {counts}")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.dataset / "manifest.txt")
    x_train, y_train = load_split(manifest, "train")
    x_val, y_val = load_split(manifest, "val")
    overrides = {}
    if args.iterations is not None:
        overrides["max_iterations"] = args.iterations
    config = _load_train_config(args, **overrides)
    mode = _MODE_BY_NAME[args.model]
    patch = int(manifest.config["patch_size"])
    model = build(default_spec(patch), mode, seed=config.seed)
    result = train(model, TrainData(x_train, y_train, x_val, y_val), config)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / f"{args.model}.ckpt"
    save_checkpoint(ckpt, result.model, seed=config.seed,
                    iteration=result.best_iteration,
                    val_accuracy=result.best_val_accuracy)
    write_train_log(result.log, args.out / f"{args.model}_trainlog.csv")
    print(f"{args.model}: best val accuracy {result.best_val_accuracy:.4f} "
          f"at iteration {result.best_iteration}; checkpoint {ckpt}")
    return 0


def _sweep_inputs(args):
    manifest = load_manifest(args.dataset / "manifest.txt")
    sources = [load_gray(p) for p in held_out_sources(manifest, args.source)]
    model, meta = load_checkpoint(args.checkpoint)
    return manifest, sources, model, meta


def _cmd_sweep(args) -> int:
    manifest, sources, model, meta = _sweep_inputs(args)
    expected = _MODE_BY_NAME[args.model]
    if meta["mode"] != expected:
        raise CliError(f"checkpoint {args.checkpoint} holds a {meta['mode']} "
                       f"model, not {expected}")
    spec = SweepSpec(args.start, args.stop, args.step,
                     patches_per_factor=args.patches, kernel=args.kernel,
                     jpeg_quality=args.jpeg, n_draws=args.draws,
                     seed=args.seed, pooled_std=args.pooled_std,
                     mix_originals=args.mix_originals)
    scales = manifest.training_scales()
    if args.model == "baseline":
        result = run_baseline_sweep(model, sources, spec, scales)
        kind = "bar"
    else:
        result = run_bnn_sweep(model, sources, spec, scales)
        kind = "band"
    name = f"{args.model}_sweep"
    emit_plots({name: (kind, result)}, args.out)
    print(f"sweep over {len(result.per_factor)} factors -> "
          f"{args.out / (name + '.csv')}")
    return 0


def _cmd_ood(args) -> int:
    args.model = "bnn"
    args.kernel = "bilinear"
    manifest, sources, model, meta = _sweep_inputs(args)
    if meta["mode"] != "bayesian":
        raise CliError(f"OOD suites need the bnn checkpoint, got {meta['mode']}")
    suites = [s.strip() for s in args.suite.split(",") if s.strip()]
    base = SweepSpec(args.start, args.stop, args.step,
                     patches_per_factor=args.patches, n_draws=args.draws,
                     seed=args.seed)
    results = run_ood_suite(model, sources, base, suites,
                            manifest.training_scales())
    emit_plots({f"ood_{name}": ("band", r) for name, r in results.items()},
               args.out)
    print(f"OOD suites {', '.join(suites)} -> {args.out}")
    return 0


def _cmd_plot(args) -> int:
    manifest = load_manifest(args.dataset / "manifest.txt")
    scales = manifest.training_scales()
    csvs = sorted(args.results.glob("*.csv"))
    if not csvs:
        raise CliError(f"no sweep CSVs in {args.results}")
    args.out.mkdir(parents=True, exist_ok=True)
    for csv_path in csvs:
        rows = read_rows_csv(csv_path)
        result = SweepResult(rows=rows, per_factor=aggregate_rows(rows),
                             training_scales=scales, pooled_std=False)
        svg = args.out / (csv_path.stem + ".svg")
        if all(r.n_draws == 1 for r in rows):
            bar_chart_svg(result, svg, csv_path.stem)
        else:
            band_chart_svg(result, svg, csv_path.stem)
        print(f"{csv_path} -> {svg}")
    return 0


def _cmd_verify(args) -> int:
    checks = run_verify(args.out / "verify", seed=args.seed)
    failed = [c for c in checks if not c.ok]
    for c in checks:
        status = "PASS" if c.ok else "FAIL"
        detail = f" ({c.detail})" if c.detail else ""
        print(f"{status} {c.name}{detail}")
    if failed:
        raise CliError(f"{len(failed)} verification check(s) failed: "
                       + ", ".join(c.name for c in failed))
    return 0


def _cmd_reference(args) -> int:
    config = experiments.ReferenceConfig(seed=args.seed) \
        if args.seed else experiments.ReferenceConfig()
    art = experiments.run_reference(args.out, config, force=args.force)
    print(f"reference artifacts under {art.root}")
    return 0


_COMMANDS = {"synth": _cmd_synth, "dataset": _cmd_dataset, "train": _cmd_train,
             "sweep": _cmd_sweep, "ood": _cmd_ood, "plot": _cmd_plot,
             "verify": _cmd_verify, "reference": _cmd_reference}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # surface every failure as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
