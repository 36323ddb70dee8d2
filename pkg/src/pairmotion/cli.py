"""Command line: ``pairmotion <subcommand> [--config run.json] [--set section.key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
artifact, 4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, verify
from .config import ConfigError, RunConfig, load_config
from .corpus import fit_normalizer, load_corpus, save_corpus
from .csvae import SequenceLengthError
from .metrics import InsufficientSamplesError
from .moe import telemetry_rows, write_telemetry_csv
from .motion_io import MotionFileError, write_motion_file
from .pipeline import (compute_context, make_corpora, set_deterministic_threads, train_denoiser, train_vae,
                       write_json, write_loss_csv)
from .text import UnknownTokenError, detokenize, tokenize

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_VERIFY = 0, 2, 3, 4
OUT_ENV = "PAIRMOTION_OUT"
log = logging.getLogger("pairmotion")


class MissingArtifactError(FileNotFoundError):
    pass


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}")
    return path


def _setup(args) -> tuple[RunConfig, Path]:
    config = load_config(args.config).override(args.set or [])
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, ".")) / config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    config.out_dir = str(out)
    if config.precision not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {config.precision!r}")
    if config.corpus.frames % 2 ** config.vae.levels:
        raise SequenceLengthError(f"corpus.frames={config.corpus.frames} is not divisible by "
                                  f"{2 ** config.vae.levels}; pad or crop to a multiple")
    (out / f"{args.command}.config.json").write_text(config.to_json())
    return config, out


def _corpus_dir(args, out: Path, split: str) -> Path:
    base = Path(args.corpus) if getattr(args, "corpus", None) else out / "corpus"
    return _need(base / split / "manifest.json", f"{split} corpus manifest").parent


def cmd_gen_corpus(args, config: RunConfig, out: Path) -> int:
    train, test = make_corpora(config)
    norm = fit_normalizer(train)
    meta = {"seed": config.corpus.seed, "config_hash": config.hash()}
    save_corpus(train, out / "corpus" / "train", norm, meta)
    save_corpus(test, out / "corpus" / "test", norm, meta)
    print(f"wrote {len(train)} train and {len(test)} test samples to {out / 'corpus'}")
    return EXIT_OK


def cmd_train_vae(args, config: RunConfig, out: Path) -> int:
    train, _ = load_corpus(_corpus_dir(args, out, "train"))
    vae = train_vae(config, train)
    checkpoint.save_vae(out / "vae.ckpt", vae, {"config_hash": config.hash()})
    write_loss_csv(out / "vae_loss.csv", vae.loss_history_)
    print(f"vae final loss {vae.loss_history_[-1]['loss']:.4f}; checkpoint {out / 'vae.ckpt'}")
    return EXIT_OK


def cmd_train_denoiser(args, config: RunConfig, out: Path) -> int:
    vae = checkpoint.load_vae(_need(Path(args.vae) if args.vae else out / "vae.ckpt", "VAE checkpoint"))
    train, _ = load_corpus(_corpus_dir(args, out, "train"))
    model = train_denoiser(config, vae, train)
    checkpoint.save_diffusion(out / "denoiser.ckpt", model, {"config_hash": config.hash()})
    write_loss_csv(out / "denoiser_loss.csv", model.loss_history_)
    write_telemetry_csv(out / "routing_telemetry.csv", model.telemetry_)
    evaluation.write_plot_json(out / "training_curves.json", evaluation.training_curves(model))
    print(f"denoiser final loss {model.loss_history_[-1]:.4f}; checkpoint {out / 'denoiser.ckpt'}")
    return EXIT_OK


def _prompts(args, out: Path) -> list[tuple[int, ...]]:
    if args.text:
        return [tokenize(t) for t in args.text]
    test, _ = load_corpus(_corpus_dir(args, out, "test"))
    return [s.text.tokens for s in test[:args.count]]


def cmd_sample(args, config: RunConfig, out: Path) -> int:
    model = checkpoint.load_diffusion(_need(Path(args.checkpoint) if args.checkpoint else out / "denoiser.ckpt",
                                            "denoiser checkpoint"))
    prompts = _prompts(args, out)
    with compute_context(config):
        za, zb = model.sample_latents(prompts, seed=args.seed, record_selection=True)
        a, b = model.decode_latents(za, zb)
    sample_dir = out / "samples" / f"seed{args.seed}"
    sample_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(len(prompts)):
        pa, pb = sample_dir / f"{i:04d}_a.mot", sample_dir / f"{i:04d}_b.mot"
        write_motion_file(a[i], pa)
        write_motion_file(b[i], pb)
        files.append({"text": detokenize(prompts[i]), "motion_a": pa.name, "motion_b": pb.name})
    counts = model.selection_counts_
    telemetry = sample_dir / "selection_counts.csv"
    with open(telemetry, "w") as fh:
        fh.write("block,mean_total_selections,ddim_steps,c_exp\n")
        for blk, row in enumerate(counts):
            fh.write(f"{blk},{row.mean():.6f},{model.ddim_steps},{model.c_exp}\n")
    write_json(sample_dir / "run_record.json", {
        "seed": args.seed, "config_hash": config.hash(), "samples": files,
        "routing_telemetry": telemetry.name, "ddim_steps": model.ddim_steps, "cfg_weight": model.cfg_weight,
        "mean_total_selections": float(np.mean(counts)) if counts is not None else None})
    print(f"wrote {len(prompts)} paired samples to {sample_dir}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig, out: Path) -> int:
    model = checkpoint.load_diffusion(_need(Path(args.checkpoint) if args.checkpoint else out / "denoiser.ckpt",
                                            "denoiser checkpoint"))
    train, _ = load_corpus(_corpus_dir(args, out, "train"))
    test, _ = load_corpus(_corpus_dir(args, out, "test"))
    extractor = evaluation.fit_extractor(train, config.eval)
    run_id = f"run-{config.hash()}"
    with compute_context(config):
        per_repeat = evaluation.evaluate_model(model, test, extractor, config.eval)
    rows = evaluation.metric_rows(run_id, model.mode, per_repeat)
    rows += evaluation.metric_rows(run_id, "real", evaluation.evaluate_real(test, extractor, config.eval))
    with compute_context(config):
        noise = evaluation.evaluate_noise_baseline(model, test, extractor, config.eval)
    rows += evaluation.metric_rows(run_id, "noise_baseline", noise)
    evaluation.write_metrics_csv(out / "metrics.csv", rows)
    write_json(out / "eval_record.json", {"config_hash": config.hash(),
                                          "eval": evaluation.eval_record(config.eval, len(test))})
    for r in rows:
        print(f"{r['mode']:>14s} {r['metric']:<18s} {r['mean']:.4f} [{r['ci95_low']:.4f}, {r['ci95_high']:.4f}]")
    return EXIT_OK


def _parse_grid(spec: str) -> list[tuple[str, list]]:
    if spec == "all":
        return [(axis, None) for axis in evaluation.GRIDS]
    axis, _, values = spec.partition("=")
    if axis not in evaluation.GRIDS:
        raise ConfigError(f"unknown grid axis {axis!r}; expected one of {sorted(evaluation.GRIDS)} or 'all'")
    if not values:
        return [(axis, None)]
    parse = str if axis == "mode" else (int if axis == "experts" else float)
    try:
        return [(axis, [parse(v) for v in values.split(",")])]
    except ValueError as exc:
        raise ConfigError(f"bad grid values {values!r}: {exc}") from None


def cmd_ablate(args, config: RunConfig, out: Path) -> int:
    grids = _parse_grid(args.grid)
    vae = checkpoint.load_vae(_need(Path(args.vae) if args.vae else out / "vae.ckpt", "VAE checkpoint"))
    train, _ = load_corpus(_corpus_dir(args, out, "train"))
    test, _ = load_corpus(_corpus_dir(args, out, "test"))
    extractor = evaluation.fit_extractor(train, config.eval)
    eval_cfg = type(config.eval)(**{**vars(config.eval), "n_repeats": config.ablation.n_repeats})
    base = {**vars(config.denoiser), "n_steps": config.ablation.n_steps, "telemetry_every": 0}
    cache, status = {}, EXIT_OK
    for axis, values in grids:
        points = evaluation.grid_points(axis, values)
        with compute_context(config):
            rows, _ = evaluation.run_ablation(points, train, test, vae, base, extractor, eval_cfg,
                                              f"{axis}", cache)
        evaluation.write_metrics_csv(out / f"ablation_{axis}.csv", rows)
        summary = {"axis": axis, "config_hash": config.hash(), "fid_ordering": evaluation.mode_ordering(rows)}
        if axis == "mode" and {"dts", "expert_choice"} <= {r["mode"] for r in rows}:
            summary["dts_vs_expert_choice"] = check = evaluation.dts_vs_expert_choice(rows)
            if not check["passed"]:
                status = EXIT_VERIFY
        write_json(out / f"ablation_{axis}.json", summary)
        print(f"{axis}: " + ", ".join(f"{m}={v:.4f}" for m, v in summary["fid_ordering"]))
    return status


def cmd_verify(args, config: RunConfig, out: Path) -> int:
    results = verify.run_all(quick=args.quick)
    ok = verify.report(results, sys.stdout)
    write_json(out / "verify.json", [{"name": r.name, "passed": r.passed, "value": r.value,
                                      "tolerance": r.tolerance, "seconds": r.seconds} for r in results])
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-vae": cmd_train_vae,
    "train-denoiser": cmd_train_denoiser,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. vae.n_steps=500")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<config out_dir>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pairmotion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="write the synthetic train/test corpora")
    p = sub.add_parser("train-vae", parents=[common], help="train the causal-skeletal VAE")
    p.add_argument("--corpus")
    p = sub.add_parser("train-denoiser", parents=[common], help="train the cooperative denoiser")
    p.add_argument("--corpus")
    p.add_argument("--vae")
    p = sub.add_parser("sample", parents=[common], help="generate paired .mot files")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--text", action="append", help="description; repeat for several")
    p.add_argument("--count", type=int, default=8, help="test-corpus prompts to use when no --text is given")
    p = sub.add_parser("eval", parents=[common], help="metric suite with 95%% intervals")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p = sub.add_parser("ablate", parents=[common], help="routing ablation grids")
    p.add_argument("--grid", default="mode", help="mode | experts[=4,8,16] | c_exp[=0.8,1,2] | all")
    p.add_argument("--vae")
    p.add_argument("--corpus")
    p = sub.add_parser("verify", parents=[common], help="run the property and gradient suites")
    p.add_argument("--quick", action="store_true", help="smaller instance counts")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    set_deterministic_threads(1)
    try:
        config, out = _setup(args)
        return COMMANDS[args.command](args, config, out)
    except (ConfigError, SequenceLengthError, UnknownTokenError, InsufficientSamplesError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, checkpoint.CheckpointError, MotionFileError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
