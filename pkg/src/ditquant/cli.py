"""Command-line shell: train / calibrate / generate / evaluate / ablate.

Every command is a pure function of (config file, input artifacts, seeds).
Candidate searches honor the DITQUANT_WORKERS environment variable; results
are identical at any worker count.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .artifacts import (load_archive, load_checkpoint, load_sidecar, save_archive,
                        save_checkpoint, save_metric_table, save_sidecar)
from .calibration import CalibFlags, build_calib_dataset, calibrate, collect_layer_stats
from .config import RunConfig, load_config
from .diffusion import SyntheticDataset, make_schedule, sample
from .errors import ConfigError, ContractError
from .evaluation import (ablation_ladder, model_digest, run_ablation, toy_frechet)
from .training import train_fp


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig.defaults()


def _dataset(cfg: RunConfig) -> SyntheticDataset:
    return SyntheticDataset(cfg["model.num_classes"], cfg["model.image_size"],
                            cfg["model.channels"], seed=cfg["seeds.dataset"])


def _schedule(cfg: RunConfig):
    return make_schedule(cfg["schedule.timesteps"], cfg["schedule.beta_1"],
                         cfg["schedule.beta_end"])


def _parse_bits(text: str) -> tuple[int, int]:
    try:
        kw, ka = text.split(":")
        return int(kw), int(ka)
    except ValueError as exc:
        raise ConfigError(f"--bits expects '<kW>:<kA>', got {text!r}") from exc


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg["seeds.train"]
    log_lines: list[str] = []
    try:
        result = train_fp(cfg.dit_config(), _dataset(cfg), _schedule(cfg),
                          steps=cfg["train.steps"], seed=seed,
                          lr=cfg["train.lr"], batch_size=cfg["train.batch_size"],
                          log=log_lines.append)
    except FloatingPointError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    stem = os.path.join(args.out, "checkpoint")
    save_checkpoint(stem, result.model)
    log_lines.append(f"val_loss_initial = {result.val_loss_initial!r}")
    log_lines.append(f"val_loss_final = {result.val_loss_final!r}")
    with open(os.path.join(args.out, "training_log.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_lines) + "\n")
    print(f"checkpoint written to {stem}.manifest / {stem}.bin")
    print(f"validation loss {result.val_loss_initial:.5f} -> {result.val_loss_final:.5f}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_run_config(args.config)
    model = load_checkpoint(args.checkpoint)
    if model.config != cfg.dit_config():
        raise ConfigError("checkpoint model config does not match the run config")
    os.makedirs(args.out, exist_ok=True)
    k_w, k_a = (_parse_bits(args.bits) if args.bits
                else (cfg["calib.k_w"], cfg["calib.k_a"]))
    groups = args.groups if args.groups is not None else cfg["calib.groups"]
    per_group = (args.samples_per_group if args.samples_per_group is not None
                 else cfg["calib.samples_per_group"])
    rounds = args.rounds if args.rounds is not None else cfg["calib.rounds"]
    mode = args.mode if args.mode is not None else cfg["calib.mode"]
    seed = args.seed if args.seed is not None else cfg["seeds.calib"]
    if cfg["schedule.timesteps"] % groups != 0:
        raise ConfigError(f"--groups {groups} must divide T={cfg['schedule.timesteps']}")

    schedule = _schedule(cfg)
    calib = build_calib_dataset(model, schedule, _dataset(cfg), groups, per_group,
                                mode, seed)
    stats = collect_layer_stats(model, calib)
    qm, report = calibrate(model, stats, k_w=k_w, k_a=k_a, rounds=rounds,
                           groups=groups, flags=CalibFlags(),
                           num_candidates=cfg["calib.num_candidates"],
                           per_channel=cfg["calib.per_channel"])
    provenance = {"dataset_digest": stats.dataset_digest, "rounds": rounds,
                  "groups": groups, "k_w": k_w, "k_a": k_a, "mode": mode,
                  "calib_seed": seed, "model_digest": model_digest(model),
                  "mean_common_objective": report.mean_common_objective}
    sidecar_path = os.path.join(args.out, "quant.sidecar.json")
    save_sidecar(sidecar_path, qm, provenance)
    with open(os.path.join(args.out, "calibration_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_text(qm.assignments))
    print(f"sidecar written to {sidecar_path}")
    print(f"mean calibration objective {report.mean_common_objective:.6g} at W{k_w}A{k_a}")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_run_config(args.config)
    model = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg["seeds.sample"]
    num = args.num if args.num is not None else cfg["generate.num_samples"]
    quant = None
    header = {"mode": "fp", "seed": str(seed)}
    if args.sidecar:
        quant, provenance = load_sidecar(args.sidecar, model)
        if provenance.get("model_digest") not in (None, model_digest(model)):
            raise ConfigError("sidecar was calibrated for a different checkpoint")
        header["mode"] = f"W{provenance.get('k_w')}A{provenance.get('k_a')}"
    schedule = _schedule(cfg)
    if num > 0:
        y = np.arange(num) % model.config.num_classes
        samples = sample(model, schedule, num, y, seed, quant=quant)
    else:
        shape = (0, model.config.channels, model.config.image_size,
                 model.config.image_size)
        samples, y = np.zeros(shape, dtype=np.float32), np.zeros(0, dtype=np.int64)
    stem = os.path.join(args.out, "samples")
    preview = os.path.join(args.out, "preview.png") if num > 0 else None
    save_archive(stem, samples.astype(np.float32), np.asarray(y), header, preview)
    print(f"{num} samples written to {stem}.manifest / {stem}.bin ({header['mode']})")
    return 0


def cmd_evaluate(args) -> int:
    missing = [stem for stem in (args.archives[0], args.archives[1])
               if not os.path.exists(stem + ".manifest")]
    if missing:
        raise ConfigError("missing sample archives: " +
                          ", ".join(f"{m}.manifest" for m in missing))
    cfg = _load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seeds.projection"]
    a, _, header_a = load_archive(args.archives[0])
    b, _, header_b = load_archive(args.archives[1])
    fd = toy_frechet(a, b, projection_seed=seed)
    os.makedirs(args.out, exist_ok=True)
    rows = [{"metric": "toy_fd", "value": fd, "projection_seed": seed,
             "archive_a": args.archives[0], "archive_b": args.archives[1],
             "mode_a": header_a.get("mode", ""), "mode_b": header_b.get("mode", "")}]
    save_metric_table(os.path.join(args.out, "metrics"), rows)
    print(f"toy-FD = {fd!r}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config)
    model = load_checkpoint(args.checkpoint)
    if model.config != cfg.dit_config():
        raise ConfigError("checkpoint model config does not match the run config")
    os.makedirs(args.out, exist_ok=True)
    base_seed = args.seed if args.seed is not None else cfg["seeds.calib"]
    seeds = [base_seed + i for i in range(cfg["ablation.num_seeds"])]
    configs = ablation_ladder(cfg["ablation.k_w"], cfg["ablation.k_a"])
    result = run_ablation(model, _schedule(cfg), _dataset(cfg), configs, seeds,
                          groups=cfg["calib.groups"],
                          per_group=cfg["ablation.samples_per_group"],
                          mode=cfg["calib.mode"], rounds=cfg["calib.rounds"],
                          num_candidates=cfg["ablation.num_candidates"],
                          num_generated=cfg["ablation.num_generated"],
                          num_divergence=cfg["ablation.num_divergence"],
                          sample_seed=cfg["seeds.sample"],
                          projection_seed=cfg["seeds.projection"])
    rows = []
    for rep in result.fp_reports + result.reports:
        rows.append({"config": rep.label, "seed": rep.seed, "toy_fd": rep.toy_fd,
                     "fd_vs_fp": rep.fd_vs_fp,
                     "mean_calibration_objective": rep.mean_calibration_objective,
                     "mean_divergence": float(np.mean(rep.divergence_curve)),
                     "failed": rep.failed, "calib_digest": rep.calib_digest[:16]})
    fd_means = result.mean_by_label("toy_fd")
    fdfp_means = result.mean_by_label("fd_vs_fp")
    obj_means = result.mean_by_label("mean_calibration_objective")
    for label in result.ordering_labels:
        rows.append({"config": label, "seed": "mean", "toy_fd": fd_means[label],
                     "fd_vs_fp": fdfp_means[label],
                     "mean_calibration_objective": obj_means[label],
                     "mean_divergence": None, "failed": False, "calib_digest": ""})
    save_metric_table(os.path.join(args.out, "ablation"), rows)
    summary = [result.verdict(),
               f"fp toy-FD mean = {result.mean_fp_fd()!r}"]
    for label in result.ordering_labels:
        summary.append(f"{label}: toy_fd={fd_means[label]!r} "
                       f"fd_vs_fp={fdfp_means[label]!r} "
                       f"objective={obj_means[label]!r}")
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditquant",
        description="Train, quantize, and evaluate a toy diffusion transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the command's seed")

    p = sub.add_parser("train", help="train the full-precision toy model")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate quantization parameters")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint stem (no suffix)")
    p.add_argument("--bits", help="bit widths as <kW>:<kA>")
    p.add_argument("--groups", type=int, help="timestep group count")
    p.add_argument("--samples-per-group", type=int)
    p.add_argument("--rounds", type=int, help="alternation rounds R")
    p.add_argument("--mode", choices=["forward", "trajectory"])
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("generate", help="sample images (FP, or quantized via sidecar)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sidecar", help="quant sidecar json (omit for full precision)")
    p.add_argument("--num", type=int, help="number of samples")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="toy-FD between two sample archives")
    p.add_argument("archives", nargs=2, help="two archive stems (no suffix)")
    common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the four-configuration ablation ladder")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
