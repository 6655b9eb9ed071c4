"""
Command-line entry point.

  python main.py evolve       --bits 8 --epsilon-pct 5 --mode standard --out runs/e1
  python main.py evolve       --mode hybrid --model models/m5/model.npz --out runs/h1
  python main.py gen-dataset  --bits 4 --epsilon-pct 5 --runs 50 --out data/k4
  python main.py train        --dataset data/k4 --epsilon-pct 5 --out models/k4
  python main.py report       --runs-dir runs/std --compare-dir runs/hyb --out reports/r1
  python main.py batch        --bits 4 --model models/k4/model.npz --runs 40 --out campaigns/c1

Every command accepts --config FILE.yaml (flat mapping keyed by long flag
names); explicit flags override the file, the file overrides the defaults.

Output files:
  evolve       best.chr, run.runlog.csv  (gen,t_sec,fitness,area,wce,operator,inferences,event)
  gen-dataset  manifest.csv (id,wce,area), records/<id>.chr,
               labels/<id>.L<samples>.r<rng>.sens.npy (with --labels)
  train        model.npz, loss_trace.csv (epoch,L_op,L_input,L_sens,P_conf_op,P_conf_in,L_total),
               train_manifest.csv (id,wce,area,attractiveness)
  report       deciles.csv, scatter.csv, utest.csv (with --compare-dir)
  batch        <label>/run_NNN.runlog.csv, <label>/run_NNN.chr, plus the report CSVs
All commands also write manifest.json.

Exit codes: 0 ok, 2 usage error, 3 data error.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

from src import cgp
from src.cgp import canonicalize_outputs, default_columns
from src.config import cfg, load_experiment_file, merge_settings
from src.dataset import DatasetBudget, filter_valid, generate_dataset, label_records, load_dataset, save_dataset
from src.evaluator import epsilon_abs, evaluator_for
from src.manifest import RunManifest
from src.models import AxmulError
from src.report import read_runs, summary_text, write_report
from src.search import SearchConfig, evolve, run_batch, run_seeds
from src.seeds import SEED_KINDS, seed_multiplier
from src.slack_client import post_summary
from src.training import TrainConfig, sensitivity_agreement, train, write_trace, write_train_manifest
from src.transformer import ModelConfig, MutationModel, save_checkpoint

logger = logging.getLogger("main")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


# ── Settings ──────────────────────────────────────────────────────────────────

EVOLVE_DEFAULTS = {
    "bits": 8, "epsilon_pct": 5.0, "mode": "standard", "model": None,
    "seed_kind": "ripple-carry-array", "lam": 4, "gens": 100_000, "time_sec": None,
    "stag_max": 50, "rng": 0, "clock": "auto", "step_cost": 1e-3, "columns": None,
    "out": None,
}

DATASET_DEFAULTS = {
    "bits": 4, "epsilon_pct": 5.0, "runs": 50, "time_per_run": 60.0, "gens_per_run": 100_000,
    "columns": None, "rng": 0, "clock": "auto", "threads": None, "labels": False,
    "samples": 8, "out": None,
}

TRAIN_DEFAULTS = {
    "dataset": None, "epsilon_pct": 5.0, "epochs": 20, "batch": 128, "d_model": 64,
    "heads": 4, "layers": 6, "ffn_hidden": 256, "c_par": 0.2, "samples": 8, "lr": 1e-3,
    "rerandomize_inactive": True, "rng": 0, "threads": None, "out": None,
}

REPORT_DEFAULTS = {"runs_dir": None, "compare_dir": None, "checkpoints": "150,300", "out": None}

BATCH_DEFAULTS = {
    "bits": 4, "epsilon_pct": 5.0, "model": None, "runs": 40, "lam": 4, "gens": 100_000,
    "time_sec": 60.0, "stag_max": 50, "stag_max_sweep": None, "checkpoints": None,
    "columns": None, "rng": 0, "clock": "auto", "step_cost": 1e-3, "threads": None,
    "standard_only": False, "out": None,
}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    flags = {k: getattr(args, k, None) for k in defaults}
    settings = merge_settings(defaults, load_experiment_file(args.config), flags)
    missing = [k for k in ("out",) if k in settings and not settings[k]]
    if missing:
        raise UsageError(f"--{missing[0].replace('_', '-')} is required")
    if "threads" in settings and not settings["threads"]:
        settings["threads"] = cfg.THREADS
    return settings


def _resolve_clock(settings: dict, budget_key: str) -> None:
    """`auto` means the step clock unless a wall-time budget was asked for."""
    if settings["clock"] == "auto":
        settings["clock"] = "wall" if settings[budget_key] else "step"
    if settings["clock"] == "wall":
        logger.info("Wall-clock budget: t_sec columns will differ between reruns")


def _snapshot(settings: dict) -> dict:
    # the output directory does not affect the outputs
    return {k: v for k, v in settings.items() if k != "out"}


def _checkpoints(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --checkpoints {text!r}: {exc}") from exc


def _seed(kind: str, bits: int, n_c: int | None):
    if kind not in SEED_KINDS:
        raise UsageError(f"unknown --seed-kind {kind!r}; choose from {', '.join(SEED_KINDS)}")
    return canonicalize_outputs(seed_multiplier(kind, bits, n_c))


def _load_model(path: str | None, bits: int) -> MutationModel:
    model = MutationModel.load(path)
    if model.cfg.n_i != 2 * bits:
        raise UsageError(f"model {path} is for {model.cfg.n_i // 2}-bit multipliers, not {bits}-bit")
    return model


# ── Commands ──────────────────────────────────────────────────────────────────

def cmd_evolve(args: argparse.Namespace) -> int:
    s = _resolve(args, EVOLVE_DEFAULTS)
    _resolve_clock(s, "time_sec")
    if s["mode"] == "hybrid" and not s["model"]:
        raise UsageError("--mode hybrid needs --model")
    model = _load_model(s["model"], s["bits"]) if s["mode"] == "hybrid" else None
    n_c = s["columns"] or (model.cfg.n_c if model else default_columns(s["bits"]))
    seed = _seed(s["seed_kind"], s["bits"], n_c)
    eps = epsilon_abs(s["epsilon_pct"], s["bits"])
    search_cfg = SearchConfig(
        eps_abs=eps, lam=s["lam"], max_gens=s["gens"], time_sec=s["time_sec"],
        stag_max=s["stag_max"], mode=s["mode"], rng_seed=s["rng"], clock=s["clock"],
        seconds_per_eval=s["step_cost"],
    )
    logger.info("=== evolve: %d-bit, eps=%g%% (eps_abs=%d), mode=%s, seed=%s ===",
                s["bits"], s["epsilon_pct"], eps, s["mode"], s["seed_kind"])
    best, log = evolve(seed, search_cfg, model, label=s["mode"])

    out = s["out"]
    os.makedirs(out, exist_ok=True)
    cgp.save(best, os.path.join(out, "best.chr"))
    log.write_csv(os.path.join(out, "run.runlog.csv"))
    manifest = RunManifest("evolve", config=_snapshot(s), seeds=[s["rng"]], reproducible=s["clock"] == "step")
    if model is not None:
        manifest.add_input(s["model"])
    manifest.add_outputs(out, ["best.chr", "run.runlog.csv"])
    manifest.save(out)

    m = evaluator_for(s["bits"]).metrics(best)
    logger.info("Best: area=%.2f wce=%d mae=%.4f (seed area %.2f)",
                cgp.circuit_area(best), m.wce, m.mae, cgp.circuit_area(seed))
    return EXIT_OK


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    s = _resolve(args, DATASET_DEFAULTS)
    _resolve_clock(s, "time_per_run")
    eps = epsilon_abs(s["epsilon_pct"], s["bits"])
    budget = DatasetBudget(
        runs=s["runs"], gens_per_run=s["gens_per_run"],
        time_per_run=s["time_per_run"], clock=s["clock"],
    )
    logger.info("=== gen-dataset: %d-bit, eps_abs=%d, %d run(s) ===", s["bits"], eps, budget.runs)
    records = generate_dataset(
        s["bits"], eps, budget, rng_seed=s["rng"], n_c=s["columns"], threads=s["threads"],
    )
    out = s["out"]
    written = save_dataset(records, out)
    if s["labels"]:
        written += label_records(records, rng_seed=s["rng"], samples=s["samples"], threads=s["threads"], cache_dir=out)
    manifest = RunManifest("gen-dataset", config=_snapshot(s), seeds=[s["rng"]], reproducible=s["clock"] == "step")
    manifest.add_outputs(out, written)
    manifest.save(out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    s = _resolve(args, TRAIN_DEFAULTS)
    if not s["dataset"]:
        raise UsageError("--dataset is required")
    records = load_dataset(s["dataset"])
    params = records[0].chromosome.params if records else None
    if params is None:
        raise AxmulError(f"{s['dataset']}: dataset is empty")
    eps = epsilon_abs(s["epsilon_pct"], params.bits)
    records = filter_valid(records, eps)
    label_files = label_records(
        records, rng_seed=s["rng"], samples=s["samples"], threads=s["threads"], cache_dir=s["dataset"],
    )

    model_cfg = ModelConfig(
        n_i=params.n_i, n_c=params.n_c, d_model=s["d_model"], heads=s["heads"],
        layers=s["layers"], ffn_hidden=s["ffn_hidden"], c_par=s["c_par"],
    )
    train_cfg = TrainConfig(
        epochs=s["epochs"], batch=s["batch"], samples=s["samples"], lr=s["lr"],
        rerandomize_inactive=s["rerandomize_inactive"], rng_seed=s["rng"],
    )
    logger.info("=== train: %d record(s), n_c=%d, d_model=%d, layers=%d ===",
                len(records), model_cfg.n_c, model_cfg.d_model, model_cfg.layers)
    result = train(records, model_cfg, train_cfg)
    logger.info("Sensitivity head vs labels: mean Spearman rho = %.3f",
                sensitivity_agreement(records, result.params, model_cfg))

    out = s["out"]
    os.makedirs(out, exist_ok=True)
    save_checkpoint(os.path.join(out, "model.npz"), model_cfg, result.params)
    write_trace(result.trace, os.path.join(out, "loss_trace.csv"))
    write_train_manifest(records, os.path.join(out, "train_manifest.csv"))
    manifest = RunManifest("train", config=_snapshot(s), seeds=[s["rng"]])
    manifest.add_input(os.path.join(s["dataset"], "manifest.csv"))
    for r in records:
        manifest.add_input(os.path.join(s["dataset"], "records", f"{r.id}.chr"))
    for rel in label_files:
        manifest.add_input(os.path.join(s["dataset"], rel))
    manifest.add_outputs(out, ["model.npz", "loss_trace.csv", "train_manifest.csv"])
    manifest.save(out)
    return EXIT_OK


def _report(logs: dict, checkpoints: list[float], out: str, baseline: str | None) -> list[str]:
    written = write_report(logs, checkpoints, out, baseline)
    post_summary(summary_text(logs, checkpoints, baseline))
    return written


def cmd_report(args: argparse.Namespace) -> int:
    s = _resolve(args, REPORT_DEFAULTS)
    if not s["runs_dir"]:
        raise UsageError("--runs-dir is required")
    checkpoints = _checkpoints(s["checkpoints"])
    logs = {}
    for directory in [s["runs_dir"], s["compare_dir"]]:
        if not directory:
            continue
        label = os.path.basename(os.path.normpath(directory))
        while label in logs:
            label += "'"
        runs = read_runs(directory, label)
        if not runs:
            logger.error("No *.runlog.csv files under %s", directory)
            return EXIT_DATA
        logs[label] = runs
    baseline = next(iter(logs)) if len(logs) > 1 else None
    written = _report(logs, checkpoints, s["out"], baseline)
    manifest = RunManifest("report", config=_snapshot(s))
    manifest.add_outputs(s["out"], written)
    manifest.save(s["out"])
    return EXIT_OK


def cmd_batch(args: argparse.Namespace) -> int:
    s = _resolve(args, BATCH_DEFAULTS)
    _resolve_clock(s, "time_sec")
    if not s["standard_only"] and not s["model"]:
        raise UsageError("batch needs --model (or --standard-only)")
    model = None if s["standard_only"] else _load_model(s["model"], s["bits"])
    n_c = s["columns"] or (model.cfg.n_c if model else default_columns(s["bits"]))
    if model is not None and n_c != model.cfg.n_c:
        raise UsageError(f"--columns {n_c} does not match the model's n_c={model.cfg.n_c}")
    seeds = [_seed(kind, s["bits"], n_c) for kind in SEED_KINDS]
    eps = epsilon_abs(s["epsilon_pct"], s["bits"])
    base = SearchConfig(
        eps_abs=eps, lam=s["lam"], max_gens=s["gens"], time_sec=s["time_sec"],
        stag_max=s["stag_max"], clock=s["clock"], seconds_per_eval=s["step_cost"],
    )
    configs = {"standard": base}
    if model is not None:
        configs["hybrid"] = replace(base, mode="hybrid")
        if s["stag_max_sweep"]:
            for value in str(s["stag_max_sweep"]).split(","):
                configs[f"hybrid-stag{int(value)}"] = replace(base, mode="hybrid", stag_max=int(value))

    result = run_batch(configs, seeds, s["runs"], model, rng_seed=s["rng"],
                       threads=s["threads"], seed_kinds=list(SEED_KINDS))
    out = s["out"]
    written = []
    for label, logs in result.logs.items():
        os.makedirs(os.path.join(out, label), exist_ok=True)
        for i, (log, best) in enumerate(zip(logs, result.best[label])):
            stem = os.path.join(label, f"run_{i:03d}")
            log.write_csv(os.path.join(out, stem + ".runlog.csv"))
            cgp.save(best, os.path.join(out, stem + ".chr"))
            written += [stem + ".runlog.csv", stem + ".chr"]

    time_sec = s["time_sec"] or 0
    checkpoints = _checkpoints(s["checkpoints"]) if s["checkpoints"] else [time_sec / 2, time_sec]
    written += _report(result.logs, checkpoints, out, "standard")
    manifest = RunManifest(
        "batch", config=_snapshot(s), seeds=[s["rng"]] + run_seeds(s["rng"], s["runs"]),
        reproducible=s["clock"] == "step",
    )
    if model is not None:
        manifest.add_input(s["model"])
    manifest.add_outputs(out, written)
    manifest.save(out)
    return EXIT_OK


# ── Parser ────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Evolve approximate multipliers with CGP and a transformer-guided mutation operator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: AXMUL_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML file of flag values")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--rng", type=int, default=None, help="rng seed")

    def search_flags(p):
        p.add_argument("--bits", type=int, default=None)
        p.add_argument("--epsilon-pct", type=float, default=None, help="WCE bound in %% of 2^2k - 1")
        p.add_argument("--lambda", dest="lam", type=int, default=None, help="offspring per generation")
        p.add_argument("--gens", type=int, default=None)
        p.add_argument("--time-sec", type=float, default=None)
        p.add_argument("--stag-max", type=int, default=None)
        p.add_argument("--columns", type=int, default=None, help="n_c (default: model's, else scaled from 600 at 8 bits)")
        p.add_argument("--clock", choices=["auto", "wall", "step"], default=None)
        p.add_argument("--step-cost", type=float, default=None, help="virtual seconds per evaluation (step clock)")

    p = sub.add_parser("evolve", help="one evolutionary run")
    common(p)
    search_flags(p)
    p.add_argument("--mode", choices=["standard", "hybrid"], default=None)
    p.add_argument("--model", default=None, help="model checkpoint (hybrid mode)")
    p.add_argument("--seed-kind", default=None, help=", ".join(SEED_KINDS))
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("gen-dataset", help="harvest a corpus of approximate multipliers")
    common(p)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--epsilon-pct", type=float, default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--time-per-run", type=float, default=None)
    p.add_argument("--gens-per-run", type=int, default=None)
    p.add_argument("--columns", type=int, default=None)
    p.add_argument("--clock", choices=["auto", "wall", "step"], default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--labels", action="store_true", default=None, help="also compute sensitivity labels")
    p.add_argument("--samples", type=int, default=None, help="mutations per node for labels (L)")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the mutation model")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--epsilon-pct", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--ffn-hidden", type=int, default=None)
    p.add_argument("--c-par", type=float, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--no-rerandomize-inactive", dest="rerandomize_inactive", action="store_false", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="decile, scatter and U-test CSVs from run logs")
    common(p)
    p.add_argument("--runs-dir", default=None)
    p.add_argument("--compare-dir", default=None)
    p.add_argument("--checkpoints", default=None, help="comma-separated seconds (default 150,300)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("batch", help="paired standard vs hybrid campaign")
    common(p)
    search_flags(p)
    p.add_argument("--model", default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--stag-max-sweep", default=None, help="comma-separated stag_max values for extra hybrid labels")
    p.add_argument("--checkpoints", default=None, help="comma-separated seconds (default time/2,time)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--standard-only", action="store_true", default=None)
    p.set_defaults(func=cmd_batch)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or cfg.LOG_LEVEL).upper(),
        format="%(asctime)s  %(levelname)-8s  %(name)s — %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        logger.error("%s", exc)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (AxmulError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_DATA
    except ValueError as exc:
        logger.error("%s", exc)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
