"""Command-line entry point: ``xalign <subcommand> [options]``.

Exit codes: 0 success, 1 internal error (including training divergence),
2 input format error, 3 configuration or compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .align import (
    AlignmentModel,
    grid_search,
    load_checkpoint,
    save_checkpoint,
    train_alignment,
    tune_temperature,
)
from .anomaly import detect_outliers
from .config import RunConfig, load_run_config
from .errors import (
    ConfigError,
    FormatError,
    InsufficientDataError,
    NumericError,
    ShapeError,
    TrainingError,
    ValidationError,
)
from .ingest import (
    DATASET_FILES,
    ids_path,
    load_classes,
    load_dataset,
    save_dataset,
    synth_dataset,
    write_xaln,
)
from .manifest import RunManifest, start_time
from .pipeline import check_compatible, evaluate_retrieval, export_latents, model_representations, select_rows
from .regress import correlation_table, mean_abs_correlation, regression_report
from .retrieval import write_recall_curve, write_report
from .specprep import (
    bin_events,
    encode_spectra,
    load_event_lists,
    load_raw_spectra,
    minmax_normalize,
    train_autoencoder,
    write_spectra_csv,
)

logger = logging.getLogger("xalign")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: RunConfig = load_run_config(args.config, args.set or (), args.seed)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = start_time()
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        if args.config:
            self.inputs.append(Path(args.config))

    def load_store(self):
        a = self.args
        overrides = {k: getattr(a, k) for k in DATASET_FILES if getattr(a, k, None)}
        if a.data is None and len(overrides) < 4:
            raise ConfigError("pass --data DIR or all of --spectral/--text/--physicals/--splits")
        store = load_dataset(a.data, None, None, **overrides)
        base = Path(a.data) if a.data else None
        for key, default in DATASET_FILES.items():
            p = Path(overrides.get(key) or base / default)
            self.inputs.append(p)
            if key in ("spectral", "text") and p.suffix.lower() != ".csv":
                self.inputs.append(ids_path(p))
        return store

    def load_models(self) -> list[AlignmentModel]:
        paths = self.args.checkpoint
        if not paths:
            raise ConfigError("--checkpoint is required")
        models = []
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"checkpoint {p} does not exist")
            models.append(load_checkpoint(p))
            self.inputs.append(Path(p))
        return models

    def emit(self, *paths: Path) -> None:
        self.outputs.extend(paths)

    def finish(self, command: str) -> None:
        RunManifest(self.out).record(command, self.config.digest(), self.config.seed,
                                     self.inputs, self.outputs, self.started)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(ctx: Context) -> None:
    a, s = ctx.args, ctx.config.synth
    n = a.n if a.n is not None else s["n"]
    latent = a.latent_dim if a.latent_dim is not None else s["latent_dim"]
    noise = a.noise if a.noise is not None else s["noise"]
    missing = a.missing_rate if a.missing_rate is not None else s["missing_rate"]
    store = synth_dataset(n, latent, noise, ctx.config.seed, spectral_dim=ctx.config.align.spectral_dim,
                          text_dim=ctx.config.align.text_dim, missing_rate=missing)
    ctx.emit(*save_dataset(store, ctx.out))
    logger.info("wrote %d synthetic pairs to %s", n, ctx.out)


def cmd_preprocess(ctx: Context) -> None:
    a = ctx.args
    spacing = "log" if a.log_bins else "linear"
    discarded, empty = 0, 0
    if a.spectra:
        ids, raw = load_raw_spectra(a.spectra, a.bins)
        ctx.inputs.append(Path(a.spectra))
    elif a.events and a.exposures:
        ids, events, exposures = load_event_lists(a.events, a.exposures)
        ctx.inputs += [Path(a.events), Path(a.exposures)]
        rows = []
        for sid in ids:
            b = bin_events(events[sid], exposures[sid], a.bins, spacing)
            discarded += b.discarded
            empty += b.empty
            rows.append(b.bins)
        raw = np.array(rows)
    else:
        raise ConfigError("preprocess needs --spectra, or --events with --exposures")
    normed = [minmax_normalize(r) for r in raw]
    X = np.array([n.bins for n in normed])
    out_csv = ctx.out / "normalized_spectra.csv"
    write_spectra_csv(out_csv, ids, X)
    report = {"spectra": len(ids), "bins": int(X.shape[1]), "spacing": spacing,
              "degenerate": int(sum(n.degenerate for n in normed)),
              "discarded_events": discarded, "empty_event_lists": empty}
    ctx.emit(out_csv)
    if a.embed:
        ae = train_autoencoder(X, bottleneck=a.bottleneck, epochs=a.ae_epochs, seed=ctx.config.seed)
        emb = encode_spectra(ae, X)
        path = ctx.out / "spectral.xaln"
        write_xaln(path, emb, ids, version=2)
        ctx.emit(path, ids_path(path))
        report["autoencoder_mae"] = {"initial": ae.loss_curve[0], "final": ae.loss_curve[-1]}
    ctx.emit(_dump(ctx.out / "preprocess_report.json", report))


def _train_outputs(ctx: Context, model: AlignmentModel, log, prefix: str = "model") -> None:
    ctx.emit(*save_checkpoint(model, ctx.out / f"{prefix}.ckpt"))
    ctx.emit(_dump(ctx.out / f"{prefix}_trainlog.json", log.to_dict()))


def cmd_train(ctx: Context) -> None:
    store = ctx.load_store()
    cfg = ctx.config.align.replace(spectral_dim=store.spectral.shape[1], text_dim=store.text.shape[1])
    model, log = train_alignment(cfg, store)
    _train_outputs(ctx, model, log)
    logger.info("best epoch %d, validation top-1 %.3f", log.best_epoch,
                max([log.initial_val_recall, *log.val_recall]))


def cmd_grid_search(ctx: Context) -> None:
    store = ctx.load_store()
    base = ctx.config.align.replace(spectral_dim=store.spectral.shape[1], text_dim=store.text.shape[1])
    result = grid_search(ctx.config.grid_space(), store, base, ctx.config.seed)
    logs_dir = ctx.out / "trainlogs"
    logs_dir.mkdir(exist_ok=True)
    for e in result.ranked:
        ctx.emit(_dump(logs_dir / f"config_{e.index:03d}.json", e.log.to_dict()))
    ctx.emit(_dump(ctx.out / "leaderboard.json", result.leaderboard()))
    for r, e in enumerate(result.ranked[: ctx.config.grid["ensemble_size"]], start=1):
        ctx.emit(*save_checkpoint(e.model, ctx.out / f"rank{r:02d}.ckpt"))
    if not result.ranked:
        raise TrainingError("every grid configuration failed: "
                            + "; ".join(f"#{f['index']}: {f['error']}" for f in result.failed))


def cmd_tune_temp(ctx: Context) -> None:
    store = ctx.load_store()
    (model,) = ctx.load_models()[:1]
    check_compatible(model, store)
    grid = ctx.config.align.temperature_grid
    res = tune_temperature(model, store, grid, retrain=ctx.args.retrain_per_tau)
    ctx.emit(*save_checkpoint(res.model, ctx.out / "model_tuned.ckpt"))
    ctx.emit(_dump(ctx.out / "temperature.json",
                   {"temperature": res.temperature, "retrain_per_tau": ctx.args.retrain_per_tau,
                    "table": res.table}))


def cmd_eval_retrieval(ctx: Context) -> None:
    store = ctx.load_store()
    models = ctx.load_models()
    report, curve = evaluate_retrieval(models, store, ctx.args.split)
    out_json = ctx.out / "retrieval.json"
    write_report(report, out_json)
    out_csv = ctx.out / "recall_curve.csv"
    write_recall_curve(curve, out_csv)
    ranks_csv = ctx.out / "retrieval_ranks.csv"
    idx = store.split_indices(ctx.args.split)
    with open(ranks_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "rank"])
        for i, r in zip(idx, report.ranks):
            w.writerow([store.ids[i], r])
    ctx.emit(out_json, out_csv, ranks_csv)
    logger.info("Recall@1%% %.3f, Recall@5%% %.3f, median rank %g of %d",
                report.recall_at["1"], report.recall_at["5"], report.median_rank, report.candidate_count)


def cmd_eval_regression(ctx: Context) -> None:
    store = ctx.load_store()
    (model,) = ctx.load_models()[:1]
    reps = model_representations(model, store)
    r = ctx.config.regress
    metric = ctx.args.moe_metric or r["moe_metric"]
    standardize = ctx.args.standardize or r["standardize"]
    report = regression_report(reps, store, k=r["k"], bootstrap_n=r["bootstrap_n"], seed=ctx.config.seed,
                               moe_metric=metric, standardize=standardize)
    out_json, out_csv = ctx.out / "regression.json", ctx.out / "regression.csv"
    report.write_json(out_json)
    report.write_csv(out_csv)
    ctx.emit(out_json, out_csv)

    variables = store.present_variables()
    P = store.physical_matrix(variables)
    table = correlation_table(reps["post_spectra"], P, variables, top_n=ctx.args.top_n)
    mean_abs = {name: mean_abs_correlation(rep, P, variables) for name, rep in reps.items()}
    corr = {"representation": "post_spectra",
            "top": [{"latent_dim": e.latent_dim, "variable": e.variable, "abs_rho": e.abs_rho,
                     "degenerate": e.degenerate} for e in table],
            "mean_best_abs_rho": mean_abs}
    corr_json, corr_csv = ctx.out / "correlations.json", ctx.out / "correlations.csv"
    _dump(corr_json, corr)
    with open(corr_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["latent_dim", "variable", "abs_rho"])
        for e in table:
            w.writerow([e.latent_dim, e.variable, repr(e.abs_rho)])
    ctx.emit(corr_json, corr_csv)


def cmd_detect_outliers(ctx: Context) -> None:
    store = ctx.load_store()
    (model,) = ctx.load_models()[:1]
    a, p = ctx.args, ctx.config.anomaly
    rep_name = a.representation or p["representation"]
    split = a.split or p["split"]
    reps = model_representations(model, store)
    if rep_name not in reps:
        raise ConfigError(f"unknown representation {rep_name!r}")
    rows = select_rows(store, split)
    labels = None
    if a.classes:
        labels = load_classes(a.classes)
        ctx.inputs.append(Path(a.classes))
    report = detect_outliers([store.ids[i] for i in rows], reps[rep_name][rows],
                             n_trees=p["n_trees"], subsample_size=p["subsample_size"],
                             q=a.q if a.q is not None else p["q"], seed=ctx.config.seed,
                             labels=labels, representation=rep_name)
    report.params["split"] = split
    out_json, out_csv = ctx.out / "anomalies.json", ctx.out / "anomalies.csv"
    report.write_json(out_json)
    flagged = set(report.flagged)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "score", "flagged"])
        for sid, s in zip(report.ids, report.scores):
            w.writerow([sid, repr(s), int(sid in flagged)])
    ctx.emit(out_json, out_csv)


def cmd_export_latents(ctx: Context) -> None:
    store = ctx.load_store()
    (model,) = ctx.load_models()[:1]
    written, summary = export_latents(model, store, ctx.out / "latents", ctx.args.split)
    ctx.emit(*written)
    logger.info("exported %d rows; post_both %d-d vs pre_both %d-d (%.1f%% smaller)",
                summary["rows"], summary["dims"]["post_both"], summary["dims"]["pre_both"],
                summary["compression"]["reduction_pct"])


def cmd_verify_manifest(ctx: Context) -> None:
    problems = RunManifest(ctx.out).verify()
    for p in problems:
        print(p)
    if problems:
        raise ValidationError(f"{len(problems)} manifest entries do not verify")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "grid-search": cmd_grid_search,
    "tune-temp": cmd_tune_temp,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-regression": cmd_eval_regression,
    "detect-outliers": cmd_detect_outliers,
    "export-latents": cmd_export_latents,
    "verify-manifest": cmd_verify_manifest,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", metavar="PATH", help="key=value config file", **({"default": None} | d))
    p.add_argument("--seed", type=int, metavar="N", help="master seed", **({"default": None} | d))
    p.add_argument("--out", metavar="DIR", help="output directory", **({"default": "."} | d))
    p.add_argument("--quiet", action="store_true", help="only print errors", **({"default": False} | d))
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. align.shared_dim=32", **({"default": None} | d))


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", help="dataset directory (as written by `synth`)")
    for key in DATASET_FILES:
        p.add_argument(f"--{key}", metavar="PATH", help=f"override the {key} file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"xalign {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("synth", "generate a synthetic paired dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--missing-rate", type=float)

    p = add("preprocess", "bin and min-max normalize spectra")
    p.add_argument("--spectra", metavar="CSV", help="raw spectra: source_id,b0..b399")
    p.add_argument("--events", metavar="CSV", help="photon events: source_id,energy_kev")
    p.add_argument("--exposures", metavar="CSV", help="exposure manifest: source_id,exposure_s")
    p.add_argument("--bins", type=int, default=400)
    p.add_argument("--log-bins", action="store_true", help="logarithmic energy bins")
    p.add_argument("--embed", action="store_true", help="also train the autoencoder and write spectral.xaln")
    p.add_argument("--bottleneck", type=int, default=64)
    p.add_argument("--ae-epochs", type=int, default=200)

    p = add("train", "train one alignment model")
    _data_flags(p)

    p = add("grid-search", "train the configured hyperparameter grid")
    _data_flags(p)

    p = add("tune-temp", "select the InfoNCE temperature on the calibration split")
    _data_flags(p)
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--retrain-per-tau", action="store_true")

    p = add("eval-retrieval", "spectrum-to-text retrieval metrics")
    _data_flags(p)
    p.add_argument("--checkpoint", action="append", help="repeat to evaluate an ensemble")
    p.add_argument("--split", default="test")

    p = add("eval-regression", "k-NN regression of physical variables and MoE selection")
    _data_flags(p)
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--moe-metric", choices=("pearson", "mae"))
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--top-n", type=int, default=10)

    p = add("detect-outliers", "isolation-forest scores on the aligned space")
    _data_flags(p)
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--classes", metavar="CSV", help="source_id,class labels")
    p.add_argument("--representation")
    p.add_argument("--split")
    p.add_argument("--q", type=float)

    p = add("export-latents", "write pre/post-alignment representations as XALN files")
    _data_flags(p)
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--split", default="all")

    add("verify-manifest", "check recorded digests in --out against the files on disk")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        COMMANDS[args.command](ctx)
        if args.command != "verify-manifest":
            ctx.finish(args.command)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (FormatError, ShapeError, NumericError, ValidationError, InsufficientDataError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        logger.error("input not found: %s", exc.filename)
        return EXIT_INPUT
    except TrainingError as exc:
        logger.error("training failed: %s", exc)
        return EXIT_INTERNAL
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
