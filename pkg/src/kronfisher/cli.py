"""Command-line surface: train | compare | diagnose | landscape.

JSON config in, CSV/JSON artifacts out; figures are rendered next to the
delimited outputs unless ``render_figures`` is false. Exit codes: 0 success,
2 config violation, 3 dataset/snapshot error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data_io, diagnostics
from .config import load_config, optimizer_from_spec, validate_config
from .errors import DivergenceError, FormatError, KronfisherError, ValidationError
from .runner import (
    ensure_out_dir, load_snapshot_json, make_schedule, save_params_json,
    save_snapshot_json, train_run, write_metrics_csv,
)
from .tensor import SeededRng, dft2_magnitude

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

log = logging.getLogger("kronfisher")


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("KRONFISHER_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_dataset(cfg: dict, out_dir):
    spec = cfg["dataset"]
    kind = spec["kind"]
    if kind == "synthetic_digits":
        paths = data_io.write_synthetic_digits(
            out_dir / "data", seed=spec.get("data_seed", 9),
            n_train=spec.get("n_train", 2000), n_test=spec.get("n_test", 500))
        train = data_io.load_mnist_idx(paths["train_images"], paths["train_labels"],
                                       spec.get("limit"))
        test = data_io.load_mnist_idx(paths["test_images"], paths["test_labels"],
                                      spec.get("test_limit"))
        return train, test
    if kind == "mnist_idx":
        train = data_io.load_mnist_idx(spec["images"], spec["labels"], spec.get("limit"))
        test = None
        if "test_images" in spec:
            test = data_io.load_mnist_idx(spec["test_images"], spec["test_labels"],
                                          spec.get("test_limit"))
        return train, test
    if kind == "csv":
        ds = data_io.load_csv(spec["path"], spec.get("label_column", -1))
        if spec.get("pca2"):
            projected, _, _ = diagnostics.pca2(ds.features)
            ds = data_io.Dataset(projected, ds.labels, ds.class_count, ds.name + "_pca2")
        return ds, None
    raise ValidationError(f"unknown dataset kind {kind!r}")


def _load_dataset_or_exit(cfg: dict, out_dir):
    """Load the configured dataset; any failure is a dataset error (exit 3)."""
    try:
        return _load_dataset(cfg, out_dir)
    except (FormatError, ValidationError, OSError) as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
        return None


def _run_from_config(cfg: dict, opt_spec: dict | None, datasets, tracker=None, on_epoch_end=None):
    train_ds, test_ds = datasets
    opt = optimizer_from_spec(opt_spec if opt_spec is not None else cfg.get("optimizer"))
    schedule = make_schedule(cfg.get("schedule"), cfg["epochs"])
    return train_run(
        cfg["model"]["layers"], opt, train_ds, test_ds,
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        schedule=schedule, workers=cfg.get("workers", 1),
        shard_mode=cfg.get("shard_mode", "strict"),
        tracker=tracker, record_timings=cfg.get("record_timings", False),
        log_every=cfg.get("log_every", 0), snapshot_every=cfg.get("snapshot_every", 0),
        on_epoch_end=on_epoch_end,
    ), opt


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.workers is not None:
        cfg["workers"] = args.workers
    if args.out is not None:
        cfg["out_dir"] = args.out
    if getattr(args, "optimizer", None):
        cfg.setdefault("optimizer", {"name": args.optimizer})["name"] = args.optimizer
    return validate_config(cfg)


def cmd_train(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except (ValidationError, OSError) as exc:
        log.error("config rejected: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = ensure_out_dir(cfg.get("out_dir", "runs/train"))
    fim_rows = []

    def _epoch_hook(epoch, trainer):
        hist_cfg = cfg.get("fim_hist")
        if hist_cfg and trainer.use_kf and (epoch + 1) % hist_cfg["every"] == 0:
            from .kfactor import build_efims

            efims = build_efims(trainer.kf_state, trainer.opt.lam, trainer.net)
            hists = diagnostics.fim_histogram(efims, hist_cfg["bins"], trainer.opt.lam)
            for lid, (counts, edges) in hists.items():
                for b in range(len(counts)):
                    fim_rows.append((trainer.global_step, lid, edges[b], edges[b + 1], int(counts[b])))

    datasets = _load_dataset_or_exit(cfg, out_dir)
    if datasets is None:
        return EXIT_DATA
    try:
        result, _ = _run_from_config(cfg, None, datasets, on_epoch_end=_epoch_hook)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    write_metrics_csv(result.rows, out_dir / "metrics.csv")
    save_params_json(result.final_params, out_dir / "final_model.json")
    for epoch, snap in result.kf_snapshots:
        save_snapshot_json(snap, out_dir / f"kf_snapshot_epoch{epoch}.json")
    if fim_rows:
        with open(out_dir / "fim_hist.csv", "w") as fh:
            fh.write("step,layer,bin_lo,bin_hi,count\n")
            for row in fim_rows:
                fh.write(f"{row[0]},{row[1]},{row[2]!r},{row[3]!r},{row[4]}\n")
    if cfg.get("render_figures", True) and result.rows:
        from . import plots

        plots.render_training_curves(result.rows, out_dir / "training_curves.png")
    log.info("train finished: best_test_acc=%.4f", result.best_test_acc)
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        opt_specs = cfg.get("optimizers") or []
        if len(opt_specs) < 2:
            raise ValidationError("compare needs at least 2 optimizers")
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = ensure_out_dir(cfg.get("out_dir", "runs/compare"))
    datasets = _load_dataset_or_exit(cfg, out_dir)
    if datasets is None:
        return EXIT_DATA
    results, failed = [], False
    for spec in opt_specs:
        try:
            result, opt = _run_from_config(cfg, spec, datasets)
            results.append({
                "optimizer": opt.name,
                "best_test_accuracy": result.best_test_acc,
                "final_loss": result.final_loss,
                "mean_step_time_ms": result.mean_step_ms,
            })
        except KronfisherError as exc:
            log.error("sub-run %s failed: %s", spec.get("name"), exc)
            print(f"error: sub-run {spec.get('name')}: {exc}", file=sys.stderr)
            failed = True
    with open(out_dir / "comparison.csv", "w") as fh:
        fh.write("optimizer,best_test_accuracy,final_loss,mean_step_time_ms\n")
        for r in results:
            fh.write(f"{r['optimizer']},{r['best_test_accuracy']!r},"
                     f"{r['final_loss']!r},{r['mean_step_time_ms']!r}\n")
    if cfg.get("render_figures", True) and results:
        from . import plots

        plots.render_comparison(results, out_dir / "comparison.png")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_diagnose(args) -> int:
    out_dir = ensure_out_dir(args.out or "runs/diagnose")
    try:
        snapshot = load_snapshot_json(args.snapshot)
    except (ValidationError, OSError, json.JSONDecodeError) as exc:
        print(f"error: snapshot: {exc}", file=sys.stderr)
        return EXIT_DATA
    rng = SeededRng(args.seed)
    gersh, snrs, figures = {}, {}, {}
    for rec in snapshot:
        lid = rec["layer_id"]
        gersh[str(lid)] = {}
        snrs[str(lid)] = {}
        for factor_name, diag in (("H", rec["H_diag"]), ("S", rec["S_diag"])):
            m = np.diag(np.asarray(diag, dtype=np.float64))
            perturbed = diagnostics.perturb_offdiag(m, args.sigma, rng)
            report = diagnostics.gershgorin_report(m, perturbed)
            gersh[str(lid)][factor_name] = report.to_json()
            snrs[str(lid)][factor_name] = report.to_json()["snr_db"]
            figures[f"layer{lid}/{factor_name}"] = report
            if args.dft:
                mag = dft2_magnitude(perturbed)
                np.savetxt(out_dir / f"dft_layer{lid}_{factor_name}.csv", mag, delimiter=",")
    with open(out_dir / "gershgorin.json", "w") as fh:
        json.dump(gersh, fh, indent=1)
    with open(out_dir / "snr.json", "w") as fh:
        json.dump({"sigma": args.sigma, "seed": args.seed, "snr_db": snrs}, fh, indent=1)
    if not args.no_figures:
        from . import plots

        plots.render_gershgorin(figures, out_dir / "gershgorin.png")
    return EXIT_OK


def cmd_landscape(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        tracker_cfg = cfg.get("tracker")
        if not tracker_cfg or len(tracker_cfg["coords"]) != 2:
            raise ValidationError("landscape requires a tracker with exactly 2 coordinates")
        tracker = (tracker_cfg["layer_id"], [tuple(c) for c in tracker_cfg["coords"]])
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = ensure_out_dir(cfg.get("out_dir", "runs/landscape"))
    datasets = _load_dataset_or_exit(cfg, out_dir)
    if datasets is None:
        return EXIT_DATA
    try:
        result, _ = _run_from_config(cfg, None, datasets, tracker=tracker)
        export = diagnostics.landscape_export(result.trajectory, result.trajectory_losses)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with open(out_dir / "landscape.json", "w") as fh:
        json.dump(export.to_json(), fh)
    if cfg.get("render_figures", True):
        from . import plots

        plots.render_landscape(export, out_dir / "landscape.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kronfisher",
                                     description="Fisher-preconditioned training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--out", default=None)

    p_train = sub.add_parser("train", help="train one model/optimizer pair")
    add_common(p_train)
    p_train.add_argument("--optimizer", default=None)
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare", help="train several optimizers on one setup")
    add_common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_diag = sub.add_parser("diagnose", help="disc/SNR reports from a factor snapshot")
    p_diag.add_argument("--snapshot", required=True)
    p_diag.add_argument("--sigma", type=float, default=1e-3)
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--out", default=None)
    p_diag.add_argument("--dft", action="store_true", help="also write DFT magnitude CSVs")
    p_diag.add_argument("--no-figures", action="store_true")
    p_diag.set_defaults(func=cmd_diagnose)

    p_land = sub.add_parser("landscape", help="2-weight trajectory export")
    add_common(p_land)
    p_land.set_defaults(func=cmd_landscape)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KronfisherError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
