"""``emns`` command line: generate, fit, evaluate, ablate, importance.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import CliConfig, ConfigError, load_config
from .core import (
    Dataset, DatasetError, SplitSpec, feature_names, load_dataset, save_dataset,
    split_by_current_vector, validate_dataset,
)
from .evaluation import (
    ABLATION_FRACTIONS, UndefinedMetricError, ablation_csv, mape_per_location, overall_csv,
    overall_table, predict_all, run_ablation, spatial_csv, stratified_csv, stratify_by_current,
    summary_json,
)
from .forest import ForestModel, GridSearchSpec, fit_forest, grid_search
from .lmem import LmemFitError, LmemModel, MultipoleBasis, fit as fit_lmem
from .net import MlpModel, TrainingDiverged, train as train_mlp
from .synth import collect_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(artifact) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + ".manifest.json")


def _check_writable(paths, overwrite: bool):
    for p in paths:
        p = Path(p)
        if p.exists() and not overwrite:
            raise FileExistsError(f"{p} exists; pass --overwrite to replace it")
        p.parent.mkdir(parents=True, exist_ok=True)


def _write_manifest(artifact, args, cfg: CliConfig, seeds: dict, inputs, outputs, started):
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_hash": cfg.config_hash(),
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "version": __version__,
    }
    _manifest_path(artifact).write_text(json.dumps(doc, indent=1) + "\n")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("EMNS_THREADS", "1")))


def _load_validated(path, cfg: CliConfig) -> Dataset:
    d = load_dataset(path)
    rep = validate_dataset(d, max_current=cfg.synth.max_current, power_limit=cfg.synth.power_limit,
                           resistance_per_coil=cfg.synth.resistance_per_coil)
    hard = [f for f in rep.failures() if f != "field_range"]
    if hard:
        raise DatasetError(f"{path} failed validation: " + ", ".join(
            f"{f} ({rep.checks[f][1]})" for f in hard))
    return d


def load_model(path):
    path = Path(path)
    if str(path).endswith(".gz"):
        return ForestModel.load(path)
    doc = json.loads(path.read_text())
    fmt = doc.get("format")
    if fmt == "emns.lmem":
        return LmemModel.from_dict(doc)
    if fmt == "emns.forest":
        return ForestModel.from_dict(doc)
    if fmt == "emns.mlp":
        return MlpModel.from_dict(doc)
    raise DatasetError(f"{path}: unknown model format {fmt!r}")


def _model_kind(model) -> str:
    return {LmemModel: "lmem", ForestModel: "rf", MlpModel: "ann"}[type(model)]


def _check_compatible(model, d: Dataset, path):
    if isinstance(model, LmemModel):
        width = model.basis.n_coils
        if width != d.n_coils:
            raise DatasetError(f"{path}: model has {width} coils, dataset has {d.n_coils}")
    else:
        width = model.scaler.minimum.shape[0]
        if width != 3 + d.n_coils:
            raise DatasetError(f"{path}: scaler expects {width} features, dataset provides {3 + d.n_coils}")


def _training_record(d: Dataset, split: SplitSpec, train: Dataset, out) -> dict:
    return {
        "dataset_sha256": d.content_hash(),
        "split_seed": split.seed,
        "test_fraction": split.test_fraction,
        "n_train_current_vectors": train.n_current_vectors,
        "feature_order": feature_names(d.n_coils),
        "manifest": _manifest_path(out).name,
    }


def _parse_grid(text: str) -> dict:
    grid = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        k, v = part.split("=", 1)
        grid[k.strip()] = [None if t.strip().lower() == "none" else int(t) for t in v.split(",")]
    return grid


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: CliConfig) -> int:
    cfg = cfg.with_overrides("synth", seed=args.seed)
    out = Path(args.out)
    _check_writable([out], args.overwrite)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    d = collect_dataset(args.n_currents, cfg.synth, all_sensors=args.all_sensors)
    save_dataset(d, out, {"manifest": _manifest_path(out).name})
    rep = validate_dataset(d, max_current=cfg.synth.max_current, power_limit=cfg.synth.power_limit,
                           resistance_per_coil=cfg.synth.resistance_per_coil)
    print(f"wrote {len(d)} samples ({d.n_current_vectors} current vectors x "
          f"{len(d.sensor_positions)} sensors) to {out}")
    print(f"acceptance rate: {float(d.meta['acceptance_rate']):.4f}")
    print(f"{'column':<8}{'min':>12}{'max':>12}  unit")
    for name, lo, hi, unit in rep.table_rows():
        print(f"{name:<8}{lo:>12.2f}{hi:>12.2f}  {unit}")
    for name in rep.failures():
        print(f"warning: check '{name}' failed: {rep.checks[name][1]}", file=sys.stderr)
    _write_manifest(out, args, cfg, {"synth": cfg.synth.seed}, [], [out, out.with_name(out.name + ".meta")], started)
    return EXIT_OK


def cmd_fit(args, cfg: CliConfig) -> int:
    cfg = cfg.with_overrides("split", seed=args.split_seed, test_fraction=args.test_fraction)
    out = Path(args.out)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    d = _load_validated(args.data, cfg)
    train, _ = split_by_current_vector(d, cfg.split)
    record = _training_record(d, cfg.split, train, out)
    outputs = [out]
    seeds = {"split": cfg.split.seed}

    if args.model == "lmem":
        cfg = cfg.with_overrides("lmem", current_cap=args.current_cap, max_degree=args.max_degree)
        _check_writable([out], args.overwrite)
        basis = MultipoleBasis(cfg.synth.centers, cfg.lmem.max_degree, cfg.lmem.reference_radius)
        model = fit_lmem(train, basis, cfg.lmem.current_cap)
        model = LmemModel(model.basis, model.coefficients, model.diagnostics, record)
        model.save(out)
        print(json.dumps(model.diagnostics, indent=1))

    elif args.model == "rf":
        cfg = cfg.with_overrides("rf", n_trees=args.n_trees, min_samples_split=args.min_samples_split,
                                 max_features=args.max_features, min_samples_leaf=args.min_samples_leaf,
                                 seed=args.seed)
        if args.max_depth is not None:
            depth = None if args.max_depth == "none" else args.max_depth
            cfg = dataclasses.replace(cfg, rf=dataclasses.replace(cfg.rf, max_depth=depth))
        hp = cfg.rf
        if args.grid_search:
            cv_path = Path(args.cv_table or str(out) + ".cv.csv")
            _check_writable([out, cv_path], args.overwrite)
            spec = GridSearchSpec(_parse_grid(args.grid), n_folds=args.folds, seed=hp.seed) if args.grid \
                else GridSearchSpec(n_folds=args.folds, seed=hp.seed)
            hp, table = grid_search(train, spec, _threads(args))
            keys = list(table[0])
            lines = [",".join(keys)] + [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                                                 for k in keys) for r in table]
            cv_path.write_text("\n".join(lines) + "\n")
            outputs.append(cv_path)
            print(f"grid search best: {hp}")
        else:
            _check_writable([out], args.overwrite)
        model = fit_forest(train, hp, _threads(args))
        model.training = {**model.training, **record}
        model.save(out)
        seeds["rf"] = hp.seed

    else:
        cfg = cfg.with_overrides("ann", max_epochs=args.epochs, batch_size=args.batch_size,
                                 patience=args.patience, learning_rate=args.learning_rate, seed=args.seed)
        hist_path = Path(str(out) + ".history.csv")
        _check_writable([out, hist_path], args.overwrite)
        model = train_mlp(train, cfg.arch, cfg.ann)
        model.training = {**model.training, **record}
        model.save(out)
        hist_path.write_text(model.history_csv())
        outputs.append(hist_path)
        seeds["ann"] = cfg.ann.seed
        print(f"best epoch {model.training['best_epoch']} of {model.training['epochs_run']}, "
              f"val MSE {model.training['best_val_mse']:.6g} T^2")

    _write_manifest(out, args, cfg, seeds, [Path(args.data)], outputs, started)
    print(f"wrote {out}")
    return EXIT_OK


def _evaluation_subset(d: Dataset, models: dict, subset: str, allow_train: bool) -> Dataset:
    h = d.content_hash()
    splits = {(m.training.get("split_seed"), m.training.get("test_fraction"))
              for m in models.values() if m.training.get("dataset_sha256") == h}
    if not splits:
        return d  # independent dataset: every sample is unseen
    if len(splits) > 1:
        raise DatasetError("models were trained on different splits of this dataset")
    seed, frac = splits.pop()
    train, test = split_by_current_vector(d, SplitSpec(seed, frac))
    if subset == "test":
        return test
    if not allow_train:
        raise UsageError(f"subset '{subset}' contains the models' training data; pass --allow-train-eval")
    return train if subset == "train" else d


def cmd_evaluate(args, cfg: CliConfig) -> int:
    if not args.models:
        raise UsageError("at least one model path is required")
    report_dir = Path(args.report_dir)
    outputs = [report_dir / n for n in ("overall.csv", "stratified.csv", "spatial.csv", "summary.json")]
    _check_writable(outputs, args.overwrite)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    d = _load_validated(args.data, cfg)
    models: dict = {}
    for path in args.models:
        m = load_model(path)
        _check_compatible(m, d, path)
        name = _model_kind(m)
        if name in models:
            name = Path(path).stem
        models[name] = m
    test = _evaluation_subset(d, models, args.subset, args.allow_train_eval)
    preds = predict_all(models, test)
    overall = overall_table(test, preds)
    strat = stratify_by_current(test, preds)
    spatial = None
    for name, p in preds.items():
        spatial = mape_per_location(test, p, report=spatial, name=name)
    outputs[0].write_text(overall_csv(overall))
    outputs[1].write_text(stratified_csv(strat))
    outputs[2].write_text(spatial_csv(spatial))
    outputs[3].write_text(summary_json(overall, strat, spatial))
    print(overall_csv(overall), end="")
    _write_manifest(report_dir / "overall.csv", args, cfg, {}, [Path(args.data), *map(Path, args.models)],
                    outputs, started)
    return EXIT_OK


def cmd_ablate(args, cfg: CliConfig) -> int:
    cfg = cfg.with_overrides("split", seed=args.split_seed, test_fraction=args.test_fraction)
    out = Path(args.out)
    _check_writable([out], args.overwrite)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else list(ABLATION_FRACTIONS)
    if args.include_full and 1.0 not in fractions:
        fractions.append(1.0)
    d = _load_validated(args.data, cfg)
    train, test = split_by_current_vector(d, cfg.split)
    threads = _threads(args)
    available = {
        "rf": lambda ds: fit_forest(ds, cfg.rf, threads),
        "ann": lambda ds: train_mlp(ds, cfg.arch, cfg.ann),
    }
    names = [m.strip() for m in args.models.split(",")]
    unknown = set(names) - set(available)
    if unknown:
        raise UsageError(f"unknown models for ablation: {sorted(unknown)}")
    rep = run_ablation(train, test, fractions, {n: available[n] for n in names}, seed=args.seed)
    out.write_text(ablation_csv(rep))
    print(ablation_csv(rep), end="")
    _write_manifest(out, args, cfg, {"split": cfg.split.seed, "subsets": args.seed, "rf": cfg.rf.seed,
                                     "ann": cfg.ann.seed}, [Path(args.data)], [out], started)
    return EXIT_OK


def cmd_importance(args, cfg: CliConfig) -> int:
    model = load_model(args.model)
    if not isinstance(model, ForestModel):
        raise UsageError("feature importances are only defined for random-forest models")
    names = feature_names(model.scaler.minimum.shape[0] - 3)
    order = np.argsort(-model.feature_importances, kind="stable")
    for k in order:
        print(f"{names[k]:<4} {model.feature_importances[k]:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------


def _depth(text: str):
    return "none" if text.strip().lower() == "none" else int(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emns", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key-value config file (synth./split./lmem./rf./ann. keys)")
    p.add_argument("--threads", type=int, help="worker threads (default: $EMNS_THREADS or 1)")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesise a dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-currents", type=int, default=3590)
    g.add_argument("--all-sensors", action="store_true", help="keep the dropped sensors")
    g.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="fit one model on the training split")
    f.add_argument("model", choices=["lmem", "rf", "ann"])
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--split-seed", type=int)
    f.add_argument("--test-fraction", type=float)
    f.add_argument("--seed", type=int, help="model seed (rf/ann)")
    f.add_argument("--current-cap", type=float, help="lmem: max coil current of fitting samples")
    f.add_argument("--max-degree", type=int, help="lmem: multipole degree")
    f.add_argument("--n-trees", type=int)
    f.add_argument("--max-depth", type=_depth, help="integer or 'none' for unlimited")
    f.add_argument("--min-samples-split", type=int)
    f.add_argument("--max-features", type=int)
    f.add_argument("--min-samples-leaf", type=int)
    f.add_argument("--grid-search", action="store_true", help="rf: select hyperparameters by k-fold CV")
    f.add_argument("--grid", help="rf: grid as 'n_trees=10,50;max_depth=10,20' (default: full grid)")
    f.add_argument("--folds", type=int, default=5)
    f.add_argument("--cv-table", help="rf: CV table CSV path (default <out>.cv.csv)")
    f.add_argument("--epochs", type=int)
    f.add_argument("--batch-size", type=int)
    f.add_argument("--patience", type=int)
    f.add_argument("--learning-rate", type=float)

    e = sub.add_parser("evaluate", help="metrics tables for one or more models")
    e.add_argument("models", nargs="*")
    e.add_argument("--data", required=True)
    e.add_argument("--report-dir", required=True)
    e.add_argument("--subset", choices=["test", "train", "all"], default="test")
    e.add_argument("--allow-train-eval", action="store_true")

    a = sub.add_parser("ablate", help="training-set size study")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--fractions", help="comma-separated, default 0.1,...,0.9")
    a.add_argument("--include-full", action="store_true", help="add the fraction 1.0 reference row")
    a.add_argument("--models", default="rf,ann")
    a.add_argument("--split-seed", type=int)
    a.add_argument("--test-fraction", type=float)
    a.add_argument("--seed", type=int, default=0, help="subset sampling seed")

    i = sub.add_parser("importance", help="ranked random-forest feature importances")
    i.add_argument("model")
    return p


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "importance": cmd_importance}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"emns {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"emns {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ConfigError, LmemFitError, UndefinedMetricError, ValueError, KeyError) as exc:
        print(f"emns {args.command}: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"emns {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
