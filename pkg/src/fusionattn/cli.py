"""fusionattn command line: synth, run, compare, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .data import DataError, load_manifest, model_dims, synth_generate
from .ftns import FormatError
from .models import ConfigError, config_for, parse_key_values, parse_modalities
from .results import ResultsWriter, group_confusions, read_results
from .stats import COMPARISON_HEADER, comparison_rows, render_outputs
from .training import TrainConfig, config_label, run_grid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
SEED_ENV = "FUSIONATTN_SEED"

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# built-in defaults for `run`; a --config file overrides these, flags override both
RUN_DEFAULTS = {
    "models": "self,cross",
    "modalities": "tva",
    "folds": 5,
    "repeats": 10,
    "jobs": 1,
    "max_epochs": 200,
    "learning_rate": 0.001,
    "batch_size": 32,
    "gru_hidden": 60,
    "heads": 6,
    "classifier_hidden": 60,
    "dropout": 0.1,
}
_RUN_TYPES = {k: type(v) for k, v in RUN_DEFAULTS.items()} | {"seed": int, "data": str, "out": str}


def _base_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def _resolve_run_options(args) -> dict:
    opts = dict(RUN_DEFAULTS)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        for k, v in parse_key_values(text).items():
            key = k.replace("-", "_")
            if key not in _RUN_TYPES:
                raise UsageError(f"{args.config}: unknown key {k!r}")
            try:
                opts[key] = _RUN_TYPES[key](v)
            except ValueError:
                raise UsageError(f"{args.config}: bad value for {k}: {v!r}") from None
    for key in _RUN_TYPES:
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    opts["seed"] = _base_seed(opts.get("seed"))
    for key in ("folds", "repeats", "jobs", "max_epochs", "batch_size"):
        if opts[key] < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 1")
    if opts["folds"] < 2:
        raise UsageError("--folds must be >= 2")
    if not opts.get("data") or not opts.get("out"):
        raise UsageError("run needs --data and --out (flag or config file)")
    return opts


def _manifest_path(p: str) -> Path:
    path = Path(p)
    return path / "manifest.csv" if path.is_dir() else path


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.separation < 0:
        raise UsageError(f"--separation must be >= 0, got {args.separation}")
    if args.n_per_class < 1:
        raise UsageError("--n-per-class must be >= 1")
    seed = _base_seed(args.seed)
    m = synth_generate(args.out, args.n_per_class, args.separation, seed, schema=args.schema)
    print(f"wrote {len(m.records)} utterances x {len(m.modalities)} modalities to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    opts = _resolve_run_options(args)
    manifest = load_manifest(_manifest_path(opts["data"]))
    dims = model_dims(manifest.schema)
    try:
        modalities = parse_modalities(opts["modalities"])
        missing = [m for m in modalities if m not in manifest.schema]
        if missing:
            raise UsageError(f"dataset has no {', '.join(missing)} features")
        families = [f.strip() for f in opts["models"].split(",") if f.strip()]
        if not families:
            raise UsageError("--models is empty")
        configs = [
            config_for(
                f, modalities, dims,
                gru_hidden=opts["gru_hidden"], heads=opts["heads"],
                classifier_hidden=opts["classifier_hidden"], dropout=opts["dropout"],
            )
            for f in families
        ]
        train_cfg = TrainConfig(learning_rate=opts["learning_rate"], batch_size=opts["batch_size"], max_epochs=opts["max_epochs"])
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    out = Path(opts["out"])
    writer = ResultsWriter(out / "results.csv")
    done = writer.completed()
    labels = {id(c): config_label(c) for c in configs}
    total = len(configs) * opts["folds"] * opts["repeats"]
    print(f"{total} runs planned, {len(done)} already in {writer.path}")

    def on_result(r):
        writer.append(r)
        print(f"{r.config_name} fold={r.fold} seed={r.seed} epochs={r.epochs} wa={r.test_wa:.4f} uwa={r.test_uwa:.4f}", flush=True)

    run_grid(
        configs, manifest,
        folds=opts["folds"], seeds_per_fold=opts["repeats"], base_seed=opts["seed"],
        train_cfg=train_cfg, jobs=opts["jobs"],
        skip=lambda job: (labels[id(job.config)], job.fold, job.seed) in done,
        on_result=on_result,
        checkpoint_dir=None if args.no_checkpoints else out / "checkpoints",
    )
    wanted = set(labels.values())
    results = [r for r in read_results(writer.path) if r.config_name in wanted]
    render_outputs(results, out, group_confusions(results), plot=args.plot)
    print(f"summary written to {out / 'summary.csv'}")
    return EXIT_OK


def _pick_config(results, requested: str | None, which: str, path: str) -> str:
    names = sorted({r.config_name for r in results})
    if requested is None:
        if len(names) == 1:
            return names[0]
        raise UsageError(f"{path} holds several configs; pass --config-{which} (available: {', '.join(names)})")
    if requested not in names:
        raise UsageError(f"config {requested!r} not in {path}; available: {', '.join(names) or 'none'}")
    return requested


def cmd_compare(args) -> int:
    runs_a = read_results(args.results_a, with_confusion=False)
    runs_b = read_results(args.results_b, with_confusion=False)
    name_a = _pick_config(runs_a, args.config_a, "a", args.results_a)
    name_b = _pick_config(runs_b, args.config_b, "b", args.results_b)
    sel_a = [r for r in runs_a if r.config_name == name_a]
    sel_b = [r for r in runs_b if r.config_name == name_b]
    try:
        rows = comparison_rows(name_a, sel_a, name_b, sel_b)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECK_NAMES, run_checks

    if args.tolerance <= 0:
        raise UsageError("--tolerance must be positive")
    only = args.only.split(",") if args.only else None
    if only:
        unknown = [n for n in only if n not in CHECK_NAMES]
        if unknown:
            raise UsageError(f"unknown checks {unknown}; available: {', '.join(CHECK_NAMES)}")
    results = run_checks(args.tolerance, args.step, _base_seed(args.seed), only)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusionattn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--n-per-class", type=int, default=40)
    s.add_argument("--separation", type=float, default=5.0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--schema", choices=["desk", "paper"], default="desk")
    s.set_defaults(fn=cmd_synth)

    r = sub.add_parser("run", help="train the fold x repeat grid")
    r.add_argument("--data", help="manifest.csv or the directory holding it")
    r.add_argument("--models", help="comma list of self, cross, self-nosp, cross-nosp, cross+self")
    r.add_argument("--modalities", help="letters from t, v, a (e.g. tva, ta)")
    r.add_argument("--folds", type=int)
    r.add_argument("--repeats", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int)
    r.add_argument("--out")
    r.add_argument("--config", help="key=value file; flags take precedence")
    r.add_argument("--max-epochs", type=int)
    r.add_argument("--learning-rate", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--gru-hidden", type=int)
    r.add_argument("--heads", type=int)
    r.add_argument("--classifier-hidden", type=int)
    r.add_argument("--dropout", type=float)
    r.add_argument("--no-checkpoints", action="store_true")
    r.add_argument("--plot", action="store_true", help="also write confusion PNGs (needs matplotlib)")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="Welch t-test between two configs")
    c.add_argument("results_a")
    c.add_argument("results_b")
    c.add_argument("--config-a")
    c.add_argument("--config-b")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--seed", type=int)
    g.add_argument("--only", help="comma list of check names")
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"fusionattn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, OSError) as exc:
        print(f"fusionattn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
