"""Command-line entry point: ``infocons {gen-data,train,train-explainer,explain,eval}``.

Every run writes ``run_manifest.txt`` into its output directory with the
fully resolved options; passing that file back through ``--config`` repeats
the run. Flags given on the command line override config values, and the
``INFOCONS_SEED`` environment variable overrides ``--seed``.

Exit codes: 0 success, 2 usage error, 3 data or model error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .bottleneck import OBJECTIVES, ExplainerConfig, load_explainer, save_explainer, train_explainer
from .evaluation import (
    DEFAULT_BUDGETS, METHODS, MODES, compute_maps, drop_attack, efficiency_report, make_scorer,
    score_variance, subset_hierarchy, write_attack_reports, write_efficiency_csv, write_rows_csv,
)
from .maps import ScoreMap
from .pcmodel import KINDS, PointClassifier, TrainConfig, load_model, save_model, train_classifier
from .plotting import plot_attack_curves, plot_score_map, plot_series
from .shapes import DEFAULT_CLASSES, PointCloud, load_dataset, load_xyz, make_dataset, save_dataset, save_xyz
from .textio import read_kv, write_kv

log = logging.getLogger("infocons")

MANIFEST = "run_manifest.txt"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _csv_list(kind):
    def parse(text):
        items = [t.strip() for t in str(text).split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("expected a comma-separated list")
        try:
            return [kind(t) for t in items]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


# -- parser ----------------------------------------------------------------------

REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "train-explainer": ("data", "model", "out"),
    "explain": ("model", "out"),
    "eval": ("data", "model", "out"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="infocons", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"infocons {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; command-line flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory")
        p.add_argument("-q", "--quiet", action="store_true")
        return p

    p = command("gen-data", "generate a synthetic shape dataset")
    p.add_argument("--classes", type=_csv_list(str), default=list(DEFAULT_CLASSES))
    p.add_argument("--per-class", type=int, default=500, help="training clouds per class")
    p.add_argument("--per-class-test", type=int, default=100)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    p = command("train", "train a point-cloud classifier")
    p.add_argument("--data")
    p.add_argument("--arch", choices=KINDS, default="pointnet-lite")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--tap-layer", type=int, default=TrainConfig.tap_layer)

    p = command("train-explainer", "fit attention bottlenecks against a frozen classifier")
    p.add_argument("--data")
    p.add_argument("--model", help="classifier checkpoint")
    p.add_argument("--beta", type=_csv_list(float), default=[ExplainerConfig.beta], help="comma list sweeps beta")
    p.add_argument("--dr", type=int, default=ExplainerConfig.d_r)
    p.add_argument("--tau", type=float, default=ExplainerConfig.tau)
    p.add_argument("--k", type=int, default=ExplainerConfig.k)
    p.add_argument("--objective", choices=OBJECTIVES, default=ExplainerConfig.objective)
    p.add_argument("--tap-layer", type=int, help="defaults to the classifier's tap layer")
    p.add_argument("--epochs", type=int, default=ExplainerConfig.epochs)
    p.add_argument("--batch-size", type=int, default=ExplainerConfig.batch_size)
    p.add_argument("--lr", type=float, default=ExplainerConfig.lr)
    p.add_argument("--mask-bias", type=float, default=ExplainerConfig.mask_bias)
    p.add_argument("--clouds-per-epoch", type=int, help="random training subset per epoch (default: all)")

    p = command("explain", "score the points of one cloud")
    p.add_argument("--model")
    p.add_argument("--explainer", help="explainer checkpoint (infocons methods)")
    p.add_argument("--method", default="infocons")
    p.add_argument("--data", help="dataset directory; pick a cloud with --split/--index")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--input", help="a single .xyz file instead of --data")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--drop-per-iter", type=int, default=10)
    p.add_argument("--lime-queries", type=int, default=100)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--top", type=int, help="size of the circled critical subset (default: min(64, N/4))")

    p = command("eval", "drop attacks, subset hierarchy, score variance and efficiency")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--explainer", type=_csv_list(str), help="one or more explainer checkpoints")
    p.add_argument("--methods", type=_csv_list(str), help="default: infocons,cp++,random (cp++,random without --explainer)")
    p.add_argument("--modes", type=_csv_list(str), default=list(MODES))
    p.add_argument("--budgets", type=_csv_list(int),
                   help="default: 4,8,16,32,64, keeping those below the cloud size")
    p.add_argument("--k", type=int, default=4, help="groups in the score hierarchy")
    p.add_argument("--limit", type=int, help="evaluate only the first N test clouds")
    p.add_argument("--efficiency-clouds", type=int, default=10)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--drop-per-iter", type=int, default=10)
    p.add_argument("--lime-queries", type=int, default=100)
    p.add_argument("--alpha", type=float, default=1.0)
    return parser, sub.choices


def _from_config(subparser, path, command):
    try:
        items = read_kv(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in items.items():
        dest = key.replace("-", "_")
        if dest == "command":
            if raw != command:
                raise UsageError(f"config {path} is for command {raw!r}, not {command!r}")
            continue
        if dest in ("config", "version"):
            continue
        if dest not in actions:
            raise UsageError(f"config {path}: unknown option {key!r}")
        action = actions[dest]
        if raw == "":
            defaults[dest] = None
        elif action.nargs == 0:
            defaults[dest] = raw.lower() in ("true", "1", "yes")
        elif action.type is not None:
            try:
                defaults[dest] = action.type(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config {path}: bad value for {key}: {exc}") from None
        else:
            defaults[dest] = raw
        if action.choices is not None and defaults[dest] not in action.choices:
            raise UsageError(f"config {path}: {key} must be one of {list(action.choices)}")
    return defaults


def parse_args(argv=None):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = subparsers[args.command]
        sub.set_defaults(**_from_config(sub, args.config, args.command))
        args = parser.parse_args(argv)
    env = os.environ.get("INFOCONS_SEED")
    if env is not None:
        try:
            args.seed = int(env)
        except ValueError:
            raise UsageError(f"INFOCONS_SEED must be an integer, got {env!r}") from None
    missing = [f"--{name}" for name in REQUIRED[args.command] if getattr(args, name, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")
    return args


def write_manifest(out, args):
    items = {"command": args.command}
    items.update((k, v) for k, v in sorted(vars(args).items()) if k not in ("command", "config", "quiet"))
    write_kv(Path(out) / MANIFEST, items)


# -- helpers ---------------------------------------------------------------------

def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path):
    root = Path(path)
    if not (root / "manifest.txt").is_file():
        raise DataError(f"{root} is not a dataset directory (no manifest.txt)")
    try:
        return load_dataset(root)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset {root}: {exc}") from None


def _load_model(path):
    if not Path(path).is_file():
        raise DataError(f"model checkpoint {path} not found")
    try:
        return PointClassifier(load_model(path))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from None


def _load_explainer(path, model):
    if not Path(path).is_file():
        raise DataError(f"explainer checkpoint {path} not found")
    try:
        theta = load_explainer(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load explainer {path}: {exc}") from None
    if theta.d != model.params.layer_dim(theta.tap_layer):
        raise DataError(f"explainer {path} expects {theta.d} channels at layer {theta.tap_layer}, "
                        f"model has {model.params.layer_dim(theta.tap_layer)}")
    return theta


def _check_method(method):
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")


def _beta_tag(beta):
    return f"{beta:g}"


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} exists and is not empty; pass --force to overwrite")
        for split in ("train", "test"):
            shutil.rmtree(out / split, ignore_errors=True)
    if args.points < 1 or args.per_class < 0 or args.per_class_test < 0:
        raise UsageError("--points must be positive and per-class counts non-negative")
    try:
        ds = make_dataset(args.classes, args.per_class, args.per_class_test, args.points, args.jitter, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_manifest(out, args)
    log.info("wrote %d train / %d test clouds to %s", len(ds.train_labels), len(ds.test_labels), out)


def cmd_train(args):
    ds = _load_data(args.data)
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, "adam", args.seed, args.arch, args.tap_layer)
    out = _out_dir(args)
    params, history = train_classifier(
        ds, cfg, log=lambda r: log.info("epoch %d loss=%.4f train_acc=%.4f test_acc=%.4f",
                                         r["epoch"], r["loss"], r["train_acc"], r["test_acc"]))
    save_model(out / "model.ckpt", params, {"dataset_seed": ds.seed, "epochs": args.epochs})
    write_rows_csv(out / "train_log.csv", ["epoch", "loss", "train_acc", "test_acc"],
                   [[r["epoch"], r["loss"], r["train_acc"], r["test_acc"]] for r in history])
    plot_series([r["epoch"] for r in history], [r["loss"] for r in history], out / "train_loss.svg",
                "epoch", "cross-entropy", title="classifier training")
    write_manifest(out, args)
    log.info("test accuracy %.4f", history[-1]["test_acc"])


def cmd_train_explainer(args):
    model = _load_model(args.model)
    ds = _load_data(args.data)
    out = _out_dir(args)
    single = len(args.beta) == 1
    for beta in args.beta:
        cfg = ExplainerConfig(beta=beta, d_r=args.dr, tau=args.tau, k=args.k, objective=args.objective,
                              tap_layer=args.tap_layer, epochs=args.epochs, batch_size=args.batch_size,
                              lr=args.lr, seed=args.seed, clouds_per_epoch=args.clouds_per_epoch,
                              mask_bias=args.mask_bias)
        theta, history = train_explainer(model, ds, cfg, log_fn=log.info)
        suffix = "" if single else f"_beta={_beta_tag(beta)}"
        save_explainer(out / f"explainer{suffix}.ckpt", theta, {"model": args.model})
        write_rows_csv(out / f"loss{suffix}.csv", ["epoch", "loss", "ce", "info"],
                       [[r["epoch"], r["loss"], r["ce"], r["info"]] for r in history])
    write_manifest(out, args)


def _pick_cloud(args):
    if args.input:
        try:
            pc = load_xyz(args.input)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from None
        return PointCloud(pc.points), Path(args.input).stem
    if not args.data:
        raise UsageError("explain needs --data or --input")
    ds = _load_data(args.data)
    clouds = ds.clouds(args.split)
    if not 0 <= args.index < len(clouds):
        raise UsageError(f"--index must lie in [0, {len(clouds)}) for the {args.split} split")
    return clouds[args.index], f"{args.split}_{args.index:05d}"


def cmd_explain(args):
    _check_method(args.method)
    model = _load_model(args.model)
    theta = None
    if args.method.startswith("infocons"):
        if not args.explainer:
            raise UsageError(f"method {args.method} needs --explainer")
        theta = _load_explainer(args.explainer, model)
    pc, name = _pick_cloud(args)
    if pc.label is None:
        pc = PointCloud(pc.points, label=int(model.predict(pc.points)[0]))
    top_b = min(64, max(pc.n // 4, 1)) if args.top is None else args.top
    if not 0 < top_b < pc.n:
        raise UsageError(f"--top must lie in (0, {pc.n})")
    try:
        scorer = make_scorer(args.method, model, theta, args.seed, args.iters, args.drop_per_iter,
                             args.lime_queries, args.alpha)
        sm = scorer(pc, 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    stem = f"{name}_{args.method}"
    if args.method == "cp":
        cp = np.unique(model.critical_indices(pc.points))
        (out / f"{stem}_indices.txt").write_text("".join(f"{i}\n" for i in cp))
        top = cp
    else:
        save_xyz(out / f"{stem}.xyz", pc, sm)
        top = sm.top(top_b)
    plot_score_map(pc.points, sm.scores, out / f"{stem}.svg", top, title=f"{args.method}: {name}")
    write_manifest(out, args)


def _sweep_label(theta):
    return f"infocons(beta={_beta_tag(theta.beta)},dr={theta.d_r})"


def cmd_eval(args):
    methods = args.methods or (["infocons", "cp++", "random"] if args.explainer else ["cp++", "random"])
    for m in methods:
        _check_method(m)
    modes = [m.lower() for m in args.modes]
    if any(m not in MODES for m in modes):
        raise UsageError(f"--modes must be drawn from {','.join(MODES)}")
    if args.k < 2:
        raise UsageError("--k must be at least 2")
    model = _load_model(args.model)
    thetas = [_load_explainer(p, model) for p in (args.explainer or [])]
    if any(m.startswith("infocons") for m in methods) and not thetas:
        raise UsageError("infocons methods need --explainer")
    ds = _load_data(args.data)
    clouds = ds.clouds("test")[:args.limit]
    if not clouds:
        raise DataError("no test clouds to evaluate")
    points = np.stack([pc.points for pc in clouds])
    labels = np.array([pc.label for pc in clouds])
    budgets = args.budgets or [b for b in DEFAULT_BUDGETS if b < ds.n_points]
    if any(b < 0 or b >= ds.n_points for b in budgets) or sorted(set(budgets)) != budgets:
        raise UsageError(f"--budgets must be strictly increasing and below {ds.n_points}")
    out = _out_dir(args)
    dataset_id = f"{Path(args.data).name}:seed={ds.seed}"

    def scorer_for(method, theta=None):
        return make_scorer(method, model, theta if theta is not None else (thetas[0] if thetas else None),
                           args.seed, args.iters, args.drop_per_iter, args.lime_queries, args.alpha)

    reports, hierarchy, variance, maps_by = [], [], [], {}
    for method in methods:
        log.info("scoring %d clouds with %s", len(clouds), method)
        maps = compute_maps(scorer_for(method), clouds)
        maps_by[method] = maps
        for mode in modes:
            reports.append(drop_attack(model, points, labels, maps, mode, budgets, method, dataset_id, args.seed))
        beta, d_r = (thetas[0].beta, thetas[0].d_r) if method.startswith("infocons") else ("", "")
        variance.append([method, beta, d_r, f"{score_variance(maps):.6e}"])
        hierarchy.extend(_hierarchy_rows(method, maps, args.k))
    for theta in thetas[1:] if "infocons" in methods else thetas:
        maps = compute_maps(scorer_for("infocons", theta), clouds)
        variance.append([_sweep_label(theta), theta.beta, theta.d_r, f"{score_variance(maps):.6e}"])

    meta = {"dataset": dataset_id, "clouds": len(clouds), "seed": args.seed, "budgets": ",".join(map(str, budgets))}
    write_attack_reports(out, reports, meta)
    plot_attack_curves(reports, out / "attack_curves.svg")
    write_rows_csv(out / "hierarchy.csv", ["scorer", "group", "mean_size", "mean_score"], hierarchy)
    write_rows_csv(out / "score_variance.csv", ["scorer", "beta", "d_r", "score_variance"], variance)
    sweep = [r for r in variance if r[0] == "infocons" or r[0].startswith("infocons(")]
    if len(sweep) > 1 and len({r[1] for r in sweep}) > 1:
        sweep.sort(key=lambda r: r[1])
        plot_series([r[1] for r in sweep], [float(r[3]) for r in sweep], out / "score_variance.svg", "beta",
                    "score variance", logx=all(r[1] > 0 for r in sweep), title="score variance sweep")

    eff = []
    for method in methods:
        params = sum(a.size for a in thetas[0].arrays()) if method.startswith("infocons") else 0
        eff.append(efficiency_report(method, scorer_for(method), model, clouds[:args.efficiency_clouds], params))
    write_efficiency_csv(out / "efficiency.csv", eff)
    write_manifest(out, args)
    for r in reports:
        log.info("%-12s %s %s", r.scorer, r.mode, " ".join(f"{a:.3f}" for a in r.accuracy))


def _hierarchy_rows(method, maps, k):
    sizes, means = np.zeros(k), np.zeros(k)
    counts = np.zeros(k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for m in maps:
            s = m.scores if isinstance(m, ScoreMap) else np.asarray(m)
            for j, g in enumerate(subset_hierarchy(s, k)):
                sizes[j] += g.size
                means[j] += s[g].mean()
                counts[j] += 1
    return [[method, j + 1, sizes[j] / len(maps), means[j] / counts[j]] for j in range(k) if counts[j]]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-explainer": cmd_train_explainer,
    "explain": cmd_explain,
    "eval": cmd_eval,
}


def main(argv=None):
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"infocons: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"infocons: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"infocons: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"infocons: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
