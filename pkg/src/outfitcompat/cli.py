"""Command-line interface.

Subcommands: ``synth``, ``featurize``, ``train``, ``gridsearch``, ``eval``
and ``recommend``.  Every flag can also come from a JSON ``--config`` file
whose keys are the flag names with dashes as underscores; explicit flags
win.  Commands that write files also write ``config.json`` (the fully
resolved settings) next to them, and rerunning with ``--config`` pointing
at that snapshot reproduces the outputs byte for byte.

Exit status: 0 on success, 1 on runtime or data errors, 2 on usage errors.
"""

import argparse
import json
import logging
import os
import sys
from functools import partial


from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DEFAULT_CATEGORIES, DatasetError, load_dataset, make_pairs, read_feature_csv,
                   synth_generate, write_feature_csv, write_synthetic)
from .evaluation import DEFAULT_KS, DistanceScorer, ModelScorer, build_pools, evaluate, recommend
from .model import CompatModel, ModelConfig
from .nn import ShapeError, sigmoid
from .objective import RegWeights
from .store import ItemStore
from .trainer import TrainConfig, TrainingError, fit, grid_search

log = logging.getLogger("outfitcompat")

CHECKPOINT_NAME = "checkpoint.ckpt"
DEFAULT_GRID = "0,1e-4,1e-3,1e-2,1e-1"
_INTERNAL = ("command", "config", "func")


class UsageError(Exception):
    pass


# -- argument helpers ------------------------------------------------------------


def _number_list(text, flag, cast=float, allow_empty=False):
    items = [t.strip() for t in str(text).split(",")] if str(text).strip() else []
    if not items and not allow_empty:
        raise UsageError(f"{flag}: empty list")
    out = []
    for k, t in enumerate(items, start=1):
        try:
            v = cast(t)
        except ValueError:
            raise UsageError(f"{flag}: item {k} ({t!r}) is not a valid number") from None
        if v < 0:
            raise UsageError(f"{flag}: item {k} ({t!r}) is negative")
        out.append(v)
    return out


def _add_common(p):
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int, default=0)


def _add_data(p):
    p.add_argument("--data", required=True, help="dataset directory or dataset.json")
    p.add_argument("--embeddings", help="CSV item_id,e_0,... for the precomputed encoder")


def _add_model_flags(p):
    p.add_argument("--encoder", choices=("conv", "precomputed"), default="conv")
    p.add_argument("--conv-filters", default="8,16,32,64")
    p.add_argument("--frozen-prefix", type=int, default=2)
    p.add_argument("--hidden", default="256,64")
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--merge", choices=("hadamard", "concat"), default="hadamard")
    p.add_argument("--no-color", action="store_true", help="drop the color-histogram block")
    p.add_argument("--readout-bias", action="store_true")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--cov-update-every", type=int, default=1)
    p.add_argument("--proximal-l1", action="store_true")
    p.add_argument("--neg-factor", type=int, default=6)


def build_parser():
    parser = argparse.ArgumentParser(prog="outfitcompat", description=__doc__.split("\n")[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--outfits", type=int, default=1000)
    p.add_argument("--categories", default=",".join(DEFAULT_CATEGORIES[:4]))
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="write color-histogram or HoG features as CSV")
    _add_common(p)
    _add_data(p)
    p.add_argument("--kind", choices=("color", "hog"), default="color")
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--orientations", type=int, default=8)
    p.add_argument("--cell", type=int, default=15)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="fit a compatibility model")
    _add_common(p)
    _add_data(p)
    _add_model_flags(p)
    _add_train_flags(p)
    for k in (1, 2, 3):
        p.add_argument(f"--lambda{k}", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="grid search over the regularization weights")
    _add_common(p)
    _add_data(p)
    _add_model_flags(p)
    _add_train_flags(p)
    for k in (1, 2, 3):
        p.add_argument(f"--grid-lambda{k}", default=DEFAULT_GRID)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="precision@K / Lift@K report")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", required=True, help="checkpoint file or training directory")
    p.add_argument("--k", default=",".join(str(k) for k in DEFAULT_KS))
    p.add_argument("--baselines", default="", help="comma list from m1,m2,m3,m4,m5")
    p.add_argument("--m2-model", help="checkpoint of the no-color variant (for m2)")
    p.add_argument("--m3-model", help="checkpoint of the concat-merge variant (for m3)")
    p.add_argument("--pool", choices=("all", "test"), default="all")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recommend", help="top-K items for one query")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--category", action="append", default=None,
                   help="target category (repeatable); default all other categories")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--pool", choices=("all", "test"), default="all")
    p.set_defaults(func=cmd_recommend)
    return parser


def _find_config(argv, commands):
    command = next((t for t in argv if t in commands), None)
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if tok.startswith("--config="):
            return command, tok.split("=", 1)[1]
    return command, None


def parse_args(argv):
    """Parse ``argv``, using values from ``--config`` as defaults."""
    parser = build_parser()
    subparsers = parser._subparsers._group_actions[0].choices
    command, config_path = _find_config(argv, subparsers)
    if command is not None and config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"--config {config_path}: {exc}")
        if not isinstance(cfg, dict):
            parser.error(f"--config {config_path}: expected a JSON object")
        if cfg.get("command", command) != command:
            parser.error(f"--config {config_path} is for command {cfg['command']!r}")
        sub = subparsers[command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known - set(_INTERNAL) - {"log_level"})
        if unknown:
            parser.error(f"--config {config_path}: unknown key(s) {', '.join(unknown)}")
        sub.set_defaults(**{k: v for k, v in cfg.items() if k in known and k != "config"})
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
    return parser, parser.parse_args(argv)


def _snapshot(args, path):
    snap = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "func")}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(snap, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- shared pipeline pieces --------------------------------------------------------


def _store(args, ds):
    emb = read_feature_csv(args.embeddings) if getattr(args, "embeddings", None) else None
    return ItemStore(ds, embeddings=emb)


def _model_config(args, store):
    emb_dim = store.embeddings.shape[1] if args.encoder == "precomputed" and store.embeddings is not None else None
    if args.encoder == "precomputed" and emb_dim is None:
        raise UsageError("--encoder precomputed needs --embeddings")
    return ModelConfig(
        encoder=args.encoder,
        conv_filters=tuple(_number_list(args.conv_filters, "--conv-filters", int)),
        frozen_prefix=args.frozen_prefix,
        embedding_dim=emb_dim,
        hidden=tuple(_number_list(args.hidden, "--hidden", int)),
        bins=args.bins,
        merge=args.merge,
        use_color=not args.no_color,
        readout_bias=args.readout_bias,
    )


def _train_config(args, reg):
    return TrainConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2, batch_size=args.batch_size,
                       reg=reg, cov_update_every=args.cov_update_every, patience=args.patience,
                       max_epochs=args.max_epochs, seed=args.seed, proximal_l1=args.proximal_l1)


def training_pairs(ds, store, seed, factor=6):
    """Train and validation pairs; negatives are drawn with seeds ``seed`` and ``seed + 1``."""
    if not ds.train or not ds.val:
        raise DatasetError("training needs non-empty train and val splits")
    return (store.pairs(make_pairs(ds.train, seed=seed, factor=factor)),
            store.pairs(make_pairs(ds.val, seed=seed + 1, factor=factor)))


def _train_extra(tc, result):
    return {"train_config": {"lr": tc.lr, "beta1": tc.beta1, "beta2": tc.beta2,
                             "batch_size": tc.batch_size, "lambda": list(tc.reg.as_tuple()),
                             "cov_update_every": tc.cov_update_every, "patience": tc.patience,
                             "max_epochs": tc.max_epochs, "seed": tc.seed,
                             "proximal_l1": tc.proximal_l1},
            "best_epoch": result.log.best_epoch,
            "best_val_loss": result.best_val_loss}


def _resolve_ckpt(path):
    return os.path.join(path, CHECKPOINT_NAME) if os.path.isdir(path) else path


def _pools(ds, which):
    return build_pools(ds, ("train", "val", "test") if which == "all" else ("test",))


# -- commands --------------------------------------------------------------------


def cmd_synth(args):
    cats = [c.strip() for c in args.categories.split(",") if c.strip()]
    if args.outfits < 10:
        raise UsageError("--outfits must be at least 10")
    if len(cats) < 2:
        raise UsageError("--categories needs at least two names")
    synth = synth_generate(args.outfits, cats, seed=args.seed, size=args.size)
    os.makedirs(args.out, exist_ok=True)
    write_synthetic(synth, args.out)
    _snapshot(args, os.path.join(args.out, "config.json"))
    ds = synth.dataset
    print(f"train {len(ds.train)} outfits, val {len(ds.val)}, test {len(ds.test)}; "
          f"{len(ds.items)} items -> {args.out}")


def cmd_featurize(args):
    ds = load_dataset(args.data)
    store = ItemStore(ds)
    if args.kind == "color":
        vals = store.histograms(args.bins)
    else:
        vals = store.hog_features(args.orientations, args.cell)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_feature_csv(args.out, store.ids, vals, prefix="h" if args.kind == "color" else "g")
    _snapshot(args, os.path.splitext(args.out)[0] + ".config.json")
    print(f"{len(store.ids)} items x {vals.shape[1]} features -> {args.out}")


def _prepare_training(args):
    ds = load_dataset(args.data)
    store = _store(args, ds)
    mcfg = _model_config(args, store)
    probe = CompatModel.init(mcfg, seed=args.seed)
    feats = store.model_features(probe)
    train, val = training_pairs(ds, store, args.seed, args.neg_factor)
    return mcfg, feats, train, val


def _write_training(out, result, tc):
    os.makedirs(out, exist_ok=True)
    save_checkpoint(os.path.join(out, CHECKPOINT_NAME), result.model, result.covs,
                    extra=_train_extra(tc, result))
    result.log.write_csv(os.path.join(out, "train_log.csv"))


def cmd_train(args):
    mcfg, feats, train, val = _prepare_training(args)
    tc = _train_config(args, RegWeights(args.lambda1, args.lambda2, args.lambda3))
    result = fit(CompatModel.init(mcfg, seed=args.seed), feats, train, val, tc)
    _write_training(args.out, result, tc)
    _snapshot(args, os.path.join(args.out, "config.json"))
    print(f"{len(result.log.records)} epoch(s), best epoch {result.log.best_epoch}, "
          f"val loss {result.best_val_loss:.6f} -> {args.out}")


def cmd_gridsearch(args):
    grids = [_number_list(getattr(args, f"grid_lambda{k}"), f"--grid-lambda{k}") for k in (1, 2, 3)]
    mcfg, feats, train, val = _prepare_training(args)
    tc = _train_config(args, RegWeights())
    res = grid_search(partial(CompatModel.init, mcfg), feats, train, val, grids, tc, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    res.write_csv(os.path.join(args.out, "grid.csv"))
    best_cell = next(c for c in res.cells if c["error"] is None
                     and (c["lambda1"], c["lambda2"], c["lambda3"]) == res.best.as_tuple())
    _write_training(args.out, best_cell["result"], _train_config(args, res.best))
    with open(os.path.join(args.out, "best.json"), "w", encoding="utf-8") as fh:
        json.dump({"lambda1": res.best.lambda1, "lambda2": res.best.lambda2,
                   "lambda3": res.best.lambda3, "val_loss": best_cell["val_loss"]},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    _snapshot(args, os.path.join(args.out, "config.json"))
    print(f"best lambdas {res.best.as_tuple()} val loss {best_cell['val_loss']:.6f} "
          f"over {len(res.cells)} cell(s) -> {args.out}")


def _model_scorer(path, store, name):
    model, _, _ = load_checkpoint(_resolve_ckpt(path))
    return model, ModelScorer(model, store.model_features(model), store.ids, name=name)


def cmd_eval(args):
    ks = _number_list(args.k, "--k", int)
    if any(k < 1 for k in ks):
        raise UsageError("--k values must be positive")
    wanted = [b.strip().lower() for b in args.baselines.split(",") if b.strip()]
    bad = sorted(set(wanted) - {"m1", "m2", "m3", "m4", "m5"})
    if bad:
        raise UsageError(f"--baselines: unknown baseline(s) {', '.join(bad)}")
    for name in ("m2", "m3"):
        if name in wanted and not getattr(args, f"{name}_model"):
            raise UsageError(f"--baselines {name} needs --{name}-model")

    ds = load_dataset(args.data)
    store = _store(args, ds)
    model, main = _model_scorer(args.model, store, "model")
    scorers = [main]
    for name in wanted:
        if name == "m1":
            scorers.append(DistanceScorer("m1", store.ids, main.E))
        elif name in ("m2", "m3"):
            scorers.append(_model_scorer(getattr(args, f"{name}_model"), store, name)[1])
        elif name == "m4":
            scorers.append(DistanceScorer("m4", store.ids, store.histograms(model.config.bins)))
        else:
            scorers.append(DistanceScorer("m5", store.ids, store.hog_features(8, 15)))
    report = evaluate(ds.test, ds.items, _pools(ds, args.pool), scorers, ks)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "report.csv"))
    report.write_json(os.path.join(args.out, "report.json"))
    report.write_plot_csv(os.path.join(args.out, "lift_plot.csv"))
    _snapshot(args, os.path.join(args.out, "config.json"))
    print(f"{report.n_outfits} test outfits")
    print(f"{'scorer':<8} {'K':>3} {'avg_prec':>10} {'random':>10} {'lift':>8}")
    for r in report.rows:
        print(f"{r['scorer']:<8} {r['K']:>3} {r['avg_precision']:>10.4f} "
              f"{r['random_baseline']:>10.4f} {r['lift']:>8.3f}")


def cmd_recommend(args):
    if args.k < 0:
        raise UsageError("--k must be non-negative")
    ds = load_dataset(args.data)
    if args.query not in ds.items:
        raise DatasetError(f"unknown query item {args.query!r}")
    store = _store(args, ds)
    pools = _pools(ds, args.pool)
    qcat = ds.items[args.query].category
    cats = args.category or [c for c in pools if c != qcat]
    for c in cats:
        if c not in pools:
            raise DatasetError(f"no candidates in category {c!r}")
    model, scorer = _model_scorer(args.model, store, "model")
    for cat in cats:
        pool = [i for i in pools[cat] if i != args.query]
        if not pool:
            continue
        for rank, (iid, logit) in enumerate(recommend(args.query, pool, scorer, args.k), start=1):
            print(f"{cat}\t{rank}\t{iid}\t{float(sigmoid(logit)):.6f}")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    parser, args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, ShapeError, TrainingError, ValueError, KeyError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
