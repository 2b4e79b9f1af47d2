"""Command-line entry points.

Subcommands: extract (images -> feature file), eval (feature file ->
accuracy report), embed (feature file -> 2-D coordinates and scatter),
profile (per-layer forward timings), train (small-scale SGD).

numpy is imported lazily inside the handlers so that --threads can pin
the BLAS thread-pool environment variables before numpy first loads.

Exit codes: 0 success, 2 bad input or configuration, 3 engine failure
during computation, 4 protocol infeasible for the given data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

log = logging.getLogger("convkit")

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

#: features wider than this are randomly projected down before embedding
EMBED_PROJECT_DIM = 512


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad float list: {text!r}") from None


def _parse_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list: {text!r}") from None


def _default_threads():
    raw = os.environ.get("CONVKIT_THREADS")
    return int(raw) if raw else None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="convkit",
        description="CPU convolutional-network feature extraction and "
                    "evaluation toolkit",
    )
    parser.add_argument("--threads", type=int, default=_default_threads(),
                        help="pin BLAS/OpenMP pools to this many threads "
                             "(set before numpy loads; default from "
                             "CONVKIT_THREADS)")
    parser.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")
    parser.set_defaults(func=None)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("extract", help="run images through a network and "
                                       "save tapped activations")
    p.add_argument("--spec", required=True, help="network spec file")
    w = p.add_mutually_exclusive_group(required=True)
    w.add_argument("--weights", help="weight bundle (.dcf)")
    w.add_argument("--random-weights", action="store_true",
                   help="draw weights from the seeded random-init policy "
                        "instead of loading a bundle")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for --random-weights")
    p.add_argument("--images", required=True,
                   help="list file, one path<TAB>label per line")
    p.add_argument("--layer", required=True, help="layer name to tap")
    p.add_argument("--batch", type=int, default=16,
                   help="images per forward pass")
    p.add_argument("--mean", type=_parse_floats, default=None,
                   metavar="R,G,B", help="override the preprocessing mean")
    p.add_argument("--out", help="write features here (.fmx)")
    p.add_argument("--csv", help="also export features as CSV")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="train linear classifiers on saved "
                                    "features under a split protocol")
    p.add_argument("--features", help="feature file (.fmx)")
    p.add_argument("--source", help="source-domain feature file, for "
                                    "transfer protocols")
    p.add_argument("--target", help="target-domain feature file")
    p.add_argument("--mode", choices=("S", "T", "ST"),
                   help="transfer training composition: source, target, "
                        "or both")
    p.add_argument("--train-per-class", type=int,
                   help="training samples drawn per class")
    p.add_argument("--test-per-class", type=int, default=None,
                   help="test samples per class (default: class remainder)")
    p.add_argument("--source-per-class", type=int,
                   help="source-domain training samples per class")
    p.add_argument("--target-per-class", type=int,
                   help="target-domain training samples per class")
    p.add_argument("--splits", type=int, default=5,
                   help="number of random splits")
    p.add_argument("--seed", type=int, default=0,
                   help="split and trainer seed")
    p.add_argument("--classifier", choices=("logreg", "svm"),
                   default="logreg", help="linear probe family")
    p.add_argument("--dropout", action="store_true",
                   help="train with per-epoch feature dropout masks")
    p.add_argument("--reg", type=float, default=None,
                   help="fixed regularization strength")
    p.add_argument("--grid", type=_parse_floats, default=None,
                   metavar="A,B,...",
                   help="regularizer grid for cross-validated selection")
    p.add_argument("--crossval-train", type=int, default=None,
                   help="per-class subtrain size for grid selection")
    p.add_argument("--crossval-val", type=int, default=None,
                   help="per-class held-out size for grid selection")
    p.add_argument("--crossval-rounds", type=int, default=5,
                   help="cross-validation rounds per split")
    p.add_argument("--epochs", type=int, default=200,
                   help="classifier optimizer epochs")
    p.add_argument("--lr", type=float, default=0.5,
                   help="classifier optimizer step size")
    p.add_argument("--curve", type=_parse_ints, default=None,
                   metavar="M1,M2,...",
                   help="learning curve over these per-class sizes "
                        "(needs --reg)")
    p.add_argument("--report", required=True,
                   help="write the JSON report here")
    p.add_argument("--confusion", help="write per-split confusion counts "
                                       "(CSV)")
    p.add_argument("--plot", help="render the learning curve (SVG/PNG), "
                                  "only with --curve")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="embed saved features in 2-D")
    p.add_argument("--features", required=True, help="feature file (.fmx)")
    p.add_argument("--perplexity", type=float, default=30.0,
                   help="target effective neighbor count")
    p.add_argument("--iters", type=int, default=1000,
                   help="gradient-descent iterations")
    p.add_argument("--lr", type=float, default=100.0,
                   help="embedding learning rate")
    p.add_argument("--seed", type=int, default=0,
                   help="projection, jitter and init seed")
    p.add_argument("--limit", type=int, default=None,
                   help="embed only the first N rows")
    p.add_argument("--groups", help="label<TAB>group file for coloring")
    p.add_argument("--out", help="write id,label,x,y coordinates (CSV)")
    p.add_argument("--plot", help="render the scatter (SVG/PNG)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("profile", help="time each layer of a forward pass")
    p.add_argument("--spec", required=True, help="network spec file")
    w = p.add_mutually_exclusive_group(required=True)
    w.add_argument("--weights", help="weight bundle (.dcf)")
    w.add_argument("--random-weights", action="store_true",
                   help="draw weights from the seeded random-init policy")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for --random-weights and the probe batch")
    p.add_argument("--batch", type=int, default=1,
                   help="probe batch size")
    p.add_argument("--repeats", type=int, default=5,
                   help="timed passes (after warmup)")
    p.add_argument("--warmup", type=int, default=1,
                   help="discarded warmup passes")
    p.add_argument("--out", help="write the per-layer table (CSV)")
    p.add_argument("--plot", help="render the per-kind pie chart (SVG/PNG)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train", help="train a network with minibatch SGD")
    p.add_argument("--spec", required=True, help="network spec file")
    p.add_argument("--data", required=True,
                   help="npz file with arrays X (n,C,H,W) and y (n,), or a "
                        "directory holding images.tsv plus image files")
    p.add_argument("--init", help="starting weight bundle (.dcf); default "
                                  "is the seeded random-init policy")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--momentum", type=float, default=0.9,
                   help="momentum coefficient")
    p.add_argument("--weight-decay", type=float, default=0.0,
                   help="L2 penalty on weights")
    p.add_argument("--batch", type=int, default=32, help="minibatch size")
    p.add_argument("--seed", type=int, default=0,
                   help="shuffle/init/dropout seed")
    p.add_argument("--out", required=True, help="write trained weights here")
    p.add_argument("--losses", help="write per-epoch losses (CSV)")
    p.set_defaults(func=cmd_train)
    return parser


# ---------------------------------------------------------------------------
# handlers


def _load_spec_and_weights(args):
    from .network import init_weights, load_spec, load_weights

    spec = load_spec(args.spec)
    if args.random_weights:
        bundle = init_weights(spec, seed=args.seed)
    else:
        bundle = load_weights(args.weights, spec)
    return spec, bundle


def cmd_extract(args):
    from .features import export_csv, extract, save_features
    from .network import load_image, read_image_list

    if not args.out and not args.csv:
        raise ValueError("extract needs --out and/or --csv")
    spec, bundle = _load_spec_and_weights(args)
    entries = read_image_list(args.images)
    base = os.path.dirname(os.path.abspath(args.images))
    images = []
    for path, label in entries:
        resolved = path
        if not os.path.isabs(path) and not os.path.exists(path):
            resolved = os.path.join(base, path)
        images.append(load_image(resolved, id=path, label=label))
    log.info("extracting %s from %d images", args.layer, len(images))
    fm = extract(spec, bundle, images, args.layer, batch=args.batch,
                 mean_override=args.mean)
    if args.out:
        save_features(fm, args.out)
    if args.csv:
        export_csv(fm, args.csv)
    print(f"extracted {fm.features.shape[0]} x {fm.features.shape[1]} "
          f"features from layer {args.layer}")
    return 0


def _load_labeled_features(path):
    from .features import load_features

    fm = load_features(path)
    if any(l is None for l in fm.labels):
        raise ValueError(f"{path}: every row needs a label for evaluation")
    return fm


def _pick_modal(values):
    """Most frequent value; ties go to the largest."""
    counts = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return sorted(counts, key=lambda v: (counts[v], v))[-1]


def _select_reg(args, X, y, trainer):
    from .classifiers import crossval_select

    if args.grid is not None:
        if args.crossval_train is None or args.crossval_val is None:
            raise ValueError("--grid needs --crossval-train and --crossval-val")
        best, _ = crossval_select(
            X, y, args.grid, (args.crossval_train, args.crossval_val),
            trainer, n_rounds=args.crossval_rounds, seed=args.seed)
        return best
    if args.reg is not None:
        return args.reg
    raise ValueError("eval needs --reg or --grid")


def _eval_curve(args, C):
    if args.reg is None:
        raise ValueError("--curve needs a fixed --reg")
    if not args.features:
        raise ValueError("eval needs --features")
    fm = _load_labeled_features(args.features)
    y = fm.label_array()
    trainer = C.make_trainer(args.classifier, epochs=args.epochs,
                             lr=args.lr, dropout=args.dropout,
                             seed=args.seed)
    fixed = lambda X, yy: trainer(X, yy, args.reg)
    reports = C.learning_curve(fm.features, y, args.curve, args.splits,
                               args.seed, fixed,
                               per_class_test=args.test_per_class)
    sizes = [r.extra["per_class_train"] for r in reports]
    summary = C.EvalReport(
        protocol="curve", layer=fm.layer, classifier=args.classifier,
        grid=[], chosen_reg=args.reg,
        split_scores=reports[-1].split_scores,
        classes=reports[-1].classes,
        confusions=reports[-1].confusions,
        extra={
            "curve_sizes": sizes,
            "curve_mean": [r.mean for r in reports],
            "curve_std": [r.std for r in reports],
        },
    )
    C.save_report(summary, args.report)
    if args.confusion:
        C.confusion_csv(summary, args.confusion)
    if args.plot:
        import numpy as np

        from .plotting import render_curve

        scores = np.array([r.split_scores for r in reports])
        render_curve(sizes, scores, args.plot)
    print(f"curve over sizes {sizes}: final mean {summary.mean:.4f} "
          f"(std {summary.std:.4f})")
    return 0


def cmd_eval(args):
    import numpy as np

    from . import classifiers as C

    if args.curve is not None:
        if args.source or args.target or args.mode:
            raise ValueError("--curve applies to the single-domain protocol")
        return _eval_curve(args, C)

    trainer = C.make_trainer(args.classifier, epochs=args.epochs,
                             lr=args.lr, dropout=args.dropout,
                             seed=args.seed)

    if args.source or args.target or args.mode:
        if not (args.source and args.target and args.mode):
            raise ValueError("transfer eval needs --source, --target "
                             "and --mode")
        if args.source_per_class is None or args.target_per_class is None:
            raise ValueError("transfer eval needs --source-per-class and "
                             "--target-per-class")
        from .features import take

        fm_s = _load_labeled_features(args.source)
        fm_t = _load_labeled_features(args.target)
        ys, yt = fm_s.label_array(), fm_t.label_array()
        classes = np.asarray(sorted(set(ys.tolist()) | set(yt.tolist())))
        confusions = []
        scores = []
        chosen = []
        for i in range(args.splits):
            split = C.domain_sample(ys, yt, args.source_per_class,
                                    args.target_per_class, seed=(args.seed, i))
            train_fm = C.domain_compose(take(fm_s, split.source_train),
                                        take(fm_t, split.target_train),
                                        args.mode)
            y_train = train_fm.label_array()
            X_test = fm_t.features[split.target_test]
            y_test = yt[split.target_test]
            reg = _select_reg(args, train_fm.features, y_train, trainer)
            model = trainer(train_fm.features, y_train, reg)
            pred, _ = C.predict(model, X_test)
            scores.append(C.mean_per_class_accuracy(pred, y_test))
            confusions.append(C.confusion_matrix(pred, y_test, classes))
            chosen.append(reg)
        protocol = f"domain-{args.mode}"
        layer = fm_t.layer
    else:
        if not args.features:
            raise ValueError("eval needs --features (or the transfer flags)")
        if args.train_per_class is None:
            raise ValueError("eval needs --train-per-class")
        fm = _load_labeled_features(args.features)
        y = fm.label_array()
        X = fm.features
        classes = np.asarray(sorted(set(y.tolist())))
        splits = C.make_splits(y, args.train_per_class, args.splits,
                               args.seed, per_class_test=args.test_per_class)
        confusions = []
        scores = []
        chosen = []
        for tr, te in splits:
            reg = _select_reg(args, X[tr], y[tr], trainer)
            model = trainer(X[tr], y[tr], reg)
            pred, _ = C.predict(model, X[te])
            scores.append(C.mean_per_class_accuracy(pred, y[te]))
            confusions.append(C.confusion_matrix(pred, y[te], classes))
            chosen.append(reg)
        protocol = "fixed-split"
        layer = fm.layer

    report = C.EvalReport(
        protocol=protocol, layer=layer, classifier=args.classifier,
        grid=list(args.grid or []),
        chosen_reg=_pick_modal(chosen),
        split_scores=[float(s) for s in scores],
        classes=classes.tolist(), confusions=confusions,
        extra={"chosen_per_split": chosen, "dropout": bool(args.dropout)},
    )
    C.save_report(report, args.report)
    if args.confusion:
        C.confusion_csv(report, args.confusion)
    if args.plot:
        log.warning("--plot is only rendered for --curve runs")
    print(f"{protocol}: mean per-class accuracy "
          f"{report.mean:.4f} (std {report.std:.4f}) over {args.splits} splits")
    return 0


def cmd_embed(args):
    from .embed import export_coords, load_group_map, render_scatter, tsne
    from .features import load_features, random_project

    if not args.out and not args.plot:
        raise ValueError("embed needs --out and/or --plot")
    fm = load_features(args.features)
    X = fm.features
    ids = fm.ids
    labels = fm.labels
    if args.limit is not None:
        X = X[: args.limit]
        ids = ids[: args.limit]
        labels = labels[: args.limit]
    if X.shape[1] > EMBED_PROJECT_DIM:
        log.info("projecting %d-dim features to %d before embedding",
                 X.shape[1], EMBED_PROJECT_DIM)
        X = random_project(X, EMBED_PROJECT_DIM, seed=args.seed)
    emb = tsne(X, perplexity=args.perplexity, n_iter=args.iters,
               lr=args.lr, seed=args.seed)
    if args.out:
        export_coords(emb, ids, labels, args.out)
    if args.plot:
        group_map = load_group_map(args.groups) if args.groups else None
        render_scatter(emb, labels, args.plot, group_map=group_map)
    print(f"embedded {X.shape[0]} points; final objective "
          f"{emb.kl_trace[-1]:.4f}")
    return 0


def cmd_profile(args):
    import numpy as np

    from .profiler import profile_forward, render_profile

    spec, bundle = _load_spec_and_weights(args)
    rng = np.random.default_rng(args.seed)
    batch = rng.standard_normal(
        (args.batch,) + spec.input_shape).astype(np.float32)
    profile = profile_forward(spec, bundle, batch, repeats=args.repeats,
                              warmup=args.warmup,
                              threads=args.threads if args.threads else 1)
    table = render_profile(profile, table_path=args.out, pie_path=args.plot)
    sys.stdout.write(table)
    return 0


def _load_train_data(path):
    import numpy as np

    if os.path.isdir(path):
        from .network import load_image, preprocess, read_image_list

        list_path = os.path.join(path, "images.tsv")
        entries = read_image_list(list_path)
        if not entries:
            raise ValueError(f"{list_path}: no entries")
        tensors = []
        names = []
        for rel, label in entries:
            if label is None:
                raise ValueError(f"{list_path}: every row needs a label")
            img_path = rel if os.path.isabs(rel) else os.path.join(path, rel)
            tensors.append(preprocess(load_image(img_path, id=rel)))
            names.append(label)
        classes = sorted(set(names))
        index = {c: i for i, c in enumerate(classes)}
        return np.concatenate(tensors), np.array([index[n] for n in names])
    with np.load(path) as data:
        if "X" not in data or "y" not in data:
            raise ValueError(f"{path}: needs arrays X and y")
        return data["X"], data["y"]


def cmd_train(args):
    from .network import (SgdHyper, load_spec, load_weights, save_weights,
                          sgd_train)

    spec = load_spec(args.spec)
    X, y = _load_train_data(args.data)
    init = load_weights(args.init, spec) if args.init else args.seed
    hyper = SgdHyper(lr=args.lr, momentum=args.momentum,
                     weight_decay=args.weight_decay, batch=args.batch,
                     epochs=args.epochs, seed=args.seed)
    bundle, losses = sgd_train(spec, init, (X, y), hyper)
    save_weights(bundle, args.out)
    if args.losses:
        with open(args.losses, "w", encoding="utf-8", newline="\n") as f:
            f.write("epoch,loss\n")
            for i, loss in enumerate(losses):
                f.write(f"{i},{loss!r}\n")
    print(f"trained {args.epochs} epochs; final loss {losses[-1]:.6f}")
    return 0


# ---------------------------------------------------------------------------
# entry


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.func is None:
        parser.print_help()
        return 2
    from . import errors as E

    try:
        return args.func(args)
    except (E.InsufficientClassSize, E.PerplexityInfeasible, E.SingleClass,
            E.EmptyClass, E.EmptyGrid, E.DegenerateInput) as exc:
        print(f"convkit: protocol infeasible: {exc}", file=sys.stderr)
        return 4
    except (E.Divergence, E.StateMissing, E.NumericError,
            FloatingPointError) as exc:
        print(f"convkit: engine error: {exc}", file=sys.stderr)
        return 3
    except (E.ConvkitError, OSError, ValueError, KeyError) as exc:
        print(f"convkit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
