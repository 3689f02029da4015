"""Command-line interface.

Subcommands: transform, train, predict, cluster, explain, eval, kernel-error,
synth.  Exit codes: 0 success, 1 data/parameter errors (categorized message on
stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import clustering, data, ensemble, explain, feature_map, linear_model
from . import metrics as metrics_mod
from .errors import EfmKitError, FormatError, ParameterError

# ---------------------------------------------------------------------------
# Spec / grid parsing
# ---------------------------------------------------------------------------

def parse_map_spec(text: str | None, d: int) -> feature_map.FeatureMapSpec | None:
    """Parse 'poly:m=2,b=1' / 'gauss:m=2,sigma=0.5,variant=half' / 'none'."""
    if text is None or text.strip().lower() in ("none", "input", ""):
        return None
    head, _, tail = text.partition(":")
    kind = {"poly": "polynomial", "polynomial": "polynomial", "gauss": "gaussian", "gaussian": "gaussian"}.get(
        head.strip().lower()
    )
    if kind is None:
        raise ParameterError(f"unknown map kind in {text!r} (use poly:... or gauss:...)")
    params: dict[str, str] = {}
    for item in filter(None, (s.strip() for s in tail.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise ParameterError(f"map parameter {item!r} is not key=value")
        params[key.strip()] = value.strip()
    try:
        m = int(params.pop("m"))
    except KeyError:
        raise ParameterError(f"map spec {text!r} needs m=<order>") from None
    d = int(params.pop("d", d))
    if kind == "polynomial":
        spec = feature_map.FeatureMapSpec(kind=kind, d=d, m=m, b=float(params.pop("b", 0.0)))
    else:
        spec = feature_map.FeatureMapSpec(
            kind=kind,
            d=d,
            m=m,
            sigma=float(params.pop("sigma", 1.0)),
            variant=params.pop("variant", feature_map.VARIANT_HALF),
        )
    if params:
        raise ParameterError(f"unknown map parameters for {kind}: {sorted(params)}")
    return spec


def parse_grid(text: str, d: int) -> ensemble.HyperGrid:
    """Either an explicit ';'-separated spec list, or the standard selection
    grids 'poly:m=<order>' (offsets 1..7) / 'gauss:m=<order>' (eight sigmas)."""
    if ";" in text:
        return ensemble.HyperGrid([parse_map_spec(s, d) for s in text.split(";") if s.strip()])
    head, _, tail = text.partition(":")
    head = head.strip().lower()
    params = dict(p.split("=", 1) for p in tail.split(",") if p.strip())
    if head in ("poly", "polynomial") and set(params) == {"m"}:
        return ensemble.HyperGrid.poly_offsets(m=int(params["m"]), d=d)
    if head in ("gauss", "gaussian") and set(params) == {"m"}:
        return ensemble.HyperGrid.gaussian_sigmas(m=int(params["m"]), d=d)
    return ensemble.HyperGrid([parse_map_spec(text, d)])


def spec_text(spec: feature_map.FeatureMapSpec | None) -> str:
    if spec is None:
        return "none"
    if spec.kind == "polynomial":
        return f"poly:m={spec.m},b={spec.b},d={spec.d}"
    return f"gauss:m={spec.m},sigma={spec.sigma},variant={spec.variant},d={spec.d}"


def _config_defaults(config: data.RunConfig) -> dict:
    return {
        "map": spec_text(config.map_spec),
        "loss": config.loss,
        "epochs": config.train.epochs,
        "rate": config.train.base_rate,
        "l2": config.train.l2,
        "seed": config.train.seed,
        "solver": config.train.solver,
        "batch_rows": config.train.batch_rows,
        "clusters": config.clusters,
        "anchors": config.anchors,
        "knn": config.knn,
        "prefilter": config.prefilter,
    }


def _train_config(args) -> linear_model.TrainConfig:
    return linear_model.TrainConfig(
        epochs=args.epochs,
        batch_rows=args.batch_rows,
        base_rate=args.rate,
        l2=args.l2,
        seed=args.seed,
        solver=args.solver,
    )


def _load_pixels(path: str, prefilter: str) -> data.PixelDataset:
    ds = data.load_image(path)
    if prefilter == "median3":
        ds = data.prefilter_median3(ds)
    return ds


def _read_features(path: str, prefilter: str = "none"):
    """CSV or raster input -> (rows, shape_or_None). CSV may carry a header."""
    if Path(path).suffix.lower() in (".csv", ".txt"):
        rows, _ = data.load_table(path)
        return rows, None
    ds = _load_pixels(path, prefilter)
    return ds.rows, ds.shape


def _load_model_file(path: str):
    obj = data.read_json(path)
    try:
        if isinstance(obj, dict) and "members" in obj:
            return ensemble.ensemble_from_json(obj)
        return linear_model.model_from_json(obj)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, EfmKitError):
            raise
        raise FormatError(f"{path}: not a valid model file ({exc})") from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_transform(args) -> int:
    rows, _ = _read_features(args.input, args.prefilter)
    spec = parse_map_spec(args.map, rows.shape[1])
    if spec is None:
        raise ParameterError("transform needs --map (there is nothing to do in input space)")
    mapped = feature_map.transform_batch(rows, spec)
    names = args.names.split(",") if args.names else None
    data.save_table(args.out, mapped, header=feature_map.feature_names_for(spec, names))
    print(f"transformed {rows.shape[0]} rows to dimension {mapped.shape[1]} -> {args.out}")
    return 0


def _image_subsets(args) -> list[list[linear_model.LabeledBatch]]:
    if len(args.images) != len(args.masks):
        raise ParameterError(f"{len(args.images)} images but {len(args.masks)} masks")
    subsets = []
    for img_path, mask_path in zip(args.images, args.masks):
        ds = _load_pixels(img_path, args.prefilter)
        labels, shape = data.load_mask(mask_path)
        if shape != ds.shape:
            raise ParameterError(f"mask {mask_path} shape {shape} != image shape {ds.shape}")
        subsets.append(list(data.patch_stream(ds, labels, side=args.patch_side)))
    return subsets


def _table_batches(path: str, batch_rows: int) -> list[linear_model.LabeledBatch]:
    table, _ = data.load_table(path)
    if table.shape[1] < 2:
        raise ParameterError("training table needs feature columns plus a final label column")
    X, y = table[:, :-1], table[:, -1]
    return [
        linear_model.LabeledBatch(X[i : i + batch_rows], y[i : i + batch_rows])
        for i in range(0, X.shape[0], batch_rows)
    ]


def _cmd_train(args) -> int:
    config = _train_config(args)
    if args.images:
        subsets = _image_subsets(args)
        d = 3
    elif args.table:
        subsets = [_table_batches(args.table, config.batch_rows)]
        d = subsets[0][0].rows.shape[1]
    else:
        raise ParameterError("train needs --images/--masks or --table")

    flat = [batch for subset in subsets for batch in subset]
    if args.ensemble:
        grid = parse_grid(args.grid, d) if args.grid else ensemble.HyperGrid([parse_map_spec(args.map, d)])
        model = ensemble.train_ensemble(subsets, grid, config, loss=args.loss, tie_rule=args.tie_rule)
        predicted = np.concatenate([ensemble.vote_batch(model, b.rows) for b in flat])
        kind = f"ensemble of {len(model.members)} members"
    else:
        spec = parse_map_spec(args.map, d)
        model = linear_model.train_streaming(flat, spec, config, loss=args.loss)
        predicted = np.concatenate(
            [(linear_model.decision_batch(model, b.rows) > 0).astype(np.int8) for b in flat]
        )
        kind = "model"
    labels = np.concatenate([b.labels for b in flat])
    report = metrics_mod.metrics(metrics_mod.accumulate(metrics_mod.ConfusionCounts(), predicted, labels))
    if args.ensemble:
        payload = ensemble.ensemble_to_json(model)
    else:
        model.train_meta["train_bacc"] = report.bacc
        payload = linear_model.model_to_json(model)
    data.write_json(args.out, payload)
    print(
        f"trained {kind} (loss={args.loss}) on {labels.size} rows: "
        f"train bacc={report.bacc:.4f} se={report.se:.4f} sp={report.sp:.4f} -> {args.out}"
    )
    return 0


def _cmd_predict(args) -> int:
    model = _load_model_file(args.model)
    ds = _load_pixels(args.image, args.prefilter)
    if isinstance(model, ensemble.Ensemble):
        labels = ensemble.vote_batch(model, ds.rows)
        scores = labels.astype(float)
    else:
        scores = linear_model.decision_batch(model, ds.rows)
        labels = (scores > 0).astype(np.int8)
    if args.median_filter:
        labels = clustering.median_filter(labels.reshape(ds.shape), window=args.median_filter).reshape(-1)
    data.save_mask(labels, ds.shape, args.out_mask)
    if args.out_scores:
        data.save_table(args.out_scores, scores, header=["score"])
    print(f"predicted {labels.sum()} positive of {labels.size} pixels -> {args.out_mask}")
    return 0


def _cmd_cluster(args) -> int:
    ds = _load_pixels(args.image, args.prefilter)
    spec = parse_map_spec(args.map, 3)
    assignment = clustering.cluster_pixels(
        ds.rows,
        c=args.clusters,
        p=args.anchors,
        k=args.knn,
        map_spec=spec,
        seed=args.seed,
        anchor_method=args.anchor_method,
    )
    labels = assignment.labels
    if args.median_filter:
        labels = clustering.median_filter(labels.reshape(ds.shape), window=args.median_filter).reshape(-1)
    if args.ref_mask:
        reference, ref_shape = data.load_mask(args.ref_mask)
        if ref_shape != ds.shape:
            raise ParameterError(f"reference mask shape {ref_shape} != image shape {ds.shape}")
        labels = clustering.map_clusters_to_classes(
            clustering.ClusterAssignment(labels=labels, c=args.clusters), reference
        )
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        data.save_table(out, np.c_[np.arange(labels.size), labels], header=["index", "label"])
    else:
        if labels.max() > 1:
            raise ParameterError(
                f"{args.clusters} clusters cannot be written as a binary mask; "
                "write CSV output or provide --ref-mask to map clusters to classes"
            )
        data.save_mask(labels, ds.shape, out)
    print(f"clustered {labels.size} pixels into {args.clusters} clusters -> {args.out}")
    return 0


def _cmd_explain(args) -> int:
    model = _load_model_file(args.model)
    if isinstance(model, ensemble.Ensemble):
        raise ParameterError("explanations apply to single models, not ensembles")
    rows, _ = _read_features(args.input, args.prefilter)
    bg_rows, _ = _read_features(args.background, args.prefilter)
    spec = model.map_spec
    names = args.names.split(",") if args.names else (["R", "G", "B"] if model.input_dim == 3 else None)
    if spec is not None:
        rows = feature_map.transform_batch(rows, spec)
        bg_rows = feature_map.transform_batch(bg_rows, spec)
        feature_names = feature_map.feature_names_for(spec, names)
    else:
        feature_names = list(names) if names else [f"x{j + 1}" for j in range(rows.shape[1])]
    background = explain.Background(bg_rows, feature_names)
    if args.limit:
        rows = rows[: args.limit]

    explainer = (
        explain.shapley_linear_marginal
        if args.method == "marginal"
        else lambda m, x, b: explain.shapley_empirical_conditional(m, x, b, neighbors=args.neighbors)
    )
    explanations = [explainer(model, row, background) for row in rows]
    out = Path(args.out)
    if out.suffix.lower() == ".json":
        data.write_json(out, [e.to_json() for e in explanations])
    else:
        table = np.c_[
            np.arange(len(explanations)),
            [e.a0 for e in explanations],
            [e.prediction for e in explanations],
            np.vstack([e.contributions for e in explanations]),
        ]
        data.save_table(out, table, header=["index", "a0", "prediction"] + feature_names)
    averages = explain.average_contributions(explanations)
    top = np.argsort(-np.abs(averages))[:3]
    summary = ", ".join(f"{feature_names[j]}={averages[j]:+.4f}" for j in top)
    print(f"explained {len(explanations)} rows ({args.method}); top mean contributions: {summary}")
    return 0


def _metric_column(path: str, metric: str) -> np.ndarray:
    """Read one numeric column from a per-run metrics CSV (string columns allowed)."""
    import csv as _csv

    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise ParameterError(f"{path}: file does not exist") from None
    rows = [r for r in _csv.reader(lines) if r]
    if not rows or metric not in [c.strip() for c in rows[0]]:
        raise ParameterError(f"{path}: needs a header with a {metric!r} column")
    idx = [c.strip() for c in rows[0]].index(metric)
    try:
        return np.array([float(r[idx]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise ParameterError(f"{path}: bad {metric!r} value ({exc})") from None


def _cmd_eval(args) -> int:
    if args.compare:
        a = _metric_column(args.compare[0], args.metric)
        b = _metric_column(args.compare[1], args.metric)
        result = metrics_mod.ttest2(a, b, alpha=args.alpha)
        verdict = "reject" if result.reject else "keep"
        print(
            f"{args.metric}: t={result.t:.6f} p={result.p:.6g} df={result.df:g} "
            f"-> {verdict} equal-means at alpha={args.alpha}"
        )
        return 0
    if not args.pred or not args.truth:
        raise ParameterError("eval needs --pred and --truth mask lists (or --compare)")
    if len(args.pred) != len(args.truth):
        raise ParameterError(f"{len(args.pred)} predictions but {len(args.truth)} truths")
    counts = metrics_mod.ConfusionCounts()
    for pred_path, truth_path in zip(args.pred, args.truth):
        pred, pred_shape = data.load_mask(pred_path)
        truth, truth_shape = data.load_mask(truth_path)
        if pred_shape != truth_shape:
            raise ParameterError(f"{pred_path} shape {pred_shape} != {truth_path} shape {truth_shape}")
        counts = metrics_mod.accumulate(counts, pred, truth)
    report = metrics_mod.metrics(counts)
    if args.out:
        payload = report.to_json()
        payload["counts"] = {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn}
        payload["model"] = args.model_name
        data.write_json(args.out, payload)
    if args.csv:
        header = ",".join(metrics_mod.CSV_COLUMNS)
        data.atomic_write_text(Path(args.csv), header + "\n" + metrics_mod.report_csv_row(args.model_name, report) + "\n")
    print(metrics_mod.report_csv_row(args.model_name, report))
    return 0


def _cmd_kernel_error(args) -> int:
    orders = [int(v) for v in args.orders.split(",")]
    if not orders:
        raise ParameterError("--orders needs at least one order")
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(0.0, 1.0, (args.samples, args.dim))
    y = rng.uniform(0.0, 1.0, (args.samples, args.dim))
    table = []
    for m in orders:
        spec = feature_map.FeatureMapSpec(
            kind="gaussian", d=args.dim, m=m, sigma=args.sigma, variant=args.variant
        )
        phi_x = feature_map.transform_batch(x, spec)
        phi_y = feature_map.transform_batch(y, spec)
        approx = np.sum(phi_x * phi_y, axis=1)
        diff = x - y
        denom = 2.0 * args.sigma**2 if args.variant == "half" else args.sigma**2
        exact = np.exp(-np.sum(diff * diff, axis=1) / denom)
        errors = np.abs(exact - approx)
        table.append([m, float(errors.max()), float(errors.mean())])
    data.save_table(args.out, np.array(table), header=["m", "max_error", "mean_error"])
    print(f"wrote kernel approximation errors for orders {orders} -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    X, y = data.synth_generate(args.kind, args.n, noise=args.noise, seed=args.seed)
    data.save_table(args.out, np.c_[X, y], header=["x1", "x2", "label"])
    print(f"wrote {args.n} {args.kind} rows -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["logistic", "hinge"], default="logistic")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--rate", type=float, default=0.5, help="base learning rate")
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--solver", choices=["scale_invariant", "plain_sgd"], default="scale_invariant")
    p.add_argument("--batch-rows", type=int, default=10_000)
    p.add_argument("--patch-side", type=int, default=100)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="efmkit",
        description="Feature-map classifiers, anchor-based clustering, Shapley "
        "explanations, and segmentation metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    configurable: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("transform", help="map CSV or image rows through a feature map")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--names", help="comma-separated input feature names")
    p.add_argument("--prefilter", choices=data.PREFILTERS, default="none")
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("train", help="train a classifier (or ensemble) incrementally")
    p.add_argument("--images", nargs="*", default=[])
    p.add_argument("--masks", nargs="*", default=[])
    p.add_argument("--table", help="CSV with feature columns and a final label column")
    p.add_argument("--map", default="none")
    p.add_argument("--ensemble", action="store_true")
    p.add_argument("--grid", help="spec list 'a;b;...' or 'poly:m=K' / 'gauss:m=K'")
    p.add_argument("--tie-rule", choices=["positive", "negative"], default="positive")
    p.add_argument("--prefilter", choices=data.PREFILTERS, default="none")
    p.add_argument("--config", help="JSON run config supplying defaults for these flags")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)
    configurable["train"] = p

    p = sub.add_parser("predict", help="apply a trained model to an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-scores")
    p.add_argument("--median-filter", type=int, default=0, help="odd window, 0 disables")
    p.add_argument("--prefilter", choices=data.PREFILTERS, default="none")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("cluster", help="anchor-based spectral clustering of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--anchors", type=int, default=75)
    p.add_argument("--knn", type=int, default=3)
    p.add_argument("--map", default="none")
    p.add_argument("--median-filter", type=int, default=0, help="odd window, 0 disables")
    p.add_argument("--anchor-method", choices=[clustering.SUBSAMPLE_KMEANS, clustering.UNIFORM_RANDOM],
                   default=clustering.SUBSAMPLE_KMEANS)
    p.add_argument("--ref-mask", help="ground truth used to map clusters onto binary classes")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--prefilter", choices=data.PREFILTERS, default="none")
    p.add_argument("--config", help="JSON run config supplying defaults for these flags")
    p.add_argument("--out", required=True, help=".png/.pgm mask or .csv (index,label)")
    p.set_defaults(func=_cmd_cluster)
    configurable["cluster"] = p

    p = sub.add_parser("explain", help="Shapley contributions for model predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="CSV rows or image")
    p.add_argument("--background", required=True, help="CSV rows or image")
    p.add_argument("--method", choices=["marginal", "conditional"], default="marginal")
    p.add_argument("--neighbors", type=int, default=explain.DEFAULT_NEIGHBORS)
    p.add_argument("--limit", type=int, default=0, help="explain only the first N rows")
    p.add_argument("--names", help="comma-separated input feature names")
    p.add_argument("--prefilter", choices=data.PREFILTERS, default="none")
    p.add_argument("--out", required=True, help=".csv table or .json report")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("eval", help="micro metrics for predicted vs truth masks")
    p.add_argument("--pred", nargs="*", default=[])
    p.add_argument("--truth", nargs="*", default=[])
    p.add_argument("--model-name", default="model")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--csv", help="CSV report path (model,se,sp,bacc,f1,ppv)")
    p.add_argument("--compare", nargs=2, metavar=("RUNS_A", "RUNS_B"),
                   help="two per-run metric CSVs to compare with a two-sample t-test")
    p.add_argument("--metric", default="bacc")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("kernel-error", help="kernel approximation error by map order")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--orders", required=True, help="comma-separated orders, e.g. 2,3,4,5")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--variant", choices=["half", "full"], default="half")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_kernel_error)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--kind", choices=data.SYNTH_KINDS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    return parser, configurable


def main(argv=None) -> int:
    parser, configurable = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if getattr(args, "config", None):
            # config values become defaults; flags given explicitly still win
            configurable[args.command].set_defaults(**_config_defaults(data.load_run_config(args.config)))
            args = parser.parse_args(argv)
        return args.func(args)
    except EfmKitError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
