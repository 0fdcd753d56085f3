"""Command-line entry point.

Every fitting command prints one machine-parsable summary line
``RMSE=<x> N=<n> model=<kind>``; failures print a JSON error object on
stderr and exit nonzero, removing any partially written outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from . import baseline as baseline_mod
from . import ensemble, factor, neighbors, predictions, rbm
from .dataset import (
    RatingsDataset,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    parse_netflix_movie_files,
    parse_pairs_csv,
    parse_triplet_csv,
    split,
    summary_json,
    summary_stats,
    write_triplet_csv,
)

logger = logging.getLogger("cfstat")

SCHEMAS = {
    "baseline": baseline_mod.SCHEMA_VERSION,
    "factor": factor.SCHEMA_VERSION,
    "similarity": neighbors.SCHEMA_VERSION,
    "knn": neighbors.SCHEMA_VERSION,
    "rbm": rbm.SCHEMA_VERSION,
    "blend": ensemble.SCHEMA_VERSION,
    "predictions": 1,
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def substream_seed(seed: int, name: str) -> int:
    """Independent integer seed for a named stage (split, init, shuffle, cd)."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


class Outputs:
    """Atomic writers; everything written is removed again on failure."""

    def __init__(self):
        self.written: list[Path] = []

    def write(self, path, fn) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        os.close(fd)
        try:
            fn(tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        self.written.append(path)
        return path

    def text(self, path, text: str) -> Path:
        def fn(tmp):
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(text)
        return self.write(path, fn)

    def predictions(self, path, pred, user_ids, movie_ids) -> None:
        self.write(path, lambda tmp: pred.write_csv(tmp, user_ids, movie_ids))
        self.text(predictions.sidecar_path(path), json.dumps(pred.sidecar(), sort_keys=True) + "\n")

    def rollback(self) -> None:
        for p in self.written:
            if p.exists():
                p.unlink()


def load_data(path, K: int = 5, id_maps=None) -> RatingsDataset:
    path = Path(path)
    if not path.exists():
        raise CliError(f"no such file or directory: {path}")
    if path.is_dir():
        return parse_netflix_movie_files(path, K=K, id_maps=id_maps)
    return parse_triplet_csv(path, K=K, id_maps=id_maps)


def id_maps_of(data: RatingsDataset):
    return data.user_ids, data.movie_ids


def raw_keys(data: RatingsDataset) -> tuple[np.ndarray, np.ndarray]:
    u = data.users if data.user_ids is None else data.user_ids[data.users]
    m = data.movies if data.movie_ids is None else data.movie_ids[data.movies]
    return np.asarray(u, dtype=np.int64), np.asarray(m, dtype=np.int64)


def align_to(pred: predictions.PredictionSet, users, movies, what: str) -> predictions.PredictionSet:
    """Reorder ``pred`` (raw ids) to the given raw (user, movie) rows."""
    if len(pred) != len(users):
        raise CliError(f"{what}: {len(pred)} predictions for {len(users)} truth rows")
    index = {(int(a), int(b)): k for k, (a, b) in enumerate(zip(pred.users.tolist(), pred.movies.tolist()))}
    try:
        rows = np.array([index[(int(a), int(b))] for a, b in zip(users, movies)], dtype=np.int64)
    except KeyError as exc:
        raise CliError(f"{what}: no prediction for pair {exc.args[0]}") from None
    return pred.take(rows)


def support_for(train: RatingsDataset | None, users, movies):
    """(J_i, I_j) for raw-id rows; ids unknown to ``train`` get zero support."""
    if train is None:
        return None
    uidx = {int(v): k for k, v in enumerate(raw_ids(train.user_ids, train.num_users))}
    midx = {int(v): k for k, v in enumerate(raw_ids(train.movie_ids, train.num_movies))}
    u = np.array([uidx.get(int(x), train.num_users) for x in users], dtype=np.int64)
    m = np.array([midx.get(int(x), train.num_movies) for x in movies], dtype=np.int64)
    return ensemble.support_of(train, u, m)


def raw_ids(ids, n):
    return np.arange(n) if ids is None else ids


def model_rmse(model, data: RatingsDataset, **kw) -> float:
    values = model_predict(model, data.users, data.movies, **kw).values
    return ensemble.rmse(values, data.values)


def model_predict(model, users, movies, train=None, clip=None):
    if isinstance(model, neighbors.KnnModel):
        pred = neighbors.predict_knn(model, users, movies, train)
    elif isinstance(model, rbm.RbmModel):
        pred = rbm.predict_rbm(model, users, movies, train)
    else:
        pred = factor.predict(model, users, movies)
    if clip is not None:
        pred = predictions.PredictionSet(pred.users, pred.movies, np.clip(pred.values, *clip),
                                         pred.model_id, pred.split_id, True, pred.info)
    return pred


def load_model(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    kind = d.get("type")
    if kind == "baseline":
        return baseline_mod.BaselineModel.from_dict(d)
    if kind == "factor":
        return factor.FactorModel.from_dict(d)
    if kind == "rbm":
        return rbm.RbmModel.from_dict(d)
    if kind == "knn":
        table = neighbors.load_similarity(path.parent / d["table_path"])
        base = load_model(path.parent / d["base_path"]) if d.get("base_path") else None
        w = None if d.get("weights") is None else np.asarray(d["weights"], float)
        return neighbors.KnnModel(table, d["K"], base=base, weighting=d["weighting"],
                                  exclude_negative=d["exclude_negative"], weights=w,
                                  fit_log=d.get("fit_log", {}))
    raise CliError(f"{path}: unknown model type {kind!r}")


def summary(rmse_value: float, n: int, model: str, **extra) -> str:
    line = f"RMSE={ensemble.format_rmse(rmse_value)} N={n} model={model}"
    for k, v in extra.items():
        line += f" {k}={v}"
    return line


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_dataset_stats(args, out: Outputs) -> None:
    data = load_data(args.data, args.levels)
    stats = summary_json(summary_stats(data))
    text = dumps(stats)
    if args.out:
        out.text(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"N={data.n} users={data.num_users} movies={data.num_movies} mean={stats['mean']:.6f}")


def cmd_dataset_split(args, out: Outputs) -> None:
    data = load_data(args.data, args.levels)
    seed = substream_seed(args.seed, "split")
    if args.pairs:
        u, m = parse_pairs_csv(args.pairs, id_maps_of(data))
        spec = SplitSpec(pairs=list(zip(u.tolist(), m.tolist())), seed=seed)
    else:
        spec = SplitSpec(fraction=args.fraction, seed=seed)
    train, probe = split(data, spec)
    out.write(args.train_out, lambda p: write_triplet_csv(train, p))
    out.write(args.probe_out, lambda p: write_triplet_csv(probe, p))
    print(f"N={data.n} train={train.n} probe={probe.n}")


def cmd_dataset_synth(args, out: Outputs) -> None:
    spec = SyntheticSpec(args.users, args.movies, rank=args.rank, factor_std=args.factor_std,
                         mu=args.mu, user_bias_std=args.user_bias_std,
                         movie_bias_std=args.movie_bias_std, noise_std=args.noise_std,
                         density=args.density, seed=substream_seed(args.seed, "synth"),
                         clip_to_integers=args.integers, K=args.levels)
    data, _ = generate_synthetic(spec)
    out.write(args.out, lambda p: write_triplet_csv(data, p))
    print(f"N={data.n} users={data.num_users} movies={data.num_movies}")


def _train_probe(args):
    train = load_data(args.train, args.levels)
    probe = load_data(args.probe, args.levels, id_maps_of(train)) if args.probe else None
    return train, probe


def _report(model, fit_data, probe, kind: str, **kw) -> str:
    target = probe if probe is not None else fit_data
    value = model_rmse(model, target, **kw)
    extra = {} if probe is not None else {"in_sample": "true"}
    return summary(value, target.n, kind, **extra)


def cmd_fit_baseline(args, out: Outputs) -> None:
    train, probe = _train_probe(args)
    kind = args.model
    if kind == "constant":
        model = baseline_mod.fit_constant(train)
    elif kind in ("user", "movie"):
        model = baseline_mod.fit_oneway(train, kind)
    elif kind == "twoway":
        model = baseline_mod.fit_twoway_sparse(train, args.lambda1, args.lambda2, solver=args.solver,
                                               max_iters=args.max_iters)
    elif kind == "twoway-seq":
        model = baseline_mod.fit_twoway_sequential(train, args.lambda1, args.lambda2)
    else:
        model = baseline_mod.fit_interaction(train, args.lambda1, args.lambda2, args.lambda_gamma,
                                             max_iters=args.max_iters)
    out.text(args.out, model.to_json() + "\n")
    print(_report(model, train, probe, f"baseline-{kind}"))


def cmd_fit_svd(args, out: Outputs) -> None:
    train, probe = _train_probe(args)
    base = load_model(args.baseline) if args.baseline else None
    schedule = factor.FitSchedule(max_epochs=args.epochs, tol_obj=args.tol, eta=args.eta,
                                  eta_decay=args.eta_decay, seed=substream_seed(args.seed, "init"),
                                  init_std=args.init_std)
    conv = {"per-param": factor.PER_PARAMETER, "per-obs": factor.PER_OBSERVATION}[args.reg]
    if args.solver == "als":
        model = factor.fit_als_joint(train, args.p, args.lambda_, args.lambda_, schedule, baseline=base)
    elif args.solver == "als-seq":
        model = factor.fit_als_sequential(train, args.p, shrink=args.shrink, lam=args.lambda_,
                                          schedule=schedule, baseline=base)
    elif args.solver == "sgd":
        model = factor.fit_sgd(train, args.p, conv, args.lambda_, schedule, mode=args.mode,
                               baseline=base, probe=probe if args.early_stop else None)
    else:
        model = factor.fit_nsvd(train, args.p, args.lambda_, schedule, baseline=base,
                                train_user=not args.asymmetric_only,
                                probe=probe if args.early_stop else None)
    out.text(args.out, model.to_json() + "\n")
    print(_report(model, train, probe, f"svd-{args.solver}"))


def cmd_fit_knn(args, out: Outputs) -> None:
    train, probe = _train_probe(args)
    base = load_model(args.residuals_from) if args.residuals_from else None
    res = train.with_values(neighbors.train_residuals(train, base))
    table = neighbors.build_similarity(res, args.measure, args.shrink, args.topM, args.min_support)
    if args.global_weights:
        schedule = factor.FitSchedule(max_epochs=args.epochs, eta=args.eta, tol_obj=args.tol,
                                      seed=substream_seed(args.seed, "shuffle"))
        model = neighbors.fit_global_weights(train, table, args.K, args.lambda_w, schedule, base=base)
    else:
        model = neighbors.KnnModel(table, args.K, base=base,
                                   exclude_negative=not args.keep_negative)
    out_path = Path(args.out)
    table_path = out_path.with_name(out_path.stem + ".sim.npz")
    out.write(table_path, table.save)
    d = model.to_dict()
    d["table_path"] = table_path.name
    if args.residuals_from:
        d["base_path"] = os.path.relpath(Path(args.residuals_from).resolve(), out_path.resolve().parent)
    out.text(out_path, json.dumps(d, sort_keys=True) + "\n")
    print(_report(model, train, probe, f"knn-{model.weighting}", train=train))


def cmd_fit_rbm(args, out: Outputs) -> None:
    train, probe = _train_probe(args)
    model = rbm.init_rbm(train, args.F, seed=substream_seed(args.seed, "init"), cd_steps=args.cd)
    model = rbm.train_cd(model, train, epochs=args.epochs, eta=args.eta, cd_steps=args.cd,
                         minibatch=args.minibatch, seed=substream_seed(args.seed, "cd"))
    out.text(args.out, model.to_json() + "\n")
    print(_report(model, train, probe, "rbm", train=train))


def cmd_predict(args, out: Outputs) -> None:
    train = load_data(args.train, args.levels)
    model = load_model(args.model)
    u, m, (user_ids, movie_ids) = parse_pairs_csv(args.pairs, id_maps_of(train), with_ids=True)
    clip = (1.0, float(train.K)) if args.clip else None
    pred = model_predict(model, u, m, train=train, clip=clip)
    pred.split_id = args.split_id or Path(args.pairs).stem
    pred.model_id = args.model_id or Path(args.model).stem
    out.predictions(args.out, pred, user_ids, movie_ids)
    print(f"N={len(pred)} model={pred.model_id} fallbacks={pred.info.get('fallbacks', 0)}")


def _truth(args):
    truth = load_data(args.truth, args.levels)
    tu, tm = raw_keys(truth)
    return truth, tu, tm


def cmd_eval(args, out: Outputs) -> None:
    truth, tu, tm = _truth(args)
    pred = align_to(predictions.read_predictions(args.predictions), tu, tm, args.predictions)
    train = load_data(args.train, args.levels) if args.train else None
    support = support_for(train, tu, tm)
    strata = ensemble.Strata.terciles(*support) if support is not None else None
    report = ensemble.evaluation_report(pred, truth.values, strata, support)
    if args.report:
        out.text(args.report, dumps(report))
    print(summary(report["rmse"], report["n"], pred.model_id))


def _members(paths, tu, tm):
    return [align_to(predictions.read_predictions(p), tu, tm, p) for p in paths]


def cmd_blend_fit(args, out: Outputs) -> None:
    truth, tu, tm = _truth(args)
    members = _members(args.members, tu, tm)
    train = load_data(args.train, args.levels) if args.train else None
    support = None
    strata = None
    if args.strata == "support":
        if train is None:
            raise CliError("--strata support needs --train for support counts")
        support = support_for(train, tu, tm)
        strata = ensemble.Strata.terciles(*support)
    seed = substream_seed(args.seed, "blend")
    blend = ensemble.fit_blend(members, truth.values, args.lambda_, strata, support, seed=seed)
    if args.in_sample:
        value = blend.fit_log["fit_rmse"]
        blend.fit_log["report"] = {"rmse": round(value, 6), "in_sample": True}
    else:
        value = ensemble.cross_validated_rmse(members, truth.values, blend.ridge_lambda, strata,
                                              support, seed=seed)
        blend.fit_log["report"] = {"rmse": round(value, 6), "in_sample": False, "cv_folds": 5}
    out.text(args.out, blend.to_json() + "\n")
    print(summary(value, truth.n, "blend", in_sample=str(bool(args.in_sample)).lower()))


def cmd_blend_apply(args, out: Outputs) -> None:
    blend = ensemble.load_blend(args.blend)
    first = predictions.read_predictions(args.members[0])
    members = [first] + [align_to(predictions.read_predictions(p), first.users, first.movies, p)
                         for p in args.members[1:]]
    for m, mid in zip(members, blend.members):
        m.model_id = m.model_id or mid
    if [m.model_id for m in members] != list(blend.members):
        raise CliError(f"members {[m.model_id for m in members]} do not match blend {blend.members}")
    train = load_data(args.train, args.levels) if args.train else None
    support = support_for(train, first.users, first.movies) if blend.strata.count > 1 else None
    clip = (1.0, float(args.levels)) if args.clip else None
    pred = ensemble.apply_blend(blend, members, support=support, clip_range=clip,
                                split_id=first.split_id)
    out.predictions(args.out, pred, None, None)
    print(f"N={len(pred)} model=blend")


def cmd_verify(args, out: Outputs) -> int:
    from .verify import run_suites

    checks = run_suites(args.suite, seed=args.seed)
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.suite}: {c.name} {c.detail}".rstrip())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--levels", type=int, default=5, help="number of rating levels K")
    p.add_argument("--log-level", default="WARNING")


def build_parser():
    parser = argparse.ArgumentParser(prog="cfstat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true", help="print package and schema versions")
    sub = parser.add_subparsers(dest="command")
    leaves = {}

    def leaf(group, name, fn, **kw):
        p = group.add_parser(name, **kw)
        _common(p)
        p.set_defaults(func=fn)
        leaves[(group, name)] = p
        return p

    ds = sub.add_parser("dataset", help="inspect, split or synthesise ratings").add_subparsers(dest="action")
    p = leaf(ds, "stats", cmd_dataset_stats)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p = leaf(ds, "split", cmd_dataset_split)
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fraction", type=float, default=0.1)
    g.add_argument("--pairs")
    p.add_argument("--train-out", required=True)
    p.add_argument("--probe-out", required=True)
    p = leaf(ds, "synth", cmd_dataset_synth)
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--movies", type=int, required=True)
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--factor-std", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=3.6)
    p.add_argument("--user-bias-std", type=float, default=0.0)
    p.add_argument("--movie-bias-std", type=float, default=0.0)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--integers", action="store_true", help="round and clip ratings to 1..K")
    p.add_argument("--out", required=True)

    fit = sub.add_parser("fit", help="fit a model").add_subparsers(dest="action")

    def fit_leaf(name, fn):
        p = leaf(fit, name, fn)
        p.add_argument("--train", required=True)
        p.add_argument("--probe")
        p.add_argument("--out", required=True)
        return p

    p = fit_leaf("baseline", cmd_fit_baseline)
    p.add_argument("--model", default="twoway",
                   choices=["constant", "user", "movie", "twoway", "twoway-seq", "interaction"])
    p.add_argument("--lambda1", type=float, default=0.0)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--lambda-gamma", type=float, default=0.0)
    p.add_argument("--solver", default="coordinate", choices=["coordinate", "gradient_descent"])
    p.add_argument("--max-iters", type=int, default=500)

    p = fit_leaf("svd", cmd_fit_svd)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--solver", default="als", choices=["als", "als-seq", "sgd", "nsvd"])
    p.add_argument("--reg", default="per-param", choices=["per-param", "per-obs"])
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.0)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--eta-decay", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--init-std", type=float, default=0.01)
    p.add_argument("--mode", default="all_features", choices=["all_features", "feature_at_a_time"])
    p.add_argument("--shrink", default="residual", choices=["residual", "ridge"])
    p.add_argument("--baseline", help="baseline model JSON whose residuals are factorised")
    p.add_argument("--early-stop", action="store_true", help="early stopping on --probe")
    p.add_argument("--asymmetric-only", action="store_true", help="NSVD with u fixed at zero")

    p = fit_leaf("knn", cmd_fit_knn)
    p.add_argument("--measure", default="pearson_movie_centered", choices=list(neighbors.MEASURES))
    p.add_argument("--shrink", type=float, default=0.0)
    p.add_argument("--topM", type=int, default=50)
    p.add_argument("--min-support", type=int, default=4)
    p.add_argument("--K", type=int, default=20, help="neighbourhood size")
    p.add_argument("--global-weights", action="store_true")
    p.add_argument("--lambda-w", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.005)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--keep-negative", action="store_true")
    p.add_argument("--residuals-from", help="model JSON supplying the base predictions")

    p = fit_leaf("rbm", cmd_fit_rbm)
    p.add_argument("--F", type=int, default=20)
    p.add_argument("--cd", type=int, default=1)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--minibatch", type=int, default=100)

    pr = sub.add_parser("predict", help="predict query pairs")
    _common(pr)
    pr.set_defaults(func=cmd_predict)
    pr.add_argument("--model", required=True)
    pr.add_argument("--train", required=True, help="training data defining the id space")
    pr.add_argument("--pairs", required=True, help="CSV of user,movie[,...] rows")
    pr.add_argument("--out", required=True)
    pr.add_argument("--clip", action="store_true")
    pr.add_argument("--split-id")
    pr.add_argument("--model-id")

    ev = sub.add_parser("eval", help="score predictions against truth")
    _common(ev)
    ev.set_defaults(func=cmd_eval)
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--train", help="training data for per-stratum RMSE")
    ev.add_argument("--report")

    bl = sub.add_parser("blend", help="fit or apply a blend").add_subparsers(dest="action")
    p = leaf(bl, "fit", cmd_blend_fit)
    p.add_argument("--members", nargs="+", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--train")
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.add_argument("--strata", default="none", choices=["none", "support"])
    p.add_argument("--in-sample", action="store_true", help="report RMSE on the fitting rows")
    p.add_argument("--out", required=True)
    p = leaf(bl, "apply", cmd_blend_apply)
    p.add_argument("--blend", required=True)
    p.add_argument("--members", nargs="+", required=True)
    p.add_argument("--train")
    p.add_argument("--clip", action="store_true")
    p.add_argument("--out", required=True)

    vf = sub.add_parser("verify", help="run oracle self-checks")
    _common(vf)
    vf.set_defaults(func=cmd_verify)
    vf.add_argument("--suite", default="all",
                    choices=["all", "anova", "df", "eckart-young", "rbm", "knn"])

    leaves[(sub, "predict")] = pr
    leaves[(sub, "eval")] = ev
    leaves[(sub, "verify")] = vf
    return parser, leaves


def _selected_leaf(leaves, argv):
    words = [a for a in argv if not a.startswith("-")]
    for (group, name), p in leaves.items():
        prog = p.prog.split()[1:]
        if words[:len(prog)] == prog:
            return p
    return None


def parse(argv):
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
        leaf = _selected_leaf(leaves, argv)
        known = {a.dest for a in leaf._actions}
        unknown = set(config) - known
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        leaf.set_defaults(**config)
        args = parser.parse_args(argv)
    return parser, args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, args = parse(argv)
    if args.version:
        print(json.dumps({"cfstat": __version__, "schemas": SCHEMAS}, sort_keys=True))
        return 0
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    out = Outputs()
    try:
        status = args.func(args, out)
        return int(status or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        out.rollback()
        err = {"error": type(exc).__name__, "message": str(exc), "command": argv[:2]}
        sys.stderr.write(json.dumps(err) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
