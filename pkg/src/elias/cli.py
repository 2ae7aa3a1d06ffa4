"""Command-line interface: one subcommand per pipeline step.

Every command that writes an artifact also writes ``<artifact>.manifest.json``
with the command, the resolved config and git-style hashes of its inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from elias.config import TrainConfig, load_toml
from elias.exceptions import EliasError, InvariantError

logger = logging.getLogger("elias")

SUBCOMMANDS = (
    "ingest", "cluster", "train-stage1", "init-adjacency", "train-stage2", "predict",
    "train-ranker", "calibrate", "evaluate", "prune", "ensemble",
)


def git_hash(path):
    """SHA-1 of ``b"blob <size>\\0" + content``, as git computes blob ids."""
    h = hashlib.sha1()
    h.update(f"blob {os.path.getsize(path)}\0".encode())
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, command, inputs, cfg=None, extra=None):
    manifest = {
        "command": command,
        "inputs": {name: {"path": p, "hash": git_hash(p)} for name, p in sorted(inputs.items()) if p},
        "config": None if cfg is None else cfg.to_dict(),
        "seed": None if cfg is None else cfg.seed,
    }
    if extra:
        manifest.update(extra)
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def resolve_threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("ELIAS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvariantError(f"ELIAS_THREADS must be an integer, got {env!r}") from None
    return 1


def resolve_config(args):
    """Defaults < TOML file < explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(load_toml(args.config))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    values["threads"] = resolve_threads(args)
    try:
        return TrainConfig.from_dict(values).validate()
    except (TypeError, ValueError) as err:
        raise InvariantError(f"invalid config: {err}") from None


def _require(path, what):
    if not os.path.exists(path):
        raise InvariantError(f"{what} not found: {path}")
    return path


def _load_dataset(path):
    from elias.data import load_xmc_dataset

    return load_xmc_dataset(_require(path, "dataset"))


def _embeddings(args):
    from elias.encoder import read_embeddings

    path = getattr(args, "embeddings", None)
    return None if path is None else read_embeddings(_require(path, "embedding file"))


def _load_ckpt(path, stage=None, hint=""):
    from elias.training import Checkpoint

    ck = Checkpoint.load(_require(path, "checkpoint"))
    if stage is not None and ck.stage not in stage:
        raise InvariantError(f"{path} is a {ck.stage!r} checkpoint; expected {'/'.join(stage)}. {hint}".strip())
    return ck


def _with_embeddings(params, args):
    """Swap in per-split embeddings for a precomputed encoder."""
    from elias.encoder import Encoder

    if params.encoder.mode == "precomputed":
        E = _embeddings(args)
        if E is None:
            raise InvariantError("the checkpoint uses precomputed embeddings; pass --embeddings for this split")
        params = params.copy()
        params.encoder = Encoder.precomputed(E)
    return params


# -- commands ------------------------------------------------------------------


def cmd_ingest(args):
    from elias.data import compute_propensities, save_xmc_dataset, split_validation

    if args.synthetic:
        from elias.synthetic import make_synthetic_splits, synthetic_config

        os.makedirs(args.synthetic, exist_ok=True)
        train, val, test, _ = make_synthetic_splits(seed=args.seed)
        for name, ds in (("train", train), ("val", val), ("test", test)):
            save_xmc_dataset(ds, os.path.join(args.synthetic, f"{name}.txt"))
        with open(os.path.join(args.synthetic, "config.toml"), "w", encoding="utf-8") as f:
            for k, v in synthetic_config().to_dict().items():
                if v is not None:
                    f.write(f"{k} = {json.dumps(v)}\n")
        print(json.dumps({"train": train.num_points, "val": val.num_points, "test": test.num_points}))
        return 0
    if not args.input or not args.out:
        raise InvariantError("ingest needs --input and --out (or --synthetic DIR)")
    ds = _load_dataset(args.input)
    if args.val_size:
        if not args.val_out:
            raise InvariantError("--val-size needs --val-out")
        ds, val = split_validation(ds, args.val_size, seed=args.seed)
        save_xmc_dataset(val, args.val_out)
    save_xmc_dataset(ds, args.out)
    if args.propensity_out:
        np.savetxt(args.propensity_out, compute_propensities(ds).propensities, fmt="%.17g")
    write_manifest(args.out, "ingest", {"input": args.input})
    print(json.dumps({
        "points": ds.num_points, "features": ds.num_features, "labels": ds.num_labels,
        "points_without_labels": int(ds.empty_label_rows.size),
    }))
    return 0


def cmd_cluster(args):
    from elias.training import fit_partition, make_encoder

    cfg = resolve_config(args)
    ds = _load_dataset(args.train)
    part = fit_partition(ds, make_encoder(ds, cfg, _embeddings(args)), cfg.validate(ds.num_labels))
    part.save(args.out)
    write_manifest(args.out, "cluster", {"train": args.train, "embeddings": args.embeddings}, cfg)
    return 0


def cmd_train_stage1(args):
    from elias.clustering import Partition
    from elias.training import train_stage1

    cfg = resolve_config(args)
    ds = _load_dataset(args.train)
    part = Partition.load(_require(args.partition, "partition")) if args.partition else None
    ck = train_stage1(ds, cfg, _embeddings(args), partition=part)
    ck.save(args.out)
    write_manifest(args.out, "train-stage1", {"train": args.train, "partition": args.partition,
                                               "embeddings": args.embeddings}, cfg)
    return 0


def cmd_init_adjacency(args):
    from elias.training import init_adjacency_from

    ck = _load_ckpt(args.ckpt, ("stage1",), "Run train-stage1 first.")
    ds = _load_dataset(args.train)
    params = _with_embeddings(ck.params, args)
    ck.params = params
    out = init_adjacency_from(ck, ds)
    out.save(args.out)
    write_manifest(args.out, "init-adjacency", {"ckpt": args.ckpt, "train": args.train}, out.config)
    return 0


def cmd_train_stage2(args):
    from elias.training import train_stage2

    ck = _load_ckpt(args.ckpt, ("init",), "Run init-adjacency on the stage-1 checkpoint first.")
    ds = _load_dataset(args.train)
    ck.params = _with_embeddings(ck.params, args)
    out = train_stage2(ck, ds)
    out.save(args.out)
    write_manifest(args.out, "train-stage2", {"ckpt": args.ckpt, "train": args.train}, out.config)
    return 0


def _rerank_parts(args, ck):
    from elias.ranker import CalibrationTree, ScoreCalibrator, SparseRanker

    if not args.ranker:
        return None
    if not args.calibration or not args.train:
        raise InvariantError("re-ranking needs --ranker, --calibration and --train (for label frequencies)")
    ranker = SparseRanker.load(_require(args.ranker, "ranker file"))
    calib = ScoreCalibrator()
    with open(_require(args.calibration, "calibration tree"), encoding="utf-8") as f:
        calib.tree_ = CalibrationTree.from_json(f.read())
    return ranker, calib


def cmd_predict(args):
    from elias.estimator import encode_static, label_frequency, predict_ranked, rerank

    ck = _load_ckpt(args.ckpt, ("stage1", "init", "stage2"))
    ds = _load_dataset(args.data)
    params = _with_embeddings(ck.params, args)
    ranked, preds = predict_ranked(params, ck.config, ds.X, args.topk)
    parts = _rerank_parts(args, ck)
    if parts is not None:
        freq = label_frequency(_load_dataset(args.train).Y)
        ranked = rerank(ranked, encode_static(params, ds.X), parts[0], parts[1], freq)
    ranked.save(args.out)
    write_manifest(args.out, "predict", {"ckpt": args.ckpt, "data": args.data, "ranker": args.ranker,
                                         "calibration": args.calibration}, ck.config,
                   {"max_paths": int(max((p.num_paths for p in preds), default=0))})
    return 0


def cmd_train_ranker(args):
    from elias.estimator import encode_static, predict_ranked
    from elias.ranker import SparseRanker

    ck = _load_ckpt(args.ckpt, ("stage1", "stage2"))
    cfg = ck.config.replace(threads=resolve_threads(args))
    ds = _load_dataset(args.train)
    params = _with_embeddings(ck.params, args)
    ranked, _ = predict_ranked(params, cfg, ds.X, cfg.ranker_topk)
    reg = cfg.ranker_reg if args.reg is None else args.reg
    ranker = SparseRanker(reg=reg, max_iter=cfg.ranker_max_iter, n_jobs=cfg.threads)
    ranker.fit(encode_static(params, ds.X), ds.Y, ranked.labels)
    ranker.save(args.out)
    write_manifest(args.out, "train-ranker", {"ckpt": args.ckpt, "train": args.train}, cfg,
                   {"unseen_labels": int(ranker.unseen_labels_.size)})
    return 0


def cmd_calibrate(args):
    from elias.estimator import encode_static, label_frequency, predict_ranked
    from elias.ranker import ScoreCalibrator, SparseRanker, calibration_features

    ck = _load_ckpt(args.ckpt, ("stage1", "stage2"))
    val = _load_dataset(args.val)
    freq = label_frequency(_load_dataset(args.train).Y)
    ranker = SparseRanker.load(_require(args.ranker, "ranker file"))
    params = _with_embeddings(ck.params, args)
    ranked, _ = predict_ranked(params, ck.config, val.X, ck.config.ranker_topk)
    q = np.concatenate(ranker.predict_proba(encode_static(params, val.X), ranked.labels))
    p = np.concatenate(ranked.scores)
    lab = np.concatenate(ranked.labels)
    pts = np.repeat(np.arange(len(ranked)), [len(l) for l in ranked.labels])
    y = np.asarray(val.Y[pts, lab]).ravel() > 0
    calib = ScoreCalibrator(max_depth=args.max_depth, min_samples_leaf=args.min_leaf)
    calib.fit(calibration_features(p, q, freq[lab]), y)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(calib.tree_.to_json())
    write_manifest(args.out, "calibrate", {"ckpt": args.ckpt, "val": args.val, "train": args.train,
                                           "ranker": args.ranker}, ck.config)
    return 0


def cmd_evaluate(args):
    from elias.data import compute_propensities
    from elias.metrics import RankedPrediction, evaluate

    pred = RankedPrediction.load(_require(args.pred, "prediction file"))
    truth = _load_dataset(args.truth)
    if len(pred) != truth.num_points:
        raise InvariantError(f"{len(pred)} predictions for {truth.num_points} ground-truth points")
    ks = _int_list(args.k)
    prop = compute_propensities(_load_dataset(args.train)).propensities if args.train else None
    out = evaluate(pred, truth.Y, ks=ks, propensities=prop, recall_ks=_int_list(args.recall_k),
                   ndcg_ks=ks if args.ndcg else ())
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_prune(args):
    from elias.analysis import prune_threshold, prune_topk

    if (args.threshold is None) == (args.topk is None):
        raise InvariantError("prune needs exactly one of --threshold or --topk")
    ck = _load_ckpt(args.ckpt, ("stage2",))
    A = ck.params.A
    if args.threshold is not None:
        res = prune_threshold(A, ck.config.beta, args.threshold)
        A2, info = res.adjacency, {"fraction": res.fraction, "orphaned_labels": int(res.orphaned.size)}
    else:
        A2 = prune_topk(A, args.topk)
        info = {"fraction": 1.0 - A2.nnz / A.nnz if A.nnz else 0.0}
    ck.params = ck.params.copy()
    ck.params.A = A2
    ck.save(args.out)
    write_manifest(args.out, "prune", {"ckpt": args.ckpt}, ck.config, info)
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_ensemble(args):
    from elias.metrics import RankedPrediction, merge_ensemble

    preds = [RankedPrediction.load(_require(p, "prediction file")) for p in args.preds]
    merge_ensemble(preds).save(args.out)
    write_manifest(args.out, "ensemble", {f"pred{i}": p for i, p in enumerate(args.preds)})
    return 0


# -- parser --------------------------------------------------------------------


def _int_list(text):
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p):
    p.add_argument("--config", help="TOML file with training hyperparameters")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "threads":
            continue
        typ = {"int": int, "float": float, "str": str}[str(f.type).split(" ")[0]]
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=typ, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="elias", description="Learnable graph index for extreme classification")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: $ELIAS_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("ingest", parents=[common], help="validate and normalise a dataset file")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--val-size", type=int, default=0)
    p.add_argument("--val-out")
    p.add_argument("--propensity-out")
    p.add_argument("--synthetic", metavar="DIR", help="write the bundled synthetic dataset to DIR")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cluster", parents=[common], help="balanced label partition")
    p.add_argument("--train", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-stage1", parents=[common], help="train with the adjacency fixed to the partition")
    p.add_argument("--train", required=True)
    p.add_argument("--partition")
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("init-adjacency", parents=[common], help="sparse adjacency initialisation from a stage-1 checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_adjacency)

    p = sub.add_parser("train-stage2", parents=[common], help="joint training including the adjacency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("predict", parents=[common], help="ranked predictions, optionally re-ranked")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--ranker")
    p.add_argument("--calibration")
    p.add_argument("--train", help="training set (label frequencies for calibration)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("train-ranker", parents=[common], help="sparse per-label re-ranker on top predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--reg", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ranker)

    p = sub.add_parser("calibrate", parents=[common], help="fit the score-calibration tree on validation data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ranker", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--max-depth", type=int, default=8)
    p.add_argument("--min-leaf", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="metrics as JSON")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--k", default="1,3,5", type=str)
    p.add_argument("--recall-k", default="10,20,100", type=str)
    p.add_argument("--ndcg", action="store_true")
    p.add_argument("--train", help="training set, enables PSP@k")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("prune", parents=[common], help="prune a trained adjacency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("ensemble", parents=[common], help="merge prediction files by summing scores")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    for name in ("k", "recall_k"):
        if hasattr(args, name):
            try:
                _int_list(getattr(args, name))
            except argparse.ArgumentTypeError as err:
                parser.error(str(err))
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=resolve_threads(args)):
            return args.func(args)
    except (EliasError, ValueError, IndexError, OSError) as err:
        error = {"error": type(err).__name__, "message": str(err), "command": args.command}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
