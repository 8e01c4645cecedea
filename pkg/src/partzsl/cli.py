"""Command-line pipeline driver.

Subcommands: featurize, split, synth, train, predict, eval, analyze.
A JSON config file supplies defaults for every knob; flags win over the
config. Exit codes: 0 success, 2 rejected input, 3 numeric failure.
Outputs are byte-reproducible for identical inputs and config; wall-clock
information goes only to the ``run.log`` sidecar.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, data_io, evaluation, textfeat, trainer
from .errors import InputError, NumericError
from .model import HyperParams, group_norm_matrix, score_matrix
from .optimizer import LbfgsConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 0,
    "featurizer": {
        "lowercase": True,
        "token_pattern": textfeat.DEFAULT_TOKEN_PATTERN,
        "min_df": 1,
        "idf_variant": "smoothed",
        "l2_normalize": True,
    },
    "hyper": {
        "lambda1": 0.01,
        "lambda2": 1.0,
        "d": 50,
        "max_outer_iters": 20,
        "inner_tol": 1e-6,
        "outer_tol": 1e-6,
        "group_eps": 1e-8,
        "inner_max_iters": 60,
        "joint_wx": True,
    },
    "lbfgs": {
        "memory": 10,
        "max_iters": 200,
        "grad_tol": 1e-6,
        "c1": 1e-4,
        "shrink": 0.5,
        "max_backtracks": 40,
    },
    "split": {"mode": "SCS", "fraction": 0.2},
    "synthetic": data_io.SyntheticSpec().to_dict(),
    "eval": {"per_class": True},
    "analysis": {"top_k": 30, "top_n_terms": 10},
    "train": {"checkpoint_every": 0},
}
# keys whose config value is replaced by the one-true --seed flag
_SEEDED = (("seed",), ("synthetic", "seed"))


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in merged:
            raise InputError(f"unknown config key {where!r}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise InputError(f"config key {where!r} must be an object")
            merged[key] = _merge_config(merged[key], value, where)
        else:
            merged[key] = value
    return merged


def load_config(path=None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise InputError(f"config {path} must hold a JSON object")
        config = _merge_config(config, user)
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _apply_seed(config: dict, seed) -> None:
    if seed is None:
        return
    config["seed"] = int(seed)
    config["synthetic"]["seed"] = int(seed)


def _hyper_from(config: dict) -> HyperParams:
    return HyperParams(seed=config["seed"], **config["hyper"])


def _lbfgs_from(config: dict) -> LbfgsConfig:
    return LbfgsConfig(**config["lbfgs"])


def _echo(config: dict) -> dict:
    return {"config": config, "config_hash": config_hash(config)}


class _RunLog:
    """Timestamped sidecar log; the only output that may carry wall time."""

    def __init__(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.path = out_dir / "run.log"
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, message: str) -> None:
        stamp = datetime.now(timezone.utc).isoformat()
        self._fh.write(f"{stamp} {message}\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_featurize(args, config: dict) -> int:
    stopwords = textfeat.default_stopwords()
    if args.stopwords == "none":
        stopwords = frozenset()
    elif args.stopwords is not None:
        stopwords = textfeat.load_stopwords(args.stopwords)
    corpus_path = Path(args.corpus)
    if corpus_path.is_dir():
        corpus = textfeat.read_corpus_dir(corpus_path, stopwords)
    else:
        corpus = textfeat.read_corpus_json(corpus_path, stopwords)
    feat = textfeat.TfidfFeaturizer(
        textfeat.FeaturizerConfig(**config["featurizer"]))
    tfidf = feat.fit_transform(corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_io.write_matrix(out / "tfidf.pmtx", tfidf.values)
    feat.save(out)
    _write_json(out / "featurize.json", {
        **_echo(config),
        "class_ids": list(tfidf.class_ids),
        "n_terms": tfidf.n_terms,
    })
    return EXIT_OK


def cmd_split(args, config: dict) -> int:
    if args.bundle is not None:
        hierarchy = data_io.load_bundle(args.bundle).hierarchy
    elif args.hierarchy is not None:
        hierarchy = json.loads(Path(args.hierarchy).read_text(encoding="utf-8"))
    else:
        raise InputError("split needs --bundle or --hierarchy")
    mode = args.mode or config["split"]["mode"]
    fraction = args.fraction if args.fraction is not None \
        else config["split"]["fraction"]
    split = data_io.make_split(hierarchy, mode, fraction, config["seed"])
    split.save(args.out)
    return EXIT_OK


def cmd_synth(args, config: dict) -> int:
    spec = data_io.SyntheticSpec(**config["synthetic"])
    bundle, truth = data_io.generate_synthetic(spec)
    out = Path(args.out)
    data_io.save_bundle(bundle, out)
    data_io.save_planted_truth(truth, out / "truth")
    _write_json(out / "synth.json", _echo(config))
    return EXIT_OK


def cmd_train(args, config: dict) -> int:
    bundle = data_io.load_bundle(args.bundle)
    split = data_io.SplitSpec.load(args.split)
    missing = [c for c in split.seen if c not in set(bundle.class_ids)]
    if missing:
        raise InputError(f"split seen classes missing from bundle: {missing[:5]}")
    train_data = bundle.restrict_to_classes(list(split.seen))
    hyper = _hyper_from(config)
    lbfgs = _lbfgs_from(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = _RunLog(out)
    log.write(f"train start: {len(split.seen)} seen classes, "
              f"{train_data.X.n_samples} samples")
    trace_rows = []

    def sink(record):
        trace_rows.append(record.to_dict(include_wall_time=False))
        log.write(f"iter {record.iteration} phase {record.phase} "
                  f"total {record.total:.6g} wall {record.wall_time:.3f}s")

    every = int(config["train"]["checkpoint_every"])

    def checkpoint(iteration, model):
        if every > 0 and iteration % every == 0:
            data_io.save_model(model, out / f"checkpoint_{iteration:04d}",
                               hyper_dict=config["hyper"])

    try:
        result = trainer.fit(train_data.tfidf, train_data.Y, train_data.X,
                             hyper, lbfgs=lbfgs, trace_sink=sink,
                             checkpoint_fn=checkpoint)
    except NumericError as exc:
        if exc.last_model is not None:
            data_io.save_model(exc.last_model, out / "model",
                               hyper_dict=config["hyper"],
                               provenance={"status": "numeric-failure"})
            log.write(f"numeric failure, last checkpoint retained: {exc}")
        log.close()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    data_io.save_model(result.model, out / "model",
                       hyper_dict=config["hyper"],
                       provenance={**_echo(config), "split_mode": split.mode,
                                   "converged": result.converged})
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for row in trace_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _write_json(out / "train.json", {
        **_echo(config),
        "converged": result.converged,
        "outer_iterations": len(result.trace),
        "final_objective": result.trace[-1].total if result.trace else None,
    })
    log.write("train done")
    log.close()
    return EXIT_OK


def _candidate_classes(bundle, split, which: str):
    if split is None or which == "all":
        return list(bundle.class_ids)
    return list(split.unseen if which == "unseen" else split.seen)


def cmd_predict(args, config: dict) -> int:
    model = data_io.load_model(args.model)
    bundle = data_io.load_bundle(args.bundle)
    split = data_io.SplitSpec.load(args.split) if args.split else None
    candidates = _candidate_classes(bundle, split, args.classes)
    sub = bundle.restrict_to_classes(candidates)
    scores = score_matrix(model, sub.tfidf, sub.X)
    preds = np.argmax(scores, axis=1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("sample_id,true_class,predicted_class\n")
        labels = sub.Y.labels
        for i, sid in enumerate(sub.X.sample_ids):
            fh.write(f"{sid},{candidates[labels[i]]},{candidates[preds[i]]}\n")
    return EXIT_OK


def _unseen_tfidf(args, bundle, split, model):
    """Unseen-class text columns: transformed articles if given, else bundle."""
    if args.articles is not None:
        if args.featurizer is None:
            raise InputError(
                "--articles requires --featurizer with the fitted vocabulary")
        feat = textfeat.TfidfFeaturizer.load(args.featurizer)
        if tuple(feat.vocab_) != model.vocab:
            raise InputError(
                "fitted featurizer vocabulary does not match the model")
        path = Path(args.articles)
        stopwords = textfeat.default_stopwords()
        corpus = textfeat.read_corpus_dir(path, stopwords) if path.is_dir() \
            else textfeat.read_corpus_json(path, stopwords)
        absent = [c for c in split.unseen if c not in corpus.documents]
        if absent:
            raise InputError(f"articles missing for unseen classes: {absent[:5]}")
        docs = {c: corpus.documents[c] for c in split.unseen}
        return feat.transform(docs, corpus.stopwords)
    missing = [c for c in split.unseen if c not in set(bundle.class_ids)]
    if missing:
        raise InputError(
            f"unseen classes missing from bundle text: {missing[:5]}")
    return bundle.tfidf.select_classes(list(split.unseen))


def cmd_eval(args, config: dict) -> int:
    model = data_io.load_model(args.model)
    bundle = data_io.load_bundle(args.bundle)
    split = data_io.SplitSpec.load(args.split)
    per_class = bool(config["eval"]["per_class"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    unseen_T = _unseen_tfidf(args, bundle, split, model)
    unseen_idx = bundle.sample_indices_for(split.unseen)
    if unseen_idx.size == 0:
        raise InputError("bundle holds no samples of unseen classes")
    X_unseen = bundle.X.select_samples(unseen_idx)
    ucol = {c: j for j, c in enumerate(split.unseen)}
    unseen_labels = [ucol[bundle.class_ids[k]]
                     for k in bundle.Y.labels[unseen_idx]]

    report = {**_echo(config), "mode": args.mode, "split_mode": split.mode,
              "per_class": per_class}
    if args.mode == "zsl":
        table = evaluation.build_score_table(
            model, unseen_T, X_unseen, unseen_labels,
            [False] * len(split.unseen))
        report["top1"] = evaluation.top1_accuracy(table, per_class)
    else:
        seen_T = bundle.tfidf.select_classes(list(split.seen))
        joint_vocab_ok = seen_T.vocab == unseen_T.vocab
        if not joint_vocab_ok:
            raise InputError("seen and unseen text vocabularies differ")
        joint_values = np.concatenate([seen_T.values, unseen_T.values], axis=1)
        joint_ids = list(split.seen) + list(split.unseen)
        joint_T = type(seen_T)(joint_values, seen_T.vocab, tuple(joint_ids))
        seen_mask = np.array([True] * len(split.seen) +
                             [False] * len(split.unseen))
        jcol = {c: j for j, c in enumerate(joint_ids)}

        seen_idx = bundle.sample_indices_for(split.seen)
        if seen_idx.size == 0:
            raise InputError("bundle holds no samples of seen classes")
        X_seen = bundle.X.select_samples(seen_idx)
        seen_labels = [jcol[bundle.class_ids[k]]
                       for k in bundle.Y.labels[seen_idx]]
        unseen_joint_labels = [jcol[bundle.class_ids[k]]
                               for k in bundle.Y.labels[unseen_idx]]
        seen_table = evaluation.build_score_table(
            model, joint_T, X_seen, seen_labels, seen_mask)
        unseen_table = evaluation.build_score_table(
            model, joint_T, X_unseen, unseen_joint_labels, seen_mask)
        curve = evaluation.seen_unseen_curve(seen_table, unseen_table,
                                             per_class)
        evaluation.write_curve_csv(curve, out / "curve.csv")
        report["ausuc"] = curve.ausuc
        report["n_curve_points"] = len(curve.points)
    evaluation.write_report_json(out / "report.json", report)
    return EXIT_OK


def cmd_analyze(args, config: dict) -> int:
    model = data_io.load_model(args.model)
    k = min(int(config["analysis"]["top_k"]), model.n_terms)
    report = analysis.connectivity(model, k=k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    part_names = list(model.part_names)
    analysis.write_matrix_csv(out / "norms.csv", report.norms,
                              part_names, list(model.vocab))
    analysis.write_matrix_csv(out / "overlap.csv", report.overlap,
                              part_names, part_names)
    payload = {**_echo(config),
               "connectivity": analysis.connectivity_report_dict(
                   report, part_names)}
    if args.bundle is not None and args.sample is not None:
        bundle = data_io.load_bundle(args.bundle)
        try:
            idx = bundle.X.sample_ids.index(args.sample)
        except ValueError:
            raise InputError(f"sample id {args.sample!r} not in bundle")
        x_parts = [f[:, idx] for f in bundle.X.features]
        missing = [bool(m) for m in bundle.X.missing[:, idx]]
        scores = score_matrix(model, bundle.tfidf,
                              bundle.X.select_samples([idx]))[0]
        predicted = int(np.argmax(scores))
        t_k = bundle.tfidf.values[:, predicted]
        grounding = analysis.ground_terms(
            model, x_parts, t_k, top_n=int(config["analysis"]["top_n_terms"]),
            missing=missing)
        payload["grounding"] = {
            "sample_id": args.sample,
            "predicted_class": bundle.class_ids[predicted],
            "terms": {name: [{"term": t, "strength": s} for t, s in ranked]
                      for name, ranked in zip(part_names, grounding)},
        }
    _write_json(out / "analysis.json", payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partzsl",
        description="Part-based zero-shot classifier pipeline")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="seed for all randomness")
    parser.add_argument("--threads", type=int,
                        help="worker pool size hint (never affects results)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="build tf-idf features from articles")
    p.add_argument("--corpus", required=True,
                   help="directory of <class_id>.txt files or a JSON map")
    p.add_argument("--stopwords",
                   help="stopword file (one token per line); 'none' disables; "
                        "default: bundled English list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("split", help="make a seen/unseen class split")
    p.add_argument("--bundle", help="bundle manifest supplying the hierarchy")
    p.add_argument("--hierarchy", help="JSON map class_id -> super_category")
    p.add_argument("--mode", choices=["SCS", "SCE"])
    p.add_argument("--fraction", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate the synthetic planted bundle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the seen classes of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-sample predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split")
    p.add_argument("--classes", choices=["unseen", "seen", "all"],
                   default="unseen")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="zero-shot or generalized evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--mode", choices=["zsl", "gzsl"], default="zsl")
    p.add_argument("--articles",
                   help="unseen-class articles (dir or JSON) to featurize "
                        "with the fitted vocabulary")
    p.add_argument("--featurizer",
                   help="directory with the fitted featurizer state")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="term-part connectivity report")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", help="bundle for per-sample grounding")
    p.add_argument("--sample", help="sample id to ground")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        _apply_seed(config, args.seed)
        if args.threads is not None:
            config["threads"] = args.threads
        return args.func(args, config)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
