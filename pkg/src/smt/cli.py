"""Command-line entry point: ``smt <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 missing upstream artifact,
4 unreadable or malformed input, 5 numerical failure, 6 artifact/config hash
mismatch, 7 any other pipeline error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import (
    DependencyError,
    FormatError,
    HashMismatchError,
    NumericError,
    RankError,
    SingularityError,
    SMTError,
    TruncatedFileError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_INPUT = 4
EXIT_NUMERIC = 5
EXIT_HASH = 6
EXIT_OTHER = 7

log = logging.getLogger("smt")


def exit_code_for(exc):
    from .pipeline import StageError

    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, DependencyError):
        return EXIT_DEPENDENCY
    if isinstance(exc, (FormatError, TruncatedFileError, FileNotFoundError)):
        return EXIT_INPUT
    if isinstance(exc, (SingularityError, RankError, NumericError)):
        return EXIT_NUMERIC
    if isinstance(exc, HashMismatchError):
        return EXIT_HASH
    return EXIT_OTHER


def _category(code):
    return {
        EXIT_DEPENDENCY: "dependency error",
        EXIT_INPUT: "input error",
        EXIT_NUMERIC: "numerical error",
        EXIT_HASH: "hash mismatch",
    }.get(code, "error")


def _common(p):
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--out", help="output directory for artifacts and reports")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "cifar100"])
    p.add_argument("--data-root", help="dataset root (default: $SMT_DATA_DIR or ./data)")
    p.add_argument("--train-limit", type=int, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, help="use only the first N test images")
    p.add_argument("--seed", type=int, help="seed for every stochastic stage")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _dict_flags(p):
    p.add_argument("--size", type=int, help="dictionary size K")
    p.add_argument("--spherical", action=argparse.BooleanOptionalAction, default=None,
                   help="spherical K-means (cosine assignment)")
    p.add_argument("--epochs", type=int, help="K-means epochs")
    p.add_argument("--dict-method", choices=["kmeans", "sample"])
    p.add_argument("--lambda-rel", type=float, help="whitening regulariser relative to mean variance")


def _smt_flags(p):
    p.add_argument("--dim", type=int, help="embedding dimension d_emb")
    p.add_argument("--drop-first", type=int, help="discard this many leading eigenvectors")
    p.add_argument("--mode", choices=["pairwise", "aggregated", "second_order"])
    p.add_argument("--v-floor", type=float, help="relative eigenvalue floor for V")
    p.add_argument("--pair-budget", type=int, help="cap on co-occurrence pairs")
    p.add_argument("--range", type=int, dest="cooc_range", help="co-occurrence range d in pixels")
    p.add_argument("--encoder", choices=["vq", "gq"])
    p.add_argument("--threshold", type=float, help="f_gq cosine threshold")


def _eval_flags(p):
    p.add_argument("--k", type=int, help="soft-KNN neighbour count")
    p.add_argument("--temperature", type=float, help="soft-KNN temperature")


def build_parser():
    parser = argparse.ArgumentParser(prog="smt", description="Sparse manifold transform toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage_parser(name, help):
        # every pipeline command takes the full flag set so that stage hashes
        # computed by separate invocations line up
        p = sub.add_parser(name, help=help)
        _common(p)
        _dict_flags(p)
        _smt_flags(p)
        _eval_flags(p)
        p.add_argument("--ks", type=int, help="pooling kernel size")
        p.add_argument("--stride", type=int, help="pooling stride")
        return p

    stage_parser("ingest", "load and fingerprint the dataset")
    stage_parser("train-dict", "fit whitening and the patch dictionary")
    stage_parser("fit-smt", "accumulate co-occurrence pairs and solve for P")
    p = stage_parser("embed", "embed train and test images")
    p.add_argument("--csv", action="store_true", help="also export embeddings as CSV")
    p = stage_parser("eval-knn", "soft-KNN accuracy of stored embeddings")
    p.add_argument("--train", help="explicit train embedding matrix (.f32 with .json sidecar)")
    p.add_argument("--test", help="explicit test embedding matrix (.f32 with .json sidecar)")
    stage_parser("run", "every stage end to end (cached)")
    p = stage_parser("ablation", "sparse-only / +whitening / SMT over K, and PCA vs SMT")
    p.add_argument("--sizes", default="512,2048,8192", help="comma-separated dictionary sizes")
    p.add_argument("--pca-dims", default="", help="comma-separated reduction dimensions")

    p = sub.add_parser("demo-spiral", help="two-spiral disentanglement demo")
    p.add_argument("--out", default="spiral", help="output directory")
    p.add_argument("--n-per-arm", type=int, default=2000)
    p.add_argument("--turns", type=float, default=1.5)
    p.add_argument("--noise", type=float, default=0.0, help="radial jitter of the data")
    p.add_argument("--landmarks", type=int, default=400, help="number of landmarks K")
    p.add_argument("--sigma", type=float, default=None,
                   help="pair noise (default: half the median landmark spacing)")
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dict-method", choices=["kmeans", "sample"], default="kmeans")
    p.add_argument("--no-svg", action="store_true", help="skip SVG panels")

    p = sub.add_parser("word-embed", help="word vectors from a text corpus")
    p.add_argument("--corpus", required=True, help="UTF-8 text, one document per line")
    p.add_argument("--out", default="words", help="output directory")
    p.add_argument("--vocab-size", type=int, default=33474)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--dim", type=int, default=300)
    p.add_argument("--drop-first", type=int, default=0)
    p.add_argument("--query", action="append", default=[], help="word to report neighbours for")
    p.add_argument("--top", type=int, default=10)
    return parser


FLAG_KEYS = {
    "dataset": "dataset", "data_root": "data_root", "train_limit": "train_limit",
    "test_limit": "test_limit", "seed": "seed", "out": "out_dir",
    "size": "K", "spherical": "spherical", "epochs": "kmeans_epochs",
    "dict_method": "dict_method", "lambda_rel": "lambda_rel",
    "dim": "d_emb", "drop_first": "drop_first", "mode": "mode", "v_floor": "v_floor_rel",
    "pair_budget": "pair_budget", "cooc_range": "cooc_range", "encoder": "encoder",
    "threshold": "threshold", "ks": "ks", "stride": "stride",
    "k": "knn_k", "temperature": "knn_temperature",
}


def config_from_args(args):
    from .pipeline import ExperimentConfig

    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.dataset and args.dataset != cfg.dataset:
            cfg = cfg.with_overrides({"dataset": args.dataset})
    else:
        cfg = ExperimentConfig.for_dataset(args.dataset or "mnist")
    overrides = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None and flag != "dataset":
            overrides[key] = value
    for item in args.set:
        if "=" not in item:
            raise FormatError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = cfg.with_overrides(overrides)
    if cfg.data_root is None and os.environ.get("SMT_DATA_DIR"):
        cfg = replace(cfg, data_root=os.environ["SMT_DATA_DIR"])
    return cfg


def _print(obj):
    print(json.dumps(obj, indent=2))


def cmd_stages(args, until, allow):
    from .pipeline import run_pipeline

    cfg = config_from_args(args)
    res = run_pipeline(cfg, until=until, allow=allow)
    _print(res.report)
    return res


def cmd_embed(args):
    from .pipeline import export_csv, load_matrix

    res = cmd_stages(args, "embed", {"ingest", "embed"})
    if args.csv:
        out = Path(res.report_path).parent
        h = res.report["stages"]["embed"]
        for split in ("train", "test"):
            from .pipeline import ArtifactStore

            path = ArtifactStore(out).path("embed", h, f"-{split}.f32")
            z, meta = load_matrix(path, expect_hash=h)
            export_csv(z, meta["labels"], out / f"embeddings-{split}.csv")


def cmd_eval(args):
    if args.train or args.test:
        if not (args.train and args.test):
            raise argparse.ArgumentTypeError("--train and --test go together")
        import numpy as np

        from .evaluation import KnnConfig, knn_accuracy
        from .pipeline import load_matrix

        cfg = config_from_args(args)
        ztr, mtr = load_matrix(args.train)
        zte, mte = load_matrix(args.test)
        if mtr["config_hash"] != mte["config_hash"]:
            raise HashMismatchError("train and test embeddings come from different configs")
        knn = KnnConfig(cfg.knn_k, cfg.knn_temperature)
        top1 = knn_accuracy(ztr, np.asarray(mtr["labels"]), zte, np.asarray(mte["labels"]), knn)
        _print({"dataset": cfg.dataset, "config_hash": mtr["config_hash"], "k": knn.k,
                "temperature": knn.temperature, "top1": top1})
        return
    cmd_stages(args, "eval", {"ingest", "eval"})


def cmd_ablation(args):
    from .pipeline import run_ablation

    cfg = config_from_args(args)
    sizes = tuple(int(s) for s in args.sizes.split(",") if s.strip())
    dims = tuple(int(s) for s in args.pca_dims.split(",") if s.strip())
    rows = run_ablation(cfg, sizes, dims)
    _print(rows)


def cmd_spiral(args):
    from .synthetic_demo import generate_spirals, run_spiral_smt, write_outputs

    ds = generate_spirals(args.n_per_arm, args.turns, args.noise, args.seed)
    rep = run_spiral_smt(ds, K=args.landmarks, sigma=args.sigma, d_emb=args.dim,
                         seed=args.seed, dict_method=args.dict_method)
    write_outputs(ds, rep, args.out, svg=not args.no_svg)
    Path(args.out, "report.json").write_text(json.dumps(rep.metrics, indent=2) + "\n")
    _print(rep.metrics)


def cmd_words(args):
    from .word_embedding import (
        build_vocab,
        cooccurrence_vs_similarity,
        read_corpus,
        save_word2vec_text,
        train_word_smt,
    )

    vocab = build_vocab(read_corpus(args.corpus), args.vocab_size)
    emb, table = train_word_smt(read_corpus(args.corpus), vocab, args.window, args.dim,
                                args.drop_first)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.tsv")
    save_word2vec_text(emb, vocab, out / "vectors.txt")
    rows = []
    for q in args.query:
        for r in cooccurrence_vs_similarity(q, table, emb, vocab, args.top):
            rows.append({"query": q, **r})
    if rows:
        import csv

        with open(out / "neighbors.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["query", "ranking", "rank", "word", "cosine",
                                               "cooccurrence"])
            w.writeheader()
            w.writerows(rows)
    _print({"vocab": len(vocab), "d_emb": emb.d_emb, "queries": len(args.query)})


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .pipeline import STAGES

    commands = {
        "ingest": lambda a: cmd_stages(a, "ingest", {"ingest"}),
        "train-dict": lambda a: cmd_stages(a, "dict", {"ingest", "whiten", "dict"}),
        "fit-smt": lambda a: cmd_stages(a, "smt", {"ingest", "pairs", "smt"}),
        "embed": cmd_embed,
        "eval-knn": cmd_eval,
        "run": lambda a: cmd_stages(a, "eval", set(STAGES)),
        "ablation": cmd_ablation,
        "demo-spiral": cmd_spiral,
        "word-embed": cmd_words,
    }
    try:
        with _threads(args.threads):
            commands[args.command](args)
    except argparse.ArgumentTypeError as exc:
        print(f"smt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SMTError, OSError, ValueError, KeyError) as exc:
        code = exit_code_for(exc)
        stage = getattr(exc, "stage", None)
        where = f" in stage '{stage}'" if stage else ""
        print(f"smt: {_category(code)}{where}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
