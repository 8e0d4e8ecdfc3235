"""Command-line surface: build, eval, bench, generate, probe, cluster-report."""

from __future__ import annotations

import argparse
import dataclasses
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import catalog as store, clustering, embedding, evaluation, model as lm, pipeline, routing
from .config import RunConfig
from .corpus import read_corpus
from .evaluation import DEFAULT_METHODS, PropositionProbe


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not value:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        try:
            import yaml

            overrides[key] = yaml.safe_load(value)
        except Exception as exc:  # pragma: no cover - malformed override value
            raise SystemExit(f"bad override {item!r}: {exc}")
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_build(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    docs = read_corpus(args.corpus)
    result = pipeline.build_catalog(docs, cfg, args.out)
    print(f"built catalog with {result.catalog.K} experts at {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    docs = read_corpus(args.corpus)
    built = pipeline.load_built(docs, args.catalog)
    cfg = RunConfig.load(Path(args.catalog) / "config.yaml")
    methods = tuple(args.methods.split(",")) if args.methods else DEFAULT_METHODS
    report = evaluation.run_table1(
        docs,
        built.embeddings,
        built.assignment,
        built.split,
        built.base,
        built.catalog,
        cfg,
        methods=methods,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_text())
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    docs = read_corpus(args.corpus)
    built = pipeline.load_built(docs, args.catalog)
    cfg = RunConfig.load(Path(args.catalog) / "config.yaml")
    taus = [float(t) for t in args.taus.split(",")]
    betas = [float(b) for b in args.betas.split(",")]
    query_doc = docs[built.split.test[0]]
    query = embedding.embed(
        cfg.embedder, query_doc[: cfg.protocol.query_prefix_len] or query_doc
    )
    rows = bench_sweep(built.catalog, query, taus, betas, args.repetitions)
    header = "tau,beta,n_active,select_ms,load_ms,merge_ms,bytes_loaded"
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['tau']},{row['beta']},{row['n_active']},"
            f"{row['select_ms']:.4f},{row['load_ms']:.4f},{row['merge_ms']:.4f},"
            f"{row['bytes_loaded']}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def bench_sweep(
    catalog: store.ExpertCatalog,
    query: np.ndarray,
    taus: list[float],
    betas: list[float],
    repetitions: int,
) -> list[dict]:
    """Median select/load/merge latency per (tau, beta) cell."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rows = []
    for tau in taus:
        for beta in betas:
            route_cfg = routing.RoutingConfig(beta=beta, tau=tau)
            selects, loads, merges = [], [], []
            n_active = 0
            bytes_loaded = 0
            for _ in range(repetitions):
                _, rep = store.timed_route_merge(catalog, query, route_cfg)
                selects.append(rep.select_duration)
                loads.append(rep.load_duration)
                merges.append(rep.merge_duration)
                n_active = rep.n_active
                bytes_loaded = rep.bytes_loaded
            rows.append(
                {
                    "tau": tau,
                    "beta": beta,
                    "n_active": n_active,
                    "bytes_loaded": bytes_loaded,
                    "select_ms": 1e3 * statistics.median(selects),
                    "load_ms": 1e3 * statistics.median(loads),
                    "merge_ms": 1e3 * statistics.median(merges),
                }
            )
    return rows


def cmd_generate(args: argparse.Namespace) -> int:
    docs = read_corpus(args.corpus) if args.corpus else None
    catalog_dir = Path(args.catalog)
    cfg = RunConfig.load(catalog_dir / "config.yaml")
    cat = store.load_catalog(catalog_dir)
    base = store.load_base(catalog_dir)
    from . import merging

    if args.method == "base":
        text = lm.generate(base, None, args.prompt, args.n_tokens, args.seed)
    elif args.method == "merged":
        query = embedding.embed(cfg.embedder, args.prompt or "?")
        merged, _ = store.timed_route_merge(cat, query, cfg.routing)
        text = lm.generate(merging.apply_merged(base, merged), None, args.prompt, args.n_tokens, args.seed)
    elif args.method.startswith("expert-"):
        k = int(args.method.split("-", 1)[1])
        adapter = store.load_adapter(cat.adapter_file(k), cat.base_fingerprint)
        text = lm.generate(base, adapter, args.prompt, args.n_tokens, args.seed)
    else:
        raise SystemExit(f"unknown method {args.method!r}")
    print(text)
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    docs = read_corpus(args.corpus)
    embs = embedding.embed_corpus(cfg.embedder, docs)
    vocab = lm.Vocab.from_corpus(docs)
    base = lm.BaseParams.init_random(vocab, hidden=8, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    probe = PropositionProbe(eta=args.eta, T=args.steps, N=args.neighbors)
    held = 0
    for trial in range(args.trials):
        prompt_idx = int(rng.integers(len(docs)))
        prompt = docs[prompt_idx][:24]
        query = embedding.embed(cfg.embedder, prompt)
        sims = embs.astype(np.float64) @ query.astype(np.float64)
        nn = np.argsort(-sims)[: probe.N]
        extra = rng.choice(len(docs), size=min(3, len(docs)), replace=False)
        other = np.unique(np.concatenate(([nn[0]], extra)))
        result = evaluation.proposition_probe(
            probe, base, prompt, docs, embs, other, cfg.embedder, seed=cfg.seed + trial
        )
        held += int(result.holds)
        print(
            f"trial {trial}: lhs={result.lhs:.3e} rhs={result.rhs:.3e} "
            f"holds={result.holds}"
        )
    print(f"bound held on {held}/{args.trials} trials")
    return 0 if held == args.trials else 1


def cmd_cluster_report(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    docs = read_corpus(args.corpus)
    embs = embedding.embed_corpus(cfg.embedder, docs)
    k_list = [int(k) for k in args.k_list.split(",")]
    curve = clustering.elbow_curve(embs, k_list, cfg.seed)
    print("K,loss")
    for k, loss in curve:
        print(f"{k},{loss:.6f}")
    assignment = clustering.bisecting_kmeans(embs, k_list[-1], cfg.seed)
    print("\ncluster titles (top character n-grams)")
    for k in range(assignment.K):
        members = assignment.members(k)
        counts: dict[str, int] = {}
        for i in members[:50]:
            for gram in embedding.ngrams(docs[i], (3,)):
                counts[gram] = counts.get(gram, 0) + 1
        top = sorted(counts, key=lambda g: (-counts[g], g))[:5]
        print(f"  cluster {k} (n={len(members)}): {' '.join(top)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expertmerge",
        description="Cluster a corpus, train per-cluster low-rank experts, and "
        "merge them per prompt at inference time.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML config file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config key, e.g. routing.tau=0.02",
        )

    p = sub.add_parser("build", help="build an expert catalog from a corpus")
    p.add_argument("corpus", help="corpus file (one doc per line) or directory")
    p.add_argument("out", help="catalog output directory")
    common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("eval", help="evaluate methods against the catalog")
    p.add_argument("catalog")
    p.add_argument("corpus")
    p.add_argument("out", help="report output directory")
    p.add_argument("--methods", help="comma-separated subset of methods")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency sweep over tau and beta")
    p.add_argument("catalog")
    p.add_argument("corpus")
    p.add_argument("--taus", default="0.0,0.005,0.01,0.02")
    p.add_argument("--betas", default="0.02,0.05,0.1")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("generate", help="generate text with base/merged/expert model")
    p.add_argument("catalog")
    p.add_argument("prompt")
    p.add_argument("--corpus")
    p.add_argument("--n-tokens", type=int, default=100)
    p.add_argument("--method", default="merged", help="base | merged | expert-<id>")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("probe", help="numeric sweep of the approximation bound")
    p.add_argument("corpus")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--neighbors", type=int, default=5)
    common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("cluster-report", help="elbow curve and cluster titles")
    p.add_argument("corpus")
    p.add_argument("--k-list", default="1,2,4,8,16,32")
    common(p)
    p.set_defaults(func=cmd_cluster_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
