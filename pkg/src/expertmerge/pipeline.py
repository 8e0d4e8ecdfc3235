"""End-to-end catalog construction: embed, cluster, pre-train, train experts.

Everything is deterministic for a fixed config seed, so rebuilding with
the same inputs yields byte-identical adapters and manifest.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import catalog as store, clustering, embedding, model as lm
from .clustering import ClusterAssignment
from .config import RunConfig
from .evaluation import HoldoutSplit, split_holdout


@dataclass
class BuildResult:
    catalog: store.ExpertCatalog
    base: lm.BaseParams
    embeddings: np.ndarray
    assignment: ClusterAssignment
    split: HoldoutSplit


def build_catalog(docs: list[str], cfg: RunConfig, out_dir: str | Path) -> BuildResult:
    out_dir = Path(out_dir)
    (out_dir / store.ADAPTER_DIR).mkdir(parents=True, exist_ok=True)
    if cfg.n_clusters > len(docs):
        raise ValueError(f"K > n: {cfg.n_clusters} clusters for {len(docs)} documents")

    embeddings = embedding.embed_corpus(cfg.embedder, docs)
    assignment = clustering.bisecting_kmeans(embeddings, cfg.n_clusters, cfg.seed)
    split = split_holdout(len(docs), assignment, cfg.protocol)

    vocab = lm.Vocab.from_corpus(docs)
    train_docs = [docs[i] for i in split.train_idx]
    rng = np.random.default_rng(cfg.seed)
    n_pre = max(1, int(round(cfg.base_pretrain_fraction * len(train_docs))))
    pre_idx = rng.choice(len(train_docs), size=n_pre, replace=False)
    base = lm.train_base(
        vocab, [train_docs[i] for i in sorted(pre_idx)], cfg.base_train, cfg.hidden
    )
    fingerprint = base.fingerprint()
    store.save_base(base, out_dir)

    records: list[store.ExpertRecord] = []
    train_set = set(split.train_idx.tolist())
    for k in range(assignment.K):
        members = [i for i in assignment.members(k) if i in train_set]
        if not members:  # tiny cluster fully held out; train on the test doc's cluster mates
            members = list(assignment.members(k))
        cluster_docs = [docs[i] for i in members]
        expert_cfg = dataclasses.replace(cfg.expert_train, seed=cfg.expert_train.seed + 7919 * k)
        adapter = lm.train_adapter(
            base, cluster_docs, expert_cfg, rank=cfg.lora_rank, alpha=cfg.lora_alpha
        )
        centroid_src = embeddings[members].astype(np.float64).mean(axis=0)
        norm = float(np.linalg.norm(centroid_src))
        if norm == 0.0:
            raise ValueError(f"degenerate centroid: cluster {k} has zero-norm mean")
        centroid = (centroid_src / norm).astype(np.float32)
        rel_path = f"{store.ADAPTER_DIR}/expert_{k:04d}.bin"
        byte_size = store.save_adapter(adapter, out_dir / rel_path, fingerprint)
        blob = (out_dir / rel_path).read_bytes()
        records.append(
            store.ExpertRecord(
                expert_id=k,
                centroid=centroid,
                cluster_size=len(members),
                adapter_path=rel_path,
                byte_size=byte_size,
                checksum=blob[-8:].hex(),
            )
        )

    cat = store.ExpertCatalog(
        root=out_dir,
        records=records,
        embedder_fingerprint=cfg.embedder.fingerprint(),
        base_fingerprint=fingerprint,
    )
    store.save_manifest(cat)
    cfg.save(out_dir / "config.yaml")
    _write_assignment(out_dir / "assignment.txt", assignment)
    return BuildResult(
        catalog=cat, base=base, embeddings=embeddings, assignment=assignment, split=split
    )


def _write_assignment(path: Path, assignment: ClusterAssignment) -> None:
    lines = [f"{i} {int(label)}" for i, label in enumerate(assignment.labels)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_built(docs: list[str], catalog_dir: str | Path) -> BuildResult:
    """Reload a built catalog and recompute the deterministic split."""
    catalog_dir = Path(catalog_dir)
    cfg = RunConfig.load(catalog_dir / "config.yaml")
    cat = store.load_catalog(catalog_dir)
    base = store.load_base(catalog_dir)
    if base.fingerprint() != cat.base_fingerprint:
        raise ValueError("catalog base fingerprint mismatch")
    embeddings = embedding.embed_corpus(cfg.embedder, docs)
    labels = np.array(
        [
            int(line.split()[1])
            for line in (catalog_dir / "assignment.txt").read_text().splitlines()
        ],
        dtype=np.int64,
    )
    assignment = ClusterAssignment(labels=labels, K=cat.K)
    split = split_holdout(len(docs), assignment, cfg.protocol)
    return BuildResult(
        catalog=cat, base=base, embeddings=embeddings, assignment=assignment, split=split
    )
