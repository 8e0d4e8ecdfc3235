"""Evaluation protocol, baselines, and diagnostics.

Covers the per-cluster holdout split, global fine-tuning, test-time
training on nearest neighbors, the expert-by-cluster perplexity matrix,
pass@N routing accuracy, the centroid-vs-sum selection comparison, the
gradient-descent approximation bound probe, and the headline perplexity
table across methods.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from . import embedding, merging, model as lm, routing
from .catalog import ExpertCatalog, LatencyReport, load_active, timed_route_merge
from .clustering import ClusterAssignment
from .config import EvalProtocol, RunConfig
from .routing import MergeWeights, RoutingConfig


@dataclass
class HoldoutSplit:
    train_idx: np.ndarray  # document indices used for training
    holdout: dict[int, np.ndarray]  # cluster id -> diagnostic holdout indices
    test: dict[int, int]  # cluster id -> single test document index


def split_holdout(
    n_docs: int, assignment: ClusterAssignment, protocol: EvalProtocol
) -> HoldoutSplit:
    """Deterministic seeded split; exactly one test doc per cluster."""
    if n_docs != len(assignment.labels):
        raise ValueError("assignment does not cover the corpus")
    rng = np.random.default_rng(protocol.seed)
    train: list[int] = []
    holdout: dict[int, np.ndarray] = {}
    test: dict[int, int] = {}
    for k in range(assignment.K):
        members = assignment.members(k)
        if len(members) < 2:
            raise ValueError(f"cluster {k} too small to hold out a test document")
        shuffled = members[rng.permutation(len(members))]
        n_hold = max(1, int(round(protocol.holdout_fraction * len(members))))
        n_hold = min(n_hold, len(members) - 1)  # keep at least one train doc
        held = shuffled[:n_hold]
        test[k] = int(held[0])
        holdout[k] = np.sort(held[1:])
        train.extend(shuffled[n_hold:])
    return HoldoutSplit(
        train_idx=np.sort(np.array(train, dtype=np.int64)), holdout=holdout, test=test
    )


def global_finetune(
    base: lm.BaseParams, train_docs: list[str], cfg: lm.TrainConfig, rank: int, alpha: float
) -> lm.LoraAdapter:
    """One adapter trained on the whole training corpus."""
    return lm.train_adapter(base, train_docs, cfg, rank=rank, alpha=alpha)


def ttt_adapt(
    base: lm.BaseParams,
    query: np.ndarray,
    corpus_embeddings: np.ndarray,
    corpus_docs: list[str],
    N: int,
    cfg: lm.TrainConfig,
    rank: int,
    alpha: float,
    epochs: int = 1,
) -> lm.LoraAdapter:
    """Adapt to a prompt: one gradient step per nearest neighbor.

    Neighbors are visited most to least similar. With epochs > 1 the
    pass is repeated and the end-of-epoch checkpoint with the lowest
    neighbor NLL is returned.
    """
    if N > len(corpus_docs):
        raise ValueError(f"N={N} exceeds corpus size {len(corpus_docs)}")
    sims = corpus_embeddings.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((np.arange(len(sims)), -sims))[:N]
    neighbors = [corpus_docs[i] for i in order]

    adapter = lm.LoraAdapter.init(base, rank=rank, alpha=alpha, seed=cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, (a, b) in adapter.factors.items():
        params[f"{name}.A"] = a.astype(np.float64)
        params[f"{name}.B"] = b.astype(np.float64)
    opt = lm._Adam(params, cfg)

    def snapshot() -> lm.LoraAdapter:
        return lm.LoraAdapter(
            factors={
                n: (
                    params[f"{n}.A"].astype(np.float32),
                    params[f"{n}.B"].astype(np.float32),
                )
                for n in adapter.factors
            },
            rank=rank,
            alpha=alpha,
        )

    best: lm.LoraAdapter | None = None
    best_nll = np.inf
    for _ in range(epochs):
        for doc in neighbors:
            work = snapshot()
            loss, grads = lm.nll_and_grad(base, work, [doc], cfg.max_seq_len)
            if not np.isfinite(loss):
                raise ArithmeticError("diverged during test-time adaptation")
            flat = {}
            for name, (ga, gb) in grads.items():
                flat[f"{name}.A"] = ga
                flat[f"{name}.B"] = gb
            opt.step(params, flat)
        if epochs > 1:
            checkpoint = snapshot()
            nll = lm.batch_nll(base, checkpoint, neighbors, cfg.max_seq_len)
            if nll < best_nll:
                best, best_nll = checkpoint, nll
    return best if best is not None else snapshot()


def expert_cluster_matrix(
    base: lm.BaseParams,
    adapters: dict[int, lm.LoraAdapter],
    holdout_docs: dict[int, list[str]],
    eval_prefix_len: int = 0,
) -> np.ndarray:
    """Entry (k, j): perplexity of expert k on cluster j's holdout docs."""
    K = len(adapters)
    matrix = np.empty((K, K), dtype=np.float64)
    for k in range(K):
        for j in range(K):
            matrix[k, j] = lm.perplexity(base, adapters[k], holdout_docs[j], eval_prefix_len)
    return matrix


def pass_at_n(
    centroids: np.ndarray,
    samples: list[tuple[np.ndarray, int]],
    N_list: list[int],
) -> list[tuple[int, float]]:
    """Fraction of samples whose source cluster is among the N nearest."""
    K = len(centroids)
    if any(n < 1 or n > K for n in N_list):
        raise ValueError(f"N values must lie in [1, {K}]")
    c = centroids.astype(np.float64)
    ranks = []
    for emb, true_cluster in samples:
        sims = c @ np.asarray(emb, dtype=np.float64)
        order = np.lexsort((np.arange(K), -sims))
        ranks.append(int(np.flatnonzero(order == true_cluster)[0]))
    ranks_arr = np.array(ranks)
    return [(n, float((ranks_arr < n).mean())) for n in N_list]


def centroid_vs_sum_selection(
    query: np.ndarray, embeddings: np.ndarray, assignment: ClusterAssignment
) -> tuple[int, int]:
    """argmin cluster under the centroid criterion ||q - c_k||^2 versus the
    sum criterion sum_x ||q - phi(x)||^2."""
    q = np.asarray(query, dtype=np.float64)
    x = np.asarray(embeddings, dtype=np.float64)
    centroid_scores = []
    sum_scores = []
    for k in range(assignment.K):
        members = x[assignment.members(k)]
        centroid = members.mean(axis=0)
        centroid_scores.append(float(((q - centroid) ** 2).sum()))
        sum_scores.append(float(((q - members) ** 2).sum()))
    return int(np.argmin(centroid_scores)), int(np.argmin(sum_scores))


@dataclass(frozen=True)
class PropositionProbe:
    eta: float
    T: int
    N: int
    L_hat: float | None = None  # estimated if absent
    G_hat: float | None = None
    safety_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.N < 1:
            raise ValueError("N must be >= 1")


@dataclass
class ProbeResult:
    lhs: float
    rhs: float
    holds: bool
    L_hat: float
    G_hat: float
    diam_nn: float
    diam_other: float


def _adapter_from_flat(
    template: lm.LoraAdapter, params: dict[str, np.ndarray]
) -> lm.LoraAdapter:
    return lm.LoraAdapter(
        factors={
            n: (params[f"{n}.A"].astype(np.float32), params[f"{n}.B"].astype(np.float32))
            for n in template.factors
        },
        rank=template.rank,
        alpha=template.alpha,
    )


def _full_batch_gd(
    base: lm.BaseParams,
    docs: list[str],
    init: lm.LoraAdapter,
    eta: float,
    T: int,
) -> lm.LoraAdapter:
    """Plain gradient descent on the mean of per-document losses."""
    params: dict[str, np.ndarray] = {}
    for name, (a, b) in init.factors.items():
        params[f"{name}.A"] = a.astype(np.float64)
        params[f"{name}.B"] = b.astype(np.float64)
    for _ in range(T):
        work = _adapter_from_flat(init, params)
        acc: dict[str, np.ndarray] = {}
        for doc in docs:
            _, grads = lm.nll_and_grad(base, work, [doc])
            for name, (ga, gb) in grads.items():
                acc[f"{name}.A"] = acc.get(f"{name}.A", 0.0) + ga / len(docs)
                acc[f"{name}.B"] = acc.get(f"{name}.B", 0.0) + gb / len(docs)
        for key in params:
            params[key] = params[key] - eta * acc[key]
    return _adapter_from_flat(init, params)


def _flat_grad(base: lm.BaseParams, adapter: lm.LoraAdapter, doc: str) -> np.ndarray:
    _, grads = lm.nll_and_grad(base, adapter, [doc])
    return np.concatenate([g.ravel() for name in sorted(grads) for g in grads[name]])


def _flat_params(adapter: lm.LoraAdapter) -> np.ndarray:
    return np.concatenate(
        [
            arr.astype(np.float64).ravel()
            for name in sorted(adapter.factors)
            for arr in adapter.factors[name]
        ]
    )


def _embedding_diameter(embs: np.ndarray) -> float:
    if len(embs) <= 1:
        return 0.0
    x = embs.astype(np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    return float(np.sqrt(max(0.0, d2.max())))


def proposition_probe(
    probe: PropositionProbe,
    base: lm.BaseParams,
    prompt: str,
    corpus_docs: list[str],
    corpus_embeddings: np.ndarray,
    other_idx: np.ndarray,
    embedder_cfg: embedding.EmbedderConfig,
    seed: int = 0,
) -> ProbeResult:
    """Numeric check of the gradient-descent approximation bound.

    Trains two adapters with T full-batch GD steps of size eta from a
    shared initialization: one on the N nearest neighbors of the prompt,
    one on the provided subset. Requires the subset to intersect the
    neighbor set. The output-distribution distance must stay below
    eta * T * L_hat * G_hat * (diam(nn) + diam(subset)) with empirically
    estimated Lipschitz constants times a safety factor.
    """
    query = embedding.embed(embedder_cfg, prompt)
    sims = corpus_embeddings.astype(np.float64) @ query.astype(np.float64)
    nn_idx = np.lexsort((np.arange(len(sims)), -sims))[: probe.N]
    other_idx = np.asarray(other_idx, dtype=np.int64)
    if not np.intersect1d(nn_idx, other_idx).size:
        raise ValueError("proposition precondition violated: sets do not intersect")

    nn_docs = [corpus_docs[i] for i in nn_idx]
    other_docs = [corpus_docs[i] for i in other_idx]
    init = lm.LoraAdapter.init(base, rank=2, alpha=2.0, seed=seed)
    theta_nn = _full_batch_gd(base, nn_docs, init, probe.eta, probe.T)
    theta_other = _full_batch_gd(base, other_docs, init, probe.eta, probe.T)

    p_nn = lm.forward(base, theta_nn, prompt)
    p_other = lm.forward(base, theta_other, prompt)
    lhs = float(np.linalg.norm(p_nn.astype(np.float64) - p_other.astype(np.float64)))

    diam_nn = _embedding_diameter(corpus_embeddings[nn_idx])
    diam_other = _embedding_diameter(corpus_embeddings[other_idx])

    if probe.G_hat is not None:
        g_hat = probe.G_hat
    else:
        grads_nn = [_flat_grad(base, init, d) for d in nn_docs]
        grads_other = [_flat_grad(base, init, d) for d in other_docs]
        ratio = 0.0
        for i, gi in zip(nn_idx, grads_nn):
            for j, gj in zip(other_idx, grads_other):
                dist = float(
                    np.linalg.norm(
                        corpus_embeddings[i].astype(np.float64)
                        - corpus_embeddings[j].astype(np.float64)
                    )
                )
                if dist > 1e-12:
                    ratio = max(ratio, float(np.linalg.norm(gi - gj)) / dist)
        g_hat = probe.safety_factor * ratio

    if probe.L_hat is not None:
        l_hat = probe.L_hat
    else:
        rng = np.random.default_rng(seed)
        theta0 = _flat_params(theta_nn)
        ratio = 0.0
        for _ in range(8):
            direction = rng.standard_normal(theta0.size)
            direction /= np.linalg.norm(direction)
            eps = 1e-4
            perturbed = theta0 + eps * direction
            params: dict[str, np.ndarray] = {}
            off = 0
            for name in sorted(theta_nn.factors):
                for suffix, ref in zip(("A", "B"), theta_nn.factors[name]):
                    size = ref.size
                    params[f"{name}.{suffix}"] = perturbed[off : off + size].reshape(ref.shape)
                    off += size
            p1 = lm.forward(base, _adapter_from_flat(theta_nn, params), prompt)
            ratio = max(
                ratio,
                float(np.linalg.norm(p1.astype(np.float64) - p_nn.astype(np.float64))) / eps,
            )
        l_hat = probe.safety_factor * ratio

    rhs = probe.eta * probe.T * l_hat * g_hat * (diam_nn + diam_other)
    return ProbeResult(
        lhs=lhs,
        rhs=rhs,
        holds=lhs <= rhs,
        L_hat=l_hat,
        G_hat=g_hat,
        diam_nn=diam_nn,
        diam_other=diam_other,
    )


def ensemble_perplexity(
    base: lm.BaseParams,
    weights: MergeWeights,
    adapters: dict[int, lm.LoraAdapter],
    docs: list[str],
    eval_prefix_len: int = 0,
) -> float:
    """Perplexity of the weighted mixture of per-expert distributions."""
    total = 0.0
    count = 0
    weight_maps = {
        k: lm._effective_weights(base, adapters[k]) for k in weights.support
    }
    for doc in docs:
        if len(doc) <= eval_prefix_len:
            raise ValueError(f"document shorter than eval prefix: {doc[:32]!r}")
        inputs, targets = lm._doc_pairs(base.vocab, doc, 100_000)
        inputs = inputs[eval_prefix_len:]
        scored = targets[eval_prefix_len:]
        mix = np.zeros((len(inputs), base.vocab.size), dtype=np.float64)
        for k in weights.support:
            logits, _ = lm._position_logits(base, weight_maps[k], inputs)
            mix += weights.entries[k] * lm._softmax(logits)
        total += float(-np.log(mix[np.arange(len(scored)), scored]).sum())
        count += len(scored)
    return float(np.exp(total / count))


DEFAULT_METHODS = (
    "base",
    "finetune",
    "ttmm_tau",
    "ttmm_fixed_1",
    "ttmm_fixed_3",
    "ttmm_fixed_10",
    "ensemble_fixed_3",
    "ensemble_fixed_10",
    "ttt",
)


@dataclass
class EvalReport:
    perplexities: dict[str, float]
    matrix: np.ndarray | None = None
    diagonal_rowmin_fraction: float | None = None
    pass_at_n: list[tuple[int, float]] = field(default_factory=list)
    latency: dict[str, LatencyReport] = field(default_factory=dict)
    config_echo: str = ""

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("perplexity by method\n")
        for method, ppl in self.perplexities.items():
            out.write(f"  {method}: {ppl:.6f}\n")
        if self.diagonal_rowmin_fraction is not None:
            out.write(
                f"expert-cluster diagonal row-min fraction: "
                f"{self.diagonal_rowmin_fraction:.4f}\n"
            )
        if self.pass_at_n:
            out.write("pass@N\n")
            for n, acc in self.pass_at_n:
                out.write(f"  {n}: {acc:.4f}\n")
        if self.latency:
            out.write("latency (seconds)\n")
            for method, rep in self.latency.items():
                out.write(
                    f"  {method}: select={rep.select_duration:.6f} "
                    f"load={rep.load_duration:.6f} merge={rep.merge_duration:.6f} "
                    f"n_active={rep.n_active} bytes={rep.bytes_loaded}\n"
                )
        if self.config_echo:
            out.write("config\n")
            for line in self.config_echo.splitlines():
                out.write(f"  {line}\n")
        return out.getvalue()

    def to_csv(self) -> str:
        rows = ["method,perplexity"]
        rows.extend(f"{m},{p}" for m, p in self.perplexities.items())
        return "\n".join(rows) + "\n"


def diagonal_rowmin_fraction(matrix: np.ndarray) -> float:
    mins = matrix.argmin(axis=1)
    return float((mins == np.arange(len(matrix))).mean())


def run_table1(
    docs: list[str],
    embeddings: np.ndarray,
    assignment: ClusterAssignment,
    split: HoldoutSplit,
    base: lm.BaseParams,
    catalog: ExpertCatalog,
    cfg: RunConfig,
    methods: tuple[str, ...] = DEFAULT_METHODS,
    max_holdout_docs: int = 8,
) -> EvalReport:
    """Perplexity of every requested method on the per-cluster test set,
    plus routing diagnostics and a latency sample."""
    unknown = set(methods) - set(DEFAULT_METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    K = assignment.K
    test_pairs = [(k, split.test[k]) for k in range(K)]
    test_docs = [docs[i] for _, i in test_pairs]
    queries = [
        embedding.embed(cfg.embedder, docs[i][: cfg.protocol.query_prefix_len] or docs[i])
        for _, i in test_pairs
    ]
    train_docs = [docs[i] for i in split.train_idx]
    epl = cfg.protocol.eval_prefix_len

    all_adapters, _ = load_active(
        catalog,
        MergeWeights(entries={k: 1.0 / K for k in range(K)}),
    )

    report = EvalReport(perplexities={}, config_echo=yaml_echo(cfg))

    def per_doc_mean(ppls: list[float]) -> float:
        # average in NLL space: exp(mean log ppl)
        return float(np.exp(np.mean(np.log(ppls))))

    if "base" in methods:
        report.perplexities["base"] = lm.perplexity(base, None, test_docs, epl)

    if "finetune" in methods:
        ft = global_finetune(
            base, train_docs, cfg.expert_train, cfg.lora_rank, cfg.lora_alpha
        )
        report.perplexities["finetune"] = lm.perplexity(base, ft, test_docs, epl)

    def merged_ppl(route_cfg: RoutingConfig, label: str) -> None:
        ppls = []
        for (k, i), query in zip(test_pairs, queries):
            merged, latency = timed_route_merge(catalog, query, route_cfg)
            adapted = merging.apply_merged(base, merged)
            ppls.append(lm.perplexity(adapted, None, [docs[i]], epl))
            if label not in report.latency:
                report.latency[label] = latency
        report.perplexities[label] = per_doc_mean(ppls)

    def ensemble_ppl(n: int, label: str) -> None:
        ppls = []
        for (k, i), query in zip(test_pairs, queries):
            weights = routing.route_fixed_n(query, catalog, n, cfg.routing.beta)
            ppls.append(
                ensemble_perplexity(base, weights, all_adapters, [docs[i]], epl)
            )
        report.perplexities[label] = per_doc_mean(ppls)

    if "ttmm_tau" in methods:
        merged_ppl(cfg.routing, "ttmm_tau")
    for n in (1, 3, 10):
        label = f"ttmm_fixed_{n}"
        if label in methods:
            merged_ppl(
                dataclasses.replace(cfg.routing, fixed_n=min(n, K)), label
            )
    for n in (3, 10):
        label = f"ensemble_fixed_{n}"
        if label in methods:
            ensemble_ppl(min(n, K), label)

    if "ttt" in methods:
        train_embs = embeddings[split.train_idx]
        ttt_cfg = dataclasses.replace(
            cfg.expert_train, learning_rate=cfg.ttt_learning_rate, batch_size=1, epochs=1
        )
        ppls = []
        for (k, i), query in zip(test_pairs, queries):
            adapter = ttt_adapt(
                base,
                query,
                train_embs,
                train_docs,
                min(cfg.ttt_neighbors, len(train_docs)),
                ttt_cfg,
                cfg.lora_rank,
                cfg.lora_alpha,
                epochs=cfg.ttt_epochs,
            )
            ppls.append(lm.perplexity(base, adapter, [docs[i]], epl))
        report.perplexities["ttt"] = per_doc_mean(ppls)

    # diagnostics: expert-cluster matrix on capped holdout, pass@N
    holdout_docs = {}
    for k in range(K):
        idx = split.holdout[k][:max_holdout_docs]
        holdout_docs[k] = [docs[i] for i in idx] if len(idx) else [docs[split.test[k]]]
    matrix = expert_cluster_matrix(base, all_adapters, holdout_docs, epl)
    report.matrix = matrix
    report.diagonal_rowmin_fraction = diagonal_rowmin_fraction(matrix)

    samples = []
    for k in range(K):
        for i in split.holdout[k][:max_holdout_docs]:
            samples.append((embeddings[i], k))
    n_list = sorted({1, min(3, K), min(10, K), K})
    report.pass_at_n = pass_at_n(catalog.centroid_matrix(), samples, n_list)
    return report


def yaml_echo(cfg: RunConfig) -> str:
    import yaml

    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
