"""Small autoregressive character-level language model with low-rank adapters.

The base network is a per-position MLP: token embedding, two tanh dense
blocks, and an output projection to next-token logits. Adapters add a
rank-r update (alpha/r) * B @ A to any of the dense matrices while the
base weights stay frozen. Parameters are stored in float32; all forward,
gradient, and reduction arithmetic runs in float64 so that results are
reproducible and finite-difference checks are tight.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

BOS = "\x02"
EOS = "\x03"

# names of the matrices an adapter may target, in storage order
TARGET_NAMES = ("block0", "block1", "out_proj")

# global counter of single-model distribution evaluations; tests use it
# to verify that ensembling costs one evaluation per active expert while
# merged inference costs exactly one
FORWARD_EVALS = 0


def reset_forward_evals() -> None:
    global FORWARD_EVALS
    FORWARD_EVALS = 0


@dataclass(frozen=True)
class Vocab:
    symbols: str  # ordered characters, BOS first, EOS second

    def __post_init__(self) -> None:
        if len(self.symbols) < 3:
            raise ValueError("vocab needs BOS, EOS and at least one character")
        if self.symbols[0] != BOS or self.symbols[1] != EOS:
            raise ValueError("symbols must start with BOS, EOS markers")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocab")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @staticmethod
    def from_corpus(docs: list[str]) -> "Vocab":
        chars = sorted(set("".join(docs)) - {BOS, EOS})
        return Vocab(symbols=BOS + EOS + "".join(chars))

    def index(self, ch: str) -> int:
        i = self.symbols.find(ch)
        if i < 0:
            raise ValueError(f"out of vocabulary: {ch!r}")
        return i

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index(ch) for ch in text], dtype=np.int64)

    def decode(self, ids: np.ndarray) -> str:
        return "".join(self.symbols[i] for i in ids)


@dataclass
class BaseParams:
    vocab: Vocab
    embed_table: np.ndarray  # (V, h) float32
    block0: np.ndarray  # (h, h) float32
    block1: np.ndarray  # (h, h) float32
    out_proj: np.ndarray  # (V, h) float32

    def __post_init__(self) -> None:
        v, h = self.embed_table.shape
        if v != self.vocab.size:
            raise ValueError("embed_table rows must match vocab size")
        for name in ("block0", "block1"):
            if getattr(self, name).shape != (h, h):
                raise ValueError(f"{name} must be ({h}, {h})")
        if self.out_proj.shape != (v, h):
            raise ValueError(f"out_proj must be ({v}, {h})")
        for name in ("embed_table", "block0", "block1", "out_proj"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite entries in {name}")
            setattr(self, name, np.ascontiguousarray(arr, dtype=np.float32))

    @property
    def hidden(self) -> int:
        return self.embed_table.shape[1]

    def target_shape(self, name: str) -> tuple[int, int]:
        # convention: every target matrix W has shape (d_out, d_in) and
        # applies as y = W @ x
        return getattr(self, name).shape

    def fingerprint(self) -> bytes:
        """32-byte digest of architecture and weights."""
        digest = hashlib.sha256()
        digest.update(self.vocab.symbols.encode("utf-8"))
        for name in ("embed_table", "block0", "block1", "out_proj"):
            arr = getattr(self, name)
            digest.update(name.encode())
            digest.update(np.array(arr.shape, dtype=np.int64).tobytes())
            digest.update(arr.tobytes())
        return digest.digest()

    def copy(self) -> "BaseParams":
        return BaseParams(
            vocab=self.vocab,
            embed_table=self.embed_table.copy(),
            block0=self.block0.copy(),
            block1=self.block1.copy(),
            out_proj=self.out_proj.copy(),
        )

    @staticmethod
    def init_random(vocab: Vocab, hidden: int, seed: int, scale: float = 0.2) -> "BaseParams":
        rng = np.random.default_rng(seed)
        v = vocab.size
        return BaseParams(
            vocab=vocab,
            embed_table=(rng.standard_normal((v, hidden)) * scale).astype(np.float32),
            block0=(rng.standard_normal((hidden, hidden)) * scale).astype(np.float32),
            block1=(rng.standard_normal((hidden, hidden)) * scale).astype(np.float32),
            out_proj=(rng.standard_normal((v, hidden)) * scale).astype(np.float32),
        )


@dataclass
class LoraAdapter:
    """Per-target low-rank factor pair; effective delta is (alpha/r) * B @ A."""

    factors: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (A (r, d_in), B (d_out, r))
    rank: int
    alpha: float

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        fixed = {}
        for name, (a, b) in self.factors.items():
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ValueError(f"{name}: factor shapes inconsistent with rank {self.rank}")
            fixed[name] = (
                np.ascontiguousarray(a, dtype=np.float32),
                np.ascontiguousarray(b, dtype=np.float32),
            )
        self.factors = fixed

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, name: str) -> np.ndarray:
        """Materialized (d_out, d_in) update for one target, in float64."""
        a, b = self.factors[name]
        return self.scale * (b.astype(np.float64) @ a.astype(np.float64))

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            factors={n: (a.copy(), b.copy()) for n, (a, b) in self.factors.items()},
            rank=self.rank,
            alpha=self.alpha,
        )

    @staticmethod
    def init(
        base: BaseParams,
        rank: int = 8,
        alpha: float = 16.0,
        seed: int = 0,
        targets: tuple[str, ...] = TARGET_NAMES,
    ) -> "LoraAdapter":
        # A seeded Gaussian (std 0.02), B zero: the delta starts at zero
        rng = np.random.default_rng(seed)
        factors = {}
        for name in targets:
            d_out, d_in = base.target_shape(name)
            a = (rng.standard_normal((rank, d_in)) * 0.02).astype(np.float32)
            b = np.zeros((d_out, rank), dtype=np.float32)
            factors[name] = (a, b)
        return LoraAdapter(factors=factors, rank=rank, alpha=alpha)


@dataclass(frozen=True)
class TrainConfig:
    # published reference hyperparameters: lr 2e-4, batch 4, betas
    # (0.9, 0.999), eps 1e-8, weight decay 0.01, one epoch; the desk
    # pipeline overrides lr/epochs for the tiny model (see config.py)
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 1
    max_seq_len: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _effective_weights(
    base: BaseParams, adapter: LoraAdapter | None
) -> dict[str, np.ndarray]:
    weights = {name: getattr(base, name).astype(np.float64) for name in TARGET_NAMES}
    if adapter is not None:
        for name in adapter.factors:
            weights[name] = weights[name] + adapter.delta(name)
    return weights


def _position_logits(
    base: BaseParams, weights: dict[str, np.ndarray], tokens: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Logits for each position's next token plus cached activations."""
    x = base.embed_table.astype(np.float64)[tokens]  # (n, h)
    a1 = x @ weights["block0"].T
    h1 = np.tanh(a1)
    a2 = h1 @ weights["block1"].T
    h2 = np.tanh(a2)
    logits = h2 @ weights["out_proj"].T  # (n, V)
    return logits, {"x": x, "h1": h1, "h2": h2}


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(
    base: BaseParams, adapter: LoraAdapter | None, prefix: str
) -> np.ndarray:
    """Next-token distribution after `prefix` (document start if empty)."""
    global FORWARD_EVALS
    token = base.vocab.index(prefix[-1]) if prefix else 0  # BOS
    weights = _effective_weights(base, adapter)
    logits, _ = _position_logits(base, weights, np.array([token]))
    FORWARD_EVALS += 1
    return _softmax(logits)[0]


def _doc_pairs(vocab: Vocab, doc: str, max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """(input, target) token pairs for every next-token prediction."""
    ids = vocab.encode(doc[:max_seq_len])
    inputs = np.concatenate(([0], ids))  # BOS first
    targets = np.concatenate((ids, [1]))  # EOS last
    return inputs, targets


def _batch_pairs(
    vocab: Vocab, docs: list[str], max_seq_len: int
) -> tuple[np.ndarray, np.ndarray]:
    pairs = [_doc_pairs(vocab, doc, max_seq_len) for doc in docs]
    inputs = np.concatenate([p[0] for p in pairs])
    targets = np.concatenate([p[1] for p in pairs])
    return inputs, targets


def nll_and_grad(
    base: BaseParams,
    adapter: LoraAdapter,
    docs: list[str],
    max_seq_len: int = 256,
) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Mean next-token NLL over the batch and gradients w.r.t. A, B only."""
    if not docs:
        raise ValueError("empty batch")
    inputs, targets = _batch_pairs(base.vocab, docs, max_seq_len)
    weights = _effective_weights(base, adapter)
    logits, cache = _position_logits(base, weights, inputs)
    probs = _softmax(logits)
    n = len(inputs)
    nll = float(-np.log(probs[np.arange(n), targets]).mean())

    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    d_w = {}
    d_w["out_proj"] = dlogits.T @ cache["h2"]
    dh2 = dlogits @ weights["out_proj"]
    da2 = dh2 * (1.0 - cache["h2"] ** 2)
    d_w["block1"] = da2.T @ cache["h1"]
    dh1 = da2 @ weights["block1"]
    da1 = dh1 * (1.0 - cache["h1"] ** 2)
    d_w["block0"] = da1.T @ cache["x"]

    grads = {}
    for name, (a, b) in adapter.factors.items():
        dw = d_w[name]
        a64 = a.astype(np.float64)
        b64 = b.astype(np.float64)
        grads[name] = (adapter.scale * (b64.T @ dw), adapter.scale * (dw @ a64.T))
    return nll, grads


def batch_nll(
    base: BaseParams,
    adapter: LoraAdapter | None,
    docs: list[str],
    max_seq_len: int = 256,
) -> float:
    """Mean next-token NLL without gradients."""
    inputs, targets = _batch_pairs(base.vocab, docs, max_seq_len)
    weights = _effective_weights(base, adapter)
    logits, _ = _position_logits(base, weights, inputs)
    probs = _softmax(logits)
    return float(-np.log(probs[np.arange(len(inputs)), targets]).mean())


class _Adam:
    """AdamW over a flat dict of float64 arrays."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            params[k] -= cfg.learning_rate * (
                m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * params[k]
            )


def train_adapter(
    base: BaseParams,
    docs: list[str],
    cfg: TrainConfig,
    rank: int = 8,
    alpha: float = 16.0,
    targets: tuple[str, ...] = TARGET_NAMES,
) -> LoraAdapter:
    """Train a fresh adapter with AdamW over shuffled seeded minibatches."""
    if not docs:
        raise ValueError("docs must be non-empty")
    adapter = LoraAdapter.init(base, rank=rank, alpha=alpha, seed=cfg.seed, targets=targets)
    params: dict[str, np.ndarray] = {}
    for name, (a, b) in adapter.factors.items():
        params[f"{name}.A"] = a.astype(np.float64)
        params[f"{name}.B"] = b.astype(np.float64)
    opt = _Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(docs))
        for start in range(0, len(docs), cfg.batch_size):
            batch = [docs[i] for i in order[start : start + cfg.batch_size]]
            work = LoraAdapter(
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
            loss, grads = nll_and_grad(base, work, batch, cfg.max_seq_len)
            if not np.isfinite(loss):
                raise ArithmeticError(f"diverged at step {step}")
            flat = {}
            for name, (ga, gb) in grads.items():
                flat[f"{name}.A"] = ga
                flat[f"{name}.B"] = gb
            opt.step(params, flat)
            step += 1
    return LoraAdapter(
        factors={
            n: (params[f"{n}.A"].astype(np.float32), params[f"{n}.B"].astype(np.float32))
            for n in adapter.factors
        },
        rank=rank,
        alpha=alpha,
    )


def train_base(
    vocab: Vocab, docs: list[str], cfg: TrainConfig, hidden: int = 64
) -> BaseParams:
    """Full-parameter pre-training of a base model with AdamW."""
    if not docs:
        raise ValueError("docs must be non-empty")
    base = BaseParams.init_random(vocab, hidden, cfg.seed)
    params = {
        name: getattr(base, name).astype(np.float64)
        for name in ("embed_table", "block0", "block1", "out_proj")
    }
    opt = _Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(docs))
        for start in range(0, len(docs), cfg.batch_size):
            batch = [docs[i] for i in order[start : start + cfg.batch_size]]
            inputs, targs = _batch_pairs(vocab, batch, cfg.max_seq_len)
            x = params["embed_table"][inputs]
            h1 = np.tanh(x @ params["block0"].T)
            h2 = np.tanh(h1 @ params["block1"].T)
            logits = h2 @ params["out_proj"].T
            probs = _softmax(logits)
            n = len(inputs)
            loss = float(-np.log(probs[np.arange(n), targs]).mean())
            if not np.isfinite(loss):
                raise ArithmeticError(f"diverged at step {step}")
            dlogits = probs
            dlogits[np.arange(n), targs] -= 1.0
            dlogits /= n
            g_out = dlogits.T @ h2
            dh2 = dlogits @ params["out_proj"]
            da2 = dh2 * (1.0 - h2**2)
            g_b1 = da2.T @ h1
            dh1 = da2 @ params["block1"]
            da1 = dh1 * (1.0 - h1**2)
            g_b0 = da1.T @ x
            dx = da1 @ params["block0"]
            g_embed = np.zeros_like(params["embed_table"])
            np.add.at(g_embed, inputs, dx)
            opt.step(
                params,
                {"embed_table": g_embed, "block0": g_b0, "block1": g_b1, "out_proj": g_out},
            )
            step += 1
    return BaseParams(
        vocab=vocab,
        embed_table=params["embed_table"].astype(np.float32),
        block0=params["block0"].astype(np.float32),
        block1=params["block1"].astype(np.float32),
        out_proj=params["out_proj"].astype(np.float32),
    )


def perplexity(
    base: BaseParams,
    adapter: LoraAdapter | None,
    docs: list[str],
    eval_prefix_len: int = 0,
    max_seq_len: int = 100_000,
) -> float:
    """exp(mean NLL) over all positions after the first eval_prefix_len."""
    if not docs:
        raise ValueError("docs must be non-empty")
    weights = _effective_weights(base, adapter)
    total = 0.0
    count = 0
    for doc in docs:
        if len(doc) <= eval_prefix_len:
            raise ValueError(
                f"document shorter than eval prefix ({len(doc)} <= {eval_prefix_len}): {doc[:32]!r}"
            )
        inputs, targets = _doc_pairs(base.vocab, doc, max_seq_len)
        logits, _ = _position_logits(base, weights, inputs[eval_prefix_len:])
        probs = _softmax(logits)
        scored = targets[eval_prefix_len:]
        total += float(-np.log(probs[np.arange(len(scored)), scored]).sum())
        count += len(scored)
    return float(np.exp(total / count))


def generate(
    base: BaseParams,
    adapter: LoraAdapter | None,
    prompt: str,
    n_tokens: int,
    seed: int,
) -> str:
    """Ancestral sampling continuation; stops early at EOS."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    rng = np.random.default_rng(seed)
    weights = _effective_weights(base, adapter)
    out = prompt
    token = base.vocab.index(prompt[-1]) if prompt else 0
    for _ in range(n_tokens):
        logits, _ = _position_logits(base, weights, np.array([token]))
        probs = _softmax(logits.astype(np.float64))[0]
        token = int(rng.choice(base.vocab.size, p=probs / probs.sum()))
        if token == 1:  # EOS
            break
        out += base.vocab.symbols[token]
    return out
