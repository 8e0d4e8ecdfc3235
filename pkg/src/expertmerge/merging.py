"""Expert combination in parameter space and in prediction space.

Parameter-space merging contracts the weighted low-rank factors into one
dense delta per target matrix before applying it to the base weights, so
merged inference costs a single model evaluation. Prediction-space
ensembling mixes per-expert next-token distributions instead, costing
one evaluation per active expert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as lm
from .routing import MergeWeights


@dataclass
class MergedAdapter:
    deltas: dict[str, np.ndarray]  # name -> (d_out, d_in) float32
    provenance: MergeWeights

    def __post_init__(self) -> None:
        for name, delta in self.deltas.items():
            if not np.isfinite(delta).all():
                raise ValueError(f"non-finite entries in merged delta {name}")
            self.deltas[name] = np.ascontiguousarray(delta, dtype=np.float32)


def merge_adapters(
    weights: MergeWeights, adapters: dict[int, lm.LoraAdapter]
) -> MergedAdapter:
    """Dense per-target delta sum_k w_k * (alpha_k/r_k) * B_k @ A_k.

    Accumulates in float64 and stores float32. Mixed ranks are allowed;
    each expert contributes its own alpha/r scaling.
    """
    support = weights.support
    for k in support:
        if k not in adapters:
            raise KeyError(f"missing adapter for expert {k}")
    names = set(adapters[support[0]].factors)
    shapes = {
        name: (
            adapters[support[0]].factors[name][1].shape[0],
            adapters[support[0]].factors[name][0].shape[1],
        )
        for name in names
    }
    deltas = {name: np.zeros(shapes[name], dtype=np.float64) for name in names}
    for k in support:
        adapter = adapters[k]
        if set(adapter.factors) != names:
            raise ValueError(f"expert {k} targets a different matrix set")
        w = weights.entries[k]
        for name in names:
            delta = adapter.delta(name)
            if delta.shape != shapes[name]:
                raise ValueError(
                    f"shape mismatch for matrix {name!r}: expert {k} has "
                    f"{delta.shape}, expected {shapes[name]}"
                )
            deltas[name] += w * delta
    return MergedAdapter(deltas=deltas, provenance=weights)


def apply_merged(base: lm.BaseParams, merged: MergedAdapter) -> lm.BaseParams:
    """New BaseParams with W + delta per adapted matrix; base untouched."""
    out = base.copy()
    for name, delta in merged.deltas.items():
        current = getattr(out, name)
        if current.shape != delta.shape:
            raise ValueError(
                f"shape mismatch for matrix {name!r}: base {current.shape}, "
                f"delta {delta.shape}"
            )
        setattr(
            out,
            name,
            (current.astype(np.float64) + delta.astype(np.float64)).astype(np.float32),
        )
    return out


def ensemble_forward(
    weights: MergeWeights,
    adapters: dict[int, lm.LoraAdapter],
    base: lm.BaseParams,
    prefix: str,
) -> np.ndarray:
    """Weighted mixture of per-expert next-token distributions.

    Performs exactly one model evaluation per active expert.
    """
    mix = np.zeros(base.vocab.size, dtype=np.float64)
    for k in weights.support:
        if k not in adapters:
            raise KeyError(f"missing adapter for expert {k}")
        mix += weights.entries[k] * lm.forward(base, adapters[k], prefix)
    return mix / mix.sum()
