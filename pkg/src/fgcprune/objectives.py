"""Losses, the composite objective, FLOPs accounting and NMI analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .layers import GateState, NetworkSpec
from .tensor import Tensor

DEFAULT_ETA = 0.003
DEFAULT_RHO = 0.4
FLOPS_PER_MAC = 2
FLOPS_CONVENTION = ("1 MAC = 2 FLOPs; conv/fc/head multiply-accumulates only; "
                    "batchnorm, ReLU and pooling excluded; gating-module FC cost reported separately")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    picked = T.gather(logits, labels[:, None])
    return T.tmean(T.logsumexp(logits, axis=1) - T.reshape(picked, (n,)))


def l0_surrogate(state: GateState) -> Tensor:
    """Expected number of open gates per instance (batch mean)."""
    return T.tmean(T.tsum(state.pi, axis=1))


def open_gate_count(state: GateState) -> float:
    """Literal count of open hard gates per instance (batch mean)."""
    return float((state.pi.data >= 0.5).sum(axis=1).mean())


@dataclass
class LossBreakdown:
    ce: float
    contrastive_per_layer: dict
    l0_per_layer: dict
    eta: float
    rho: float
    total: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def recompose(self) -> float:
        return (self.ce + self.eta * sum(self.contrastive_per_layer.values())
                + self.rho * sum(self.l0_per_layer.values()))

    def to_record(self) -> dict:
        return {"ce": self.ce,
                "contrastive": {str(k): v for k, v in self.contrastive_per_layer.items()},
                "l0": {str(k): v for k, v in self.l0_per_layer.items()},
                "eta": self.eta, "rho": self.rho, "total": self.total}


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(ce, contrastive: Mapping, l0: Mapping, eta: float = DEFAULT_ETA,
               rho: float = DEFAULT_RHO) -> LossBreakdown:
    """``ce + eta * sum(contrastive) + rho * sum(l0)``; keeps the differentiable total."""
    if eta < 0 or rho < 0:
        raise ConfigError("eta and rho must be non-negative")
    total = T.as_tensor(ce)
    for v in contrastive.values():
        total = total + T.scale(T.as_tensor(v), eta)
    for v in l0.values():
        total = total + T.scale(T.as_tensor(v), rho)
    return LossBreakdown(
        ce=_value(ce),
        contrastive_per_layer={k: _value(v) for k, v in contrastive.items()},
        l0_per_layer={k: _value(v) for k, v in l0.items()},
        eta=eta, rho=rho, total=total.item(), tensor=total)


def mi_lower_bound(contrastive: float, n: int, k: int) -> tuple[float, float]:
    """Mutual-information lower bound implied by the contrastive loss.

    Returns ``(log N - L, log N - L / k)``: the literal bound and its
    per-neighbor average. Diagnostic only.
    """
    if n < 2:
        raise ConfigError("need N >= 2 for the mutual-information bound")
    log_n = math.log(n)
    return log_n - contrastive, log_n - contrastive / k


# ---------------------------------------------------------------------------
# FLOPs and pruning ratio


@dataclass
class LayerCost:
    name: str
    in_channels: int
    out_channels: int
    macs_per_pair: int
    gated: bool
    gate_overhead_macs: int

    @property
    def full_macs(self) -> int:
        return self.in_channels * self.out_channels * self.macs_per_pair


def layer_costs(spec: NetworkSpec) -> list[LayerCost]:
    """MAC cost of each layer plus the head, in forward order."""
    costs = []
    outs = spec.shapes()
    for i, (layer, (c_in, _, _), (c_out, h, w)) in enumerate(zip(spec.layers, spec.input_shapes(), outs)):
        kern, _, _ = spec.kernel_of(i)
        overhead = 0
        if layer.gated:
            hidden = spec.gate_hidden(c_out)
            overhead = c_in * hidden + hidden * c_out
        costs.append(LayerCost(f"layers.{i}", c_in, c_out, kern * kern * h * w, layer.gated, overhead))
    last = outs[-1][0]
    costs.append(LayerCost("head", last, spec.num_classes, 1, False, 0))
    return costs


@dataclass
class PruningReport:
    layer_names: list
    full_flops: list
    gated_flops: list
    gate_overhead_flops: list
    pruning_ratio: float
    pruning_ratio_with_overhead: float
    frequencies: dict = field(default_factory=dict)
    convention: str = FLOPS_CONVENTION

    def to_record(self) -> dict:
        return {"convention": self.convention,
                "layers": [{"name": n, "full_flops": f, "gated_flops": g, "gate_overhead_flops": o}
                           for n, f, g, o in zip(self.layer_names, self.full_flops,
                                                 self.gated_flops, self.gate_overhead_flops)],
                "pruning_ratio": self.pruning_ratio,
                "pruning_ratio_with_overhead": self.pruning_ratio_with_overhead}


def pruning_ratio(spec: NetworkSpec, masks: Sequence[Optional[np.ndarray]],
                  labels=None, num_classes: Optional[int] = None) -> PruningReport:
    """FLOPs saved by hard gates, averaged over instances.

    ``masks[l]`` is the ``N x C_l`` matrix of hard gates (or open
    frequencies) for layer ``l``; ``None`` marks an ungated layer. A layer's
    cost scales with the product of its own open fraction and the open
    fraction of its input channels, evaluated per instance before averaging.
    """
    costs = layer_costs(spec)
    n_layers = len(spec.layers)
    if len(masks) != n_layers:
        raise ConfigError(f"expected {n_layers} mask entries, got {len(masks)}")
    n = next((len(m) for m in masks if m is not None), None)
    fractions = []
    for i, m in enumerate(masks):
        if m is None:
            fractions.append(None)
            continue
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (n, spec.layers[i].channels):
            raise ConfigError(f"layer {i}: mask shape {m.shape} != ({n}, {spec.layers[i].channels})")
        if np.any(m < 0) or np.any(m > 1):
            raise ConfigError(f"layer {i}: gate frequency outside [0, 1]")
        fractions.append(m.mean(axis=1))

    full, gated, overhead = [], [], []
    for i, cost in enumerate(costs):
        own = fractions[i] if i < n_layers else None
        inp = fractions[i - 1] if i > 0 else None
        if own is None and inp is None:
            share = 1.0
        elif own is None:
            share = float(inp.mean())
        elif inp is None:
            share = float(own.mean())
        else:
            share = float((own * inp).mean())
        f = FLOPS_PER_MAC * cost.full_macs
        full.append(float(f))
        gated.append(f * share)
        overhead.append(float(FLOPS_PER_MAC * cost.gate_overhead_macs))
    total_full = sum(full)
    ratio = 1.0 - sum(gated) / total_full
    ratio_oh = 1.0 - (sum(gated) + sum(overhead)) / total_full
    freqs = {}
    if labels is not None:
        freqs = execution_frequency(masks, labels, num_classes)
    return PruningReport([c.name for c in costs], full, gated, overhead, ratio, ratio_oh, freqs)


def execution_frequency(masks: Sequence[Optional[np.ndarray]], labels, num_classes: Optional[int] = None) -> dict:
    """Per gated layer, a ``C x classes`` matrix of per-class channel open rates."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = int(num_classes if num_classes is not None else labels.max() + 1)
    out = {}
    for i, m in enumerate(masks):
        if m is None:
            continue
        m = np.asarray(m, dtype=np.float64)
        freq = np.zeros((m.shape[1], classes))
        for c in range(classes):
            sel = labels == c
            if sel.any():
                freq[:, c] = m[sel].mean(axis=0)
        out[i] = freq
    return out


# ---------------------------------------------------------------------------
# normalized mutual information


def nmi(assign_a, assign_b) -> float:
    """``I(A;B) / sqrt(H(A) H(B))`` from the joint contingency table."""
    a = np.asarray(assign_a)
    b = np.asarray(assign_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"assignments must be equal-length vectors, got {a.shape} and {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= len(a)
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    ha = -np.sum(pa * np.log(pa))
    hb = -np.sum(pb * np.log(pb))
    if ha <= 0 or hb <= 0:
        raise ContractError("NMI is undefined for a constant assignment")
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz]))
    return float(min(max(mi / math.sqrt(ha * hb), 0.0), 1.0))


def discretize(embeddings: np.ndarray, n_clusters: int, seed: int = 0) -> np.ndarray:
    """Seeded k-means cluster ids (20 restarts, at most 300 iterations)."""
    from sklearn.cluster import KMeans

    x = np.asarray(embeddings, dtype=np.float64)
    km = KMeans(n_clusters=n_clusters, n_init=20, max_iter=300, random_state=seed)
    return km.fit_predict(x)


def embedding_nmi(a, b, n_clusters: int, seed: int = 0) -> float:
    """NMI between two assignments; 2-D inputs are k-means discretized first."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 2:
        a = discretize(a, n_clusters, seed)
    if b.ndim == 2:
        b = discretize(b, n_clusters, seed)
    return nmi(a, b)
