"""Feature-gate coupling: memory banks, neighbor exploration, gate alignment.

Per step and per coupled layer the flow is: score each instance's pooled
feature against the feature bank, take its k nearest neighbors (self
excluded), score its gate probabilities against the gate bank and minimize
the negative log-likelihood of those neighbors, then fold the fresh feature
and gate vectors into both banks with a momentum average.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor

DEFAULT_K = 200
DEFAULT_TAU = 0.07
DEFAULT_BANK_MOMENTUM = 0.5

NEIGHBOR_SOURCES = ("feature_independent", "feature_shared", "label", "gate")


class MemoryBank:
    """N x D table holding one detached vector per training instance."""

    def __init__(self, entries: np.ndarray, momentum: float = DEFAULT_BANK_MOMENTUM,
                 kind: str = "feature"):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"bank momentum must lie in [0, 1], got {momentum}")
        self.entries = np.array(entries, dtype=np.float64)
        self.momentum = momentum
        self.kind = kind

    @classmethod
    def random_unit(cls, size: int, dim: int, rng: np.random.Generator,
                    momentum: float = DEFAULT_BANK_MOMENTUM, kind: str = "feature") -> "MemoryBank":
        rows = rng.standard_normal((size, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(rows, momentum, kind)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __len__(self) -> int:
        return self.size

    def update(self, index, fresh) -> None:
        bank_update(self, index, fresh)


@dataclass
class NeighborSet:
    instance_index: Optional[int]
    neighbors: np.ndarray
    similarities: np.ndarray
    layer: Optional[int] = None

    def __len__(self) -> int:
        return len(self.neighbors)


@dataclass
class FgcLayerState:
    feature_bank: MemoryBank
    gate_bank: MemoryBank
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU
    neighbor_source: str = "feature_independent"
    cosine: bool = False
    layer: Optional[int] = None
    last_neighbors: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.neighbor_source not in NEIGHBOR_SOURCES:
            raise ConfigError(f"unknown neighbor source {self.neighbor_source!r}")
        if self.feature_bank.size != self.gate_bank.size:
            raise ConfigError("feature and gate banks must have the same row count")
        # k is clipped on small datasets.
        self.k = min(self.k, self.feature_bank.size - 1)
        if self.k < 1:
            raise ConfigError("need at least two instances for neighbor search")


# ---------------------------------------------------------------------------
# neighborhood relationship exploration


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def similarity_row(query, bank: MemoryBank, self_index: Optional[int] = None,
                   cosine: bool = False) -> np.ndarray:
    """Dot products of ``query`` with every bank row; ``self_index`` gets ``-inf``."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (bank.dim,):
        raise DimensionError(f"query has shape {q.shape}, bank rows have dimension {bank.dim}")
    return similarity_rows(q[None, :], bank, None if self_index is None else [self_index], cosine)[0]


def similarity_rows(queries, bank: MemoryBank, self_indices=None, cosine: bool = False) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != bank.dim:
        raise DimensionError(f"queries have shape {q.shape}, bank rows have dimension {bank.dim}")
    rows = bank.entries
    if cosine:
        q, rows = _normalize_rows(q), _normalize_rows(rows)
    sims = q @ rows.T
    if self_indices is not None:
        idx = np.asarray(self_indices, dtype=np.int64)
        sims[np.arange(len(idx)), idx] = -np.inf
    return sims


def topk_neighbors(sims, k: int, instance_index: Optional[int] = None,
                   layer: Optional[int] = None) -> NeighborSet:
    """Indices of the ``k`` largest finite similarities, best first.

    Ties are broken toward the smaller index.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    finite = np.isfinite(sims)
    n_finite = int(finite.sum())
    if k > n_finite:
        raise ConfigError(f"k={k} exceeds the {n_finite} finite similarities available")
    values = np.where(finite, sims, -np.inf)
    if k < len(values):
        cut = np.partition(values, len(values) - k)[len(values) - k]
        cand = np.flatnonzero(values >= cut)
    else:
        cand = np.arange(len(values))
    # lexsort: last key is primary -> descending value, then ascending index.
    order = cand[np.lexsort((cand, -values[cand]))][:k]
    return NeighborSet(instance_index, order, sims[order], layer)


def topk_rows(sims: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`topk_neighbors`; returns a ``B x k`` index array."""
    return np.stack([topk_neighbors(row, k).neighbors for row in sims]) if len(sims) else \
        np.zeros((0, k), dtype=np.int64)


def label_neighbors(instance_ids, labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """For each instance, ``k`` distinct random same-label instances other than itself."""
    labels = np.asarray(labels)
    out = np.empty((len(instance_ids), k), dtype=np.int64)
    for b, i in enumerate(instance_ids):
        pool = np.flatnonzero(labels == labels[i])
        pool = pool[pool != i]
        if len(pool) < k:
            raise ConfigError(f"instance {i}: only {len(pool)} same-label instances, k={k}")
        out[b] = rng.choice(pool, size=k, replace=False)
    return out


# ---------------------------------------------------------------------------
# memory update


def bank_update(bank: MemoryBank, index, fresh) -> None:
    """Momentum update ``row <- m*row + (1-m)*fresh`` for one index or an index array."""
    idx = np.asarray(index, dtype=np.int64)
    fresh = np.asarray(fresh.data if isinstance(fresh, Tensor) else fresh, dtype=np.float64)
    if np.any(idx < 0) or np.any(idx >= bank.size):
        raise IndexError(f"bank index out of range [0, {bank.size}): {index}")
    if fresh.shape != idx.shape + (bank.dim,):
        raise DimensionError(f"fresh rows of shape {fresh.shape} for index shape {idx.shape}")
    if not np.all(np.isfinite(fresh)):
        raise NumericError("non-finite vector pushed into memory bank")
    m = bank.momentum
    bank.entries[idx] = m * bank.entries[idx] + (1.0 - m) * fresh


# ---------------------------------------------------------------------------
# feature-gate alignment


def neighbor_probability(pi_i, gate_bank: MemoryBank, j: int, tau: float = DEFAULT_TAU) -> float:
    """Softmax probability that bank row ``j`` is picked for query ``pi_i``.

    The normalizer runs over all bank rows, ``j`` and the query's own row included.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    scores = gate_bank.entries @ np.asarray(pi_i, dtype=np.float64) / tau
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite similarity in neighbor probability")
    top = scores.max()
    log_z = top + np.log(np.exp(scores - top).sum())
    return float(np.exp(scores[j] - log_z))


def contrastive_loss(pi: Tensor, gate_bank: MemoryBank, neighbors, tau: float = DEFAULT_TAU) -> Tensor:
    """Summed negative log neighbor probability per instance, averaged over the batch.

    ``pi`` is ``D`` (one instance) or ``B x D``; ``neighbors`` is a
    :class:`NeighborSet`, a ``k`` vector, or a ``B x k`` array. Bank rows are
    constants.
    """
    if isinstance(neighbors, NeighborSet):
        neighbors = neighbors.neighbors
    nbrs = np.asarray(neighbors, dtype=np.int64)
    pi = T.as_tensor(pi)
    if pi.ndim == 1:
        pi = T.reshape(pi, (1, -1))
        nbrs = nbrs.reshape(1, -1)
    if nbrs.ndim != 2 or nbrs.shape[1] == 0:
        raise ContractError("contrastive loss needs a non-empty neighbor set per instance")
    if nbrs.shape[0] != pi.shape[0]:
        raise DimensionError(f"{pi.shape[0]} queries but {nbrs.shape[0]} neighbor sets")
    if np.any(nbrs < 0) or np.any(nbrs >= gate_bank.size):
        raise ContractError("neighbor index outside the gate bank")
    k = nbrs.shape[1]
    scores = T.scale(T.matmul(pi, Tensor(gate_bank.entries.T)), 1.0 / tau)
    per_instance = T.scale(T.logsumexp(scores, axis=1), float(k)) - T.tsum(T.gather(scores, nbrs), axis=1)
    return T.tmean(per_instance)


def explore(pooled, pis, instance_ids, state: FgcLayerState, labels=None,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Neighbor indices (``B x k``) for a batch, per the state's neighbor source."""
    ids = np.asarray(instance_ids, dtype=np.int64)
    source = state.neighbor_source
    if source == "label":
        if labels is None:
            raise ConfigError("label neighbor source requested without labels")
        if rng is None:
            raise ConfigError("label neighbor source needs an rng")
        return label_neighbors(ids, labels, state.k, rng)
    if source == "gate":
        sims = similarity_rows(_array(pis), state.gate_bank, ids, state.cosine)
    else:
        sims = similarity_rows(_array(pooled), state.feature_bank, ids, state.cosine)
    return topk_rows(sims, state.k)


def align(pis, neighbors: np.ndarray, state: FgcLayerState) -> Tensor:
    return contrastive_loss(pis, state.gate_bank, neighbors, state.tau)


def explore_and_align(pooled, pis, instance_ids, state: FgcLayerState, labels=None,
                      rng: Optional[np.random.Generator] = None,
                      neighbors: Optional[np.ndarray] = None) -> Tensor:
    """One coupled-layer step: neighbors, batch-mean loss, then bank refresh.

    Neighbors are found against the banks as they stood before this batch;
    both banks are refreshed only after the loss is built. ``neighbors``
    overrides exploration (used for shared neighbor sets).
    """
    ids = np.asarray(instance_ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= state.feature_bank.size):
        raise IndexError("instance id outside the memory bank")
    if neighbors is None:
        neighbors = explore(pooled, pis, ids, state, labels, rng)
    loss = align(pis, neighbors, state)
    state.last_neighbors = (ids.copy(), np.asarray(neighbors).copy())
    bank_update(state.feature_bank, ids, _array(pooled))
    bank_update(state.gate_bank, ids, _array(pis))
    return loss


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def write_neighbors_csv(path, instance_ids, neighbors, similarities=None) -> None:
    """CSV with columns instance_id, rank, neighbor_id, similarity."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "rank", "neighbor_id", "similarity"])
        for b, i in enumerate(instance_ids):
            for r, j in enumerate(neighbors[b]):
                sim = "" if similarities is None else repr(float(similarities[b][r]))
                w.writerow([int(i), r, int(j), sim])
