"""Training loop with feature-gate coupling, evaluation, and analysis reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fgc
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, batches, read_idx, synth_clusters
from .errors import ConfigError, NumericError
from .layers import EVAL, TRAIN, GatedNetwork, NetworkSpec
from .objectives import (cross_entropy, embedding_nmi, l0_surrogate, mi_lower_bound,
                         pruning_ratio, total_loss)

log = logging.getLogger(__name__)

_INIT_STREAM = 0
_TRAIN_STREAM = 1


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    d = config.dataset
    if d.kind == "synth":
        train = synth_clusters(d.n_classes, d.n_per_class, d.image_size, d.geometry,
                               d.noise_sigma, d.seed, "train")
        test = synth_clusters(d.n_classes, d.test_per_class, d.image_size, d.geometry,
                              d.noise_sigma, d.seed, "test", stats=(train.mean, train.std))
        return train, test
    train = read_idx(d.train_images, d.train_labels, "train")
    if d.test_images and d.test_labels:
        test = read_idx(d.test_images, d.test_labels, "test", stats=(train.mean, train.std))
    else:
        test = train
    return train, test


def build_spec(config: RunConfig, train: Dataset) -> NetworkSpec:
    c, h, w = train.image_shape
    if h != w:
        raise ConfigError(f"square images required, got {h}x{w}")
    num_classes = config.dataset.n_classes if config.dataset.kind == "synth" else train.num_classes
    return config.network_spec(c, h, num_classes)


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


class Trainer:
    """Owns the network, optimizer state, memory banks and RNG for one run."""

    def __init__(self, config: RunConfig, train: Dataset, test: Optional[Dataset] = None):
        config.validate()
        self.config = config
        self.train_set = train
        self.test_set = test if test is not None else train
        self.spec = build_spec(config, train)
        init_rng = np.random.default_rng([config.seed, _INIT_STREAM])
        self.net = GatedNetwork(self.spec, init_rng)
        self.param_names = list(self.net.params)
        self.velocity = [np.zeros_like(p.data) for p in self.net.params.values()]
        gate_names = set(self.net.gate_param_names()) if config.optimizer.gate_no_decay else set()
        self.no_decay = {i for i, n in enumerate(self.param_names) if n in gate_names}
        self.omega = self.spec.fgc_layers
        n = len(train)
        self.banks: dict[int, fgc.FgcLayerState] = {}
        for l in self.omega:
            dim = self.spec.layers[l].channels
            self.banks[l] = fgc.FgcLayerState(
                feature_bank=fgc.MemoryBank.random_unit(n, dim, init_rng, config.bank_momentum, "feature"),
                gate_bank=fgc.MemoryBank.random_unit(n, dim, init_rng, config.bank_momentum, "gate"),
                k=config.k, tau=config.tau, neighbor_source=config.neighbor_source,
                cosine=config.cosine, layer=l)
        self.rng = np.random.default_rng([config.seed, _TRAIN_STREAM])
        self.epoch = 0

    # -- persistence --------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        arrays = dict(self.net.state_arrays())
        for name, v in zip(self.param_names, self.velocity):
            arrays[f"velocity/{name}"] = v
        for l, st in self.banks.items():
            arrays[f"bank/{l}/feature"] = st.feature_bank.entries
            arrays[f"bank/{l}/gate"] = st.gate_bank.entries
        arrays = {k: np.array(v, copy=True) for k, v in arrays.items()}
        return Checkpoint(self.config.to_dict(), self.config.digest(), self.epoch,
                          json.loads(json.dumps(self.rng.bit_generator.state)), arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: Optional[RunConfig] = None,
                        datasets: Optional[tuple] = None) -> "Trainer":
        """Rebuild a trainer; ``config`` may extend ``epochs`` beyond the saved run."""
        saved = RunConfig.from_dict(ckpt.config)
        config = config or saved
        train, test = datasets if datasets is not None else load_datasets(config)
        tr = cls(config, train, test)
        tr.net.load_arrays(ckpt.arrays)
        tr.velocity = [np.array(ckpt.arrays[f"velocity/{n}"]) for n in tr.param_names]
        for l, st in tr.banks.items():
            st.feature_bank.entries = np.array(ckpt.arrays[f"bank/{l}/feature"])
            st.gate_bank.entries = np.array(ckpt.arrays[f"bank/{l}/gate"])
        tr.rng.bit_generator.state = ckpt.rng_state
        tr.epoch = ckpt.epoch
        return tr

    # -- training -----------------------------------------------------------
    def _shared_neighbors(self, res, ids) -> Optional[np.ndarray]:
        if self.config.neighbor_source != "feature_shared" or not self.omega:
            return None
        src = self.config.shared_source_layer()
        rec = res.record(src)
        state = self.banks[src]
        sims = fgc.similarity_rows(rec.pooled.data, state.feature_bank, ids, state.cosine)
        return fgc.topk_rows(sims, state.k)

    def train_step(self, ids: np.ndarray, lr: float) -> dict:
        cfg = self.config
        x = self.train_set.images[ids]
        y = self.train_set.labels[ids]
        stage = "forward"
        try:
            res = self.net.forward(x, TRAIN, self.rng)
            stage = "cross-entropy"
            ce = cross_entropy(res.logits, y)
            shared = self._shared_neighbors(res, ids)
            contrastive = {}
            for l in self.omega:
                stage = f"contrastive loss (layer {l})"
                rec = res.record(l)
                contrastive[l] = fgc.explore_and_align(
                    rec.pooled, rec.state.pi, ids, self.banks[l], self.train_set.labels,
                    self.rng, neighbors=shared)
            l0 = {}
            for rec in res.layers:
                stage = f"L0 surrogate (layer {rec.index})"
                l0[rec.index] = l0_surrogate(rec.state)
            stage = "total loss"
            breakdown = total_loss(ce, contrastive, l0, cfg.eta, cfg.rho)
            stage = "backward"
            params = list(self.net.params.values())
            for p in params:
                p.grad = None
            breakdown.tensor.backward()
            T.sgd_step(params, [p.grad for p in params], lr, cfg.optimizer.momentum,
                       cfg.optimizer.weight_decay, self.no_decay, self.velocity,
                       cfg.optimizer.nesterov)
            stage = "parameter update"
            for name, p in zip(self.param_names, params):
                if not np.all(np.isfinite(p.data)):
                    raise NumericError(f"parameter {name} became non-finite")
        except NumericError as exc:
            raise NumericError(f"{stage}: {exc}") from exc
        correct = int((res.logits.data.argmax(axis=1) == y).sum())
        return {"breakdown": breakdown, "correct": correct}

    def train_epoch(self) -> dict:
        cfg = self.config
        lr = cfg.optimizer.lr_at(self.epoch)
        plan = batches(len(self.train_set), min(cfg.batch_size, len(self.train_set)), cfg.seed, self.epoch)
        ce, total, correct = [], [], 0
        contrastive = {l: [] for l in self.omega}
        l0 = {l: [] for l in self.spec.gated_layers}
        for ids in plan:
            out = self.train_step(ids, lr)
            b = out["breakdown"]
            ce.append(b.ce)
            total.append(b.total)
            correct += out["correct"]
            for l, v in b.contrastive_per_layer.items():
                contrastive[l].append(v)
            for l, v in b.l0_per_layer.items():
                l0[l].append(v)
        record = {
            "epoch": self.epoch,
            "lr": lr,
            "ce": _mean(ce),
            "total": _mean(total),
            "train_accuracy": correct / len(self.train_set),
            "contrastive": {str(l): _mean(v) for l, v in contrastive.items()},
            "l0": {str(l): _mean(v) for l, v in l0.items()},
        }
        n = len(self.train_set)
        mi = {}
        for l in self.omega:
            bound_sum, per_pair = mi_lower_bound(record["contrastive"][str(l)], n, self.banks[l].k)
            mi[str(l)] = {"bound_sum": bound_sum, "bound_per_pair": per_pair, "log_n": math.log(n)}
        record["mi_bound"] = mi
        self.epoch += 1
        ev = evaluate(self.net, self.test_set, self.config.eval_batch_size)
        record["eval"] = {"error": ev["error"], "pruning_ratio": ev["pruning_ratio"]}
        return record

    def fit(self, epochs: Optional[int] = None, log_path=None) -> list:
        """Train until ``epochs`` (default: config.epochs) epochs are complete."""
        target = self.config.epochs if epochs is None else epochs
        records = []
        fh = open(log_path, "a") if log_path is not None else None
        try:
            while self.epoch < target:
                rec = self.train_epoch()
                records.append(rec)
                log.info("epoch %d ce=%.4f err=%.4f prune=%.3f", rec["epoch"], rec["ce"],
                         rec["eval"]["error"], rec["eval"]["pruning_ratio"])
                if fh is not None:
                    fh.write(json.dumps({"event": "epoch", **rec}, sort_keys=True) + "\n")
                    fh.flush()
        finally:
            if fh is not None:
                fh.close()
        return records


@dataclass
class TrainResult:
    trainer: Trainer
    records: list = field(default_factory=list)

    @property
    def checkpoint(self) -> Checkpoint:
        return self.trainer.checkpoint()


def train(config: RunConfig, out_dir=None, resume=None, datasets=None) -> TrainResult:
    """Run training from scratch (or from ``resume``) to ``config.epochs``.

    With ``out_dir``, appends epoch records to ``log.ndjson`` and writes
    ``checkpoint.fgc`` when done.
    """
    config.validate()
    if datasets is None:
        datasets = load_datasets(config)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        trainer = Trainer.from_checkpoint(ckpt, config, datasets)
    else:
        trainer = Trainer(config, *datasets)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.ndjson"
    records = trainer.fit(log_path=log_path)
    if out_dir is not None:
        save_checkpoint(trainer.checkpoint(), out_dir / "checkpoint.fgc")
    return TrainResult(trainer, records)


# ---------------------------------------------------------------------------
# evaluation and analysis


@dataclass
class EvalPass:
    logits: np.ndarray
    masks: dict
    pooled: dict
    pis: dict


def eval_pass(net: GatedNetwork, dataset: Dataset, batch_size: int = 500,
              force_open: bool = False) -> EvalPass:
    """Deterministic hard-gate forward pass over a dataset."""
    logits, masks, pooled, pis = [], {}, {}, {}
    for start in range(0, len(dataset), batch_size):
        res = net.forward(dataset.images[start:start + batch_size], EVAL, force_open=force_open)
        logits.append(res.logits.data)
        for rec in res.layers:
            gate = np.ones_like(rec.state.gate.data) if force_open else rec.state.gate.data
            masks.setdefault(rec.index, []).append(gate)
            pooled.setdefault(rec.index, []).append(rec.pooled.data)
            pis.setdefault(rec.index, []).append(rec.state.pi.data)
    cat = lambda d: {k: np.concatenate(v) for k, v in d.items()}
    return EvalPass(np.concatenate(logits), cat(masks), cat(pooled), cat(pis))


def evaluate(net: GatedNetwork, dataset: Dataset, batch_size: int = 500,
             force_open: bool = False) -> dict:
    """Top-1 error and pruning ratio with hard (eval-mode) gates."""
    ep = eval_pass(net, dataset, batch_size, force_open)
    pred = ep.logits.argmax(axis=1)
    error = float((pred != dataset.labels).mean())
    masks = [ep.masks.get(i) for i in range(len(net.spec.layers))]
    report = pruning_ratio(net.spec, masks)
    return {"error": error, "accuracy": 1.0 - error, "n": len(dataset),
            "pruning_ratio": report.pruning_ratio,
            "pruning_ratio_with_overhead": report.pruning_ratio_with_overhead,
            "flops": report.to_record()}


def gate_similarity_ranking(pis: np.ndarray, query: int) -> tuple[np.ndarray, np.ndarray]:
    """All ids ranked by cosine similarity of gate probabilities to ``query``.

    Ties keep the query ahead of other ids, then ascending id.
    """
    unit = pis / np.maximum(np.linalg.norm(pis, axis=1, keepdims=True), 1e-12)
    sims = unit @ unit[query]
    ids = np.arange(len(pis))
    order = np.lexsort((ids, ids != query, -sims))
    return order, sims[order]


def _safe_nmi(a, b, n_clusters: int, seed: int) -> Optional[float]:
    try:
        return embedding_nmi(a, b, n_clusters, seed)
    except Exception as exc:  # constant assignment, degenerate clustering
        log.warning("NMI undefined: %s", exc)
        return None


def nmi_triplets(ep: EvalPass, labels: np.ndarray, layers, n_clusters: int, seed: int = 0) -> dict:
    out = {}
    for l in layers:
        f, g = ep.pooled[l], ep.pis[l]
        out[str(l)] = {
            "feature_label": _safe_nmi(f, labels, n_clusters, seed),
            "gate_label": _safe_nmi(g, labels, n_clusters, seed),
            "feature_gate": _safe_nmi(f, g, n_clusters, seed),
        }
    return out


def analyze(net: GatedNetwork, dataset: Dataset, out_dir=None, layers=None,
            queries: int = 5, seed: int = 0) -> dict:
    """NMI triplets, per-class execution frequencies, gate rankings, embeddings."""
    ep = eval_pass(net, dataset)
    spec = net.spec
    layers = spec.fgc_layers if layers is None else list(layers)
    n_classes = spec.num_classes
    masks = [ep.masks.get(i) for i in range(len(spec.layers))]
    report = pruning_ratio(spec, masks, dataset.labels, n_classes)
    nmi = nmi_triplets(ep, dataset.labels, layers, n_classes, seed)
    q_ids = np.random.default_rng(seed).choice(len(dataset), size=min(queries, len(dataset)), replace=False)
    rankings = {}
    for l in layers:
        rankings[l] = [(int(q),) + gate_similarity_ranking(ep.pis[l], int(q)) for q in q_ids]
    bundle = {"nmi": nmi, "pruning": report.to_record(),
              "frequencies": {str(k): v.tolist() for k, v in report.frequencies.items()},
              "queries": [int(q) for q in q_ids]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "nmi.json").write_text(json.dumps(nmi, indent=2, sort_keys=True))
        for l, freq in report.frequencies.items():
            with open(out / f"frequency_layer{l}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["channel"] + [f"class_{c}" for c in range(freq.shape[1])])
                for ch, row in enumerate(freq):
                    w.writerow([ch] + [repr(float(v)) for v in row])
        for l in layers:
            with open(out / f"gate_ranking_layer{l}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["query_id", "rank", "instance_id", "similarity"])
                for q, order, sims in rankings[l]:
                    for r, (i, s) in enumerate(zip(order, sims)):
                        w.writerow([q, r, int(dataset.ids[i]), repr(float(s))])
            for kind, mat in (("features", ep.pooled[l]), ("gates", ep.pis[l])):
                with open(out / f"{kind}_layer{l}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["instance_id", "label"] + [f"d{j}" for j in range(mat.shape[1])])
                    for i, row in enumerate(mat):
                        w.writerow([int(dataset.ids[i]), int(dataset.labels[i])]
                                   + [repr(float(v)) for v in row])
    bundle["rankings"] = {str(l): [{"query": q, "order": o.tolist()} for q, o, _ in r]
                          for l, r in rankings.items()}
    return bundle
