"""Task heads, losses, AdamW, the training loops and the scalar-propagation baseline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .aha import (
    ABLATIONS,
    AHADims,
    AHAParams,
    backward,
    forward,
    glorot,
    init_params,
    interaction_layout,
    node_states,
)
from .data import MAGDataset
from .errors import ArgumentError, ConfigurationError
from .metrics import accuracy, ari, hits_at_k, kmeans, macro_f1, mrr, nmi, pessimistic_ranks, retrieval_eval
from .propagation import CGPSettings, PropagationStack, precompute

TASKS = ("node_classification", "link_prediction", "node_clustering", "modality_retrieval")
HEAD_ABLATIONS = ("energy", "consensus", "scale")


@dataclass(frozen=True)
class TaskSpec:
    task: str = "node_classification"
    neg_ratio: int = 1
    n_clusters: int | None = None
    direction: tuple[int, int] = (0, 1)  # (query modality, candidate modality)
    n_candidates: int = 100
    temperature: float = 0.07

    def check(self, ds: MAGDataset) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.task in ("node_classification", "node_clustering") and ds.labels is None:
            raise ConfigurationError(f"{self.task} needs node labels")
        if self.task == "link_prediction" and not ds.edge_splits:
            raise ConfigurationError("link_prediction needs edge splits")
        if self.neg_ratio < 1:
            raise ConfigurationError("negative ratio must be >= 1")
        q, c = self.direction
        if q == c or not (0 <= q < ds.K and 0 <= c < ds.K):
            raise ConfigurationError(f"retrieval direction {self.direction} invalid for {ds.K} modalities")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 5e-3
    weight_decay: float = 1e-5
    batch_size: int = 0  # 0: full batch
    seed: int = 0
    patience: int = 0  # 0: no early stopping
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    d_f: int = 64
    h: int = 64
    ablation: frozenset = frozenset()
    checkpoint: str = "best"  # "best": best validation epoch; "last": final parameters

    def check(self) -> None:
        if self.epochs < 0 or self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 0:
            raise ConfigurationError(f"invalid training config {self}")
        if self.checkpoint not in ("best", "last"):
            raise ConfigurationError(f"checkpoint must be 'best' or 'last', got {self.checkpoint!r}")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise ConfigurationError(f"unknown ablation(s) {sorted(unknown)}; expected subset of {ABLATIONS}")

    @property
    def head_ablation(self) -> frozenset:
        return frozenset(self.ablation) & frozenset(HEAD_ABLATIONS)


def apply_ablation(settings: CGPSettings, ablation) -> CGPSettings:
    """Propagation-side ablations: identity rotors and uniform potentials."""
    ablation = set(ablation)
    return replace(settings, use_rotor="rotor" not in ablation, use_potential="potential" not in ablation)


# ---------------------------------------------------------------- losses


@dataclass
class LossResult:
    loss: float
    dZ: np.ndarray
    grads: dict = field(default_factory=dict)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def classification_loss(Z: np.ndarray, labels: np.ndarray, W: np.ndarray, b: np.ndarray) -> LossResult:
    """Mean softmax cross-entropy of the linear head ``Z W^T + b``."""
    if len(Z) == 0:
        raise ArgumentError("empty batch")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= W.shape[0]:
        raise ArgumentError(f"labels outside [0, {W.shape[0]})")
    n = len(Z)
    logp = log_softmax(Z @ W.T + b)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return LossResult(loss, dlogits @ W, {"head.W": dlogits.T @ Z, "head.b": dlogits.sum(axis=0)})


def link_score(Zu: np.ndarray, Zv: np.ndarray) -> np.ndarray:
    return np.sum(Zu * Zv, axis=-1)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def link_loss(Z: np.ndarray, positives: np.ndarray, negatives: np.ndarray) -> LossResult:
    """Mean binary cross-entropy with logits over positive and negative pairs (dot-product scores)."""
    pairs = np.concatenate([positives, negatives]).reshape(-1, 2)
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    if len(pairs) == 0:
        raise ArgumentError("no pairs to score")
    s = link_score(Z[pairs[:, 0]], Z[pairs[:, 1]])
    loss = float(np.mean(softplus(s) - y * s))
    ds = (1.0 / (1.0 + np.exp(-s)) - y) / len(pairs)
    dZ = np.zeros_like(Z)
    np.add.at(dZ, pairs[:, 0], ds[:, None] * Z[pairs[:, 1]])
    np.add.at(dZ, pairs[:, 1], ds[:, None] * Z[pairs[:, 0]])
    return LossResult(loss, dZ)


def edge_codes(edges: np.ndarray, n_nodes: int) -> np.ndarray:
    e = np.sort(np.asarray(edges).reshape(-1, 2), axis=1).astype(np.int64)
    return e[:, 0] * n_nodes + e[:, 1]


def sample_negatives(n_nodes: int, count: int, forbidden: np.ndarray, rng: np.random.Generator, sources=None) -> np.ndarray:
    """Uniform node pairs that are neither self loops nor in ``forbidden`` (sorted edge codes).

    With ``sources`` given, the first endpoint of pair i is ``sources[i]``.
    """
    out = np.empty((count, 2), dtype=np.int64)
    todo = np.arange(count)
    for _ in range(1000):
        if len(todo) == 0:
            return out
        u = rng.integers(n_nodes, size=len(todo)) if sources is None else np.asarray(sources)[todo]
        v = rng.integers(n_nodes, size=len(todo))
        cand = np.stack([u, v], axis=1)
        ok = (u != v) & ~np.isin(edge_codes(cand, n_nodes), forbidden)
        out[todo[ok]] = cand[ok]
        todo = todo[~ok]
    raise ArgumentError("graph too dense to draw negative pairs")


def info_nce(Zq: np.ndarray, Zc: np.ndarray, temperature: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Query-to-candidate contrastive loss on cosine similarities; row i's positive is column i."""
    nq = np.linalg.norm(Zq, axis=1, keepdims=True)
    nc = np.linalg.norm(Zc, axis=1, keepdims=True)
    nq, nc = np.where(nq > 0, nq, 1.0), np.where(nc > 0, nc, 1.0)
    Q, C = Zq / nq, Zc / nc
    logits = Q @ C.T / temperature
    logp = log_softmax(logits)
    n = len(Q)
    loss = -float(np.mean(np.diag(logp)))
    dlogits = (np.exp(logp) - np.eye(n)) / n / temperature
    dQ, dC = dlogits @ C, dlogits.T @ Q
    dZq = (dQ - Q * np.sum(Q * dQ, axis=1, keepdims=True)) / nq
    dZc = (dC - C * np.sum(C * dC, axis=1, keepdims=True)) / nc
    return loss, dZq, dZc


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One AdamW update in place: bias-corrected moments, decoupled weight decay."""
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ArgumentError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.lr * cfg.weight_decay * p
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


# ---------------------------------------------------------------- model plumbing


@dataclass
class Model:
    params: AHAParams | None
    layout: object
    ablation: frozenset
    head: dict = field(default_factory=dict)

    def tensors(self) -> dict:
        out = dict(self.params.items())
        out.update(self.head)
        return out

    def snapshot(self) -> "Model":
        params = None if self.params is None else self.params.copy()
        return Model(params, self.layout, self.ablation, {k: v.copy() for k, v in self.head.items()})

    def embed(self, H: np.ndarray):
        return forward(H, self.params, self.layout, self.ablation)

    def grads(self, tape, dZ: np.ndarray, extra: dict | None = None) -> dict:
        g = dict(backward(tape, self.params, self.layout, dZ).items())
        g.update(extra or {})
        return g


def build_model(stack: PropagationStack, cfg: TrainConfig, n_out: int | None = None) -> Model:
    layout = interaction_layout(stack.K, stack.blocks)
    dims = AHADims(stack.K, stack.d, stack.L, cfg.d_f, cfg.h, layout.n_gates)
    model = Model(init_params(cfg.seed, dims), layout, cfg.head_ablation)
    if n_out is not None:
        rng = np.random.default_rng([cfg.seed, 1])
        model.head = {"head.W": glorot(rng, n_out, cfg.d_f), "head.b": np.zeros(n_out)}
    return model


def _batches(idx: np.ndarray, size: int, rng: np.random.Generator):
    idx = rng.permutation(idx)
    size = size or len(idx)
    for start in range(0, len(idx), size):
        yield idx[start : start + size]


def _sum_grads(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


@dataclass
class TrainResult:
    model: Model
    history: list
    metrics: dict
    best_epoch: int


class _Tracker:
    """Keeps the best snapshot by a scalar validation score and handles patience."""

    def __init__(self, patience: int, keep: str = "best"):
        self.patience = patience
        self.keep = keep
        self.best_key = None
        self.best = None
        self.best_epoch = 0
        self.stale = 0

    def update(self, key, model: Model, epoch: int) -> bool:
        self.last, self.last_epoch = model, epoch
        if self.best_key is None or key > self.best_key:
            self.best_key, self.best, self.best_epoch, self.stale = key, model.snapshot(), epoch, 0
        else:
            self.stale += 1
        return bool(self.patience) and self.stale >= self.patience

    def result(self) -> tuple[Model, int]:
        if self.keep == "last":
            return self.last.snapshot(), self.last_epoch
        return self.best, self.best_epoch


# ---------------------------------------------------------------- node classification


def _classify(model: Model, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Z, _ = model.embed(H)
    return Z, Z @ model.head["head.W"].T + model.head["head.b"]


def fit_classification(stack: PropagationStack, ds: MAGDataset, cfg: TrainConfig) -> TrainResult:
    cfg.check()
    labels = ds.labels
    C = int(labels.max()) + 1
    H = node_states(stack.layers)
    model = build_model(stack, cfg, C)
    rng = np.random.default_rng([cfg.seed, 2])
    train, val, test = (ds.splits[s] for s in ("train", "val", "test"))
    state = adam_init(model.tensors())
    tracker = _Tracker(cfg.patience, cfg.checkpoint)
    history = []

    def evaluate(epoch: int, train_loss: float, seconds: float):
        _, logits = _classify(model, H[val])
        val_loss = -float(np.mean(log_softmax(logits)[np.arange(len(val)), labels[val]]))
        val_acc = accuracy(np.argmax(logits, axis=1), labels[val])
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc, "seconds": seconds})
        return tracker.update((val_acc, -val_loss), model, epoch)

    Z, _ = model.embed(H[train])
    evaluate(0, classification_loss(Z, labels[train], model.head["head.W"], model.head["head.b"]).loss, 0.0)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in _batches(train, cfg.batch_size, rng):
            Z, tape = model.embed(H[batch])
            res = classification_loss(Z, labels[batch], model.head["head.W"], model.head["head.b"])
            adam_step(model.tensors(), model.grads(tape, res.dZ, res.grads), state, cfg)
            total += res.loss * len(batch)
            count += len(batch)
        if evaluate(epoch, total / count, time.perf_counter() - t0):
            break

    best, best_epoch = tracker.result()
    metrics = {"best_epoch": best_epoch}
    metrics.update(classification_metrics(best, H, ds))
    return TrainResult(best, history, metrics, best_epoch)


def classification_metrics(model: Model, H: np.ndarray, ds: MAGDataset) -> dict:
    metrics = {}
    for name in ("train", "val", "test"):
        idx = ds.splits[name]
        preds = np.argmax(_classify(model, H[idx])[1], axis=1)
        metrics[f"{name}_acc"] = accuracy(preds, ds.labels[idx])
        metrics[f"{name}_macro_f1"] = macro_f1(preds, ds.labels[idx])
    test = ds.splits["test"]
    metrics["majority_rate"] = float(np.bincount(ds.labels[test]).max() / len(test))
    return metrics


# ---------------------------------------------------------------- link prediction / clustering


def link_candidates(ds: MAGDataset, pairs: np.ndarray, n_candidates: int, seed: int) -> np.ndarray:
    """Per positive pair (u, v): ``[v, c_1..c_k]`` with every c_i a non-neighbour of u in the full graph."""
    rng = np.random.default_rng([seed, 3])
    forbidden = edge_codes(ds.edges(), ds.n_nodes)
    u = np.repeat(pairs[:, 0], n_candidates)
    neg = sample_negatives(ds.n_nodes, len(u), forbidden, rng, sources=u)[:, 1]
    return np.concatenate([pairs[:, 1:2], neg.reshape(len(pairs), n_candidates)], axis=1)


def ranking_metrics(Z: np.ndarray, pairs: np.ndarray, candidates: np.ndarray) -> dict:
    scores = np.einsum("qd,qcd->qc", Z[pairs[:, 0]], Z[candidates])
    ranks = pessimistic_ranks(scores, np.zeros(len(pairs), dtype=int))
    return {"mrr": mrr(ranks), "hits@1": hits_at_k(ranks, 1), "hits@3": hits_at_k(ranks, 3), "hits@10": hits_at_k(ranks, 10)}


def _fit_links(stack, ds, cfg, task, positives, val_pairs=None, val_cands=None):
    H = node_states(stack.layers)
    model = build_model(stack, cfg)
    rng = np.random.default_rng([cfg.seed, 4])
    forbidden = edge_codes(ds.edges(), ds.n_nodes)
    state = adam_init(model.tensors())
    tracker = _Tracker(cfg.patience, cfg.checkpoint)
    history = []
    for epoch in range(0, cfg.epochs + 1):
        t0 = time.perf_counter()
        neg = sample_negatives(ds.n_nodes, task.neg_ratio * len(positives), forbidden, rng)
        Z, tape = model.embed(H)
        res = link_loss(Z, positives, neg)
        if epoch > 0:
            adam_step(model.tensors(), model.grads(tape, res.dZ), state, cfg)
            Z, _ = model.embed(H)
        row = {"epoch": epoch, "train_loss": res.loss, "seconds": time.perf_counter() - t0}
        if val_pairs is not None:
            row.update({f"val_{k}": v for k, v in ranking_metrics(Z, val_pairs, val_cands).items()})
            stop = tracker.update(row["val_mrr"], model, epoch)
        else:
            stop = tracker.update(epoch, model, epoch)
        history.append(row)
        if stop:
            break
    return tracker, history, H


def fit_link_prediction(stack: PropagationStack, ds: MAGDataset, cfg: TrainConfig, task: TaskSpec = TaskSpec("link_prediction")) -> TrainResult:
    """``stack`` must be propagated over the training edges only (``ds.train_graph()``)."""
    cfg.check()
    es = ds.edge_splits
    val_cands = link_candidates(ds, es["val"], task.n_candidates, cfg.seed)
    tracker, history, H = _fit_links(stack, ds, cfg, task, es["train"], es["val"], val_cands)
    best, best_epoch = tracker.result()
    metrics = {"best_epoch": best_epoch}
    metrics.update(link_metrics(best, H, ds, task, cfg.seed))
    return TrainResult(best, history, metrics, best_epoch)


def link_metrics(model: Model, H: np.ndarray, ds: MAGDataset, task: TaskSpec, seed: int) -> dict:
    Z, _ = model.embed(H)
    es = ds.edge_splits
    metrics = {}
    for name, offset in (("val", 0), ("test", 1)):
        cands = link_candidates(ds, es[name], task.n_candidates, seed + offset)
        metrics.update({f"{name}_{k}": v for k, v in ranking_metrics(Z, es[name], cands).items()})
    return metrics


def fit_clustering(stack: PropagationStack, ds: MAGDataset, cfg: TrainConfig, task: TaskSpec = TaskSpec("node_clustering")) -> TrainResult:
    """Self-supervised edge reconstruction on the whole graph, then k-means on the embeddings."""
    cfg.check()
    tracker, history, H = _fit_links(stack, ds, cfg, task, ds.edges())
    best, best_epoch = tracker.result()
    metrics = {"best_epoch": best_epoch}
    metrics.update(clustering_metrics(best, H, ds, task, cfg.seed))
    return TrainResult(best, history, metrics, best_epoch)


def clustering_metrics(model: Model, H: np.ndarray, ds: MAGDataset, task: TaskSpec, seed: int) -> dict:
    Z, _ = model.embed(H)
    k = task.n_clusters or int(ds.labels.max()) + 1
    res = kmeans(Z, k, seed=seed)
    return {"nmi": nmi(res.labels, ds.labels), "ari": ari(res.labels, ds.labels), "inertia": res.inertia}


# ---------------------------------------------------------------- modality retrieval


def mask_modalities(ds: MAGDataset, keep: int) -> MAGDataset:
    feats = tuple(x if m == keep else np.zeros_like(x) for m, x in enumerate(ds.features))
    return replace(ds, features=feats)


def fit_retrieval(ds: MAGDataset, settings: CGPSettings, cfg: TrainConfig, task: TaskSpec = TaskSpec("modality_retrieval")) -> TrainResult:
    """Cross-modal probe: node u's query-modality-only states should retrieve its candidate-modality-only states."""
    cfg.check()
    task.check(ds)
    q_mod, c_mod = task.direction
    sq, _ = precompute(mask_modalities(ds, q_mod), settings)
    sc, _ = precompute(mask_modalities(ds, c_mod), settings)
    Hq, Hc = node_states(sq.layers), node_states(sc.layers)
    model = build_model(sq, cfg)
    rng = np.random.default_rng([cfg.seed, 5])
    train, val, test = (ds.splits[s] for s in ("train", "val", "test"))
    state = adam_init(model.tensors())
    tracker = _Tracker(cfg.patience, cfg.checkpoint)
    history = []

    def probe(m: Model, idx: np.ndarray) -> dict:
        return retrieval_eval(m.embed(Hq[idx])[0], m.embed(Hc[idx])[0])

    for epoch in range(0, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in _batches(train, cfg.batch_size, rng):
            Zq, tq = model.embed(Hq[batch])
            Zc, tc = model.embed(Hc[batch])
            loss, dq, dc = info_nce(Zq, Zc, task.temperature)
            total += loss * len(batch)
            count += len(batch)
            if epoch > 0:
                adam_step(model.tensors(), _sum_grads(model.grads(tq, dq), model.grads(tc, dc)), state, cfg)
        row = {"epoch": epoch, "train_loss": total / count, "seconds": time.perf_counter() - t0}
        row.update({f"val_{k}": v for k, v in probe(model, val).items()})
        history.append(row)
        if tracker.update(row["val_mrr"], model, epoch):
            break
    best, best_epoch = tracker.result()
    metrics = {"best_epoch": best_epoch}
    metrics.update({f"val_{k}": v for k, v in probe(best, val).items()})
    metrics.update({f"test_{k}": v for k, v in probe(best, test).items()})
    return TrainResult(best, history, metrics, best_epoch)


def retrieval_metrics(model: Model, ds: MAGDataset, settings: CGPSettings, task: TaskSpec) -> dict:
    q_mod, c_mod = task.direction
    Hq = node_states(precompute(mask_modalities(ds, q_mod), settings)[0].layers)
    Hc = node_states(precompute(mask_modalities(ds, c_mod), settings)[0].layers)
    metrics = {}
    for name in ("val", "test"):
        idx = ds.splits[name]
        res = retrieval_eval(model.embed(Hq[idx])[0], model.embed(Hc[idx])[0])
        metrics.update({f"{name}_{k}": v for k, v in res.items()})
    return metrics


def evaluate(model: Model, ds: MAGDataset, stack: PropagationStack, task: TaskSpec, seed: int = 0) -> dict:
    """Task metrics of a trained model; ``stack`` is the cache it was trained on."""
    task.check(ds)
    H = node_states(stack.layers)
    if task.task == "node_classification":
        return classification_metrics(model, H, ds)
    if task.task == "link_prediction":
        return link_metrics(model, H, ds, task, seed)
    if task.task == "node_clustering":
        return clustering_metrics(model, H, ds, task, seed)
    return retrieval_metrics(model, ds, CGPSettings(**stack.settings), task)


def run_task(ds: MAGDataset, settings: CGPSettings, task: TaskSpec, cfg: TrainConfig, stack: PropagationStack | None = None) -> TrainResult:
    """Precompute (unless a stack is supplied) honouring propagation ablations, then train and evaluate."""
    task.check(ds)
    settings = apply_ablation(settings, cfg.ablation)
    if task.task == "modality_retrieval":
        return fit_retrieval(ds, settings, cfg, task)
    if stack is None:
        graph = ds.train_graph() if task.task == "link_prediction" else ds
        stack, _ = precompute(graph, settings)
    if task.task == "node_classification":
        return fit_classification(stack, ds, cfg)
    if task.task == "link_prediction":
        return fit_link_prediction(stack, ds, cfg, task)
    return fit_clustering(stack, ds, cfg, task)


# ---------------------------------------------------------------- scalar baseline


def sym_norm_adjacency(ds: MAGDataset) -> sp.csr_matrix:
    """``D~^-1/2 (A + I) D~^-1/2``."""
    N = ds.n_nodes
    A = sp.csr_matrix((np.ones(len(ds.indices)), ds.indices, ds.indptr), shape=(N, N)) + sp.identity(N, format="csr")
    inv = 1.0 / np.sqrt(np.asarray(A.sum(axis=1)).ravel())
    return sp.diags(inv) @ A @ sp.diags(inv)


def scalar_baseline(ds: MAGDataset, L: int, alpha: float = 0.5) -> np.ndarray:
    """Layers ``(L+1, N, D)`` of damped normalised propagation on the concatenated raw features."""
    if L < 0:
        raise ArgumentError("depth L must be non-negative")
    P = sym_norm_adjacency(ds)
    X = ds.concat_features()
    layers = [X]
    for _ in range(L):
        layers.append((1.0 - alpha) * layers[-1] + alpha * (P @ layers[-1]))
    return np.array(layers)


def fit_baseline_classification(ds: MAGDataset, L: int, cfg: TrainConfig, alpha: float = 0.5) -> TrainResult:
    """Mean-over-layers baseline embeddings with the same softmax head, optimiser and checkpointing."""
    cfg.check()
    X = scalar_baseline(ds, L, alpha).mean(axis=0)
    labels = ds.labels
    C = int(labels.max()) + 1
    rng = np.random.default_rng([cfg.seed, 1])
    head = {"head.W": glorot(rng, C, X.shape[1]), "head.b": np.zeros(C)}
    train, val, test = (ds.splits[s] for s in ("train", "val", "test"))
    state = adam_init(head)
    tracker = _Tracker(cfg.patience, cfg.checkpoint)
    model = Model(None, None, frozenset(), head)  # head-only
    history = []
    batch_rng = np.random.default_rng([cfg.seed, 2])
    for epoch in range(0, cfg.epochs + 1):
        total, count = 0.0, 0
        for batch in _batches(train, cfg.batch_size, batch_rng):
            res = classification_loss(X[batch], labels[batch], head["head.W"], head["head.b"])
            if epoch > 0:
                adam_step(head, res.grads, state, cfg)
            total += res.loss * len(batch)
            count += len(batch)
        logits = X[val] @ head["head.W"].T + head["head.b"]
        val_loss = -float(np.mean(log_softmax(logits)[np.arange(len(val)), labels[val]]))
        val_acc = accuracy(np.argmax(logits, axis=1), labels[val])
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "val_acc": val_acc})
        if tracker.update((val_acc, -val_loss), model, epoch):
            break
    best_model, best_epoch = tracker.result()
    best = best_model.head
    metrics = {"best_epoch": best_epoch}
    for name, idx in (("train", train), ("val", val), ("test", test)):
        preds = np.argmax(X[idx] @ best["head.W"].T + best["head.b"], axis=1)
        metrics[f"{name}_acc"] = accuracy(preds, labels[idx])
        metrics[f"{name}_macro_f1"] = macro_f1(preds, labels[idx])
    return TrainResult(best_model, history, metrics, best_epoch)
