"""Downstream evaluation of frozen node embeddings."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoders import GnnConfig, GraphEncoder
from .graph import LinkEvalSet, TagGraph, make_fewshot_split


@dataclass
class EvalReport:
    task: str
    metric: str
    values: list[float]
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    @property
    def repeats(self) -> int:
        return len(self.values)

    def summary(self) -> dict:
        return {
            "task": self.task,
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "repeats": self.repeats,
            "config": self.config,
        }

    def write(self, directory: str | Path, stem: str | None = None) -> list[Path]:
        """Write ``<stem>.tsv`` (one row per repeat) and ``<stem>.json`` (summary)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.task}_{self.metric}"
        table = directory / f"{stem}.tsv"
        with open(table, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(["task", "metric", "repeat", "value"])
            for r, v in enumerate(self.values):
                writer.writerow([self.task, self.metric, r, repr(float(v))])
        summary = directory / f"{stem}.json"
        summary.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return [table, summary]


# ---------------------------------------------------------------------------
# classification probes


@dataclass
class ProbeConfig:
    probe: str = "mlp"
    hidden_dim: int = 256
    dropout: float = 0.5
    learning_rate: float | None = None
    epochs: int | None = None
    num_layers: int = 2
    fanouts: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.probe not in ("mlp", "graphsage"):
            raise ValueError(f"unknown probe type {self.probe!r}")
        if self.learning_rate is None:
            self.learning_rate = 1e-4 if self.probe == "mlp" else 1e-3
        if self.epochs is None:
            self.epochs = 300 if self.probe == "mlp" else 500
        if self.hidden_dim < 1 or self.learning_rate <= 0 or self.epochs < 0 or self.num_layers < 1:
            raise ValueError("probe hyperparameters must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class MLPProbe(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, num_classes: int, dropout: float) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden_dim, num_classes),
        )

    def forward(self, x: torch.Tensor, graph: TagGraph | None = None) -> torch.Tensor:
        return self.net(x)


class SageProbe(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, num_classes: int, dropout: float, num_layers: int) -> None:
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [num_classes]
        self.gnn = GraphEncoder(dims, GnnConfig(num_layers=num_layers, hidden_dim=hidden_dim, dropout_rate=dropout))

    def forward(self, x: torch.Tensor, graph: TagGraph) -> torch.Tensor:
        return self.gnn(x, graph)


def train_probe(
    embeddings: np.ndarray,
    graph: TagGraph,
    train_ids: np.ndarray,
    test_ids: np.ndarray,
    probe: ProbeConfig,
    seed: int,
) -> float:
    """Fit a fresh probe on ``train_ids`` and return accuracy on ``test_ids``."""
    torch.manual_seed(seed)
    x = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
    y = torch.from_numpy(graph.labels)
    num_classes = graph.num_classes
    if probe.probe == "mlp":
        model: nn.Module = MLPProbe(x.shape[1], probe.hidden_dim, num_classes, probe.dropout)
    else:
        model = SageProbe(x.shape[1], probe.hidden_dim, num_classes, probe.dropout, probe.num_layers)
    opt = torch.optim.Adam(model.parameters(), lr=probe.learning_rate)
    train_t = torch.from_numpy(np.asarray(train_ids, dtype=np.int64))
    test_t = torch.from_numpy(np.asarray(test_ids, dtype=np.int64))
    model.train()
    for _ in range(probe.epochs):
        opt.zero_grad()
        logits = model(x, graph)
        F.cross_entropy(logits[train_t], y[train_t]).backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        pred = model(x, graph)[test_t].argmax(dim=1)
    return float((pred == y[test_t]).float().mean())


def _check_embeddings(embeddings: np.ndarray, graph: TagGraph) -> None:
    if embeddings.shape[0] != graph.num_nodes:
        raise ValueError(
            f"dataset/embedding mismatch: {embeddings.shape[0]} rows for {graph.num_nodes} nodes"
        )


def eval_fewshot_clf(
    embeddings: np.ndarray,
    graph: TagGraph,
    k: int,
    probe: ProbeConfig | None = None,
    repeats: int = 10,
    seed: int = 0,
) -> EvalReport:
    probe = probe or ProbeConfig()
    _check_embeddings(embeddings, graph)
    accs = []
    for r in range(repeats):
        split = make_fewshot_split(graph, k, np.random.default_rng([seed, r]))
        accs.append(train_probe(embeddings, graph, split.labeled_ids, split.evaluation, probe, seed * 1000 + r))
    return EvalReport(f"fewshot_k{k}_{probe.probe}", "accuracy", accs, {"k": k, "seed": seed, **asdict(probe)})


def eval_full_clf(
    embeddings: np.ndarray,
    graph: TagGraph,
    probe: ProbeConfig | None = None,
    repeats: int = 10,
    seed: int = 0,
) -> EvalReport:
    probe = probe or ProbeConfig()
    _check_embeddings(embeddings, graph)
    if graph.labels is None or graph.splits is None:
        raise ValueError("full classification needs labels and splits")
    train = graph.split_nodes("train")
    train = train[graph.labels[train] >= 0]
    test = graph.split_nodes("test")
    test = test[graph.labels[test] >= 0]
    accs = [train_probe(embeddings, graph, train, test, probe, seed * 1000 + r) for r in range(repeats)]
    return EvalReport(f"full_{probe.probe}", "accuracy", accs, {"seed": seed, **asdict(probe)})


# ---------------------------------------------------------------------------
# clustering


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    seeding_inertia: float
    iterations: int


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points**2).sum(1)[:, None] - 2 * points @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(
    points: np.ndarray, num_clusters: int, rng: np.random.Generator, max_iter: int = 300
) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if num_clusters < 1 or n < num_clusters:
        raise ValueError(f"need at least {num_clusters} points, got {n}")
    centers = np.empty((num_clusters, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(1)
    for c in range(1, num_clusters):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[c] = points[idx]
        closest = np.minimum(closest, ((points - centers[c]) ** 2).sum(1))

    d = _sq_dists(points, centers)
    labels = d.argmin(1)
    seeding_inertia = float(d[np.arange(n), labels].sum())
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for c in range(num_clusters):
            members = labels == c
            if members.any():
                centers[c] = points[members].mean(0)
            else:
                # re-seed the empty cluster at the point farthest from its centre
                owned = d[np.arange(n), labels]
                far = int(owned.argmax())
                centers[c] = points[far]
                labels[far] = c
                d[far] = 0.0
        d = _sq_dists(points, centers)
        new_labels = d.argmin(1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(d[np.arange(n), labels].sum())
    return KMeansResult(labels, centers, inertia, seeding_inertia, iterations)


def contingency_table(clusters: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Counts with clusters as rows and classes as columns (ids compacted)."""
    _, ci = np.unique(clusters, return_inverse=True)
    _, li = np.unique(labels, return_inverse=True)
    table = np.zeros((ci.max() + 1, li.max() + 1), dtype=np.int64)
    np.add.at(table, (ci, li), 1)
    return table


def cluster_accuracy(table: np.ndarray) -> float:
    """Each cluster is named after its majority class."""
    return float(table.max(axis=1).sum() / table.sum())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(table: np.ndarray) -> float:
    """Mutual information normalised by the geometric mean of the two entropies."""
    n = table.sum()
    h_c = _entropy(table.sum(1))
    h_l = _entropy(table.sum(0))
    if h_l == 0.0:
        raise ValueError("NMI is undefined for single-class labels")
    if h_c == 0.0:
        return 0.0
    pij = table / n
    outer = np.outer(table.sum(1), table.sum(0)) / n**2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return mi / math.sqrt(h_c * h_l)


def _comb2(x):
    return x * (x - 1) / 2


def ari(table: np.ndarray) -> float:
    n = table.sum()
    index = _comb2(table.astype(np.float64)).sum()
    rows = _comb2(table.sum(1).astype(np.float64)).sum()
    cols = _comb2(table.sum(0).astype(np.float64)).sum()
    expected = rows * cols / _comb2(float(n))
    max_index = (rows + cols) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def eval_clustering(
    embeddings: np.ndarray,
    graph: TagGraph,
    runs: int = 10,
    seed: int = 0,
    nodes: str | Sequence[int] = "test",
) -> dict[str, EvalReport]:
    """k-means++ with one cluster per class, scored by ACC, NMI and ARI.

    ``nodes`` selects the evaluated population: a split name, ``"all"``, or
    explicit ids.
    """
    if graph.labels is None:
        raise ValueError("clustering evaluation needs labels")
    _check_embeddings(embeddings, graph)
    if isinstance(nodes, str):
        ids = np.arange(graph.num_nodes) if nodes == "all" else graph.split_nodes(nodes)
    else:
        ids = np.asarray(nodes, dtype=np.int64)
    ids = ids[graph.labels[ids] >= 0]
    labels = graph.labels[ids]
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("clustering metrics are undefined for a single class")
    points = np.asarray(embeddings, dtype=np.float64)[ids]
    scores: dict[str, list[float]] = {"acc": [], "nmi": [], "ari": []}
    for r in range(runs):
        result = kmeans_pp(points, len(classes), np.random.default_rng([seed, r]))
        table = contingency_table(result.labels, labels)
        scores["acc"].append(cluster_accuracy(table))
        scores["nmi"].append(nmi(table))
        scores["ari"].append(ari(table))
    cfg = {"runs": runs, "seed": seed, "num_nodes": int(len(ids))}
    return {m: EvalReport("cluster", m, v, cfg) for m, v in scores.items()}


# ---------------------------------------------------------------------------
# link prediction


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-8)


def reciprocal_ranks(embeddings: np.ndarray, eval_set: LinkEvalSet) -> np.ndarray:
    """Reciprocal rank of each positive; ties with negatives count against it."""
    emb = np.asarray(embeddings, dtype=np.float64)
    out = np.empty(len(eval_set))
    for i, q in enumerate(eval_set.queries):
        ids = [q.source, q.positive, *q.negatives.tolist()]
        if max(ids) >= len(emb) or min(ids) < 0:
            raise ValueError(f"missing embedding row for query {q.source}")
        src = _unit_rows(emb[q.source])
        pos_score = float(_unit_rows(emb[q.positive]) @ src)
        neg_scores = _unit_rows(emb[q.negatives]) @ src
        rank = 1 + int((neg_scores >= pos_score).sum())
        out[i] = 1.0 / rank
    return out


def eval_link_mrr(embeddings: np.ndarray, eval_set: LinkEvalSet) -> EvalReport:
    rr = reciprocal_ranks(embeddings, eval_set)
    negs = len(eval_set.queries[0].negatives) if len(eval_set) else 0
    return EvalReport("link", "mrr", [float(rr.mean())], {"queries": len(eval_set), "negatives": negs})
