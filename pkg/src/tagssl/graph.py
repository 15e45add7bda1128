"""Text-attributed graph data model, file I/O, neighbourhood indexing and splits."""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLIT_NAMES = ("train", "valid", "test")


class TagFormatError(ValueError):
    """Raised when a nodes/edges file cannot be parsed into a valid graph."""


@dataclass
class Document:
    node_id: int
    text: str
    tokens: list[int] | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"document for node {self.node_id} has empty text")


@dataclass
class TagGraph:
    """Undirected graph whose nodes carry text documents.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    Adjacency lists are derived on construction and kept sorted.
    """

    num_nodes: int
    edges: np.ndarray
    documents: list[Document]
    labels: np.ndarray | None = None
    splits: np.ndarray | None = None
    neighbors: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(self.documents) != self.num_nodes:
            raise ValueError(
                f"{len(self.documents)} documents for {self.num_nodes} nodes"
            )
        for i, doc in enumerate(self.documents):
            if doc.node_id != i:
                raise ValueError(f"document at position {i} has node_id {doc.node_id}")
        if edges.size and (edges.min() < 0 or edges.max() >= self.num_nodes):
            raise ValueError("edge endpoint out of range")
        self.edges = canonical_edges(edges)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.num_nodes,):
                raise ValueError("labels must have one entry per node")
        if self.splits is not None:
            self.splits = np.asarray(self.splits, dtype=object)
            if self.splits.shape != (self.num_nodes,):
                raise ValueError("splits must have one entry per node")
            bad = set(self.splits.tolist()) - set(SPLIT_NAMES) - {None}
            if bad:
                raise ValueError(f"unknown split names {sorted(bad)}")
        self.neighbors = _adjacency_lists(self.num_nodes, self.edges)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def texts(self) -> list[str]:
        return [d.text for d in self.documents]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise ValueError("graph has no labels")
        return int(self.labels.max()) + 1

    def degree(self, node: int) -> int:
        return len(self.neighbors[node])

    def directed_edge_index(self) -> np.ndarray:
        """Both directions of every edge as a ``(2, 2E)`` array (src row, dst row)."""
        if not len(self.edges):
            return np.zeros((2, 0), dtype=np.int64)
        return np.concatenate([self.edges.T, self.edges[:, ::-1].T], axis=1)

    def split_nodes(self, name: str) -> np.ndarray:
        if self.splits is None:
            raise ValueError("graph has no splits")
        return np.flatnonzero(self.splits == name)

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbors[i]
        k = np.searchsorted(nb, j)
        return bool(k < len(nb) and nb[k] == j)

    def without_edges(self, pairs: Iterable[tuple[int, int]]) -> "TagGraph":
        """Copy of the graph with the given undirected edges removed."""
        drop = {(min(a, b), max(a, b)) for a, b in pairs}
        keep = [e for e in map(tuple, self.edges.tolist()) if e not in drop]
        return TagGraph(
            self.num_nodes,
            np.array(keep, dtype=np.int64).reshape(-1, 2),
            self.documents,
            self.labels,
            self.splits,
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.num_nodes).encode())
        h.update(self.edges.tobytes())
        for d in self.documents:
            h.update(d.text.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()


def canonical_edges(edges: np.ndarray) -> np.ndarray:
    """Drop self-loops, orient each pair as (min, max), dedupe and sort."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    edges = np.sort(edges, axis=1)
    if not len(edges):
        return edges
    return np.unique(edges, axis=0)


def _adjacency_lists(num_nodes: int, edges: np.ndarray) -> list[np.ndarray]:
    buckets: list[list[int]] = [[] for _ in range(num_nodes)]
    for a, b in edges.tolist():
        buckets[a].append(b)
        buckets[b].append(a)
    return [np.array(sorted(b), dtype=np.int64) for b in buckets]


# ---------------------------------------------------------------------------
# file formats


def load_tag(nodes_path: str | Path, edges_path: str | Path) -> TagGraph:
    """Read a graph from a JSON-lines nodes file and a two-column edges file.

    Node ids must cover ``0..N-1`` exactly (in any order). Directed duplicates
    in the edges file collapse to one undirected edge and self-loops are dropped.
    """
    records: dict[int, dict] = {}
    with open(nodes_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                node_id = rec["id"]
                text = rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise TagFormatError(f"{nodes_path}:{lineno}: malformed node record ({exc})") from None
            if not isinstance(node_id, int) or isinstance(node_id, bool) or not isinstance(text, str):
                raise TagFormatError(f"{nodes_path}:{lineno}: malformed node record (bad field types)")
            if not text.strip():
                raise TagFormatError(f"{nodes_path}:{lineno}: empty text for node {node_id}")
            split = rec.get("split")
            if split is not None and split not in SPLIT_NAMES:
                raise TagFormatError(f"{nodes_path}:{lineno}: unknown split {split!r}")
            if node_id in records:
                raise TagFormatError(f"{nodes_path}:{lineno}: duplicate node id {node_id}")
            records[node_id] = rec

    n = len(records)
    if sorted(records) != list(range(n)):
        raise TagFormatError(f"{nodes_path}: node ids must be exactly 0..{n - 1}")

    documents = [Document(i, records[i]["text"]) for i in range(n)]
    raw_labels = [records[i].get("label") for i in range(n)]
    labels = None
    if any(v is not None for v in raw_labels):
        labels = np.array([-1 if v is None else v for v in raw_labels], dtype=np.int64)
    has_splits = any(r.get("split") is not None for r in records.values())
    splits = np.array([records[i].get("split") for i in range(n)], dtype=object) if has_splits else None

    pairs = []
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 2:
                raise TagFormatError(f"{edges_path}:{lineno}: expected two columns, got {len(parts)}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise TagFormatError(f"{edges_path}:{lineno}: non-integer node id") from None
            for v in (a, b):
                if v < 0 or v >= n:
                    raise TagFormatError(f"{edges_path}:{lineno}: unknown node id {v}")
            pairs.append((a, b))

    return TagGraph(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), documents, labels, splits)


def save_tag(graph: TagGraph, nodes_path: str | Path, edges_path: str | Path) -> None:
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for i, doc in enumerate(graph.documents):
            rec: dict = {"id": i, "text": doc.text}
            if graph.labels is not None and graph.labels[i] >= 0:
                rec["label"] = int(graph.labels[i])
            if graph.splits is not None and graph.splits[i] is not None:
                rec["split"] = str(graph.splits[i])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        fh.write("# src\tdst\n")
        for a, b in graph.edges.tolist():
            fh.write(f"{a}\t{b}\n")


# ---------------------------------------------------------------------------
# neighbourhoods


@dataclass(frozen=True)
class NeighborhoodIndex:
    hop_count: int
    members: tuple[np.ndarray, ...]

    def __getitem__(self, node: int) -> np.ndarray:
        return self.members[node]

    def __len__(self) -> int:
        return len(self.members)


def build_khop_index(graph: TagGraph, K: int) -> NeighborhoodIndex:
    """For every node, the sorted ids within ``K`` hops (the node itself excluded)."""
    if K < 1:
        raise ValueError(f"hop count must be >= 1, got {K}")
    if K == 1:
        return NeighborhoodIndex(1, tuple(nb.copy() for nb in graph.neighbors))
    members = []
    for source in range(graph.num_nodes):
        members.append(np.array(sorted(_bfs_within(graph, source, K)), dtype=np.int64))
    return NeighborhoodIndex(K, tuple(members))


def _bfs_within(graph: TagGraph, source: int, K: int) -> set[int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if dist[u] == K:
            continue
        for v in graph.neighbors[u].tolist():
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    del dist[source]
    return set(dist)


def sample_neighbors(
    index: NeighborhoodIndex, node: int, sample_size: int, rng: np.random.Generator
) -> list[int]:
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    pool = index[node]
    if len(pool) <= sample_size:
        return pool.tolist()
    picked = rng.choice(len(pool), size=sample_size, replace=False)
    return pool[np.sort(picked)].tolist()


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic_tag(
    num_classes: int = 4,
    nodes_per_class: int = 50,
    p_in: float = 0.2,
    p_out: float = 0.01,
    vocab_per_class: int = 30,
    doc_length: int = 12,
    noise_rate: float = 0.2,
    seed: int = 0,
    noise_vocab: int | None = None,
    split_fractions: tuple[float, float] = (0.6, 0.2),
) -> TagGraph:
    """Planted-partition graph with class-specific bag-of-words documents.

    Nodes are grouped by class (node ``i`` has class ``i // nodes_per_class``).
    Each class also gets its own train/valid/test partition using
    ``split_fractions`` (train, valid; the remainder is test).
    """
    if num_classes < 1 or nodes_per_class < 1 or vocab_per_class < 1 or doc_length < 1:
        raise ValueError("counts must be positive")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if not (0.0 <= noise_rate < 1.0):
        raise ValueError(f"noise_rate must be in [0, 1), got {noise_rate}")
    rng = np.random.default_rng(seed)
    n = num_classes * nodes_per_class
    labels = np.repeat(np.arange(num_classes), nodes_per_class)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    noise_vocab = vocab_per_class if noise_vocab is None else noise_vocab
    documents = []
    for i in range(n):
        c = labels[i]
        words = [f"c{c}w{w}" for w in rng.integers(0, vocab_per_class, size=doc_length)]
        noisy = rng.random(doc_length) < noise_rate
        for pos in np.flatnonzero(noisy):
            words[pos] = f"noise{rng.integers(0, noise_vocab)}"
        documents.append(Document(i, " ".join(words)))

    splits = np.empty(n, dtype=object)
    n_train = int(round(split_fractions[0] * nodes_per_class))
    n_valid = int(round(split_fractions[1] * nodes_per_class))
    for c in range(num_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        splits[members[:n_train]] = "train"
        splits[members[n_train:n_train + n_valid]] = "valid"
        splits[members[n_train + n_valid:]] = "test"

    return TagGraph(n, edges, documents, labels, splits)


# ---------------------------------------------------------------------------
# evaluation splits


@dataclass(frozen=True)
class LinkQuery:
    source: int
    positive: int
    negatives: np.ndarray


@dataclass(frozen=True)
class LinkEvalSet:
    queries: tuple[LinkQuery, ...]

    def __len__(self) -> int:
        return len(self.queries)

    def check(self, graph: TagGraph, negatives_per_query: int | None = None) -> None:
        """Raise ``AssertionError`` if any structural invariant is violated."""
        for q in self.queries:
            assert graph.has_edge(q.source, q.positive), f"{q.positive} is not a neighbour of {q.source}"
            if negatives_per_query is not None:
                assert len(q.negatives) == negatives_per_query
            assert len(set(q.negatives.tolist())) == len(q.negatives), "duplicate negatives"
            for v in q.negatives.tolist():
                assert v != q.source, "query used as its own negative"
                assert not graph.has_edge(q.source, v), f"negative {v} is a neighbour of {q.source}"


def make_link_eval_set(
    graph: TagGraph,
    query_nodes: Sequence[int],
    negatives_per_query: int,
    rng: np.random.Generator,
) -> LinkEvalSet:
    queries = []
    all_nodes = np.arange(graph.num_nodes)
    for src in query_nodes:
        src = int(src)
        nb = graph.neighbors[src]
        if not len(nb):
            raise ValueError(f"query node {src} has degree 0")
        excluded = np.zeros(graph.num_nodes, dtype=bool)
        excluded[nb] = True
        excluded[src] = True
        pool = all_nodes[~excluded]
        if len(pool) < negatives_per_query:
            raise ValueError(
                f"insufficient non-neighbor pool for node {src}: "
                f"{len(pool)} < {negatives_per_query}"
            )
        positive = int(nb[rng.integers(len(nb))])
        negatives = rng.choice(pool, size=negatives_per_query, replace=False)
        queries.append(LinkQuery(src, positive, negatives.astype(np.int64)))
    return LinkEvalSet(tuple(queries))


@dataclass(frozen=True)
class FewShotSplit:
    shots_per_class: int
    labeled: dict[int, np.ndarray]
    evaluation: np.ndarray

    @property
    def labeled_ids(self) -> np.ndarray:
        return np.concatenate([self.labeled[c] for c in sorted(self.labeled)])


def make_fewshot_split(graph: TagGraph, k: int, rng: np.random.Generator) -> FewShotSplit:
    """Sample ``k`` training nodes per class; the test split is the evaluation pool."""
    if graph.labels is None or graph.splits is None:
        raise ValueError("few-shot split needs labels and splits")
    if k < 1:
        raise ValueError("k must be >= 1")
    train = graph.split_nodes("train")
    train = train[graph.labels[train] >= 0]
    labeled = {}
    for c in range(graph.num_classes):
        pool = train[graph.labels[train] == c]
        if len(pool) < k:
            raise ValueError(f"class {c} has {len(pool)} training nodes, fewer than k={k}")
        labeled[c] = np.sort(rng.choice(pool, size=k, replace=False))
    evaluation = graph.split_nodes("test")
    evaluation = evaluation[graph.labels[evaluation] >= 0]
    return FewShotSplit(k, labeled, evaluation)

