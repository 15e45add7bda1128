"""Tokenizer, transformer text encoder, mean-aggregation GNN and embedding cache I/O."""
from __future__ import annotations

import hashlib
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .graph import Document, TagGraph

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
RESERVED = (PAD, UNK, CLS)


# ---------------------------------------------------------------------------
# tokenization


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def cls_id(self) -> int:
        return self._ids[CLS]


def _words(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(documents: Sequence[Document | str], min_frequency: int = 1) -> Vocab:
    """Whitespace/lowercase vocabulary ordered by (frequency desc, token asc)."""
    if not documents:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for doc in documents:
        counts.update(_words(doc.text if isinstance(doc, Document) else doc))
    kept = [w for w, c in counts.items() if c >= min_frequency and w not in RESERVED]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocab(RESERVED + tuple(kept))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_length: int


def tokenize(doc: Document | str, vocab: Vocab, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    text = doc.text if isinstance(doc, Document) else doc
    ids = [vocab.cls_id] + [vocab.id(w) for w in _words(text)]
    ids = ids[:max_len]
    if isinstance(doc, Document):
        doc.tokens = ids
    return TokenSequence(tuple(ids), len(ids))


def pad_batch(sequences: Sequence[TokenSequence], pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into ``(ids, mask)`` tensors, padded to the longest one."""
    width = max(len(s.ids) for s in sequences)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), width), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq.ids)] = torch.tensor(seq.ids, dtype=torch.long)
        mask[row, : seq.attention_length] = True
    return ids, mask


# ---------------------------------------------------------------------------
# text encoder


@dataclass
class PlmConfig:
    vocab_size: int = 0
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_sequence_length: int = 32
    dropout_rate: float = 0.1
    ffn_multiplier: int = 4

    def __post_init__(self) -> None:
        for name in ("hidden_dim", "num_layers", "num_heads", "max_sequence_length", "ffn_multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape

        def heads(proj: torch.Tensor) -> torch.Tensor:
            return proj.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = self.dropout(scores.softmax(dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    """Post-norm transformer block: x = LN(x + attn(x)); x = LN(x + ffn(x))."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float) -> None:
        super().__init__()
        self.attention = SelfAttention(dim, num_heads, dropout)
        self.attn_norm = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, dim)
        self.ffn_norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.attn_norm(x + self.dropout(self.attention(x, mask)))
        h = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(h))


class TextEncoder(nn.Module):
    """Small transformer encoder; the representation is the final [CLS] state."""

    def __init__(self, config: PlmConfig) -> None:
        super().__init__()
        if config.vocab_size < len(RESERVED):
            raise ValueError("vocab_size must cover the reserved tokens")
        self.config = config
        dim = config.hidden_dim
        self.token_embedding = nn.Embedding(config.vocab_size, dim)
        self.position_embedding = nn.Embedding(config.max_sequence_length, dim)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.layers = nn.ModuleList(
            EncoderLayer(dim, config.num_heads, config.ffn_multiplier * dim, config.dropout_rate)
            for _ in range(config.num_layers)
        )

    @property
    def dim(self) -> int:
        return self.config.hidden_dim

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.config.max_sequence_length:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds max_sequence_length "
                f"{self.config.max_sequence_length}"
            )
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None]
        x = self.dropout(x)
        for layer in self.layers:
            x = layer(x, mask)
        return x[:, 0]


def plm_encode(sequences: Sequence[TokenSequence], encoder: TextEncoder, pad_id: int = 0) -> torch.Tensor:
    """Encode a batch of token sequences to their ``(n, hidden_dim)`` [CLS] states."""
    for seq in sequences:
        if len(seq.ids) > encoder.config.max_sequence_length:
            raise ValueError(
                f"sequence of length {len(seq.ids)} exceeds max_sequence_length "
                f"{encoder.config.max_sequence_length}"
            )
    ids, mask = pad_batch(sequences, pad_id)
    return encoder(ids, mask)


# ---------------------------------------------------------------------------
# graph encoder


@dataclass
class GnnConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    aggregator: str = "mean"
    dropout_rate: float = 0.0
    activation: str = "relu"
    final_activation: bool = False

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("GNN needs at least one layer")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if self.aggregator != "mean":
            raise ValueError(f"unsupported aggregator {self.aggregator!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


_ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu, "identity": lambda x: x}


class SageLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.lin_self = nn.Linear(in_dim, out_dim)
        self.lin_neigh = nn.Linear(in_dim, out_dim, bias=False)

    def forward(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
        # dst aggregates from src; isolated nodes keep a zero neighbour mean
        agg = torch.zeros_like(h).index_add_(0, dst, h[src])
        deg = torch.zeros(h.shape[0], dtype=h.dtype).index_add_(0, dst, torch.ones_like(dst, dtype=h.dtype))
        agg = agg / deg.clamp(min=1.0)[:, None]
        return self.lin_self(h) + self.lin_neigh(agg)


class GraphEncoder(nn.Module):
    """Stack of mean-aggregation message-passing layers.

    ``dims`` lists the input width followed by each layer's output width.
    """

    def __init__(self, dims: Sequence[int], config: GnnConfig) -> None:
        super().__init__()
        if len(dims) != config.num_layers + 1:
            raise ValueError("dims must have num_layers + 1 entries")
        self.config = config
        self.layers = nn.ModuleList(SageLayer(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.act = _ACTIVATIONS[config.activation]
        self.dropout = nn.Dropout(config.dropout_rate)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def propagate(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
        for depth, layer in enumerate(self.layers):
            h = layer(self.dropout(h) if depth else h, src, dst)
            if depth < self.num_layers - 1 or self.config.final_activation:
                h = self.act(h)
        return h

    def forward(
        self, features: torch.Tensor, graph: TagGraph, node_ids: Sequence[int] | None = None
    ) -> torch.Tensor:
        if features.shape[0] != graph.num_nodes:
            raise ValueError(
                f"feature matrix has {features.shape[0]} rows for {graph.num_nodes} nodes"
            )
        if node_ids is None:
            edge_index = torch.from_numpy(graph.directed_edge_index())
            return self.propagate(features, edge_index[0], edge_index[1])

        node_ids = np.asarray(node_ids, dtype=np.int64)
        if node_ids.size and (node_ids.min() < 0 or node_ids.max() >= graph.num_nodes):
            raise IndexError("node id out of range")
        # run on the L-hop receptive field only; exact for mean aggregation
        field_nodes = receptive_field(graph, node_ids, self.num_layers)
        local = np.full(graph.num_nodes, -1, dtype=np.int64)
        local[field_nodes] = np.arange(len(field_nodes))
        ei = graph.directed_edge_index()
        keep = (local[ei[0]] >= 0) & (local[ei[1]] >= 0)
        src = torch.from_numpy(local[ei[0, keep]])
        dst = torch.from_numpy(local[ei[1, keep]])
        h = self.propagate(features[torch.from_numpy(field_nodes)], src, dst)
        return h[torch.from_numpy(local[node_ids])]


def receptive_field(graph: TagGraph, node_ids: np.ndarray, hops: int) -> np.ndarray:
    seen = np.zeros(graph.num_nodes, dtype=bool)
    seen[node_ids] = True
    frontier = np.unique(node_ids)
    for _ in range(hops):
        if not len(frontier):
            break
        nxt = np.concatenate([graph.neighbors[v] for v in frontier.tolist()] + [np.zeros(0, np.int64)])
        nxt = np.unique(nxt)
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        frontier = nxt
    return np.flatnonzero(seen)


def gnn_encode(
    initial_features: torch.Tensor,
    graph: TagGraph,
    node_ids: Sequence[int] | None,
    encoder: GraphEncoder,
) -> torch.Tensor:
    return encoder(initial_features, graph, node_ids)


# ---------------------------------------------------------------------------
# frozen features and the embedding cache


def tokenize_graph(graph: TagGraph, vocab: Vocab, max_len: int) -> list[TokenSequence]:
    return [tokenize(doc, vocab, max_len) for doc in graph.documents]


@torch.no_grad()
def encode_all(
    encoder: TextEncoder, sequences: Sequence[TokenSequence], batch_size: int = 256
) -> np.ndarray:
    """Dropout-free forward pass over every sequence, returned as float32 rows."""
    was_training = encoder.training
    encoder.eval()
    try:
        chunks = [
            plm_encode(sequences[start : start + batch_size], encoder)
            for start in range(0, len(sequences), batch_size)
        ]
    finally:
        encoder.train(was_training)
    return torch.cat(chunks).to(torch.float32).numpy()


def encoder_fingerprint(encoder: nn.Module, vocab: Vocab, graph: TagGraph) -> str:
    """Hash of encoder config, weights, vocabulary and graph text."""
    h = hashlib.sha256()
    h.update(repr(asdict(encoder.config)).encode())
    for name, tensor in sorted(encoder.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    h.update("\n".join(vocab.tokens).encode())
    h.update(graph.content_hash().encode())
    return h.hexdigest()


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    role: str
    fingerprint: str = ""

    ROLES = ("initial_features", "text_reps", "gnn_reps", "exported")

    def __post_init__(self) -> None:
        if self.role not in self.ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not np.isfinite(self.values).all():
            raise ValueError("embedding matrix contains non-finite entries")

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


# magic, num_nodes, dim, role, fingerprint
_HEADER = struct.Struct("<8sQQ16s64s")
_MAGIC = b"TAGEMB01"


def save_embeddings(path: str | Path, matrix: EmbeddingMatrix) -> None:
    header = _HEADER.pack(
        _MAGIC,
        matrix.num_nodes,
        matrix.dim,
        matrix.role.encode("ascii"),
        matrix.fingerprint.encode("ascii"),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(matrix.values.astype("<f4").tobytes(order="C"))


def read_embedding_header(path: str | Path) -> tuple[int, int, str, str]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError(f"{path}: truncated embedding header")
    magic, n, d, role, fp = _HEADER.unpack(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    return n, d, role.rstrip(b"\0").decode(), fp.rstrip(b"\0").decode()


def load_embeddings(
    path: str | Path, expected_nodes: int | None = None, expected_fingerprint: str | None = None
) -> EmbeddingMatrix:
    n, d, role, fp = read_embedding_header(path)
    if expected_nodes is not None and n != expected_nodes:
        raise ValueError(f"{path}: embedding cache has {n} rows but the graph has {expected_nodes} nodes")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise ValueError(f"{path}: embedding cache fingerprint does not match the encoder")
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * d:
        raise ValueError(f"{path}: expected {n * d} values, found {data.size}")
    return EmbeddingMatrix(data.reshape(n, d).astype(np.float32), role, fp)


def compute_initial_features(
    graph: TagGraph,
    encoder: TextEncoder,
    vocab: Vocab,
    cache_path: str | Path | None = None,
    role: str = "initial_features",
) -> tuple[EmbeddingMatrix, bool]:
    """Frozen [CLS] features for every node, reusing a matching on-disk cache.

    Returns the matrix and whether the cache was hit.
    """
    fingerprint = encoder_fingerprint(encoder, vocab, graph)
    if cache_path is not None and Path(cache_path).exists():
        n, _, cached_role, fp = read_embedding_header(cache_path)
        if n != graph.num_nodes:
            raise ValueError(
                f"{cache_path}: embedding cache has {n} rows but the graph has {graph.num_nodes} nodes"
            )
        if fp == fingerprint and cached_role == role:
            return load_embeddings(cache_path), True
    sequences = tokenize_graph(graph, vocab, encoder.config.max_sequence_length)
    matrix = EmbeddingMatrix(encode_all(encoder, sequences), role, fingerprint)
    if cache_path is not None:
        save_embeddings(cache_path, matrix)
    return matrix, False
