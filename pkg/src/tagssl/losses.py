"""Graph-centric contrastive and knowledge-alignment objectives.

All losses take representation matrices whose rows are aligned with
``ContrastBatch.node_ids``: the query nodes first, followed by any sampled
neighbours that are not themselves queries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

EPS = 1e-8
TERMS = ("gc_cl_text", "gc_cl_gnn", "nd_ka", "nbh_ka")


@dataclass
class ContrastBatch:
    """Queries, their sampled neighbours N(i), and in-batch negatives B(i).

    B(i) is every other query in the batch. A neighbour that is also a query
    is counted once in C(i) = N(i) | B(i), as a positive.
    """

    query_ids: list[int]
    positives: list[list[int]]
    node_ids: list[int] = field(init=False)

    def __post_init__(self) -> None:
        self.query_ids = [int(q) for q in self.query_ids]
        self.positives = [sorted({int(p) for p in ps}) for ps in self.positives]
        if len(self.positives) != len(self.query_ids):
            raise ValueError("need one positive list per query")
        if len(set(self.query_ids)) != len(self.query_ids):
            raise ValueError("query ids must be distinct")
        for q, ps in zip(self.query_ids, self.positives):
            if q in ps:
                raise ValueError(f"query {q} listed as its own neighbour")
        seen = set(self.query_ids)
        extra = []
        for ps in self.positives:
            for p in ps:
                if p not in seen:
                    seen.add(p)
                    extra.append(p)
        self.node_ids = self.query_ids + extra

    @property
    def num_queries(self) -> int:
        return len(self.query_ids)

    @property
    def active(self) -> np.ndarray:
        """Mask of queries with at least one sampled neighbour."""
        return np.array([len(ps) > 0 for ps in self.positives], dtype=bool)

    @property
    def num_active(self) -> int:
        return int(self.active.sum())

    def negatives(self, qi: int) -> list[int]:
        """B(i) for the query at position ``qi``."""
        q = self.query_ids[qi]
        return [j for j in self.query_ids if j != q]

    def candidates(self, qi: int) -> list[int]:
        """C(i) in row order of ``node_ids``."""
        members = set(self.positives[qi]) | set(self.negatives(qi))
        return [j for j in self.node_ids if j in members]

    def masks(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Boolean ``(num_queries, len(node_ids))`` masks for N(i) and C(i)."""
        col = {v: c for c, v in enumerate(self.node_ids)}
        nq = self.num_queries
        pos = torch.zeros((nq, len(self.node_ids)), dtype=torch.bool)
        for qi, ps in enumerate(self.positives):
            for p in ps:
                pos[qi, col[p]] = True
        cand = pos.clone()
        cand[:, :nq] = True
        cand[torch.arange(nq), torch.arange(nq)] = False
        return pos, cand


@dataclass
class LossConfig:
    temperature: float = 0.05
    hop_count: int = 1
    neighbor_sample_size: int = 2
    gc_cl_text: bool = True
    gc_cl_gnn: bool = True
    nd_ka: bool = True
    nbh_ka: bool = True
    weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TERMS})

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.hop_count < 1:
            raise ValueError("hop_count must be >= 1")
        if self.neighbor_sample_size < 1:
            raise ValueError("neighbor_sample_size must be >= 1")
        self.weights = {t: float(self.weights.get(t, 1.0)) for t in TERMS}

    def enabled(self, term: str) -> bool:
        return bool(getattr(self, term))

    @property
    def any_enabled(self) -> bool:
        return any(self.enabled(t) for t in TERMS)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(u @ v / (max(np.linalg.norm(u), EPS) * max(np.linalg.norm(v), EPS)))


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp(min=EPS)


def _masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    logits = logits.masked_fill(~mask, float("-inf"))
    shift = logits.max(dim=-1, keepdim=True).values.detach()
    shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
    shifted = logits - shift
    return shifted - torch.logsumexp(shifted, dim=-1, keepdim=True)


def _positive_nll(logp: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Per-query mean of -log p over positives."""
    picked = torch.where(pos, logp, torch.zeros_like(logp))
    return -picked.sum(dim=-1) / pos.sum(dim=-1).clamp(min=1)


def _check_rows(reps: torch.Tensor, batch: ContrastBatch) -> None:
    if reps.shape[0] != len(batch.node_ids):
        raise ValueError(f"expected {len(batch.node_ids)} representation rows, got {reps.shape[0]}")


def _active_mask(batch: ContrastBatch) -> torch.Tensor:
    active = torch.from_numpy(batch.active)
    if not active.any():
        raise ValueError("no query in the batch has a sampled neighbour")
    return active


def gc_cl_loss(reps: torch.Tensor, batch: ContrastBatch, temperature: float) -> torch.Tensor:
    """Neighbour-as-positive InfoNCE over one modality, averaged over active queries."""
    _check_rows(reps, batch)
    active = _active_mask(batch)
    pos, cand = batch.masks()
    z = _normalize(reps)
    logits = z[: batch.num_queries] @ z.T / temperature
    per_query = _positive_nll(_masked_log_softmax(logits, cand), pos)
    return per_query[active].mean()


def nd_ka_loss(
    text_reps: torch.Tensor, gnn_reps: torch.Tensor, batch: ContrastBatch, temperature: float
) -> torch.Tensor:
    """Cross-modal contrast where the node itself joins its neighbours as a positive."""
    _check_rows(text_reps, batch)
    _check_rows(gnn_reps, batch)
    if text_reps.shape[1] != gnn_reps.shape[1]:
        raise ValueError(
            f"modality dimension mismatch: {text_reps.shape[1]} vs {gnn_reps.shape[1]}"
        )
    active = _active_mask(batch)
    pos, cand = batch.masks()
    nq = batch.num_queries
    diag = torch.zeros_like(pos)
    diag[torch.arange(nq), torch.arange(nq)] = True
    pos_t, cand_t = pos | diag, cand | diag

    zd, ze = _normalize(text_reps), _normalize(gnn_reps)
    gnn_query = _positive_nll(_masked_log_softmax(ze[:nq] @ zd.T / temperature, cand_t), pos_t)
    text_query = _positive_nll(_masked_log_softmax(zd[:nq] @ ze.T / temperature, cand_t), pos_t)
    return ((gnn_query + text_query) / 2)[active].mean()


@dataclass(frozen=True)
class SimilarityDistribution:
    query: int
    candidates: tuple[int, ...]
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        if len(self.candidates) != len(self.probabilities):
            raise ValueError("one probability per candidate required")


def neighborhood_distribution(
    reps: torch.Tensor | np.ndarray, batch: ContrastBatch, query: int, temperature: float
) -> SimilarityDistribution:
    """Softmax of scaled cosine similarity from ``query`` to each member of C(i)."""
    reps = torch.as_tensor(reps, dtype=torch.float64)
    _check_rows(reps, batch)
    qi = batch.query_ids.index(query)
    cands = batch.candidates(qi)
    if not cands:
        raise ValueError(f"query {query} has an empty candidate set")
    col = {v: c for c, v in enumerate(batch.node_ids)}
    z = _normalize(reps)
    logits = z[[col[j] for j in cands]] @ z[qi] / temperature
    probs = torch.softmax(logits - logits.max(), dim=0)
    return SimilarityDistribution(query, tuple(cands), probs.detach().numpy())


def kl_divergence(p: SimilarityDistribution, q: SimilarityDistribution) -> float:
    if p.candidates != q.candidates:
        raise ValueError("distributions are over different candidate sets")
    total = 0.0
    for pj, qj in zip(p.probabilities.tolist(), q.probabilities.tolist()):
        if pj > 0:
            total += pj * math.log(pj / qj)
    return total


def nbh_ka_loss(
    text_reps: torch.Tensor, gnn_reps: torch.Tensor, batch: ContrastBatch, temperature: float
) -> torch.Tensor:
    """Symmetric KL between the two encoders' similarity distributions over C(i)."""
    _check_rows(text_reps, batch)
    _check_rows(gnn_reps, batch)
    active = _active_mask(batch)
    _, cand = batch.masks()
    nq = batch.num_queries
    zd, ze = _normalize(text_reps), _normalize(gnn_reps)
    log_text = _masked_log_softmax(zd[:nq] @ zd.T / temperature, cand)
    log_gnn = _masked_log_softmax(ze[:nq] @ ze.T / temperature, cand)
    diff = torch.where(cand, log_text - log_gnn, torch.zeros_like(log_text))
    kl_tg = (log_text.exp() * diff).sum(dim=-1)
    kl_gt = (log_gnn.exp() * -diff).sum(dim=-1)
    return ((kl_tg + kl_gt) / 2)[active].mean()


def total_loss(
    text_reps: torch.Tensor, gnn_reps: torch.Tensor, batch: ContrastBatch, config: LossConfig
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the enabled terms plus a per-term breakdown (disabled terms are 0)."""
    if not config.any_enabled:
        raise ValueError("all loss terms are disabled")
    tau = config.temperature
    parts: dict[str, torch.Tensor] = {}
    if config.gc_cl_text:
        parts["gc_cl_text"] = gc_cl_loss(text_reps, batch, tau)
    if config.gc_cl_gnn:
        parts["gc_cl_gnn"] = gc_cl_loss(gnn_reps, batch, tau)
    if config.nd_ka:
        parts["nd_ka"] = nd_ka_loss(text_reps, gnn_reps, batch, tau)
    if config.nbh_ka:
        parts["nbh_ka"] = nbh_ka_loss(text_reps, gnn_reps, batch, tau)
    total = sum(config.weights[k] * v for k, v in parts.items())
    breakdown = {t: float(parts[t].detach()) if t in parts else 0.0 for t in TERMS}
    return total, breakdown

