"""Joint pretraining of the text and graph encoders."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoders import (
    EmbeddingMatrix,
    GnnConfig,
    GraphEncoder,
    PlmConfig,
    TextEncoder,
    Vocab,
    encode_all,
    encoder_fingerprint,
    pad_batch,
    tokenize_graph,
)
from .graph import NeighborhoodIndex, TagGraph, build_khop_index, sample_neighbors
from .losses import TERMS, ContrastBatch, LossConfig, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "total") + TERMS


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    grad_clip_norm: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so that in-batch negatives exist")


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def build_batch(
    graph: TagGraph,
    index: NeighborhoodIndex,
    node_ids: Sequence[int],
    neighbor_sample_size: int,
    rng: np.random.Generator,
) -> ContrastBatch:
    if len(set(int(v) for v in node_ids)) != len(node_ids):
        raise ValueError("batch node ids must be distinct")
    positives = [sample_neighbors(index, int(v), neighbor_sample_size, rng) for v in node_ids]
    return ContrastBatch([int(v) for v in node_ids], positives)


def build_encoders(
    plm: PlmConfig, gnn: GnnConfig, seed: int
) -> tuple[TextEncoder, GraphEncoder]:
    """Fresh encoders; the GNN maps text-width features to text-width outputs."""
    torch.manual_seed(seed)
    text = TextEncoder(plm)
    dims = [plm.hidden_dim] + [gnn.hidden_dim] * (gnn.num_layers - 1) + [plm.hidden_dim]
    return text, GraphEncoder(dims, gnn)


class Trainer:
    """Owns the encoders, optimizer and step counter for one pretraining run.

    The batch schedule is a pure function of ``(seed, step)``, so a run
    restored from a checkpoint replays exactly the batches an uninterrupted
    run would have seen.
    """

    def __init__(
        self,
        graph: TagGraph,
        vocab: Vocab,
        text_encoder: TextEncoder,
        gnn: GraphEncoder,
        initial_features: np.ndarray,
        loss_config: LossConfig,
        train_config: TrainConfig,
    ) -> None:
        if not loss_config.any_enabled:
            raise ValueError("all loss terms are disabled")
        if initial_features.shape[0] != graph.num_nodes:
            raise ValueError("initial feature rows do not match the graph")
        self.graph = graph
        self.vocab = vocab
        self.text_encoder = text_encoder
        self.gnn = gnn
        self.features = torch.from_numpy(np.asarray(initial_features)).to(
            next(text_encoder.parameters()).dtype
        )
        self.loss_config = loss_config
        self.config = train_config
        self.index = build_khop_index(graph, loss_config.hop_count)
        self.sequences = tokenize_graph(graph, vocab, text_encoder.config.max_sequence_length)
        self.optimizer = torch.optim.AdamW(
            list(text_encoder.parameters()) + list(gnn.parameters()),
            lr=train_config.learning_rate,
            weight_decay=train_config.weight_decay,
        )
        self.step = 0
        self.history: list[dict[str, float]] = []
        torch.manual_seed(train_config.seed)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.graph.num_nodes / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.epochs

    def batch_for_step(self, step: int) -> ContrastBatch:
        epoch, position = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(self.graph.num_nodes)
        bs = self.config.batch_size
        queries = order[position * bs : (position + 1) * bs]
        rng = np.random.default_rng([self.config.seed, epoch, position, 1])
        return build_batch(self.graph, self.index, queries, self.loss_config.neighbor_sample_size, rng)

    def representations(self, batch: ContrastBatch) -> tuple[torch.Tensor, torch.Tensor]:
        ids, mask = pad_batch([self.sequences[v] for v in batch.node_ids], self.vocab.pad_id)
        text_reps = self.text_encoder(ids, mask)
        gnn_reps = self.gnn(self.features, self.graph, batch.node_ids)
        return text_reps, gnn_reps

    def train_step(self) -> dict[str, float] | None:
        """Run one optimisation step; returns the logged row or None if skipped."""
        step = self.step
        batch = self.batch_for_step(step)
        self.step += 1
        if batch.num_active == 0:
            log.warning("step %d: no query has a sampled neighbour, skipping batch", step)
            return None
        self.text_encoder.train()
        self.gnn.train()
        text_reps, gnn_reps = self.representations(batch)
        loss, parts = total_loss(text_reps, gnn_reps, batch, self.loss_config)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at step {step}: {parts}; batch={json.dumps(asdict(batch))}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.config.grad_clip_norm:
            torch.nn.utils.clip_grad_norm_(
                list(self.text_encoder.parameters()) + list(self.gnn.parameters()),
                self.config.grad_clip_norm,
            )
        self.optimizer.step()
        row = {"step": step, "total": float(loss.detach()), **parts}
        self.history.append(row)
        return row

    def run(
        self,
        max_steps: int | None = None,
        log_path: str | Path | None = None,
        checkpoint_path: str | Path | None = None,
    ) -> list[dict[str, float]]:
        end = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        rows = []
        fh = _open_log(log_path, append=self.step > 0) if log_path else None
        try:
            while self.step < end:
                row = self.train_step()
                if row is None:
                    continue
                rows.append(row)
                if fh:
                    fh.write("\t".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
                    fh.flush()
                every = self.config.checkpoint_every
                if checkpoint_path and every and self.step % every == 0:
                    self.save(checkpoint_path)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return rows

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "text_encoder": self.text_encoder.state_dict(),
            "gnn": self.gnn.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "plm_config": asdict(self.text_encoder.config),
            "gnn_config": asdict(self.gnn.config),
            "loss_config": asdict(self.loss_config),
            "train_config": asdict(self.config),
            "vocab": list(self.vocab.tokens),
            "history": self.history,
        }

    def save(self, path: str | Path) -> None:
        torch.save(self.state_dict(), path)

    def load_state_dict(self, state: dict) -> None:
        self.text_encoder.load_state_dict(state["text_encoder"])
        self.gnn.load_state_dict(state["gnn"])
        self.optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        self.step = int(state["step"])
        self.history = list(state.get("history", []))

    def export_embeddings(self) -> EmbeddingMatrix:
        return export_embeddings(self.text_encoder, self.vocab, self.graph)


def load_checkpoint(path: str | Path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def restore_trainer(
    path: str | Path, graph: TagGraph, initial_features: np.ndarray
) -> Trainer:
    state = load_checkpoint(path)
    plm = PlmConfig(**state["plm_config"])
    gnn_cfg = GnnConfig(**state["gnn_config"])
    text, gnn = build_encoders(plm, gnn_cfg, seed=0)
    trainer = Trainer(
        graph,
        Vocab(tuple(state["vocab"])),
        text,
        gnn,
        initial_features,
        LossConfig(**state["loss_config"]),
        TrainConfig(**state["train_config"]),
    )
    trainer.load_state_dict(state)
    return trainer


def text_encoder_from_checkpoint(path: str | Path) -> tuple[TextEncoder, Vocab]:
    state = load_checkpoint(path)
    encoder = TextEncoder(PlmConfig(**state["plm_config"]))
    encoder.load_state_dict(state["text_encoder"])
    return encoder, Vocab(tuple(state["vocab"]))


def export_embeddings(encoder: TextEncoder, vocab: Vocab, graph: TagGraph) -> EmbeddingMatrix:
    """Frozen text-encoder [CLS] representations for every node; the GNN is not used."""
    sequences = tokenize_graph(graph, vocab, encoder.config.max_sequence_length)
    return EmbeddingMatrix(
        encode_all(encoder, sequences), "exported", encoder_fingerprint(encoder, vocab, graph)
    )


def pretrain(
    graph: TagGraph,
    vocab: Vocab,
    text_encoder: TextEncoder,
    gnn: GraphEncoder,
    initial_features: np.ndarray,
    loss_config: LossConfig,
    train_config: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[Trainer, list[dict[str, float]]]:
    trainer = Trainer(graph, vocab, text_encoder, gnn, initial_features, loss_config, train_config)
    rows = trainer.run(log_path=log_path, checkpoint_path=checkpoint_path)
    return trainer, rows


def _open_log(path: str | Path, append: bool):
    path = Path(path)
    fresh = not append or not path.exists()
    fh = open(path, "w" if fresh else "a", encoding="utf-8")
    if fresh:
        fh.write("\t".join(LOG_COLUMNS) + "\n")
    return fh


def _fmt(value: float) -> str:
    return str(int(value)) if isinstance(value, int) else repr(float(value))


def read_training_log(path: str | Path) -> list[dict[str, float]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in zip(header, line.rstrip("\n").split("\t"))}
            for line in fh
            if line.strip()
        ]
