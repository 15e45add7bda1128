"""Run configuration: one YAML file with data/plm/gnn/loss/train/eval sections."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoders import GnnConfig, PlmConfig
from .losses import LossConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    nodes_path: str = "data/nodes.jsonl"
    edges_path: str = "data/edges.tsv"
    min_frequency: int = 1
    # synthetic generator
    num_classes: int = 4
    nodes_per_class: int = 50
    p_in: float = 0.2
    p_out: float = 0.01
    vocab_per_class: int = 30
    doc_length: int = 12
    noise_rate: float = 0.2


@dataclass
class EvalConfig:
    repeats: int = 10
    fewshot_k: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    probe: str = "mlp"
    probe_epochs: int | None = None
    probe_learning_rate: float | None = None
    cluster_runs: int = 10
    cluster_nodes: str = "test"
    link_negatives: int = 1000
    link_split: str = "test"


def _plm_default() -> PlmConfig:
    return PlmConfig(max_sequence_length=32)


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    plm: PlmConfig = field(default_factory=_plm_default)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, raw: dict | None) -> "Config":
        raw = raw or {}
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for f in dataclasses.fields(cls):
            section_cls = type(f.default_factory())
            values = raw.get(f.name) or {}
            allowed = {sf.name for sf in dataclasses.fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{f.name}]: {sorted(bad)}")
            base = dataclasses.asdict(f.default_factory())
            base.update(values)
            sections[f.name] = section_cls(**base)
        return cls(**sections)

    @classmethod
    def load(cls, path: str | Path | None) -> "Config":
        if path is None:
            return cls()
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))
