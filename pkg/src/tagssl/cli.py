"""Command-line pipeline: gen-synthetic, ingest-check, pretrain, embed, eval, plot."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .encoders import (
    build_vocab,
    compute_initial_features,
    load_embeddings,
    read_embedding_header,
    save_embeddings,
)
from .evaluation import (
    EvalReport,
    ProbeConfig,
    eval_clustering,
    eval_fewshot_clf,
    eval_full_clf,
    eval_link_mrr,
)
from .graph import generate_synthetic_tag, load_tag, make_link_eval_set, save_tag
from .trainer import (
    Trainer,
    build_encoders,
    export_embeddings,
    restore_trainer,
    set_deterministic,
    text_encoder_from_checkpoint,
)

log = logging.getLogger("tagssl")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    duration_seconds: float = 0.0
    error: str | None = None
    notes: list[str] = field(default_factory=list)

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: str | Path) -> Path:
        if str(path) not in self.outputs:
            self.outputs.append(str(path))
        return Path(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "duration_seconds": self.duration_seconds,
            "error": self.error,
            "notes": self.notes,
        }


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(cfg: Config, out: Path, manifest: RunManifest, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    graph = generate_synthetic_tag(
        d.num_classes, d.nodes_per_class, d.p_in, d.p_out,
        d.vocab_per_class, d.doc_length, d.noise_rate, seed=manifest.seed,
    )
    nodes, edges = out / "nodes.jsonl", out / "edges.tsv"
    save_tag(graph, manifest.add_output(nodes), manifest.add_output(edges))
    log.info("wrote %d nodes and %d edges to %s", graph.num_nodes, graph.num_edges, out)


def _load_dataset(cfg: Config, manifest: RunManifest):
    manifest.add_input(cfg.data.nodes_path)
    manifest.add_input(cfg.data.edges_path)
    return load_tag(cfg.data.nodes_path, cfg.data.edges_path)


def cmd_ingest_check(cfg: Config, out: Path, manifest: RunManifest, args) -> None:
    graph = _load_dataset(cfg, manifest)
    degrees = np.array([graph.degree(i) for i in range(graph.num_nodes)])
    summary = {
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "isolated_nodes": int((degrees == 0).sum()),
        "mean_degree": float(degrees.mean()) if len(degrees) else 0.0,
        "num_classes": graph.num_classes if graph.labels is not None else None,
        "splits": (
            {s: int(len(graph.split_nodes(s))) for s in ("train", "valid", "test")}
            if graph.splits is not None else None
        ),
    }
    print(json.dumps(summary, indent=2))
    out.mkdir(parents=True, exist_ok=True)
    path = manifest.add_output(out / "ingest_summary.json")
    path.write_text(json.dumps(summary, indent=2) + "\n")


def cmd_pretrain(cfg: Config, out: Path, manifest: RunManifest, args) -> None:
    for flag, terms in (("no_gc_cl", ("gc_cl_text", "gc_cl_gnn")), ("no_nd_ka", ("nd_ka",)), ("no_nbh_ka", ("nbh_ka",))):
        if getattr(args, flag):
            for t in terms:
                setattr(cfg.loss, t, False)
    if not cfg.loss.any_enabled:
        raise ValueError("all loss terms are disabled; refusing to start")
    manifest.config = cfg.to_dict()
    graph = _load_dataset(cfg, manifest)
    out.mkdir(parents=True, exist_ok=True)

    vocab = build_vocab(graph.documents, cfg.data.min_frequency)
    cfg.plm.vocab_size = len(vocab)
    manifest.config = cfg.to_dict()
    text, gnn = build_encoders(cfg.plm, cfg.gnn, manifest.seed)

    e0_path = manifest.add_output(out / "e0.emb")
    e0, hit = compute_initial_features(graph, text, vocab, cache_path=e0_path)
    msg = "reused cached initial features" if hit else "computed initial features"
    log.info("%s (%s)", msg, e0_path)
    manifest.notes.append(msg)

    ckpt = manifest.add_output(out / "checkpoint.pt")
    train_log = manifest.add_output(out / "train_log.tsv")
    if args.resume:
        trainer = restore_trainer(args.resume, graph, e0.values)
        manifest.add_input(args.resume)
    else:
        trainer = Trainer(graph, vocab, text, gnn, e0.values, cfg.loss, cfg.train)
    trainer.run(max_steps=args.max_steps, log_path=train_log, checkpoint_path=ckpt)
    emb_path = manifest.add_output(out / "embeddings.emb")
    save_embeddings(emb_path, trainer.export_embeddings())
    log.info("pretrained %d steps; embeddings at %s", trainer.step, emb_path)


def cmd_embed(cfg: Config, out: Path, manifest: RunManifest, args) -> None:
    graph = _load_dataset(cfg, manifest)
    manifest.add_input(args.checkpoint)
    encoder, vocab = text_encoder_from_checkpoint(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    path = manifest.add_output(out / "embeddings.emb")
    save_embeddings(path, export_embeddings(encoder, vocab, graph))


def _probe_config(cfg: Config, args) -> ProbeConfig:
    return ProbeConfig(
        probe=args.probe or cfg.eval.probe,
        epochs=cfg.eval.probe_epochs,
        learning_rate=cfg.eval.probe_learning_rate,
    )


def cmd_eval(cfg: Config, out: Path, manifest: RunManifest, args) -> None:
    graph = _load_dataset(cfg, manifest)
    manifest.add_input(args.embeddings)
    n, _, _, _ = read_embedding_header(args.embeddings)
    if n != graph.num_nodes:
        raise ValueError(f"dataset/embedding mismatch: {n} embedding rows for {graph.num_nodes} nodes")
    emb = load_embeddings(args.embeddings).values
    repeats = args.repeats or cfg.eval.repeats
    seed = manifest.seed
    reports: list[tuple[str, EvalReport]] = []
    if args.task == "fewshot":
        probe = _probe_config(cfg, args)
        for k in args.k or cfg.eval.fewshot_k:
            reports.append((f"fewshot_k{k}_{probe.probe}", eval_fewshot_clf(emb, graph, k, probe, repeats, seed)))
    elif args.task == "full":
        probe = _probe_config(cfg, args)
        reports.append((f"full_{probe.probe}", eval_full_clf(emb, graph, probe, repeats, seed)))
    elif args.task == "cluster":
        runs = args.repeats or cfg.eval.cluster_runs
        for metric, rep in eval_clustering(emb, graph, runs, seed, cfg.eval.cluster_nodes).items():
            reports.append((f"cluster_{metric}", rep))
    elif args.task == "link":
        negatives = args.negatives or cfg.eval.link_negatives
        sources = graph.split_nodes(cfg.eval.link_split) if graph.splits is not None else np.arange(graph.num_nodes)
        sources = [int(v) for v in sources if graph.degree(int(v)) > 0]
        values = []
        for r in range(repeats):
            eval_set = make_link_eval_set(graph, sources, negatives, np.random.default_rng([seed, r]))
            values.append(eval_link_mrr(emb, eval_set).mean)
        reports.append(("link_mrr", EvalReport("link", "mrr", values, {"negatives": negatives, "queries": len(sources)})))
    out.mkdir(parents=True, exist_ok=True)
    for stem, rep in reports:
        for p in rep.write(out, stem):
            manifest.add_output(p)
        print(f"{rep.task}\t{rep.metric}\t{rep.mean:.4f} ± {rep.std:.4f} ({rep.repeats} repeats)")


def cmd_plot(cfg: Config, out: Path, manifest: RunManifest, args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[str, list[tuple[int, float, float]]] = {}
    for path in sorted(Path(args.reports).glob("fewshot_k*.json")):
        summary = json.loads(path.read_text())
        manifest.add_input(path)
        k = summary["config"]["k"]
        series.setdefault(summary["config"].get("probe", "mlp"), []).append((k, summary["mean"], summary["std"]))
    if not series:
        raise ValueError(f"no few-shot summaries found in {args.reports}")
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 3))
    for name, pts in sorted(series.items()):
        pts.sort()
        ks, means, stds = zip(*pts)
        ax.errorbar(ks, means, yerr=stds, marker="o", capsize=3, label=name)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("labelled nodes per class (k)")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    path = manifest.add_output(out / "fewshot_accuracy.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "ingest-check": cmd_ingest_check,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagssl", description=__doc__)
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="overrides train.seed")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    parser.add_argument("--manifest", help="manifest path (default: <out>/<command>_manifest.json)")
    parser.add_argument("--nodes", help="overrides data.nodes_path")
    parser.add_argument("--edges", help="overrides data.edges_path")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synthetic", help="write a planted-partition dataset")
    sub.add_parser("ingest-check", help="validate and summarise a dataset")

    p = sub.add_parser("pretrain", help="compute frozen features, pretrain, export embeddings")
    p.add_argument("--no-gc-cl", action="store_true", help="disable both contrastive terms")
    p.add_argument("--no-nd-ka", action="store_true", help="disable node-level alignment")
    p.add_argument("--no-nbh-ka", action="store_true", help="disable neighbourhood-level alignment")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int, help="stop after this many steps (checkpoint is still written)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("embed", help="export text-encoder embeddings from a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="evaluate exported embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--task", required=True, choices=["fewshot", "full", "cluster", "link"])
    p.add_argument("--k", type=int, nargs="+", help="shots per class (fewshot)")
    p.add_argument("--probe", choices=["mlp", "graphsage"])
    p.add_argument("--repeats", type=int)
    p.add_argument("--negatives", type=int, help="negatives per link query")

    p = sub.add_parser("plot", help="plot few-shot accuracy against k")
    p.add_argument("--reports", required=True, help="directory holding few-shot summaries")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    out = Path(args.out)
    start = time.time()
    manifest = RunManifest(args.command, {}, 0)
    try:
        cfg = Config.load(args.config)
        if args.seed is not None:
            cfg.train.seed = args.seed
        if args.nodes:
            cfg.data.nodes_path = args.nodes
        if args.edges:
            cfg.data.edges_path = args.edges
        if getattr(args, "epochs", None):
            cfg.train.epochs = args.epochs
        manifest.seed = cfg.train.seed
        manifest.config = cfg.to_dict()
        if args.config:
            manifest.add_input(args.config)
        if args.deterministic:
            set_deterministic(True)
        COMMANDS[args.command](cfg, out, manifest, args)
        status = 0
    except Exception as exc:  # noqa: BLE001 - recorded in the manifest
        manifest.error = f"{type(exc).__name__}: {exc}"
        log.error("%s failed: %s", args.command, manifest.error)
        log.debug("%s", traceback.format_exc())
        status = 1
    manifest.duration_seconds = round(time.time() - start, 3)
    _write_manifest(manifest, args.manifest or out / f"{args.command.replace('-', '_')}_manifest.json")
    return status


def _write_manifest(manifest: RunManifest, path: str | Path) -> None:
    payload = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(payload)
    except OSError as exc:
        log.error("could not write manifest to %s (%s); printing it instead", path, exc)
        sys.stderr.write(payload)


if __name__ == "__main__":
    sys.exit(main())
