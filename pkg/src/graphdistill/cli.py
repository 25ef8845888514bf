"""Experiment runner and plot/table emitter.

Verbs: generate, train-cls, train-det, transfer, eval, sweep, plot.
A JSON config describes the pipeline; artifacts for one run live under
<output_dir>/runs/<config_hash>-s<seed>/ and corpora are cached under
<output_dir>/corpora/ keyed by the corpus spec hash, so sweeps that only vary
the strategy share their data.  Completed stages are recorded in the run
manifest and skipped on re-runs unless --force.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .datagen import (
    generate_classification_corpus,
    generate_detection_corpus,
    read_corpus,
    subsample_corpus,
    write_corpus,
)
from .distill import write_graph_snapshots
from .encoders import build_model, model_from_checkpoint, save_checkpoint
from .evaluation import EvalReport, evaluate_classification, evaluate_detection
from .training import train_classification, train_detection, transfer_encoders


def _output_dir(config: ExperimentConfig, override: str | None) -> Path:
    env = os.environ.get("GRAPHDISTILL_OUT")
    if override:
        return Path(override)
    if env:
        return Path(env)
    return config.output_dir


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if path.exists():
        return json.loads(path.read_text())
    return {}


def _save_manifest(run_dir: Path, manifest: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _corpus_path(out_dir: Path, config: ExperimentConfig, kind: str, seed: int) -> Path:
    return out_dir / "corpora" / f"{config.corpus_hash()}-s{seed}.{kind}.bin"


def ensure_corpora(config: ExperimentConfig, out_dir: Path, seed: int,
                   force: bool = False) -> dict[str, Path]:
    """Generate (or reuse) the corpora this config needs; returns their paths."""
    paths: dict[str, Path] = {}
    corpus_seed = config.corpus_seed(seed)
    section = config.data["corpus"]
    if "path" in section:
        explicit = Path(section["path"])
        if not explicit.is_absolute():
            explicit = config.base_dir / explicit
        corpus = read_corpus(explicit)
        kind = "cls" if hasattr(corpus.spec, "train_per_class") else "det"
        paths[kind] = explicit
        return paths
    cls_spec = config.classification_spec()
    if cls_spec is not None:
        path = _corpus_path(out_dir, config, "cls", corpus_seed)
        if force or not path.exists():
            write_corpus(generate_classification_corpus(cls_spec, corpus_seed), path)
        paths["cls"] = path
    det_spec = config.detection_spec()
    if det_spec is not None:
        path = _corpus_path(out_dir, config, "det", corpus_seed)
        if force or not path.exists():
            write_corpus(generate_detection_corpus(det_spec, corpus_seed), path)
        paths["det"] = path
    return paths


def _stage_done(manifest: dict, stage: str) -> bool:
    return stage in manifest.get("stages_done", [])


def _mark_stage(run_dir: Path, manifest: dict, stage: str) -> None:
    done = set(manifest.get("stages_done", []))
    done.add(stage)
    manifest["stages_done"] = sorted(done)
    _save_manifest(run_dir, manifest)


def run_experiment(config: ExperimentConfig, seed: int, out_dir: Path | None = None,
                   force: bool = False, stages: set[str] | None = None) -> dict:
    """Execute the configured pipeline for one seed; returns a summary dict."""
    out_dir = out_dir or config.output_dir
    run_dir = out_dir / "runs" / f"{config.config_hash()}-s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    wanted = set(stages) if stages is not None else set(config.stages())
    manifest = _load_manifest(run_dir)
    if manifest and manifest.get("config_hash") != config.config_hash():
        raise ConfigError("<manifest>", f"run dir {run_dir} holds a different config")
    manifest.update({
        "name": config.name,
        "config_hash": config.config_hash(),
        "corpus_hash": config.corpus_hash(),
        "seed": seed,
        "config": config.hash_payload(),
    })
    if force:
        manifest["stages_done"] = []
    _save_manifest(run_dir, manifest)
    summary: dict = {"run_dir": str(run_dir), "seed": seed}

    corpora = ensure_corpora(config, out_dir, seed, force=False)
    sampler = config.sampler()
    eval_options = config.eval_options
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    cls_ckpts = {
        name: ckpt_dir / f"cls_{name}.ckpt" for name in (config.source_train or [])
    }
    if "train_cls" in wanted and config.source_train:
        if force or not _stage_done(manifest, "train_cls"):
            corpus = read_corpus(corpora["cls"])
            result = train_classification(
                corpus, config.source_train, config.strategy("source"),
                config.schedule("source", seed), clip_len=sampler.clip_len,
            )
            (run_dir / "cls_metrics.jsonl").write_text(result.metrics_jsonl())
            for name, model in result.models.items():
                save_checkpoint(model, cls_ckpts[name], metadata={
                    "seed": seed, "corpus": str(corpora["cls"]),
                    "epochs": config.schedule("source", seed).total_epochs,
                })
            if result.prior is not None:
                (run_dir / "prior.json").write_text(json.dumps(
                    {name: float(v) for name, v in
                     zip(config.source_train, result.prior)}, indent=2))
            if result.graph_snapshots:
                write_graph_snapshots(run_dir / "graph_snapshots.tsv",
                                      result.graph_snapshots, config.source_train)
            report = evaluate_classification(
                result.models, corpus, split="test",
                n_clips=sampler.test_clips, fused=eval_options["fused"],
            )
            (run_dir / "cls_report.json").write_text(report.to_json())
            _mark_stage(run_dir, manifest, "train_cls")
        report = EvalReport.from_json((run_dir / "cls_report.json").read_text())
        summary["cls_accuracy"] = report.accuracy

    det_ckpts = {
        name: ckpt_dir / f"det_{name}.ckpt" for name in (config.target_train or [])
    }
    if "train_det" in wanted and config.target_train:
        if force or not _stage_done(manifest, "train_det"):
            corpus = read_corpus(corpora["det"])
            if config.subsample_target is not None:
                corpus = subsample_corpus(corpus, config.subsample_target, seed)
            init = None
            if config.transfer_enabled:
                missing = [n for n in config.target_train if not cls_ckpts.get(n, Path()).exists()]
                if missing:
                    raise ConfigError("transfer",
                                      f"missing source checkpoints for {missing}; run train-cls first")
                init = {n: cls_ckpts[n] for n in config.target_train}
            result = train_detection(
                corpus, config.target_train, config.strategy("target"),
                config.schedule("target", seed), sampler, init_checkpoints=init,
            )
            (run_dir / "det_metrics.jsonl").write_text(result.metrics_jsonl())
            for name, model in result.models.items():
                save_checkpoint(model, det_ckpts[name], metadata={
                    "seed": seed, "corpus": str(corpora["det"]),
                    "epochs": config.schedule("target", seed).total_epochs,
                })
            if result.prior is not None:
                (run_dir / "det_prior.json").write_text(json.dumps(
                    {name: float(v) for name, v in
                     zip(config.target_train, result.prior)}, indent=2))
            test_models = {config.test_modality: result.models[config.test_modality]}
            report = evaluate_detection(
                test_models, corpus, "test",
                sampler.clip_len, sampler.clip_step, sampler.window_len,
                sampler.window_step, sampler.activity_threshold,
                thresholds=eval_options["thresholds"], gate=eval_options["gate"],
            )
            (run_dir / "det_report.json").write_text(report.to_json())
            _mark_stage(run_dir, manifest, "train_det")
        report = EvalReport.from_json((run_dir / "det_report.json").read_text())
        summary["map_at"] = report.map_at
    return summary


def _run_job(config_data: str, base_dir: str, seed: int, out_dir: str, force: bool) -> dict:
    config = ExperimentConfig(json.loads(config_data), base_dir=Path(base_dir))
    return run_experiment(config, seed, out_dir=Path(out_dir), force=force)


def run_sweep(config: ExperimentConfig, out_dir: Path, jobs: int = 1,
              force: bool = False) -> list[dict]:
    """Run every sweep entry for every seed; returns and writes a summary table."""
    entries = config.sweep or [{}]
    table: list[dict] = []
    jobs_spec = []
    for entry in entries:
        variant = config.with_overrides(entry)
        label = entry.get("label") or json.dumps(
            {k: v for k, v in entry.items() if k != "label"}, sort_keys=True) or "base"
        for seed in variant.seeds:
            jobs_spec.append((label, variant, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                (label, seed, pool.submit(
                    _run_job, json.dumps(variant.data), str(variant.base_dir),
                    seed, str(out_dir), force))
                for label, variant, seed in jobs_spec
            ]
            for label, seed, future in futures:
                summary = future.result()
                summary["label"] = label
                table.append(summary)
    else:
        for label, variant, seed in jobs_spec:
            summary = run_experiment(variant, seed, out_dir=out_dir, force=force)
            summary["label"] = label
            table.append(summary)
    _write_sweep_table(out_dir / "sweep_table.tsv", table, config)
    return table


def _write_sweep_table(path: Path, table: list[dict], config: ExperimentConfig) -> None:
    test = config.test_modality
    lines = ["label\tseed\ttest_accuracy\tmap@0.1\tmap@0.3\tmap@0.5"]
    by_label: dict[str, list[dict]] = {}
    for row in table:
        by_label.setdefault(row["label"], []).append(row)
    for label, rows in by_label.items():
        for row in rows:
            acc = row.get("cls_accuracy", {}).get(test, "")
            maps = row.get("map_at", {})
            lines.append("\t".join([
                label, str(row["seed"]),
                f"{acc:.4f}" if acc != "" else "",
                *(f"{maps[t]:.4f}" if t in maps else "" for t in (0.1, 0.3, 0.5)),
            ]))
        accs = [r.get("cls_accuracy", {}).get(test) for r in rows]
        accs = [a for a in accs if a is not None]
        maps5 = [r.get("map_at", {}).get(0.5) for r in rows]
        maps5 = [m for m in maps5 if m is not None]
        mean_acc = f"{np.mean(accs):.4f}" if accs else ""
        mean_map = f"{np.mean(maps5):.4f}" if maps5 else ""
        lines.append(f"{label}\tmean\t{mean_acc}\t\t\t{mean_map}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# plotting / tables


class MissingMetricsError(FileNotFoundError):
    pass


def emit_plots(metrics_dir: Path, out_dir: Path | None = None) -> list[Path]:
    """Learning curves, graph-weight rank tables, and mAP tables from run artifacts."""
    metrics_dir = Path(metrics_dir)
    out_dir = Path(out_dir) if out_dir else metrics_dir
    expected = ["cls_metrics.jsonl", "det_metrics.jsonl", "graph_snapshots.tsv",
                "cls_report.json", "det_report.json"]
    found = [name for name in expected if (metrics_dir / name).exists()]
    if not found:
        raise MissingMetricsError(
            f"{metrics_dir}: no metrics artifacts found (expected any of: {', '.join(expected)})"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for kind in ("cls", "det"):
        metrics_path = metrics_dir / f"{kind}_metrics.jsonl"
        if metrics_path.exists():
            written.append(_plot_learning_curves(metrics_path, out_dir / f"{kind}_curves.png"))
    snapshots = metrics_dir / "graph_snapshots.tsv"
    if snapshots.exists():
        written.append(_rank_table(snapshots, out_dir / "graph_ranks.tsv"))
    report_path = metrics_dir / "det_report.json"
    if report_path.exists():
        written.append(_map_table(report_path, out_dir / "map_table.tsv"))
    return written


def _plot_learning_curves(metrics_path: Path, out_path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line]
    epochs = [r["epoch"] for r in records]
    names = sorted(records[0]["loss"]) if records else []
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for name in names:
        ax_loss.plot(epochs, [r["loss"][name] for r in records], label=name)
        ax_acc.plot(epochs, [r["val_accuracy"].get(name, 0.0) for r in records], label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("val accuracy")
    ax_loss.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def _rank_table(snapshot_path: Path, out_path: Path) -> Path:
    """Per-receiver ranks of incoming edge weights (1 = strongest sender)."""
    rows = [line.split("\t") for line in snapshot_path.read_text().splitlines()[1:] if line]
    by_tag_receiver: dict[tuple, list] = {}
    for tag, sender, receiver, weight in rows:
        by_tag_receiver.setdefault((tag, receiver), []).append((sender, float(weight)))
    lines = ["tag\treceiver\tsender\tweight\trank"]
    for (tag, receiver), senders in sorted(by_tag_receiver.items()):
        ordered = sorted(senders, key=lambda s: -s[1])
        for rank, (sender, weight) in enumerate(ordered, start=1):
            lines.append(f"{tag}\t{receiver}\t{sender}\t{weight:.8f}\t{rank}")
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def _map_table(report_path: Path, out_path: Path) -> Path:
    report = EvalReport.from_json(report_path.read_text())
    thresholds = sorted(report.map_at)
    lines = ["metric\t" + "\t".join(str(t) for t in thresholds)]
    lines.append("mAP\t" + "\t".join(f"{report.map_at[t]:.4f}" for t in thresholds))
    classes = sorted({c for aps in report.per_class_ap.values() for c in aps})
    for c in classes:
        lines.append(
            f"AP[class {c}]\t"
            + "\t".join(f"{report.per_class_ap[t].get(c, float('nan')):.4f}" for t in thresholds)
        )
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


# ---------------------------------------------------------------------------
# entry point


def _add_common(parser, seed=True):
    parser.add_argument("--config", required=True, help="experiment config JSON")
    if seed:
        parser.add_argument("--seed", type=int, default=None,
                            help="run a single seed (default: all seeds in config)")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--force", action="store_true", help="redo completed stages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphdistill",
        description="Multimodal distillation experiments on synthetic corpora",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    _add_common(sub.add_parser("generate", help="generate and persist the corpora"))
    _add_common(sub.add_parser("train-cls", help="source classification training"))
    _add_common(sub.add_parser("train-det", help="target detection training"))
    _add_common(sub.add_parser("transfer", help="initialize detection encoders from source"))
    _add_common(sub.add_parser("eval", help="re-evaluate existing checkpoints"))
    sweep = sub.add_parser("sweep", help="run all sweep entries and emit a table")
    _add_common(sweep, seed=False)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    plot = sub.add_parser("plot", help="emit curves and tables from metrics")
    plot.add_argument("--metrics", required=True, help="run directory with metrics files")
    plot.add_argument("--out", default=None, help="directory for emitted files")
    return parser


def _seeds(config: ExperimentConfig, args) -> list[int]:
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return config.seeds


def _cmd_eval(config: ExperimentConfig, out_dir: Path, seed: int) -> dict:
    """Recompute evaluation reports from the checkpoints of an existing run."""
    run_dir = out_dir / "runs" / f"{config.config_hash()}-s{seed}"
    ckpt_dir = run_dir / "checkpoints"
    corpora = ensure_corpora(config, out_dir, seed)
    sampler = config.sampler()
    eval_options = config.eval_options
    summary: dict = {"run_dir": str(run_dir), "seed": seed}
    cls_spec = config.classification_spec()
    if cls_spec is not None and config.source_train:
        paths = {n: ckpt_dir / f"cls_{n}.ckpt" for n in config.source_train}
        missing = [n for n, p in paths.items() if not p.exists()]
        if missing:
            raise ConfigError("eval", f"missing checkpoints for {missing}; run train-cls first")
        models = {n: model_from_checkpoint(paths[n], cls_spec.modality(n))
                  for n in config.source_train}
        corpus = read_corpus(corpora["cls"])
        report = evaluate_classification(models, corpus, split="test",
                                         n_clips=sampler.test_clips,
                                         fused=eval_options["fused"])
        (run_dir / "cls_report.json").write_text(report.to_json())
        summary["cls_accuracy"] = report.accuracy
    det_spec = config.detection_spec()
    if det_spec is not None and config.target_train:
        path = ckpt_dir / f"det_{config.test_modality}.ckpt"
        if not path.exists():
            raise ConfigError("eval", f"missing checkpoint {path}; run train-det first")
        model = model_from_checkpoint(path, det_spec.modality(config.test_modality))
        corpus = read_corpus(corpora["det"])
        report = evaluate_detection(
            {config.test_modality: model}, corpus, "test",
            sampler.clip_len, sampler.clip_step, sampler.window_len,
            sampler.window_step, sampler.activity_threshold,
            thresholds=eval_options["thresholds"], gate=eval_options["gate"],
        )
        (run_dir / "det_report.json").write_text(report.to_json())
        summary["map_at"] = report.map_at
    return summary


def _cmd_transfer(config: ExperimentConfig, out_dir: Path, seed: int) -> None:
    """Build detection models, copy source encoders in, save the initialized state."""
    sampler = config.sampler()
    det_spec = config.detection_spec()
    if det_spec is None or not config.target_train:
        raise ConfigError("modalities.target_train", "transfer needs a detection setup")
    run_dir = out_dir / "runs" / f"{config.config_hash()}-s{seed}"
    ckpt_dir = run_dir / "checkpoints"
    sources = {n: ckpt_dir / f"cls_{n}.ckpt" for n in (config.source_train or [])}
    missing = [n for n, p in sources.items() if not p.exists()]
    if missing:
        raise ConfigError("transfer", f"missing source checkpoints for {missing}; run train-cls first")
    schedule = config.schedule("target", seed)
    models = {
        name: build_model("detection", det_spec.modality(name), sampler.clip_len,
                          det_spec.num_classes, schedule.feature_dim,
                          schedule.base_channels, seed=schedule.seed)
        for name in config.target_train
    }
    transfer_encoders({n: sources[n] for n in config.target_train}, models)
    for name, model in models.items():
        save_checkpoint(model, ckpt_dir / f"det_init_{name}.ckpt",
                        metadata={"seed": seed, "transferred_from": str(sources[name])})
    print(f"wrote initialized detection checkpoints under {ckpt_dir}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "plot":
        try:
            written = emit_plots(Path(args.metrics), Path(args.out) if args.out else None)
        except MissingMetricsError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for path in written:
            print(path)
        return 0
    try:
        config = ExperimentConfig.load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = _output_dir(config, args.out)
    try:
        if args.verb == "generate":
            for seed in _seeds(config, args):
                paths = ensure_corpora(config, out_dir, seed, force=args.force)
                for kind, path in paths.items():
                    print(f"{kind}: {path}")
            return 0
        if args.verb == "sweep":
            table = run_sweep(config, out_dir, jobs=args.jobs, force=args.force)
            print(f"wrote {out_dir / 'sweep_table.tsv'} ({len(table)} runs)")
            return 0
        stage_map = {
            "train-cls": {"generate", "train_cls"},
            "train-det": {"generate", "train_cls", "transfer", "train_det"},
        }
        for seed in _seeds(config, args):
            if args.verb == "transfer":
                _cmd_transfer(config, out_dir, seed)
                continue
            if args.verb == "eval":
                summary = _cmd_eval(config, out_dir, seed)
            else:
                summary = run_experiment(config, seed, out_dir=out_dir,
                                         force=args.force, stages=stage_map[args.verb])
            print(json.dumps(summary, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # stage failure: keep partial artifacts, report, exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
