"""Command line entry point: gen, pretrain, embed, probe, table and repro.

Exit codes:
    0  success
    2  configuration error (bad flag, bad config file, config hash mismatch)
    3  data error (unreadable corpus, too-short clip, label mismatch)
    4  numeric failure (non-finite loss)
    5  acceptance failure (repro suite checks did not hold)
    6  pipeline integrity error (a stage input changed after it was produced)

Every subcommand accepts ``--config FILE`` (JSON); flags given on the command
line override its entries and the merged result is written next to the outputs.
Relative output paths resolve against ``$MULTISAMPLE_WORKDIR`` (default: cwd).
"""
from __future__ import annotations

import argparse
import glob as globlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import experiments, probe
from .dsp import AudioError, load_corpus, save_corpus
from .model import init_params, state_hash
from .pretrain import (
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    epoch_means,
    file_sha256,
    load_checkpoint,
    resume,
    save_config,
    train,
)
from .sampling import SamplingError
from .synthgen import GENERATORS, SynthError, SynthSpec, gen_mixed_corpus

logger = logging.getLogger("multisample")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_ACCEPTANCE = 5
EXIT_INTEGRITY = 6

WORKDIR_ENV = "MULTISAMPLE_WORKDIR"


class IntegrityError(RuntimeError):
    pass


class AcceptanceError(RuntimeError):
    pass


def workdir() -> Path:
    return Path(os.environ.get(WORKDIR_ENV, "."))


def resolve(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else workdir() / path


# -- run manifest -------------------------------------------------------------


@dataclass
class StageRecord:
    stage: str
    config_hash: str
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    """Ordered stage invocations; each stage's inputs must still hash to what earlier stages wrote."""

    stages: list = field(default_factory=list)

    def add(self, stage: str, config_hash: str, inputs: Sequence = (), outputs: Sequence = ()) -> StageRecord:
        rec = StageRecord(stage, config_hash,
                          {str(p): file_sha256(p) for p in inputs},
                          {str(p): file_sha256(p) for p in outputs})
        produced = self.produced()
        for p, h in rec.inputs.items():
            if p in produced and produced[p] != h:
                raise IntegrityError(f"stage {stage}: input {p} changed since it was written")
        self.stages.append(rec)
        return rec

    def produced(self) -> dict:
        out = {}
        for rec in self.stages:
            out.update(rec.outputs)
        return out

    def verify(self) -> None:
        """Re-hash every recorded output on disk and check the stage chain."""
        produced = {}
        for rec in self.stages:
            for p, h in rec.inputs.items():
                if p in produced and produced[p] != h:
                    raise IntegrityError(f"stage {rec.stage}: input {p} does not match its producer")
            produced.update(rec.outputs)
        for p, h in produced.items():
            if not Path(p).exists() or file_sha256(p) != h:
                raise IntegrityError(f"{p} was modified after it was written")

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"stages": [asdict(s) for s in self.stages]}, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls([StageRecord(**s) for s in data["stages"]])


def _config_hash(d: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- table --------------------------------------------------------------------

TABLE_COLUMNS = [
    ("clip acc", "clip_classification", "accuracy"),
    ("event F1", "frame_classification_sed", "onset_f1"),
    ("pitch", "pitch_classification", "pitch_accuracy"),
    ("chroma", "pitch_classification", "chroma_accuracy"),
]

# reference rows: SC acc, DCASE onset F1, NSynth pitch, NSynth chroma
PAPER_ROWS = {
    "PANNs": (0.083, 0.754, 0.012, 0.096),
    "COLA": (0.459, 0.232, 0.434, 0.470),
    "L_clip + L_frame": (0.535, 0.344, 0.424, 0.462),
    "L_clip + L_pitch": (0.585, 0.244, 0.428, 0.463),
    "L_clip + L_frame + L_pitch": (0.572, 0.278, 0.452, 0.487),
    "cosine similarity": (0.401, 0.094, 0.212, 0.238),
}

DESK_BANNER = "desk-scale synthetic results; these are not the published numbers"


@dataclass
class Table:
    columns: list
    rows: list  # (label, [value or None, ...])
    banner: str = DESK_BANNER

    def to_dict(self) -> dict:
        return {"banner": self.banner, "columns": self.columns,
                "rows": [{"label": l, "values": v} for l, v in self.rows]}

    def to_text(self) -> str:
        width = max([len(l) for l, _ in self.rows] + [6])
        lines = [f"# {self.banner}", " " * width + " | " + " | ".join(f"{c:>9}" for c in self.columns)]
        lines.append("-" * len(lines[-1]))
        for label, values in self.rows:
            cells = ["{:>9}".format("-" if v is None else f"{v:.3f}") for v in values]
            lines.append(f"{label:<{width}} | " + " | ".join(cells))
        return "\n".join(lines)


def cmd_table(reports: Sequence[probe.ProbeReport], paper_values: bool = False) -> Table:
    """One row per configuration label, one column per metric.

    Reports sharing a label and task (e.g. several seeds) are averaged.

    Raises:
        ValueError: on no reports, or when the configurations were probed on
            different task sets.
    """
    if not reports:
        raise ValueError("no reports to tabulate")
    by_label: dict[str, dict] = {}
    for r in reports:
        by_label.setdefault(r.label, {}).setdefault(r.task, []).append(r)
    task_sets = {label: sorted(rs) for label, rs in by_label.items()}
    first_label, first = next(iter(task_sets.items()))
    for label, tasks in task_sets.items():
        if tasks != first:
            raise ValueError(f"task sets differ: {first_label!r} has {first}, {label!r} has {tasks}")
    rows = []
    for label, rs in by_label.items():
        values = []
        for _, kind, metric in TABLE_COLUMNS:
            hits = [r.metrics[metric] for group in rs.values() for r in group
                    if r.kind == kind and metric in r.metrics]
            values.append(float(np.mean(hits)) if hits else None)
        rows.append((label or "(unlabelled)", values))
    if paper_values:
        rows = [(f"[paper] {k}", list(v)) for k, v in PAPER_ROWS.items()] + rows
    return Table([c for c, _, _ in TABLE_COLUMNS], rows)


# -- config merging -------------------------------------------------------------


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _merge(config_path, overrides: dict) -> dict:
    merged = _load_json(config_path)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


# -- subcommands ----------------------------------------------------------------


def run_gen(args) -> int:
    params = _merge(args.config, {"kind": args.kind, "n_clips": args.n_clips,
                                  "duration_s": args.duration, "seed": args.seed})
    kind = params.pop("kind", None)
    if kind is None:
        raise ConfigError("gen needs --kind")
    out = resolve(args.out)
    if kind == "mixed":
        clips = gen_mixed_corpus(params.get("n_clips", 200), params.get("seed", 0), params.get("duration_s", 1.5))
    else:
        for key in ("midi_range", "rolloff_range", "snr_db_range", "event_duration_s"):
            if key in params and params[key] is not None:
                params[key] = tuple(params[key])
        try:
            spec = SynthSpec(kind, **params)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        clips = GENERATORS[spec.kind](spec)
    manifest = save_corpus(out, clips)
    (out / "effective_config.json").write_text(json.dumps({"kind": kind, **params}, indent=2, default=list))
    print(manifest)
    return EXIT_OK


def run_pretrain(args) -> int:
    overrides = {"seed": args.seed, "epochs": args.epochs, "learning_rate": args.lr,
                 "alpha": args.alpha, "beta": args.beta, "similarity": args.similarity,
                 "batch_size": args.batch_size, "deterministic": args.deterministic}
    out = resolve(args.out)
    if args.resume:
        ckpt = load_checkpoint(args.resume, allow_mismatch=args.allow_config_mismatch)
        result = resume(ckpt, args.manifest, {k: v for k, v in _merge(args.config, overrides).items()},
                        out, allow_config_mismatch=args.allow_config_mismatch)
    else:
        cfg = TrainConfig.from_dict(_merge(args.config, overrides))
        result = train(args.manifest, cfg, out)
    print(out / "checkpoint_final.pt")
    logger.info("final epoch-mean loss %.4f", epoch_means(result.log)[-1])
    return EXIT_OK


def run_embed(args) -> int:
    archive = probe.embed_corpus(args.manifest, args.ckpt, args.mode)
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    archive.save(out)
    print(out)
    return EXIT_OK


def _task(name: str, n_classes: Optional[int]) -> probe.ProbeTask:
    if name == "pitch":
        return probe.pitch_task()
    if n_classes is None:
        raise ConfigError(f"task {name!r} needs --n-classes")
    if name == "clip":
        return probe.clip_task(n_classes)
    if name == "sed":
        return probe.sed_task(n_classes)
    raise ConfigError(f"unknown task {name!r}")


def run_probe(args) -> int:
    params = _merge(args.config, {"epochs": args.epochs, "learning_rate": args.lr, "seed": args.seed})
    try:
        cfg = probe.ProbeConfig(**params)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    task = _task(args.task, args.n_classes)
    train_arch = probe.EmbeddingArchive.load(args.archive)
    if args.test_archive:
        test_arch = probe.EmbeddingArchive.load(args.test_archive)
    else:
        train_arch, test_arch = probe.split_archive(train_arch, args.test_fraction, cfg.seed)
    report = probe.run_probe(train_arch, test_arch, task, cfg, label=args.label)
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    (out.parent / (out.stem + ".config.json")).write_text(json.dumps(asdict(cfg), indent=2))
    print(json.dumps(report.metrics))
    return EXIT_OK


def run_table(args) -> int:
    paths = sorted(globlib.glob(str(resolve(args.glob)), recursive=True))
    # sidecar config files share the directory; keep only report documents
    reports = [probe.ProbeReport.load(p) for p in paths if "metrics" in json.loads(Path(p).read_text())]
    table = cmd_table(reports, args.paper_values)
    print(json.dumps(table.to_dict(), indent=2) if args.format == "json" else table.to_text())
    return EXIT_OK


# -- repro ----------------------------------------------------------------------

SUITES = {
    # seeds, configurations, epochs
    "quick": ([0], ["clip+frame+pitch"], 20),
    "full-desk": ([0, 1, 2], ["clip", "clip+frame", "clip+pitch", "clip+frame+pitch", "clip+frame+pitch (cosine)"], 20),
}


def _mean_metric(reports, label, task, metric):
    return float(np.mean([r.metrics[metric] for r in reports if r.label == label and r.task == task]))


def acceptance_checks(reports: Sequence[probe.ProbeReport], losses_by_run: dict) -> dict:
    """Named pass/fail checks over a finished suite."""
    checks = {}
    for run, means in losses_by_run.items():
        checks[f"loss decreases ({run})"] = bool(means[-1] < means[0])
    checks["chroma >= pitch"] = all(
        r.metrics["chroma_accuracy"] >= r.metrics["pitch_accuracy"]
        for r in reports if r.kind == "pitch_classification"
    )
    labels = {r.label for r in reports}
    if {"clip", "clip+frame+pitch", "random"} <= labels:
        full = _mean_metric(reports, "clip+frame+pitch", "pitch", "pitch_accuracy")
        clip = _mean_metric(reports, "clip", "pitch", "pitch_accuracy")
        rand = _mean_metric(reports, "random", "pitch", "pitch_accuracy")
        checks["pitch: full > clip-only > random"] = full > clip > rand
    if {"clip", "clip+frame"} <= labels:
        checks["frame F1: clip+frame > clip-only"] = (
            _mean_metric(reports, "clip+frame", "events", "frame_f1")
            > _mean_metric(reports, "clip", "events", "frame_f1")
        )
    return checks


def repro(suite: str, out_dir, seeds: Optional[Sequence[int]] = None, epochs: Optional[int] = None,
          tamper_hook=None) -> tuple[dict, list]:
    """Run a suite end to end; returns (checks, reports).

    ``tamper_hook(path)`` is called on each checkpoint before it is consumed
    (used by tests to exercise the integrity check).
    """
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    suite_seeds, names, suite_epochs = SUITES[suite]
    seeds = list(suite_seeds if seeds is None else seeds)
    epochs = suite_epochs if epochs is None else epochs
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest()
    reports, losses_by_run = [], {}
    for seed in seeds:
        seed_dir = out_dir / f"seed{seed}"
        corpus_path = save_corpus(seed_dir / "corpus", gen_mixed_corpus(200, seed=seed))
        manifest.add("gen", _config_hash({"kind": "mixed", "n_clips": 200, "seed": seed}), outputs=[corpus_path])
        data = experiments.probe_datasets(seed)
        labelled = [("random", init_params(seed=seed))]
        for name in names:
            cfg = experiments.ablation_config(name, TrainConfig(seed=seed, epochs=epochs))
            run_dir = seed_dir / name.replace(" ", "_").replace("(", "").replace(")", "")
            ckpt = train(load_corpus(corpus_path), cfg, run_dir)
            ckpt_path = run_dir / "checkpoint_final.pt"
            manifest.add("pretrain", cfg.encoder.hash(), inputs=[corpus_path], outputs=[ckpt_path])
            losses_by_run[f"{name}, seed {seed}"] = epoch_means(ckpt.log)
            if tamper_hook is not None:
                tamper_hook(ckpt_path)
            manifest.verify()
            labelled.append((name, load_checkpoint(ckpt_path)))
        for label, source in labelled:
            before = state_hash(probe._encoder_from(source))
            for rep in experiments.probe_encoder(source, data, label=label):
                rep_path = seed_dir / "reports" / f"{label.replace(' ', '_')}_{rep.task}.json"
                rep_path.parent.mkdir(parents=True, exist_ok=True)
                rep.save(rep_path)
                manifest.add("probe", rep.encoder_hash, outputs=[rep_path])
                reports.append(rep)
            if state_hash(probe._encoder_from(source)) != before:
                raise IntegrityError(f"encoder {label} changed during probing")
    checks = acceptance_checks(reports, losses_by_run)
    manifest.save(out_dir / "run_manifest.json")
    table = cmd_table(reports)
    (out_dir / "table.txt").write_text(table.to_text() + "\n")
    (out_dir / "table.json").write_text(json.dumps(table.to_dict(), indent=2))
    (out_dir / "checks.json").write_text(json.dumps(checks, indent=2))
    return checks, reports


def run_repro(args) -> int:
    t0 = time.time()
    checks, _ = repro(args.suite, resolve(args.out), args.seeds, args.epochs)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"suite {args.suite} finished in {time.time() - t0:.0f} s")
    return EXIT_OK if all(checks.values()) else EXIT_ACCEPTANCE


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multisample", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--kind", choices=sorted(GENERATORS) + ["mixed"])
    g.add_argument("--n-clips", type=int)
    g.add_argument("--duration", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=run_gen)

    t = sub.add_parser("pretrain", help="self-supervised pretraining")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--similarity", choices=["bilinear", "cosine"])
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--resume")
    t.add_argument("--allow-config-mismatch", action="store_true")
    t.add_argument("--out", default="pretrain")
    t.set_defaults(func=run_pretrain)

    e = sub.add_parser("embed", help="embed a corpus with a frozen encoder")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=["pooled", "framewise"], default="pooled")
    e.add_argument("--out", required=True)
    e.set_defaults(func=run_embed)

    q = sub.add_parser("probe", help="train and score a linear probe")
    q.add_argument("--archive", required=True)
    q.add_argument("--test-archive")
    q.add_argument("--test-fraction", type=float, default=0.3)
    q.add_argument("--task", choices=["clip", "sed", "pitch"], required=True)
    q.add_argument("--n-classes", type=int)
    q.add_argument("--config")
    q.add_argument("--epochs", type=int)
    q.add_argument("--lr", type=float)
    q.add_argument("--seed", type=int)
    q.add_argument("--label", default="")
    q.add_argument("--out", required=True)
    q.set_defaults(func=run_probe)

    for name in ("report", "table"):
        r = sub.add_parser(name, help="tabulate probe reports")
        r.add_argument("--glob", required=True)
        r.add_argument("--format", choices=["text", "json"], default="text")
        r.add_argument("--paper-values", action="store_true")
        r.set_defaults(func=run_table)

    s = sub.add_parser("repro", help="run a desk-scale suite end to end")
    s.add_argument("--suite", choices=sorted(SUITES), default="quick")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", default="repro")
    s.set_defaults(func=run_repro)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AudioError, SamplingError, SynthError, probe.ProbeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
