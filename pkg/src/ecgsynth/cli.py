"""Command-line surface binding ingestion, generators, the classifier, the
evaluation matrix, the transfer sweep and similarity metrics into
reproducible runs.

Progress goes to stderr; machine-readable results go to files under the
configured output directory. Every command echoes its resolved config into
the run folder and writes a JSON manifest sufficient to re-run it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import records as rs
from .classifier import (
    CSV_HEADER,
    ClassifierConfig,
    build_classifier,
    evaluate,
    metrics_csv_row,
    train_classifier,
)
from .config import RunConfig, load_config
from .diffusion import DdpmConfig, DdpmGenerator
from .errors import (
    ConfigError,
    EcgSynthError,
    ParseError,
    SampleSizeError,
    SchemaError,
    SourceError,
    StratifyError,
)
from .flow import FlowConfig, FlowFamily
from .harness import (
    RealSplits,
    TransferPlan,
    file_sha256,
    manifest_json,
    run_matrix,
    run_transfer,
)
from .nn import save_model
from .records import Dataset, RhythmClass, SplitSpec
from .simmetrics import export_embeddings, mmd_rbf, two_sample_score
from .vqvae import VqvaeConfig, VqvaeGenerator

VALIDATION_ERRORS = (ConfigError, ParseError, SourceError, SchemaError,
                     StratifyError, SampleSizeError, FileNotFoundError)

GENERATORS = ("ddpm", "vqvae", "flow")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _out_dir(cfg: RunConfig) -> Path:
    root = os.environ.get("ECGSYNTH_OUT")
    out = Path(root) if root else Path(cfg.get("output", "dir"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.cfg").write_text(cfg.text)
    return out


def _write_manifest(out: Path, name: str, cfg: RunConfig, seeds: dict,
                    checkpoints: dict | None = None,
                    wall_times: dict | None = None) -> None:
    manifest_json(out / f"manifest-{name}.json", cfg.text, seeds,
                  checkpoints or {}, wall_times or {})


def _real_dir(out: Path) -> Path:
    return out / "data" / "real"


def _synth_dir(out: Path, generator: str) -> Path:
    return out / "data" / f"synth-{generator}"


def _load_real(out: Path) -> Dataset:
    real_dir = _real_dir(out)
    if not (real_dir / "labels.csv").exists():
        raise SourceError(
            f"no real dataset at {real_dir}; run 'fixture' or 'ingest' first")
    return rs.load_dataset(real_dir)


def _splits(cfg: RunConfig, ds: Dataset) -> RealSplits:
    spec = SplitSpec(cfg.get("split", "train"), cfg.get("split", "val"),
                     cfg.get("split", "test"), seed=cfg.get("split", "seed"))
    train, val, test = rs.stratified_split(ds, spec)
    return RealSplits(train=train, val=val, test=test)


def _classifier_config(cfg: RunConfig) -> ClassifierConfig:
    preset = cfg.get("classifier", "preset")
    presets = {"desk": ClassifierConfig.desk, "ptbxl": ClassifierConfig.ptbxl,
               "chapman": ClassifierConfig.chapman, "custom": ClassifierConfig}
    if preset not in presets:
        raise ConfigError(f"classifier.preset must be one of {sorted(presets)}")
    built = presets[preset]()
    for key in ("n_conv_blocks", "n_kernels", "kernel_len", "n_neurons",
                "n_dense_layers", "lr", "dropout", "patience", "min_delta",
                "batch_size", "max_epochs"):
        val = cfg.get("classifier", key)
        if val is not None:
            setattr(built, key, val)
    return built


def _ddpm_config(cfg: RunConfig) -> DdpmConfig:
    s = cfg.section("ddpm")
    return DdpmConfig(backbone=s["backbone"], T=s["t_steps"], channels=s["channels"],
                      n_layers=s["n_layers"], n_levels=s["n_levels"],
                      n_blocks=s["n_blocks"], steps=s["steps"],
                      batch_size=s["batch_size"], lr=s["lr"])


def _vqvae_config(cfg: RunConfig) -> VqvaeConfig:
    s = cfg.section("vqvae")
    return VqvaeConfig(n_fft=s["n_fft"], hop=s["hop"], K=s["codebook_size"],
                       d=s["code_dim"], stage1_steps=s["stage1_steps"],
                       stage2_steps=s["stage2_steps"], stage1_lr=s["stage1_lr"],
                       stage2_lr=s["stage2_lr"], stage1_batch=s["batch_size"],
                       stage2_batch=s["batch_size"], T_dec=s["t_dec"])


def _flow_config(cfg: RunConfig) -> FlowConfig:
    s = cfg.section("flow")
    return FlowConfig(n_couplings=s["n_couplings"], hidden=s["hidden"],
                      steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"])


def _checkpoint_path(out: Path, generator: str) -> Path:
    return out / "models" / f"{generator}.ckpt"


def _load_generator(out: Path, generator: str, cfg: RunConfig, leads: int,
                    length: int):
    path = _checkpoint_path(out, generator)
    if not path.exists():
        raise SourceError(f"no trained {generator} checkpoint at {path}")
    if generator == "ddpm":
        return DdpmGenerator.load(path, _ddpm_config(cfg), leads, length)
    if generator == "vqvae":
        return VqvaeGenerator.load(path, _vqvae_config(cfg), leads, length)
    if generator == "flow":
        return FlowFamily.load(path, _flow_config(cfg), leads, length)
    raise ConfigError(f"unknown generator {generator!r}")


# -- commands -------------------------------------------------------------


def cmd_fixture(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    s = cfg.section("dataset")
    classes = [RhythmClass.from_code(c) for c in s["classes"]]
    _log(f"generating fixture dataset: {len(classes)} classes x {s['per_class']}")
    ds = rs.generate_fixture_dataset(classes, s["per_class"], s["fs"],
                                     s["seconds"], s["leads"], seed=s["seed"])
    rs.save_dataset(ds, _real_dir(out), gain=s["gain"])
    _write_manifest(out, "fixture", cfg, seeds={"dataset": s["seed"]})
    _log(f"wrote {len(ds)} records to {_real_dir(out)}")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    s = cfg.section("dataset")
    dirs = s["wfdb_dir"]
    if not dirs:
        raise ConfigError("ingest requires dataset.wfdb_dir")
    manifests = s["manifest"] or [str(Path(d) / "labels.csv") for d in dirs]
    if len(manifests) != len(dirs):
        raise ConfigError("dataset.manifest must match dataset.wfdb_dir entries")
    merged: Dataset | None = None
    for d, m in zip(dirs, manifests):
        _log(f"ingesting {d}")
        ds = rs.load_dataset(d, manifest_path=m)
        merged = ds if merged is None else rs.harmonize_merge(merged, ds,
                                                              s["target_fs"])
    if merged is None or len(merged) == 0:
        raise SourceError("ingest produced no records")
    if merged.fs != s["target_fs"]:
        merged = rs.resample_dataset(merged, s["target_fs"])
    rs.save_dataset(merged, _real_dir(out), gain=s["gain"])
    _write_manifest(out, "ingest", cfg, seeds={"dataset": s["seed"]})
    _log(f"wrote {len(merged)} records at {merged.fs:g} Hz to {_real_dir(out)}")
    return 0


def cmd_train_gen(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    real = _load_real(out)
    splits = _splits(cfg, real)
    train = splits.train
    name = args.model
    t0 = time.perf_counter()
    seed = cfg.get(name, "seed")
    _log(f"training {name} on {len(train)} records "
         f"({train.leads} leads x {train.samples} samples)")
    if name == "ddpm":
        gen = DdpmGenerator(_ddpm_config(cfg), train.leads, train.samples, seed=seed)
        history = gen.train(train, seed=seed, log_every=args.log_every)
    elif name == "vqvae":
        gen, history = VqvaeGenerator.train(train, _vqvae_config(cfg), seed=seed,
                                            log_every=args.log_every)
    elif name == "flow":
        gen = FlowFamily(_flow_config(cfg), train.leads, train.samples)
        history = gen.train(train, seed=seed, log_every=args.log_every)
    else:
        raise ConfigError(f"unknown generator {name!r}")
    path = _checkpoint_path(out, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    gen.save(path)
    wall = time.perf_counter() - t0

    def strip(h):
        if isinstance(h, dict):
            return {k: strip(v) for k, v in h.items() if k not in ("loss",)}
        return h

    (out / "models" / f"{name}_history.json").write_text(
        json.dumps(strip(history), default=float, indent=2) + "\n")
    _write_manifest(out, f"train-gen-{name}", cfg, seeds={name: seed},
                    checkpoints={name: file_sha256(path)},
                    wall_times={"train_s": wall})
    _log(f"saved {path} ({wall:.1f}s)")
    return 0


def _per_class_counts(cfg: RunConfig, train: Dataset) -> dict[RhythmClass, int]:
    spec = cfg.get("sample", "per_class")
    if spec == "match":
        return dict(train.class_counts)
    try:
        n = int(spec)
    except ValueError:
        raise ConfigError(f"sample.per_class must be 'match' or an integer, got {spec!r}")
    return {cls: n for cls in train.class_counts}


def cmd_sample(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    real = _load_real(out)
    splits = _splits(cfg, real)
    name = args.model
    seed = cfg.get("sample", "seed")
    gen = _load_generator(out, name, cfg, real.leads, real.samples)
    counts = _per_class_counts(cfg, splits.train)
    _log(f"sampling {name}: {sum(counts.values())} records")
    t0 = time.perf_counter()
    synth = gen.synthesize_dataset(counts, fs=real.fs, seed=seed, tag=name)
    synth_dir = _synth_dir(out, name)
    rs.save_dataset(synth, synth_dir, gain=cfg.get("dataset", "gain"))
    ckpt_hash = file_sha256(_checkpoint_path(out, name))
    with open(synth_dir / "generation_manifest.csv", "w", newline="") as fh:
        fh.write("generator,label,seed,checkpoint_sha256,record_id\n")
        for rec in synth.records:
            fh.write(f"{name},{rec.label.code},{seed},{ckpt_hash},{rec.record_id}\n")
    _write_manifest(out, f"sample-{name}", cfg, seeds={"sample": seed},
                    checkpoints={name: ckpt_hash},
                    wall_times={"sample_s": time.perf_counter() - t0})
    _log(f"wrote {len(synth)} synthetic records to {synth_dir}")
    return 0


def cmd_train_clf(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    real = _load_real(out)
    splits = _splits(cfg, real)
    ccfg = _classifier_config(cfg)
    seed = cfg.get("classifier", "seed")
    _log(f"training classifier on {len(splits.train)} records")
    t0 = time.perf_counter()
    model = build_classifier(ccfg, splits.train.leads, splits.train.samples,
                             seed=seed)
    model, history = train_classifier(model, splits.train, splits.val, ccfg,
                                      seed=seed)
    report = evaluate(model, splits.test)
    wall = time.perf_counter() - t0
    path = out / "models" / "classifier.ckpt"
    save_model(path, model, arch=model.arch(), seed=seed)
    (out / "models" / "classifier_history.json").write_text(
        json.dumps(history, default=float, indent=2) + "\n")
    with open(out / "classifier_metrics.csv", "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        fh.write(",".join(metrics_csv_row(report, "TrRTeR", "-", seed)) + "\n")
    _write_manifest(out, "train-clf", cfg, seeds={"classifier": seed},
                    checkpoints={"classifier": file_sha256(path)},
                    wall_times={"train_s": wall})
    _log(f"test accuracy {report.accuracy:.4f}, roc-auc {report.roc_auc_macro:.4f} "
         f"({wall:.1f}s)")
    return 0


def cmd_eval_matrix(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    real = _load_real(out)
    splits = _splits(cfg, real)
    ccfg = _classifier_config(cfg)
    names = cfg.get("matrix", "generators")
    resample = cfg.get("matrix", "resample")
    seed = cfg.get("matrix", "seed")
    sources: dict = {}
    checkpoints: dict = {}
    for name in names:
        if resample:
            gen = _load_generator(out, name, cfg, real.leads, real.samples)
            counts = _per_class_counts(cfg, splits.train)

            def sampler(s, gen=gen, counts=counts, name=name):
                return gen.synthesize_dataset(counts, fs=real.fs, seed=s, tag=name)

            sources[name] = sampler
            checkpoints[name] = file_sha256(_checkpoint_path(out, name))
        else:
            synth_dir = _synth_dir(out, name)
            if not (synth_dir / "labels.csv").exists():
                raise SourceError(
                    f"no synthetic dataset for {name!r} at {synth_dir}; "
                    f"run 'train-gen' and 'sample' first")
            sources[name] = rs.load_dataset(synth_dir)
    total = (len(names) + 1) * 5 * cfg.get("matrix", "n_repeats")
    done = [0]
    t0 = time.perf_counter()

    def progress(gen, setting, repeat):
        done[0] += 1
        _log(f"  [{done[0]}/{total}] {gen}/{setting}/r{repeat}")

    report = run_matrix(sources, splits, ccfg,
                        n_repeats=cfg.get("matrix", "n_repeats"),
                        base_seed=seed, progress=progress)
    report.write_csv(out / "matrix.csv")
    report.write_aggregates_csv(out / "matrix_aggregates.csv")
    _write_manifest(out, "eval-matrix", cfg, seeds={"matrix": seed},
                    checkpoints=checkpoints,
                    wall_times={"matrix_s": time.perf_counter() - t0})
    if report.errors:
        (out / "matrix_errors.txt").write_text("\n".join(report.errors) + "\n")
        _log(f"matrix PARTIAL: {len(report.errors)} failed cells "
             f"(see matrix_errors.txt)")
    _log(f"wrote {out / 'matrix.csv'}")
    return 0


def cmd_transfer(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    real = _load_real(out)
    splits = _splits(cfg, real)
    ccfg = _classifier_config(cfg)
    name = cfg.get("transfer", "generator")
    seed = cfg.get("transfer", "seed")
    synth_dir = _synth_dir(out, name)
    if not (synth_dir / "labels.csv").exists():
        raise SourceError(f"transfer needs synthetic data for {name!r} at {synth_dir}")
    synth = rs.load_dataset(synth_dir)
    _log(f"pretraining on {len(synth)} synthetic records from {name}")
    s_train, s_val, _ = rs.stratified_split(synth, SplitSpec(0.8, 0.1, 0.1, seed=seed))
    pretrained = build_classifier(ccfg, real.leads, real.samples, seed=seed)
    pretrained, _ = train_classifier(pretrained, s_train, s_val, ccfg, seed=seed)
    plan = TransferPlan(fractions=tuple(cfg.get("transfer", "fractions")),
                        n_repeats=cfg.get("transfer", "n_repeats"),
                        lr_factor=cfg.get("transfer", "lr_factor"))
    t0 = time.perf_counter()
    report = run_transfer(pretrained, splits, plan, ccfg, base_seed=seed)
    report.write_csv(out / "transfer.csv")
    _write_manifest(out, "transfer", cfg, seeds={"transfer": seed},
                    wall_times={"transfer_s": time.perf_counter() - t0})
    _log(f"wrote {out / 'transfer.csv'}")
    return 0


def cmd_metrics(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    real = _load_real(out)
    seed = cfg.get("metrics", "seed")
    rows = []
    for name in GENERATORS:
        synth_dir = _synth_dir(out, name)
        if not (synth_dir / "labels.csv").exists():
            continue
        synth = rs.load_dataset(synth_dir)
        _log(f"metrics for {name}: {len(synth)} synthetic vs {len(real)} real")
        mmd = mmd_rbf(real, synth)
        ts = two_sample_score(real, synth, seed=seed)
        export_embeddings(real, synth, out / f"embeddings_{name}.csv",
                          n_components=cfg.get("metrics", "pca_components"))
        rows.append((name, mmd.value, mmd.bandwidth, ts.accuracy))
    if not rows:
        raise SourceError("no synthetic datasets found; run 'sample' first")
    with open(out / "metrics_summary.csv", "w", newline="") as fh:
        fh.write("generator,mmd2,bandwidth,two_sample_accuracy\n")
        for name, value, bw, acc in rows:
            fh.write(f"{name},{value:.8g},{bw:.8g},{acc:.4f}\n")
    _write_manifest(out, "metrics", cfg, seeds={"metrics": seed})
    _log(f"wrote {out / 'metrics_summary.csv'}")
    return 0


def _render_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*[str(c) for c in row]) for row in rows]
    return "\n".join(lines)


def cmd_report(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    chunks = []
    agg_path = out / "matrix_aggregates.csv"
    if agg_path.exists():
        lines = agg_path.read_text().strip().splitlines()
        rows = [line.split(",") for line in lines[1:]]
        table_rows = [[r[0], r[1]] + [f"{float(v):.4f}" for v in r[3:8]]
                      for r in rows]
        chunks.append("Evaluation matrix (mean over repeats)\n" + _render_table(
            ["Generative model", "Setting", "Accuracy", "Precision", "Recall",
             "f1-score", "ROC AUC"], table_rows))
    transfer_path = out / "transfer.csv"
    if transfer_path.exists():
        lines = transfer_path.read_text().strip().splitlines()
        rows = [line.split(",") for line in lines[1:]]
        table_rows = [[r[0], r[2]] + [f"{float(v):.4f}" for v in r[3:8]] +
                      [f"{float(r[8]):.2f}"] for r in rows]
        chunks.append("Transfer sweep\n" + _render_table(
            ["Data %", "Mode", "Accuracy", "Precision", "Recall", "f1-score",
             "ROC AUC", "Time (s)"], table_rows))
    if not chunks:
        raise SourceError(f"nothing to report in {out}; run eval-matrix or transfer")
    text = "\n\n".join(chunks) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "fixture": (cmd_fixture, ["dataset", "output"],
                "Generate a deterministic fixture dataset"),
    "ingest": (cmd_ingest, ["dataset", "output"],
               "Ingest WFDB directories and harmonize them"),
    "train-gen": (cmd_train_gen, ["dataset", "split", "output"],
                  "Train one generative model on the real train split"),
    "sample": (cmd_sample, ["dataset", "split", "sample", "output"],
               "Synthesize a labeled dataset from a trained generator"),
    "train-clf": (cmd_train_clf, ["dataset", "split", "classifier", "output"],
                  "Train and evaluate the rhythm classifier on real data"),
    "eval-matrix": (cmd_eval_matrix,
                    ["dataset", "split", "classifier", "matrix", "output"],
                    "Run the five-setting train/test matrix"),
    "transfer": (cmd_transfer,
                 ["dataset", "split", "classifier", "transfer", "output"],
                 "Run the layer-freezing fine-tune sweep"),
    "metrics": (cmd_metrics, ["metrics", "output"],
                "Compute MMD, 2-sample score and embeddings per generator"),
    "report": (cmd_report, ["output"],
               "Render result CSVs as aligned text tables"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecgsynth",
        description="Conditional ECG generation and synthetic-data evaluation",
        epilog="The ECGSYNTH_OUT environment variable overrides output.dir.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (handler, sections, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                       help="override a config value (repeatable)")
        if name == "train-gen" or name == "sample":
            p.add_argument("--model", required=True, choices=GENERATORS)
        if name == "train-gen":
            p.add_argument("--log-every", type=int, default=0,
                           help="progress print interval in steps (0 = quiet)")
        p.set_defaults(handler=handler, sections=sections)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sections = list(args.sections)
    if getattr(args, "model", None):
        sections.append(args.model)
    try:
        cfg = load_config(args.config, overrides=args.set, used_sections=sections)
        return args.handler(cfg, args)
    except VALIDATION_ERRORS as exc:
        _log(f"error: {exc}")
        return 1
    except EcgSynthError as exc:
        _log(f"runtime error: {exc}")
        return 2
    except Exception as exc:  # unexpected: still a runtime failure
        _log(f"runtime error: {type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
