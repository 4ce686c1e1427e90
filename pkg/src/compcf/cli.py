"""Staged experiment pipeline with persisted, reproducible runs.

Verbs: train, calibrate, synthesize, generate, evaluate, explain, report.
Each reads an optional YAML config, works under a run directory, appends
every artifact it emits to an append-only manifest, and exits with a
distinct code per failure family: 0 success, 2 config, 3 data, 4 numerical,
5 endpoint.

Commands are idempotent: when a command's primary artifact already exists
in the run directory it is left untouched, and re-running a stage from the
same config and seed reproduces the artifact bit-exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import (CompcfError, ConfigError, DataError, EndpointError,
                     NumericalError)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_ENDPOINT = 5


@dataclasses.dataclass
class RunConfig:
    """Resolved configuration for one experiment run.

    The defaults are the reference configuration validated end to end on
    the bundled shapes dataset; a YAML config overrides any subset.
    """

    dataset_name: str = "shapes"
    dataset_root: str | None = None   # directory tree of <class>/<id>.png
    per_class: int = 200
    heldout_class: str | None = None  # None -> dataset module default
    seed: int = 0
    threshold: float = 0.7
    per_cause_quota: int = 100
    classifier: dict = dataclasses.field(default_factory=dict)
    autoencoder: dict = dataclasses.field(
        default_factory=lambda: {"conv_channels": (32, 64, 128), "epochs": 120,
                                 "input_noise": 0.2, "latent_dim": 16})
    generator: dict = dataclasses.field(default_factory=dict)
    methods: tuple = ("IGD", "FGD", "Reco", "LGD", "LNN")
    explain_methods: tuple = ("None", "Reco", "LGD", "LNN")
    dataset_key: str = "shapes"       # prompt context selector
    endpoint: dict = dataclasses.field(
        default_factory=lambda: {"kind": "oracle"})
    out: str = "runs/default"

    def resolved(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path: str | None, seed: int | None, out: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        import yaml

        try:
            raw = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in raw.items():
            if isinstance(getattr(cfg, key), tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(cfg, key, value)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    if not 0.0 < cfg.threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {cfg.threshold}")
    if cfg.per_cause_quota <= 0:
        raise ConfigError("per_cause_quota must be positive")
    return cfg


def _append_manifest(out: Path, command: str, cfg: RunConfig, artifacts: dict) -> None:
    record = {
        "run_id": cfg.config_hash(),
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": cfg.resolved(),
        "artifacts": artifacts,
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=list) + "\n")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _training_config(overrides: dict, seed: int):
    from .models import TrainingConfig

    known = {f.name for f in dataclasses.fields(TrainingConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    kwargs = dict(overrides)
    if isinstance(kwargs.get("conv_channels"), list):
        kwargs["conv_channels"] = tuple(kwargs["conv_channels"])
    kwargs.setdefault("seed", seed)
    return TrainingConfig(**kwargs)


def _load_dataset(cfg: RunConfig):
    from .datasets import load_dataset, make_shapes_dataset

    if cfg.dataset_root is not None:
        return load_dataset(Path(cfg.dataset_root))
    if cfg.dataset_name != "shapes":
        raise ConfigError(f"unknown dataset name {cfg.dataset_name!r} "
                          "(procedural option: 'shapes'; or set dataset_root)")
    return make_shapes_dataset(per_class=cfg.per_class, seed=cfg.seed)


def _load_splits(cfg: RunConfig):
    from .datasets import DEFAULT_HELDOUT_CLASS, split_dataset

    ds = _load_dataset(cfg)
    heldout = cfg.heldout_class or DEFAULT_HELDOUT_CLASS
    return split_dataset(ds, heldout_class=heldout, seed=cfg.seed)


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path}; run `compcf {produced_by}` first")
    return path


def _load_estimator(cfg: RunConfig, out: Path, splits):
    from .competency import CompetencyEstimator, load_calibration
    from .models import load_autoencoder, load_classifier

    clf = load_classifier(_require(out / "checkpoints" / "classifier.pt", "train"))
    ae = load_autoencoder(_require(out / "checkpoints" / "autoencoder.pt", "train"))
    est = CompetencyEstimator(clf, ae, threshold=cfg.threshold)
    _require(out / "calibration" / "calibration.json", "calibrate")
    load_calibration(est, out / "calibration", image_source=splits.calib)
    return est


def _source_pool(est, splits):
    """High-competency source images for corpus synthesis.

    Drawn from the train and test splits so the pool is large enough to
    fill the per-cause quotas; every source must already score above the
    estimator's threshold.
    """
    from .competency import competency
    from .datasets import LabeledImageSet

    images = np.concatenate([splits.test.images, splits.train.images])
    labels = list(splits.test.labels) + list(splits.train.labels)
    ids = list(splits.test.ids) + list(splits.train.ids)
    mask = competency(est, images) >= est.threshold
    return LabeledImageSet(
        images=images[mask],
        labels=[l for l, m in zip(labels, mask) if m],
        ids=[i for i, m in zip(ids, mask) if m])


def cmd_train(cfg: RunConfig) -> int:
    from .models import (checkpoint_hash, save_autoencoder, save_classifier,
                         train_autoencoder, train_classifier)

    out = Path(cfg.out)
    ckpt = out / "checkpoints"
    clf_path, ae_path = ckpt / "classifier.pt", ckpt / "autoencoder.pt"
    if clf_path.exists() and ae_path.exists():
        print(f"checkpoints already present under {ckpt}; skipping")
        return 0
    splits = _load_splits(cfg)
    clf = train_classifier(splits.train, _training_config(cfg.classifier, cfg.seed),
                           val_set=splits.val)
    ae = train_autoencoder(splits.train, _training_config(cfg.autoencoder, cfg.seed),
                           val_set=splits.val)
    ckpt.mkdir(parents=True, exist_ok=True)
    save_classifier(clf, clf_path)
    save_autoencoder(ae, ae_path)
    _append_manifest(out, "train", cfg, {
        "classifier": str(clf_path), "classifier_sha256": checkpoint_hash(clf_path),
        "classifier_val_accuracy": clf.val_accuracy,
        "autoencoder": str(ae_path), "autoencoder_sha256": checkpoint_hash(ae_path),
        "autoencoder_val_mse": ae.val_mse,
    })
    print(f"trained classifier (val acc {clf.val_accuracy:.3f}) and "
          f"autoencoder (val mse {ae.val_mse:.5f}) -> {ckpt}")
    return 0


def cmd_calibrate(cfg: RunConfig) -> int:
    from .competency import CompetencyEstimator, calibrate, save_calibration
    from .models import load_autoencoder, load_classifier

    out = Path(cfg.out)
    cal_dir = out / "calibration"
    if (cal_dir / "calibration.json").exists():
        print(f"calibration already present under {cal_dir}; skipping")
        return 0
    splits = _load_splits(cfg)
    clf = load_classifier(_require(out / "checkpoints" / "classifier.pt", "train"))
    ae = load_autoencoder(_require(out / "checkpoints" / "autoencoder.pt", "train"))
    est = CompetencyEstimator(clf, ae, threshold=cfg.threshold)
    calibrate(est, splits.calib)
    save_calibration(est, cal_dir)
    dev = est.calibration.fit_info["decile_check"]["mean_abs_deviation"]
    _append_manifest(out, "calibrate", cfg, {
        "calibration": str(cal_dir / "calibration.json"),
        "calibration_set": str(cal_dir / "calibration_set.npz"),
        "decile_mean_abs_deviation": dev,
    })
    print(f"calibrated (decile deviation {dev:.4f}) -> {cal_dir}")
    return 0


def cmd_synthesize(cfg: RunConfig) -> int:
    from .perturb import synthesize_corpus, write_corpus

    out = Path(cfg.out)
    corpus_dir = out / "corpus"
    if (corpus_dir / "manifest.json").exists():
        print(f"corpus already present under {corpus_dir}; skipping")
        return 0
    splits = _load_splits(cfg)
    est = _load_estimator(cfg, out, splits)
    pool = _source_pool(est, splits)
    corpus = synthesize_corpus(est, pool, splits.heldout,
                               per_cause_quota=cfg.per_cause_quota, seed=cfg.seed)
    manifest_path = write_corpus(corpus, corpus_dir)
    _append_manifest(out, "synthesize", cfg, {
        "corpus_dir": str(corpus_dir),
        "corpus_manifest": str(manifest_path),
        "corpus_manifest_sha256": _file_hash(manifest_path),
        "n_images": len(corpus.entries),
        "per_cause": corpus.per_cause_counts(),
    })
    print(f"synthesized {len(corpus.entries)} low-competency images -> {corpus_dir}")
    return 0


def cmd_generate(cfg: RunConfig, methods: list | None = None) -> int:
    from . import counterfactuals as cf
    from .perturb import load_corpus

    out = Path(cfg.out)
    methods = list(methods or cfg.methods)
    for m in methods:
        if m not in cf.METHODS:
            raise ConfigError(f"unknown method {m!r}; expected subset of {cf.METHODS}")
    splits = _load_splits(cfg)
    est = _load_estimator(cfg, out, splits)
    corpus = load_corpus(_require(out / "corpus", "synthesize"))
    gen_cfg = cf.GeneratorConfig(**cfg.generator) if cfg.generator else cf.GeneratorConfig()
    cf_dir = out / "counterfactuals"
    written = skipped = 0
    for method in methods:
        mdir = cf_dir / method
        mdir.mkdir(parents=True, exist_ok=True)
        for entry in corpus.entries:
            dest = mdir / f"{entry.cause}_{entry.source_id}.npz"
            if dest.exists():
                skipped += 1
                continue
            result = cf.generate(method, entry.image, est, gen_cfg)
            np.savez_compressed(
                dest, counterfactual=result.counterfactual.astype(np.float32),
                record=json.dumps(result.to_record(), sort_keys=True, default=list))
            written += 1
    _append_manifest(out, "generate", cfg, {
        "counterfactual_dir": str(cf_dir), "methods": methods,
        "written": written, "skipped_existing": skipped,
    })
    print(f"generated {written} counterfactuals ({skipped} already present) -> {cf_dir}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    from . import counterfactuals as cf
    from .metrics import evaluate_methods, write_report
    from .perturb import load_corpus

    out = Path(cfg.out)
    report_dir = out / "reports"
    if (report_dir / "evaluation.csv").exists():
        print(f"evaluation report already present under {report_dir}; skipping")
        return 0
    splits = _load_splits(cfg)
    est = _load_estimator(cfg, out, splits)
    corpus = load_corpus(_require(out / "corpus", "synthesize"))
    gen_cfg = cf.GeneratorConfig(**cfg.generator) if cfg.generator else cf.GeneratorConfig()
    report = evaluate_methods(corpus, ["Orig"] + list(cfg.methods), est, gen_cfg,
                              corpus_id=cfg.config_hash())
    csv_path, json_path = write_report(report, report_dir, stem="evaluation")
    _append_manifest(out, "evaluate", cfg, {
        "report_csv": str(csv_path), "report_csv_sha256": _file_hash(csv_path),
        "report_json": str(json_path),
    })
    print(report.to_csv())
    print(f"evaluation report -> {csv_path}")
    return 0


def _build_client(cfg: RunConfig):
    from . import explain as ex

    opts = dict(cfg.endpoint)
    kind = opts.pop("kind", "oracle")
    if kind == "oracle":
        return ex.OracleStub()
    if kind == "static":
        return ex.StaticStub(opts.get("text", "The image looks fine."))
    if kind == "http":
        if "base_url" not in opts or "model" not in opts:
            raise ConfigError("http endpoint needs base_url and model")
        api_key = os.environ.get(opts.get("api_key_env", "COMPCF_API_KEY"), "")
        return ex.HTTPVisionClient(opts["base_url"], opts["model"], api_key=api_key,
                                   timeout=float(opts.get("timeout", 60.0)))
    raise ConfigError(f"unknown endpoint kind {kind!r}; expected oracle|static|http")


def cmd_explain(cfg: RunConfig, methods: list | None = None) -> int:
    from . import counterfactuals as cf
    from . import explain as ex
    from .perturb import load_corpus

    out = Path(cfg.out)
    exp_dir = out / "explanations"
    if (exp_dir / "explanation_grid.csv").exists():
        print(f"explanation grid already present under {exp_dir}; skipping")
        return 0
    splits = _load_splits(cfg)
    est = _load_estimator(cfg, out, splits)
    corpus = load_corpus(_require(out / "corpus", "synthesize"))
    client = _build_client(cfg)
    gen_cfg = cf.GeneratorConfig(**cfg.generator) if cfg.generator else cf.GeneratorConfig()
    grid = ex.run_explanation_experiment(
        corpus, list(methods or cfg.explain_methods), est, client,
        dataset_key=cfg.dataset_key, generator_cfg=gen_cfg)
    failures = [r for r in grid.records if r.error is not None]
    completed = sum(c["completed"] for c in grid.coverage.values())
    if failures and completed == 0:
        raise EndpointError(
            f"all {len(failures)} explanation queries failed; "
            f"last error: {failures[-1].error}")
    ex.write_explanation_grid(grid, exp_dir)
    _append_manifest(out, "explain", cfg, {
        "grid_csv": str(exp_dir / "explanation_grid.csv"),
        "grid_json": str(exp_dir / "explanation_grid.json"),
        "records": str(exp_dir / "explanation_records.jsonl"),
        "endpoint_id": grid.endpoint_id,
        "coverage": grid.coverage,
    })
    print(grid.to_csv())
    print(f"explanation grid -> {exp_dir}")
    return 0


def cmd_report(cfg: RunConfig, methods: list | None = None) -> int:
    from .explain import compose_side_by_side
    from .perturb import CAUSES, load_corpus

    out = Path(cfg.out)
    fig_dir = out / "figures"
    fig_path = fig_dir / "counterfactual_grid.png"
    if fig_path.exists():
        print(f"figure already present at {fig_path}; skipping")
        return 0
    corpus = load_corpus(_require(out / "corpus", "synthesize"))
    methods = list(methods or cfg.methods)
    cf_dir = out / "counterfactuals"

    first_per_cause = {}
    for entry in corpus.entries:
        first_per_cause.setdefault(entry.cause, entry)
    missing = []
    panels = {}
    for cause in CAUSES:
        entry = first_per_cause.get(cause)
        if entry is None:
            continue
        for method in methods:
            npz_path = cf_dir / method / f"{entry.cause}_{entry.source_id}.npz"
            if not npz_path.exists():
                missing.append(f"{method}/{entry.cause}_{entry.source_id}")
                continue
            with np.load(npz_path) as data:
                panels[(cause, method)] = compose_side_by_side(
                    entry.image, data["counterfactual"])
    if missing:
        raise DataError("missing counterfactual results for cells: "
                        + ", ".join(missing) + "; run `compcf generate` first")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    causes = [c for c in CAUSES if c in first_per_cause]
    fig, axes = plt.subplots(len(causes), len(methods),
                             figsize=(2.4 * len(methods), 1.4 * len(causes)),
                             squeeze=False)
    for i, cause in enumerate(causes):
        for j, method in enumerate(methods):
            ax = axes[i][j]
            ax.imshow(np.clip(panels[(cause, method)], 0.0, 1.0))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(method, fontsize=9)
            if j == 0:
                ax.set_ylabel(cause, fontsize=8)
    fig.tight_layout()
    fig_dir.mkdir(parents=True, exist_ok=True)
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    _append_manifest(out, "report", cfg, {"figure": str(fig_path),
                                          "figure_sha256": _file_hash(fig_path)})
    print(f"figure grid ({len(causes)} causes x {len(methods)} methods) -> {fig_path}")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compcf",
        description="competency-aware counterfactual pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_methods in (
            ("train", False), ("calibrate", False), ("synthesize", False),
            ("generate", True), ("evaluate", False), ("explain", True),
            ("report", True)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config path")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="run directory override")
        if needs_methods:
            p.add_argument("--methods", default=None,
                           help="comma-separated method subset")
    return parser


def main(argv: list | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        methods = None
        if getattr(args, "methods", None):
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        handler = {
            "train": lambda: cmd_train(cfg),
            "calibrate": lambda: cmd_calibrate(cfg),
            "synthesize": lambda: cmd_synthesize(cfg),
            "generate": lambda: cmd_generate(cfg, methods),
            "evaluate": lambda: cmd_evaluate(cfg),
            "explain": lambda: cmd_explain(cfg, methods),
            "report": lambda: cmd_report(cfg, methods),
        }[args.command]
        return handler()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CompcfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
