"""Command-line entry point: synth | audit | debias | sweep | cca | tsne | report.

Exit codes: 0 success, 1 validation/domain error, 2 I/O error, 3 numerical
failure. Every report fragment embeds the full effective config and seed;
re-running a subcommand from that config reproduces its metrics bit-exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .adversarial import (
    TrainConfig,
    load_checkpoint,
    history_to_csv,
    save_checkpoint,
    transform,
)
from .cca import align_domains, save_cca
from .errors import NumericalError, TrainingError
from .featurestore import (
    Cohort,
    SynthSpec,
    grouped_kfold,
    load_binary,
    load_csv,
    load_standardizer,
    save_binary,
    save_csv,
    save_standardizer,
    synth_generate,
)
from .probe import (
    MetricsReport,
    ProbeConfig,
    SweepPoint,
    SweepResult,
    evaluate_pair,
    lambda_sweep,
)
from .tsne import TsneConfig, embed_report

_BINARY_SNIFF = b"GDB1"


@dataclass
class RunConfig:
    """Flat key-value settings covering every subcommand; unknown keys rejected."""

    seed: int = 0
    k: int = 5
    standardize: bool = True
    workers: int = 0  # 0 = all available cores, capped by TOOL_THREADS
    # adversarial training
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 1.0  # serialized as "lambda"
    proj_hidden: int = 512
    proj_out: int = 256
    lambda_warmup: bool = False
    # probes
    probe_hidden: int = 256
    probe_epochs: int = 30
    probe_batch_size: int = 64
    probe_lr: float = 1e-3
    # sweep
    lambda_grid: list[float] = field(
        default_factory=lambda: [0.0, 0.1, 0.5, 1.0, 2.0, 5.0]
    )
    # cca
    cca_components: int = 8
    cca_ridge: float | None = None  # None = 1e-6 * trace/D per side
    reference_hospital: str | None = None  # None = first hospital
    # t-SNE
    perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_learning_rate: float = 200.0
    tsne_init: str = "pca"
    sample_cap: int = 2000
    # synthetic generator
    dim: int = 16
    hospitals: int = 4
    diseases: int = 2
    wsis_per_cell: int = 5
    patches_per_wsi: int = 100
    disease_signal: float = 1.0
    hospital_signal: float = 1.0
    confound: float = 0.0
    noise_sigma: float = 1.0

    _KEY_TO_ATTR = {"lambda": "lam"}
    _ATTR_TO_KEY = {"lam": "lambda"}

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name.startswith("_"):
                continue
            out[self._ATTR_TO_KEY.get(f.name, f.name)] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        unknown = []
        for key, value in obj.items():
            attr = cls._KEY_TO_ATTR.get(key, key)
            if attr not in known:
                unknown.append(key)
            else:
                kwargs[attr] = value
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**kwargs)

    @classmethod
    def from_sources(cls, config_path: str | None, overrides: dict) -> "RunConfig":
        base = {}
        if config_path is not None:
            with open(config_path, "r", encoding="utf-8") as fh:
                base = json.load(fh)
            if not isinstance(base, dict):
                raise ValueError(f"{config_path}: config must be a JSON object")
        cfg = cls.from_dict(base)
        known = {f.name for f in dataclasses.fields(cls)}
        for attr, value in overrides.items():
            if attr not in known:
                raise ValueError(f"unknown config override: {attr}")
            if value is not None:
                setattr(cfg, attr, value)
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lam=self.lam,
            proj_hidden=self.proj_hidden,
            proj_out=self.proj_out,
            lr=self.lr,
            seed=self.seed,
            lambda_warmup=self.lambda_warmup,
        )

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            hidden=self.probe_hidden,
            epochs=self.probe_epochs,
            batch_size=self.probe_batch_size,
            lr=self.probe_lr,
            seed=self.seed,
        )

    def tsne_config(self) -> TsneConfig:
        return TsneConfig(
            perplexity=self.perplexity,
            iterations=self.tsne_iterations,
            learning_rate=self.tsne_learning_rate,
            init=self.tsne_init,
            seed=self.seed,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            dim=self.dim,
            n_hospitals=self.hospitals,
            n_diseases=self.diseases,
            wsis_per_cell=self.wsis_per_cell,
            patches_per_wsi=self.patches_per_wsi,
            disease_signal=self.disease_signal,
            hospital_signal=self.hospital_signal,
            confound=self.confound,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
        )


_METRIC_NUMBER = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_METRIC_TRIPLE = {
    "type": "object",
    "required": ["accuracy", "auc", "f1"],
    "properties": {"accuracy": _METRIC_NUMBER, "auc": _METRIC_NUMBER, "f1": _METRIC_NUMBER},
}
_METRICS_REPORT_SCHEMA = {
    "type": "object",
    "required": ["task", "method", "folds", "mean", "std"],
    "properties": {
        "task": {"enum": ["hospital", "disease"]},
        "method": {"enum": ["raw-probe", "adversarial", "cca"]},
        "lambda": {"type": "number", "minimum": 0.0},
        "folds": {"type": "array", "minItems": 1, "items": _METRIC_TRIPLE},
        "mean": _METRIC_TRIPLE,
        "std": {"type": "object"},
    },
}
_PAIR_SCHEMA = {
    "type": "object",
    "required": ["disease", "hospital"],
    "properties": {"disease": _METRICS_REPORT_SCHEMA, "hospital": _METRICS_REPORT_SCHEMA},
}

#: Published JSON schema for report fragments and merged experiment reports.
REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["tool_version", "stage", "config", "seconds"],
    "properties": {
        "tool_version": {"type": "string"},
        "stage": {"enum": ["synth", "audit", "debias", "sweep", "cca", "tsne", "report"]},
        "config": {"type": "object"},
        "seconds": {"type": "object"},
        "raw": _PAIR_SCHEMA,
        "adversarial": _PAIR_SCHEMA,
        "cca": _PAIR_SCHEMA,
        "sweep": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lambda", "disease", "hospital"],
                "properties": {
                    "lambda": {"type": "number"},
                    "disease": _METRICS_REPORT_SCHEMA,
                    "hospital": _METRICS_REPORT_SCHEMA,
                },
            },
        },
    },
}


def load_cohort(path: str) -> Cohort:
    """Load a cohort from CSV or GDB1 binary, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _BINARY_SNIFF:
        return load_binary(path)
    return load_csv(path)


def effective_workers(requested: int, n_jobs: int) -> int:
    workers = requested if requested > 0 else (os.cpu_count() or 1)
    env_cap = os.environ.get("TOOL_THREADS")
    if env_cap:
        workers = min(workers, max(1, int(env_cap)))
    return max(1, min(workers, n_jobs))


def _fragment(cfg: RunConfig, stage: str, seconds: dict, payload: dict) -> dict:
    out = {
        "tool_version": __version__,
        "stage": stage,
        "config": cfg.to_dict(),
        "seconds": seconds,
    }
    out.update(payload)
    return out


def _write_json(obj: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


_NON_CONFIG_ARGS = frozenset(
    ("func", "command", "config", "out", "cohort", "fragments", "checkpoint", "scaler")
)


def _config_from_args(args) -> RunConfig:
    overrides = {
        key: getattr(args, key)
        for key in vars(args)
        if key not in _NON_CONFIG_ARGS and getattr(args, key) is not None
    }
    return RunConfig.from_sources(args.config, overrides)


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args)
    t0 = time.perf_counter()
    cohort = synth_generate(cfg.synth_spec())
    csv_path = os.path.join(out, "cohort.csv")
    bin_path = os.path.join(out, "cohort.gdb1")
    save_csv(cohort, csv_path)
    save_binary(cohort, bin_path)
    seconds = {"synth": time.perf_counter() - t0}
    _write_json(
        _fragment(
            cfg,
            "synth",
            seconds,
            {
                "records": cohort.n,
                "dim": cohort.dim,
                "hospitals": cohort.hospital_names,
                "diseases": cohort.disease_names,
                "files": [csv_path, bin_path],
            },
        ),
        os.path.join(out, "synth.json"),
    )
    print(f"wrote {cohort.n} records ({cohort.dim} dims) to {csv_path} and {bin_path}")
    return 0


def cmd_audit(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args)
    cohort = load_cohort(args.cohort)
    folds = grouped_kfold(cohort, cfg.k, seed=cfg.seed)
    t0 = time.perf_counter()
    disease, hospital = evaluate_pair(
        cohort, folds, cfg.probe_config(), mode="raw", standardize=cfg.standardize
    )
    seconds = {"audit": time.perf_counter() - t0}
    _write_json(
        _fragment(
            cfg,
            "audit",
            seconds,
            {"raw": {"disease": disease.to_dict(), "hospital": hospital.to_dict()}},
        ),
        os.path.join(out, "audit.json"),
    )
    print(
        f"raw-probe hospital AUC {hospital.mean['auc']:.4f} "
        f"(acc {hospital.mean['accuracy']:.4f}); "
        f"disease acc {disease.mean['accuracy']:.4f}"
    )
    return 0


def cmd_debias(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args)
    cohort = load_cohort(args.cohort)
    folds = grouped_kfold(cohort, cfg.k, seed=cfg.seed)
    checkpoints: list[str] = []

    def save_fold(ctx) -> None:
        ckpt = os.path.join(out, f"fold{ctx.fold}.gdm1")
        save_checkpoint(ctx.model, ckpt)
        checkpoints.append(ckpt)
        if ctx.scaler is not None:
            save_standardizer(ctx.scaler, os.path.join(out, f"fold{ctx.fold}.scaler.json"))
        history_to_csv(ctx.history, os.path.join(out, f"fold{ctx.fold}.history.csv"))

    t0 = time.perf_counter()
    disease, hospital = evaluate_pair(
        cohort,
        folds,
        cfg.probe_config(),
        mode="adversarial",
        train_cfg=cfg.train_config(),
        standardize=cfg.standardize,
        on_fold=save_fold,
    )
    seconds = {"debias": time.perf_counter() - t0}
    _write_json(
        _fragment(
            cfg,
            "debias",
            seconds,
            {
                "adversarial": {
                    "disease": disease.to_dict(),
                    "hospital": hospital.to_dict(),
                },
                "checkpoints": checkpoints,
            },
        ),
        os.path.join(out, "debias.json"),
    )
    print(
        f"adversarial (lambda={cfg.lam}) hospital AUC {hospital.mean['auc']:.4f} "
        f"(acc {hospital.mean['accuracy']:.4f}); "
        f"disease acc {disease.mean['accuracy']:.4f}"
    )
    return 0


def _sweep_point(payload) -> SweepPoint:
    cohort, folds, lam, probe_cfg, train_cfg, standardize = payload
    disease, hospital = evaluate_pair(
        cohort,
        folds,
        probe_cfg,
        mode="adversarial",
        train_cfg=replace(train_cfg, lam=lam),
        standardize=standardize,
    )
    return SweepPoint(lam=lam, disease=disease, hospital=hospital)


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args)
    grid = list(cfg.lambda_grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    if len(set(grid)) != len(grid):
        raise ValueError("lambda values must be distinct")
    cohort = load_cohort(args.cohort)
    folds = grouped_kfold(cohort, cfg.k, seed=cfg.seed)
    t0 = time.perf_counter()
    workers = effective_workers(cfg.workers, len(grid))
    jobs = [
        (cohort, folds, lam, cfg.probe_config(), cfg.train_config(), cfg.standardize)
        for lam in sorted(grid)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_sweep_point, jobs))
        result = SweepResult(points=points)
    else:
        result = lambda_sweep(
            cohort, folds, grid, cfg.probe_config(), cfg.train_config(), cfg.standardize
        )
    seconds = {"sweep": time.perf_counter() - t0}
    _write_json(
        _fragment(
            cfg,
            "sweep",
            seconds,
            {
                "sweep": [
                    {
                        "lambda": p.lam,
                        "disease": p.disease.to_dict(),
                        "hospital": p.hospital.to_dict(),
                    }
                    for p in result.points
                ]
            },
        ),
        os.path.join(out, "sweep.json"),
    )
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh).writerows(result.to_csv_rows())
    for p in result.points:
        print(
            f"lambda={p.lam}: hospital AUC {p.hospital.mean['auc']:.4f}, "
            f"disease acc {p.disease.mean['accuracy']:.4f}"
        )
    return 0


def cmd_cca(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args)
    cohort = load_cohort(args.cohort)
    if cfg.reference_hospital is None:
        reference = 0
    else:
        try:
            reference = cohort.hospital_names.index(cfg.reference_hospital)
        except ValueError:
            raise ValueError(
                f"unknown hospital {cfg.reference_hospital!r}; "
                f"valid names: {', '.join(cohort.hospital_names)}"
            ) from None
    folds = grouped_kfold(cohort, cfg.k, seed=cfg.seed)
    t0 = time.perf_counter()
    aligned, projection = align_domains(
        cohort, reference, cfg.cca_components, ridge=cfg.cca_ridge, seed=cfg.seed
    )
    disease, hospital = evaluate_pair(
        aligned, folds, cfg.probe_config(), mode="raw", standardize=cfg.standardize
    )
    disease = replace(disease, method="cca")
    hospital = replace(hospital, method="cca")
    seconds = {"cca": time.perf_counter() - t0}
    save_cca(projection, os.path.join(out, "cca.gcc1"))
    correlations = {
        cohort.hospital_names[h]: [float(v) for v in corr]
        for h, corr in sorted(projection.correlations.items())
    }
    _write_json(
        _fragment(
            cfg,
            "cca",
            seconds,
            {
                "cca": {"disease": disease.to_dict(), "hospital": hospital.to_dict()},
                "reference_hospital": cohort.hospital_names[reference],
                "correlations": correlations,
            },
        ),
        os.path.join(out, "cca.json"),
    )
    for name, corr in correlations.items():
        print(f"canonical correlations vs reference, {name}: "
              + ", ".join(f"{v:.4f}" for v in corr))
    print(
        f"cca hospital acc {hospital.mean['accuracy']:.4f}; "
        f"disease acc {disease.mean['accuracy']:.4f}"
    )
    return 0


def cmd_tsne(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args)
    cohort = load_cohort(args.cohort)
    representation = None
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        scaler_path = args.scaler
        if scaler_path is None:
            guess = args.checkpoint.rsplit(".", 1)[0] + ".scaler.json"
            scaler_path = guess if os.path.exists(guess) else None
        X = cohort.features.astype(np.float64)
        if scaler_path is not None:
            X = load_standardizer(scaler_path).transform(X)
        representation = transform(model, X)
    t0 = time.perf_counter()
    csv_path = os.path.join(out, "tsne.csv")
    emb, idx = embed_report(
        cohort,
        csv_path,
        cfg.tsne_config(),
        sample_cap=cfg.sample_cap,
        representation=representation,
    )
    seconds = {"tsne": time.perf_counter() - t0}
    _write_json(
        _fragment(
            cfg,
            "tsne",
            seconds,
            {"rows": int(idx.size), "coordinates": csv_path},
        ),
        os.path.join(out, "tsne.json"),
    )
    print(f"embedded {idx.size} points -> {csv_path}")
    return 0


def _format_table(reports: list[MetricsReport]) -> str:
    lines = []
    by_task: dict[str, list[MetricsReport]] = {}
    for rep in reports:
        by_task.setdefault(rep.task, []).append(rep)
    for task in ("hospital", "disease"):
        if task not in by_task:
            continue
        lines.append(f"Task: {task}")
        rows = [["Method", "Accuracy±std", "AUC±std", "F1±std"]]
        for rep in by_task[task]:
            rows.append(
                [
                    rep.method,
                    f"{rep.mean['accuracy']:.4f}±{rep.std['accuracy']:.4f}",
                    f"{rep.mean['auc']:.4f}±{rep.std['auc']:.4f}",
                    f"{rep.mean['f1']:.4f}±{rep.std['f1']:.4f}",
                ]
            )
        widths = [max(len(r[c]) for r in rows) for c in range(4)]
        for r in rows:
            lines.append(" | ".join(r[c].ljust(widths[c]) for c in range(4)))
        lines.append("")
    return "\n".join(lines)


def cmd_report(args) -> int:
    out = _outdir(args)
    fragments = []
    for path in args.fragments:
        with open(path, "r", encoding="utf-8") as fh:
            fragments.append(json.load(fh))
    if not fragments:
        raise ValueError("no fragments to merge")
    config = fragments[0].get("config")
    for frag, path in zip(fragments, args.fragments):
        if frag.get("config") != config:
            raise ValueError(f"conflicting config snapshot in {path}")
    merged: dict = {
        "tool_version": __version__,
        "stage": "report",
        "config": config,
        "seconds": {},
    }
    reports: list[MetricsReport] = []
    for frag in fragments:
        merged["seconds"].update(frag.get("seconds", {}))
        for section in ("raw", "adversarial", "cca"):
            if section in frag:
                merged[section] = frag[section]
                for task in ("hospital", "disease"):
                    reports.append(MetricsReport.from_dict(frag[section][task]))
        if "sweep" in frag:
            merged["sweep"] = frag["sweep"]
    _write_json(merged, os.path.join(out, "report.json"))
    table = _format_table(reports)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchdebias",
        description="Quantify and remove hospital-source bias in patch features",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cohort_input=True):
        if cohort_input:
            p.add_argument("cohort", help="cohort file (.csv or .gdb1)")
        p.add_argument("--config", default=None, help="JSON config file (flags win)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic multi-site cohort")
    common(p, cohort_input=False)
    for flag, typ in (
        ("--dim", int),
        ("--hospitals", int),
        ("--diseases", int),
        ("--wsis-per-cell", int),
        ("--patches-per-wsi", int),
        ("--disease-signal", float),
        ("--hospital-signal", float),
        ("--confound", float),
        ("--noise-sigma", float),
    ):
        p.add_argument(flag, type=typ, default=None)
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--k", type=int, default=None, help="fold count")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--proj-hidden", type=int, default=None)
        p.add_argument("--proj-out", type=int, default=None)
        p.add_argument("--probe-hidden", type=int, default=None)
        p.add_argument("--probe-epochs", type=int, default=None)
        p.add_argument(
            "--no-standardize", dest="standardize", action="store_false", default=None
        )

    p = sub.add_parser("audit", help="probe raw features for hospital/disease signal")
    common(p)
    training_flags(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("debias", help="adversarial training + probe evaluation")
    common(p)
    training_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(func=cmd_debias)

    p = sub.add_parser("sweep", help="re-run the adversarial pipeline per lambda")
    common(p)
    training_flags(p)
    p.add_argument(
        "--lambda-grid",
        dest="lambda_grid",
        type=lambda s: [float(v) for v in s.split(",") if v.strip() != ""],
        default=None,
        help="comma-separated lambdas",
    )
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cca", help="canonical-correlation alignment baseline")
    common(p)
    training_flags(p)
    p.add_argument("--reference", dest="reference_hospital", default=None)
    p.add_argument("--cca-components", type=int, default=None)
    p.add_argument("--cca-ridge", type=float, default=None)
    p.set_defaults(func=cmd_cca)

    p = sub.add_parser("tsne", help="2-D embedding of raw or debiased features")
    common(p)
    p.add_argument("--checkpoint", default=None, help="GDM1 model; embeds transform(model, X)")
    p.add_argument("--scaler", default=None, help="standardizer JSON for the checkpoint")
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--tsne-iterations", type=int, default=None)
    p.add_argument("--tsne-init", choices=("pca", "random"), default=None)
    p.add_argument("--sample-cap", type=int, default=None)
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("report", help="merge fragments into one experiment report")
    p.add_argument("fragments", nargs="+", help="fragment JSON files")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
