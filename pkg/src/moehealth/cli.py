"""Command-line entry point: generate, train, evaluate, ablate, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, write_checkpoint
from .config import ABLATION_MODES, TrainConfig
from .data import GeneratorConfig, SplitSpec, file_digest, generate, load_dataset, split, summarize, write_dataset
from .errors import ConfigError, DataValidationError, MoEHealthError
from .gradcheck import run_gradcheck
from .trainer import evaluate, train, visible_subset

log = logging.getLogger("moehealth")

EXIT_OK = 0
EXIT_FAILED = 1  # the command ran but its check failed (gradcheck)
EXIT_VALIDATION = 2
EXIT_IO = 3

ABLATION_ORDER = ("none", "no_missing_indicator", "no_specialization", "no_dynamic_gating", "top1")
ABLATION_LABELS = {
    "none": "full",
    "no_missing_indicator": "w/o missing indicator",
    "no_specialization": "w/o expert specialization",
    "no_dynamic_gating": "w/o dynamic gating",
    "top1": "top-1 routing",
}


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def read_config(path) -> dict:
    """A JSON object with optional "generator", "split" and "train" sections."""
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - {"generator", "split", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return doc


def split_spec(doc: dict, seed) -> SplitSpec:
    fields = dict(doc.get("split", {}))
    try:
        spec = SplitSpec(**fields)
    except TypeError as exc:
        raise ConfigError(f"split section: {exc}") from None
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    spec.validate()
    return spec


def train_config(doc: dict, args, dims: dict | None = None) -> TrainConfig:
    fields = dict(doc.get("train", {}))
    model = dict(fields.pop("model", {}))
    if dims is not None:
        # input widths always follow the data
        model.update(
            static_dim=dims["ehr_static"],
            series_dim=dims["ehr_series_dim"],
            vocab_size=dims["vocab_size"],
            image_dim=dims["image_features"],
        )
    overrides = {
        "seed": getattr(args, "seed", None),
        "ablation_mode": getattr(args, "ablation", None),
        "alpha": getattr(args, "alpha", None),
        "k": getattr(args, "topk", None),
        "max_epochs": getattr(args, "epochs", None),
        "patience": getattr(args, "patience", None),
        "modalities": getattr(args, "modalities", None),
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict({**fields, "model": model})
    except TypeError as exc:
        raise ConfigError(f"train section: {exc}") from None


def check_dims(config: TrainConfig, dims: dict) -> None:
    m = config.model
    expected = {
        "ehr_static": m.static_dim,
        "ehr_series_dim": m.series_dim,
        "vocab_size": m.vocab_size,
        "image_features": m.image_dim,
    }
    bad = {k: (v, dims.get(k)) for k, v in expected.items() if dims.get(k) != v}
    if bad:
        detail = ", ".join(f"{k}: model {a} vs data {b}" for k, (a, b) in bad.items())
        raise DataValidationError(f"checkpoint does not fit the dataset ({detail})")


def run_meta(command: str, config, seed, data_path=None) -> dict:
    meta = {"tool": "moehealth", "version": __version__, "command": command, "seed": seed}
    if config is not None:
        meta["config"] = config.to_dict() if hasattr(config, "to_dict") else config
    if data_path is not None:
        meta["dataset"] = str(data_path)
        meta["dataset_sha256"] = file_digest(data_path)
    return meta


def write_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def out_dir(path) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def require_data(path) -> Path:
    if path is None:
        raise ConfigError("--data is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    doc = read_config(args.config)
    fields = dict(doc.get("generator", {}))
    if args.n is not None:
        fields["n_samples"] = args.n
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        cfg = GeneratorConfig.from_dict(fields)
    except TypeError as exc:
        raise ConfigError(f"generator section: {exc}") from None
    cfg.validate()
    if args.out is None:
        raise ConfigError("--out is required (dataset file path)")
    log.info("generating %d samples (seed %d)", cfg.n_samples, cfg.seed)
    samples = generate(cfg)
    path = Path(args.out)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, samples, cfg.dims, meta=run_meta("generate", cfg, cfg.seed))
    summary = {"path": str(path), "sha256": file_digest(path), **summarize(samples)}
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def _load_splits(args, doc):
    data = require_data(args.data)
    samples, header = load_dataset(data)
    spec = split_spec(doc, args.seed)
    return data, header, spec, split(samples, spec)


def cmd_train(args) -> int:
    doc = read_config(args.config)
    data, header, spec, (tr, va, te) = _load_splits(args, doc)
    config = train_config(doc, args, header["dims"])
    out = out_dir(args.out)
    log.info("training on %s: %d/%d/%d samples, ablation %s", data, len(tr), len(va), len(te), config.ablation_mode)
    report, model = train(tr, va, te, config)
    meta = run_meta("train", config, config.seed, data)
    meta["split"] = dataclasses.asdict(spec)
    digest = write_checkpoint(out / "checkpoint.json", model, config, meta)
    write_json(out / "report.json", {"meta": meta, "checkpoint_digest": digest, "report": report.to_dict()})
    write_json(out / "test_metrics.json", {"meta": meta, "metrics": report.test_metrics})
    json.dump(
        {"ablation_mode": config.ablation_mode, "best_epoch": report.best_epoch, "test": _headline(report.test_metrics)},
        sys.stdout,
        sort_keys=True,
    )
    sys.stdout.write("\n")
    return EXIT_OK


def _headline(metrics: dict) -> dict:
    return {"auroc": metrics["auroc"], "f1": metrics["f1"], "n": metrics["n"]}


def _run_summary(report) -> dict:
    test = _headline(report.test_metrics)
    test["by_pattern"] = {k: v["auroc"] for k, v in report.test_metrics["by_pattern"].items()}
    return {
        "best_epoch": report.best_epoch,
        "stopped_epoch": report.stopped_epoch,
        "val": {"auroc": report.val_metrics["auroc"], "usage_cv": report.val_metrics["usage_cv"]},
        "test": test,
    }


def cmd_evaluate(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, config, saved_meta = load_checkpoint(ckpt)
    doc = read_config(args.config)
    if "split" not in doc and "split" in saved_meta:
        doc = {**doc, "split": saved_meta["split"]}
    data, header, spec, (tr, va, te) = _load_splits(args, doc)
    check_dims(config, header["dims"])
    parts = {"train": tr, "val": va, "test": te, "all": tr + va + te}
    samples = visible_subset(parts[args.split], config.modalities)
    metrics = evaluate(model, samples, config.k)
    meta = run_meta("evaluate", config, config.seed, data)
    meta.update(checkpoint=str(ckpt), split=args.split)
    payload = {"meta": meta, "metrics": metrics}
    if args.out is not None:
        write_json(out_dir(args.out) / f"eval_{args.split}.json", payload)
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError("--seeds needs at least one non-negative integer")
    return seeds


def ablation_table(results: dict[str, dict[int, float]], seeds: list[int]) -> tuple[list[dict], str]:
    """Rows of AUROC and delta versus the full model, per seed and averaged."""
    full = results["none"]
    rows = []
    for mode in ABLATION_ORDER:
        per_seed = {s: results[mode][s] for s in seeds}
        deltas = {s: per_seed[s] - full[s] for s in seeds}
        rows.append(
            {
                "configuration": ABLATION_LABELS[mode],
                "mode": mode,
                "auroc": float(np.mean(list(per_seed.values()))),
                "delta_auroc": float(np.mean(list(deltas.values()))),
                "per_seed": {str(s): {"auroc": per_seed[s], "delta_auroc": deltas[s]} for s in seeds},
            }
        )
    header = ["Configuration", "AUROC", "ΔAUROC"] + [f"seed {s} AUROC (Δ)" for s in seeds]
    lines = [" | ".join(header), " | ".join("---" for _ in header)]
    for r in rows:
        cells = [r["configuration"], f"{r['auroc']:.4f}", f"{r['delta_auroc']:+.4f}"]
        cells += [f"{r['per_seed'][str(s)]['auroc']:.4f} ({r['per_seed'][str(s)]['delta_auroc']:+.4f})" for s in seeds]
        lines.append(" | ".join(cells))
    return rows, "\n".join(lines)


def cmd_ablate(args) -> int:
    doc = read_config(args.config)
    data = require_data(args.data)
    samples, header = load_dataset(data)
    seeds = parse_seeds(args.seeds) if args.seed is None else [args.seed]
    out = out_dir(args.out)
    results: dict[str, dict[int, float]] = {m: {} for m in ABLATION_ORDER}
    reports = {}
    for seed in seeds:
        spec = split_spec(doc, seed)
        tr, va, te = split(samples, spec)
        for mode in ABLATION_ORDER:
            ns = argparse.Namespace(**{**vars(args), "seed": seed, "ablation": mode})
            config = train_config(doc, ns, header["dims"])
            log.info("ablation %s, seed %d", mode, seed)
            report, _ = train(tr, va, te, config)
            results[mode][seed] = report.test_metrics["auroc"]
            reports[f"{mode}/seed{seed}"] = _run_summary(report)
    rows, table = ablation_table(results, seeds)
    meta = run_meta("ablate", train_config(doc, args, header["dims"]), seeds, data)
    write_json(out / "ablation.json", {"meta": meta, "rows": rows, "runs": reports})
    with open(out / "ablation.md", "w", encoding="utf-8") as fh:
        fh.write(f"<!-- {json.dumps(meta, sort_keys=True)} -->\n{table}\n")
    sys.stdout.write(table + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    report = run_gradcheck(seed=seed)
    payload = {"meta": run_meta("gradcheck", None, seed), **report.to_dict()}
    if args.out is not None:
        write_json(out_dir(args.out) / "gradcheck.json", payload)
    verdict = "PASS" if report.passed else "FAIL"
    sys.stdout.write(
        f"{verdict} max relative error {report.max_relative_error:.3e} "
        f"(worst parameter {report.worst_parameter}, tolerance 1e-4)\n"
    )
    return EXIT_OK if report.passed else EXIT_FAILED


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moehealth", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config with generator/split/train sections")
        p.add_argument("--seed", type=_nonneg_int, help="seed override")
        if data:
            p.add_argument("--data", help="dataset file (NDJSON)")
        p.add_argument("--out", help="output directory")

    def training(p):
        p.add_argument("--alpha", type=float, help="load-balance weight")
        p.add_argument("--topk", type=int, help="experts routed per sample")
        p.add_argument("--epochs", type=int, help="maximum joint-training epochs")
        p.add_argument("--patience", type=int, help="early-stopping patience")
        p.add_argument("--modalities", help="modalities the model may see, a subset of ETI (default ETI)")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, data=False)
    p.add_argument("--n", type=int, help="number of samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model, write checkpoint and report")
    common(p)
    training(p)
    p.add_argument("--ablation", choices=ABLATION_MODES, help="ablation mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train all five configurations and tabulate AUROC")
    common(p)
    training(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (ignored when --seed is given)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--seed", type=_nonneg_int, help="instance seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (MoEHealthError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
