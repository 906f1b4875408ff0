"""Command-line driver for the synthetic transfer experiments.

Every subcommand reads one JSON config (merged onto :data:`DEFAULT_CONFIG`),
writes its artifacts under ``<out>/<stage>/`` and records a ``manifest.json``
with the resolved config, its hash, the seed, the wall time and a SHA-256 of
every artifact. Artifacts themselves carry no timestamps, so identical
config and seed reproduce them byte for byte.

Exit codes: 0 success, 2 config error, 3 missing or corrupt prerequisite,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .abmil import AbmilModel, CVResult, attention_dump, train_cancer_specific
from .cohort import (FoldAssignment, SynthSpec, check_inclusion, load_bags, save_bags, stratified_kfold,
                     synth_cohorts)
from .exceptions import (ConfigError, ContractError, IntegrityError, MissingPrerequisiteError,
                         PktransferError, ProjectionError, SingularMatrixError, TrainingError,
                         UndefinedMetricError)
from .factors import factor_analysis
from .roupkt import MoeConfig, ablation_suite, default_variants, train_roupkt
from .training import TrainConfig
from .transfer import TransferMatrix, cohort_seed, nearest_source, transfer_matrix

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4

_SYNTH_KEYS = {f.name for f in fields(SynthSpec)} - {"seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_MOE_KEYS = {f.name for f in fields(MoeConfig)}

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": {
        "n_cancers": 5,
        "n_patients": [300, 300, 300, 300, 120],
        "d": 32,
        "m_range": [20, 200],
        "n_bins": 10,
        "signal_dims": [[0, 1, 2, 3], [0, 1, 2, 3], [4, 5, 6, 7], [4, 5, 6, 7], [0, 1, 2, 3]],
        "censor_rate": 0.3,
    },
    "train": {"lr": 1e-3, "weight_decay": 1e-5, "epochs": 20, "accumulation_steps": 16,
              "warmup_epochs": 1},
    "model": {"d_embed": 32, "d_attn": 16, "gated": True},
    "cv": {"k": 5, "aggregate": "slide"},
    "inclusion": {"min_patients": 200, "min_event_ratio": 0.05},
    "moe": {"k": 3, "coef_lb": 0.01, "coef_lz": 0.01, "router_kind": "attention",
            "expert_subset": "all", "adapter_hidden": 32, "router_embed": 32, "router_attn": 16,
            "combiner": "router", "hard_uniform": False},
    "roupkt": {"targets": None},
    "factors": {"horizon": 10},
    "ablate": {"target": None, "k_sweep": [3, 5, 7, 13], "lz_sweep": [0.0, 0.001, 0.005, 0.01],
               "variants": None},
    "attention": {"n_bags": 3},
}

_SECTION_KEYS = {
    "synth": _SYNTH_KEYS,
    "train": _TRAIN_KEYS,
    "model": {"d_embed", "d_attn", "gated"},
    "cv": {"k", "aggregate"},
    "inclusion": {"min_patients", "min_event_ratio"},
    "moe": _MOE_KEYS,
    "roupkt": {"targets"},
    "factors": {"horizon"},
    "ablate": {"target", "k_sweep", "lz_sweep", "variants"},
    "attention": {"n_bags"},
}

STAGE_DIRS = {
    "synth": "synth",
    "train": "train",
    "transfer-matrix": "transfer",
    "factors": "factors",
    "roupkt": "roupkt",
    "ablate": "ablate",
    "attention": "attention",
    "report": "report",
}


# -- config ------------------------------------------------------------------

def resolve_config(user=None, seed=None):
    """Merge a user config onto the defaults, rejecting unknown keys."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    user = user or {}
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in user.items():
        if key == "seed":
            cfg["seed"] = value
            continue
        if key not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        unknown = sorted(set(value) - _SECTION_KEYS[key])
        if unknown:
            raise ConfigError(f"unknown keys in {key!r}: {unknown}")
        cfg[key].update(value)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    try:
        synth_spec(cfg)
        train_config(cfg)
        moe_config(cfg)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_config(path=None, seed=None):
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return resolve_config(user, seed)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def synth_spec(cfg):
    s = dict(cfg["synth"])
    for key in ("m_range", "prevalence"):
        if key in s:
            s[key] = tuple(s[key])
    return SynthSpec(seed=cfg["seed"], **s)


def train_config(cfg):
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def moe_config(cfg, **overrides):
    return MoeConfig(**{**cfg["moe"], **overrides})


# -- artifact bookkeeping ----------------------------------------------------

def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def stage_dir(out, command):
    return Path(out) / STAGE_DIRS[command]


def prepare_stage(out, command, force):
    d = stage_dir(out, command)
    if d.exists() and any(d.iterdir()):
        if not force:
            raise ConfigError(f"{d} already exists; pass --force to overwrite")
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(d, command, cfg, started, inputs=None):
    artifacts = {}
    for p in sorted(d.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[p.relative_to(d).as_posix()] = sha256_file(p)
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "wall_time_s": round(time.time() - started, 3),
        "artifacts": artifacts,
        "inputs": inputs or {},
    }
    _write_json(d / "manifest.json", manifest)
    return manifest


def read_manifest(out, command, needed_by):
    """Load and verify a prerequisite stage's manifest."""
    d = stage_dir(out, command)
    path = d / "manifest.json"
    if not path.exists():
        raise MissingPrerequisiteError(
            f"{needed_by!r} needs the output of {command!r}; run `pktransfer {command}` first", command)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        artifacts = manifest["artifacts"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IntegrityError(f"corrupt manifest {path}: {exc}") from None
    for rel, digest in artifacts.items():
        p = d / rel
        if not p.exists() or sha256_file(p) != digest:
            raise IntegrityError(f"artifact {p} does not match its manifest checksum")
    return manifest


# -- loading earlier stages --------------------------------------------------

def load_cohorts(out, needed_by):
    manifest = read_manifest(out, "synth", needed_by)
    d = stage_dir(out, "synth")
    truth = json.loads((d / "ground_truth.json").read_text(encoding="utf-8"))
    cohorts = [load_bags(d / f"{code}.pktb") for code in truth["codes"]]
    return cohorts, manifest


def load_training(out, needed_by):
    """Per-cancer CV results rebuilt from checkpoints, plus folds and status."""
    manifest = read_manifest(out, "train", needed_by)
    d = stage_dir(out, "train")
    summary = json.loads((d / "cv.json").read_text(encoding="utf-8"))
    results, folds = {}, {}
    for code in summary["included"]:
        entry = summary["cohorts"][code]
        folds[code] = FoldAssignment.from_dict(json.loads((d / code / "folds.json").read_text(encoding="utf-8")))
        models = [AbmilModel.load(d / code / f"fold{f}.pktm") for f in range(folds[code].k)]
        results[code] = CVResult(models, entry["fold_scores"], entry["histories"], {}, entry["failures"])
    return results, folds, summary, manifest


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg, out, force=False, jobs=1):
    started = time.time()
    d = prepare_stage(out, "synth", force)
    spec = synth_spec(cfg)
    cohorts, truth = synth_cohorts(spec)
    for c in cohorts:
        save_bags(c, d / f"{c.cancer_code}.pktb", registry={"d": spec.d})
    gt = {
        "codes": [c.cancer_code for c in cohorts],
        "spec": spec.to_dict(),
        "cancers": {code: t.to_dict() for code, t in truth.items()},
        "event_ratio": {c.cancer_code: float(np.mean(c.event)) for c in cohorts},
    }
    _write_json(d / "ground_truth.json", gt)
    return write_manifest(d, "synth", cfg, started)


def cmd_train(cfg, out, force=False, jobs=1):
    cohorts, synth_manifest = load_cohorts(out, "train")
    started = time.time()
    d = prepare_stage(out, "train", force)
    tcfg = train_config(cfg)
    summary = {"included": [], "rare": [], "cohorts": {}}
    failed = []
    for i, cohort in enumerate(cohorts):
        code = cohort.cancer_code
        status = check_inclusion(cohort, **cfg["inclusion"])
        summary[status].append(code)
        if status == "rare":
            summary["cohorts"][code] = {"status": "rare"}
            continue
        folds = stratified_kfold(cohort, cfg["cv"]["k"], cfg["seed"])
        ccfg = TrainConfig(**{**tcfg.to_dict(), "seed": cohort_seed(tcfg.seed, i)})
        res = train_cancer_specific(cohort, folds, ccfg, cfg["model"], cfg["cv"]["aggregate"])
        _write_json(d / code / "folds.json", folds.to_dict())
        for f, model in enumerate(res.models):
            model.save(d / code / f"fold{f}.pktm")
        summary["cohorts"][code] = {"status": "included", **res.to_dict()}
        if res.failures:
            failed.append(code)
    if not summary["included"]:
        raise ContractError("no cohort passes the inclusion rule; nothing can be trained")
    _write_json(d / "cv.json", summary)
    write_manifest(d, "train", cfg, started, {"synth": synth_manifest["config_hash"]})
    if failed:
        raise TrainingError(f"training diverged on {failed}; see {d / 'cv.json'}")


def cmd_transfer_matrix(cfg, out, force=False, jobs=1):
    cohorts, _ = load_cohorts(out, "transfer-matrix")
    results, folds, summary, train_manifest = load_training(out, "transfer-matrix")
    started = time.time()
    d = prepare_stage(out, "transfer-matrix", force)
    by_code = {c.cancer_code: c for c in cohorts}
    included = summary["included"]
    common = transfer_matrix(results, {c: by_code[c] for c in included}, folds, included, included, jobs)
    common.to_csv(d / "matrix.csv")
    common.to_json(d / "matrix.json")
    with (d / "verdicts.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target", "performance", "positive"])
        for v in common.verdicts():
            w.writerow([v.source, v.target, repr(v.performance), int(v.positive)])
    nearest = {t: nearest_source(common, t) for t in included} if len(included) > 1 else {}
    rare = summary["rare"]
    if rare:
        pool = transfer_matrix(results, {c: by_code[c] for c in rare}, {}, included, rare, jobs)
        pool.to_csv(d / "rare_matrix.csv")
        pool.to_json(d / "rare_matrix.json")
        nearest.update({t: nearest_source(pool, t) for t in rare})
    _write_json(d / "nearest_source.json", nearest)
    return write_manifest(d, "transfer-matrix", cfg, started, {"train": train_manifest["config_hash"]})


def cmd_factors(cfg, out, force=False, jobs=1):
    cohorts, _ = load_cohorts(out, "factors")
    manifest = read_manifest(out, "transfer-matrix", "factors")
    started = time.time()
    matrix = TransferMatrix.from_json(stage_dir(out, "transfer-matrix") / "matrix.json")
    d = prepare_stage(out, "factors", force)
    by_code = {c.cancer_code: c for c in cohorts}
    analysis = factor_analysis(matrix, [by_code[c] for c in matrix.sources], cfg["factors"]["horizon"])
    analysis.table_csv(d / "factor_table.csv")
    analysis.to_json(d / "ols_reports.json")
    return write_manifest(d, "factors", cfg, started, {"transfer-matrix": manifest["config_hash"]})


def _positive_sources(out, target, needed_by):
    """Sources whose transfer into ``target`` beats chance."""
    read_manifest(out, "transfer-matrix", needed_by)
    matrix = TransferMatrix.from_json(stage_dir(out, "transfer-matrix") / "matrix.json")
    return {v.source for v in matrix.verdicts() if v.target == target and v.positive}


def cmd_roupkt(cfg, out, force=False, jobs=1):
    cohorts, _ = load_cohorts(out, "roupkt")
    results, folds, summary, train_manifest = load_training(out, "roupkt")
    started = time.time()
    d = prepare_stage(out, "roupkt", force)
    by_code = {c.cancer_code: c for c in cohorts}
    targets = cfg["roupkt"]["targets"] or summary["included"]
    mcfg = moe_config(cfg)
    out_summary = {}
    for target in targets:
        if target not in results:
            raise ConfigError(f"roupkt target {target!r} is not an included cohort")
        pos = _positive_sources(out, target, "roupkt") if mcfg.expert_subset == "positive-only" else None
        res = train_roupkt(by_code[target], folds[target], results, mcfg, train_config(cfg), pos)
        for f, model in enumerate(res.models):
            model.save(d / target / f"fold{f}.pktm")
        res.routing_csv(d / target / "routing.csv")
        out_summary[target] = {**res.to_dict(), "baseline": results[target].to_dict()["mean"],
                               "experts": res.models[0].codes}
    _write_json(d / "cv.json", out_summary)
    return write_manifest(d, "roupkt", cfg, started, {"train": train_manifest["config_hash"]})


def cmd_ablate(cfg, out, force=False, jobs=1):
    cohorts, _ = load_cohorts(out, "ablate")
    results, folds, summary, train_manifest = load_training(out, "ablate")
    started = time.time()
    acfg = cfg["ablate"]
    target = acfg["target"] or summary["included"][0]
    if target not in results:
        raise ConfigError(f"ablation target {target!r} is not an included cohort")
    variants = default_variants(len(results), acfg["k_sweep"], acfg["lz_sweep"])
    if acfg["variants"] is not None:
        wanted = set(acfg["variants"])
        unknown = wanted - {name for name, _ in variants}
        if unknown:
            raise ConfigError(f"unknown ablation variants {sorted(unknown)}")
        variants = [(n, o) for n, o in variants if n in wanted]
    positive = None
    if any(o.get("expert_subset") == "positive-only" for _, o in variants):
        positive = _positive_sources(out, target, "ablate")
    d = prepare_stage(out, "ablate", force)
    by_code = {c.cancer_code: c for c in cohorts}
    report = ablation_suite(by_code[target], folds[target], results, moe_config(cfg), train_config(cfg),
                            variants, positive)
    report.to_csv(d / "ablation.csv")
    return write_manifest(d, "ablate", cfg, started, {"train": train_manifest["config_hash"]})


def cmd_attention(cfg, out, force=False, jobs=1):
    cohorts, _ = load_cohorts(out, "attention")
    results, folds, summary, train_manifest = load_training(out, "attention")
    started = time.time()
    d = prepare_stage(out, "attention", force)
    by_code = {c.cancer_code: c for c in cohorts}
    for code, res in results.items():
        cohort = by_code[code]
        _, test_idx = folds[code].split(cohort, 0)
        for i in test_idx[: cfg["attention"]["n_bags"]]:
            bag = cohort.bags[i]
            attention_dump(res.models[0], bag, d / code / f"{bag.bag_id}.csv")
    return write_manifest(d, "attention", cfg, started, {"train": train_manifest["config_hash"]})


def _csv_rows(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def cmd_report(cfg, out, force=False, jobs=1):
    manifests = {}
    for command in STAGE_DIRS:
        if command == "report":
            continue
        if (stage_dir(out, command) / "manifest.json").exists():
            manifests[command] = read_manifest(out, command, "report")
    if not manifests:
        raise MissingPrerequisiteError("nothing to report; run `pktransfer synth` first", "synth")
    started = time.time()
    d = prepare_stage(out, "report", force=True)
    report = {"runs": {}, "row_counts": {}}
    for command, m in manifests.items():
        report["runs"][command] = {"config_hash": m["config_hash"], "seed": m["seed"],
                                   "artifacts": m["artifacts"]}
        for rel in m["artifacts"]:
            if rel.endswith(".csv"):
                rows = _csv_rows(stage_dir(out, command) / rel)
                report["row_counts"][f"{STAGE_DIRS[command]}/{rel}"] = max(len(rows) - 1, 0)
    if "transfer-matrix" in manifests:
        tdir = stage_dir(out, "transfer-matrix")
        matrix = TransferMatrix.from_json(tdir / "matrix.json")
        report["transfer_matrix"] = matrix.to_dict()
        with (d / "transfer_long.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "target", "value", "sigma"])
            for i, s in enumerate(matrix.sources):
                for j, t in enumerate(matrix.targets):
                    w.writerow([s, t, repr(float(matrix.values[i, j])), repr(float(matrix.sigma[i, j]))])
    if "factors" in manifests:
        fdir = stage_dir(out, "factors")
        report["factors"] = json.loads((fdir / "ols_reports.json").read_text(encoding="utf-8"))
        shutil.copyfile(fdir / "factor_table.csv", d / "factor_table.csv")
    if "roupkt" in manifests:
        rdir = stage_dir(out, "roupkt")
        report["roupkt"] = json.loads((rdir / "cv.json").read_text(encoding="utf-8"))
        with (d / "routing_dynamics.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target", "fold", "epoch", "expert", "mean_score"])
            for target in sorted(report["roupkt"]):
                for row in _csv_rows(rdir / target / "routing.csv")[1:]:
                    w.writerow([target] + row)
    if "ablate" in manifests:
        rows = _csv_rows(stage_dir(out, "ablate") / "ablation.csv")
        report["ablation"] = [dict(zip(rows[0], r)) for r in rows[1:]]
        shutil.copyfile(stage_dir(out, "ablate") / "ablation.csv", d / "ablation.csv")
    _write_json(d / "report.json", report)
    return write_manifest(d, "report", cfg, started, {c: m["config_hash"] for c, m in manifests.items()})


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "transfer-matrix": cmd_transfer_matrix,
    "factors": cmd_factors,
    "roupkt": cmd_roupkt,
    "ablate": cmd_ablate,
    "attention": cmd_attention,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="pktransfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("runs"), help="run directory (default: runs)")
        p.add_argument("--force", action="store_true", help="overwrite existing stage output")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](cfg, args.out, force=args.force, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPrerequisiteError, IntegrityError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (TrainingError, UndefinedMetricError, SingularMatrixError, ProjectionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PktransferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
