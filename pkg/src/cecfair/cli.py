"""Command-line pipeline: synth | ingest -> match -> train -> audit.

Each stage reads the directories written by earlier stages and writes its own
directory containing exactly one ``manifest.json``.  All randomness derives
from a single root seed; stage seeds come from ``SeedSequence(root,
spawn_key=(k,))`` with a fixed counter per stage.

Exit codes: 0 success, 2 bad input or configuration, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .attribution import AUDIT_STEPS, audit_workers
from .audit import build_report, compare_runs
from .autodiff import ContractError
from .data import (
    Dataset,
    FeatureSchema,
    IngestionError,
    Standardization,
    SyntheticConfig,
    generate_synthetic,
    load_csv,
    schema_config_for,
    standardize,
    train_test_split,
    write_csv,
)
from .experiments import SWEEP_GRID, SWEEP_METRICS, Prepared, release_memory, sweep, sweep_matrix, write_rows
from .matcher import (
    MatchWarning,
    build_index,
    compute_baselines,
    match,
    read_baselines_json,
    read_map_csv,
    write_baselines_json,
    write_map_csv,
)
from .model import MLPModel, SchemaError
from .trainer import TrainConfig, TrainingData, TrainingDiverged, Variant, train

log = logging.getLogger("cecfair")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
MANIFEST = "manifest.json"
STAGES = {"synth": 0, "split": 1, "train": 2}
CONFIG_SECTIONS = ("seed", "synth", "split", "match", "train", "audit")


class CliError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def stage_seed(root: int, stage: str) -> int:
    """Counter-based child seed for ``stage`` (stable across runs and platforms)."""
    ss = np.random.SeedSequence(int(root), spawn_key=(STAGES[stage],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() in (".yaml", ".yml"):
        import yaml

        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise CliError(f"{p}: {e}") from None
    else:
        raw = json.loads(text)
    if not isinstance(raw, dict):
        raise CliError("config must be a mapping")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    return raw


def root_seed(args, cfg: dict) -> int:
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise CliError("seed must be a nonnegative integer")
    return seed


def write_manifest(out: Path, command: str, argv, config: dict, seed, stage_seeds: dict,
                   dataset_hash: str | None, started: str) -> dict:
    artifacts = {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST
    }
    man = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": canonical_hash(config),
        "dataset_hash": dataset_hash,
        "seed": seed,
        "stage_seeds": stage_seeds,
        "artifacts": artifacts,
        "started": started,
        "finished": _now(),
    }
    dump_json(man, out / MANIFEST)
    return man


def read_manifest(d) -> dict:
    p = Path(d) / MANIFEST
    if not p.is_file():
        raise CliError(f"{d}: no {MANIFEST}; not a pipeline output directory")
    return json.loads(p.read_text())


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- data directories


def write_data_dir(ds: Dataset, out: Path, test_fraction: float, split_seed: int, extra_meta: dict) -> Dataset:
    """Canonical CSV + schema + fixed split + train-split standardisation stats."""
    ds = train_test_split(ds, test_fraction, split_seed)
    st = standardize(ds).standardization
    write_csv(ds, out / "data.csv")
    dump_json(schema_config_for(ds.schema), out / "schema.json")
    dump_json({"test_fraction": test_fraction, "seed": split_seed,
               "train": ds.train_idx.tolist(), "test": ds.test_idx.tolist()}, out / "split.json")
    meta = {k: v for k, v in ds.meta.items() if k != "label_noise"}
    meta.update(extra_meta)
    meta["schema"] = ds.schema.to_dict()
    meta["standardization"] = st.to_dict()
    meta["n"] = ds.n
    dump_json(meta, out / "meta.json")
    if "label_noise" in ds.meta:
        np.savetxt(out / "label_noise.csv", np.asarray(ds.meta["label_noise"]), fmt="%.17g")
    return ds


def load_data_dir(data_dir) -> tuple[Dataset, str]:
    """Reload a data directory; returns the standardised dataset and the CSV hash."""
    d = Path(data_dir)
    for f in ("data.csv", "meta.json", "split.json"):
        if not (d / f).is_file():
            raise CliError(f"{d}: missing {f}")
    meta = json.loads((d / "meta.json").read_text())
    schema = FeatureSchema.from_dict(meta["schema"])
    with open(d / "data.csv", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header != [*schema.feature_names, schema.label_name]:
        raise IngestionError(f"{d / 'data.csv'}: header does not match the recorded schema")
    raw = np.loadtxt(d / "data.csv", delimiter=",", skiprows=1, ndmin=2)
    ds = Dataset(raw[:, :-1], raw[:, -1].astype(np.int64), schema, meta=meta)
    split = json.loads((d / "split.json").read_text())
    ds = ds.with_split(split["train"], split["test"])
    st = Standardization.from_dict(meta["standardization"])
    ds = replace(ds, X=st.apply(ds.X), standardization=st)
    return ds, sha256_file(d / "data.csv")


def load_prepared(data_dir, match_dir) -> tuple[Prepared, str, dict]:
    ds, h = load_data_dir(data_dir)
    man = read_manifest(match_dir)
    if man.get("dataset_hash") != h:
        raise CliError(f"{match_dir} was built from a different dataset than {data_dir}")
    m = Path(match_dir)
    tau = float(json.loads((m / "match_summary.json").read_text())["tau_dist"])
    tr, te = ds.train(), ds.test()
    idx = build_index(tr)
    cm_tr = read_map_csv(m / "map_train.csv", idx, tau)
    cm_te = read_map_csv(m / "map_test.csv", idx, tau)
    bl = read_baselines_json(m / "baselines.json")
    return Prepared(ds, tr, te, idx, cm_tr, cm_te, bl, TrainingData.build(tr, cm_tr, bl)), h, man


# ---------------------------------------------------------------- stages


def cmd_synth(args, cfg: dict, argv) -> dict:
    started = _now()
    seed = root_seed(args, cfg)
    out = _out_dir(args.out)
    syn = dict(cfg.get("synth", {}))
    syn["seed"] = stage_seed(seed, "synth")
    sc = SyntheticConfig.from_dict(syn)
    tf = float(cfg.get("split", {}).get("test_fraction", 0.2))
    seeds = {"synth": sc.seed, "split": stage_seed(seed, "split")}
    write_data_dir(generate_synthetic(sc), out, tf, seeds["split"], {})
    config = {"synth": sc.to_dict(), "split": {"test_fraction": tf}}
    log.info("synth: %d rows -> %s", sc.n, out)
    return write_manifest(out, "synth", argv, config, seed, seeds, sha256_file(out / "data.csv"), started)


def cmd_ingest(args, cfg: dict, argv) -> dict:
    started = _now()
    seed = root_seed(args, cfg)
    out = _out_dir(args.out)
    ds = load_csv(args.csv, args.schema)
    tf = float(cfg.get("split", {}).get("test_fraction", 0.2))
    seeds = {"split": stage_seed(seed, "split")}
    write_data_dir(ds, out, tf, seeds["split"], {"source_sha256": sha256_file(args.csv)})
    config = {"source": str(args.csv), "schema": str(args.schema), "split": {"test_fraction": tf}}
    log.info("ingest: %d rows, %d features -> %s", ds.n, ds.d, out)
    return write_manifest(out, "ingest", argv, config, seed, seeds, sha256_file(out / "data.csv"), started)


def cmd_match(args, cfg: dict, argv) -> dict:
    started = _now()
    ds, h = load_data_dir(args.data)
    tau = args.tau_dist if args.tau_dist is not None else float(cfg.get("match", {}).get("tau_dist", 0.0))
    if tau < 0:
        raise CliError("tau_dist must be nonnegative (0 disables the bound)")
    out = _out_dir(args.out)
    tr, te = ds.train(), ds.test()
    idx = build_index(tr)
    cm_tr, cm_te = match(idx, tr, tau), match(idx, te, tau)
    write_map_csv(cm_tr, out / "map_train.csv")
    write_map_csv(cm_te, out / "map_test.csv")
    write_baselines_json(compute_baselines(tr), out / "baselines.json")
    summary = {
        "tau_dist": tau,
        "empty_cells": [list(c) for c in idx.empty_cells],
        "train": {"coverage": cm_tr.coverage, "n_unmatched": cm_tr.n_unmatched,
                  "distance_histogram": cm_tr.distance_histogram()},
        "test": {"coverage": cm_te.coverage, "n_unmatched": cm_te.n_unmatched,
                 "distance_histogram": cm_te.distance_histogram()},
    }
    dump_json(summary, out / "match_summary.json")
    log.info("match: coverage train %.3f test %.3f", cm_tr.coverage, cm_te.coverage)
    return write_manifest(out, "match", argv, {"match": {"tau_dist": tau}}, None, {}, h, started)


def train_config(args, cfg: dict, seed: int, variant=None) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    d.pop("seed", None)
    if variant is not None:
        d["variant"] = variant
    for flag, key in (("lambda_eo", "lambda_eo"), ("lambda_cec", "lambda_cec"), ("ig_steps", "ig_steps"),
                      ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    d["seed"] = stage_seed(seed, "train")
    return TrainConfig.from_dict(d)


def audit_settings(args, cfg: dict) -> tuple[float, int]:
    a = cfg.get("audit", {})
    theta = args.theta_regime if args.theta_regime is not None else float(a.get("theta_regime", 0.5))
    steps = args.audit_steps if getattr(args, "audit_steps", None) is not None else int(a.get("ig_steps", AUDIT_STEPS))
    if not 0.0 <= theta <= 1.0:
        raise CliError("theta_regime must lie in [0, 1]")
    if steps < 1:
        raise CliError("audit ig_steps must be positive")
    return theta, steps


def cmd_train(args, cfg: dict, argv) -> dict:
    started = _now()
    seed = root_seed(args, cfg)
    prep, h, _ = load_prepared(args.data, args.match)
    out = _out_dir(args.out)
    variant = args.variant[0] if isinstance(args.variant, list) else args.variant
    tc = train_config(args, cfg, seed, variant)
    names = list(prep.train.schema.feature_names)
    seeds = {"train": tc.seed}

    if args.sweep:
        theta, steps = audit_settings(args, cfg)
        rows = sweep(prep, tc, SWEEP_GRID, audit_steps=steps, theta_regime=theta)
        write_rows(rows, out / "sweep.csv")
        for metric in SWEEP_METRICS:
            M = sweep_matrix(rows, metric)
            with open(out / f"heatmap_{metric}.csv", "w") as fh:
                fh.write("lambda_eo," + ",".join(f"{g:g}" for g in SWEEP_GRID) + "\n")
                for g, r in zip(SWEEP_GRID, M):
                    fh.write(f"{g:g}," + ",".join(repr(float(v)) for v in r) + "\n")
        config = {"train": tc.to_dict(), "sweep": list(SWEEP_GRID), "audit": {"theta_regime": theta, "ig_steps": steps}}
        return write_manifest(out, "train --sweep", argv, config, seed, seeds, h, started)

    try:
        model, hist = train(prep.data, tc, feature_names=names)
    except TrainingDiverged as e:
        e.model.save(out / "model.json")
        e.history.write_csv(out / "history.csv")
        dump_json(tc.to_dict(), out / "train_config.json")
        write_manifest(out, "train", argv, {"train": tc.to_dict(), "diverged": str(e)}, seed, seeds, h, started)
        raise
    model.save(out / "model.json")
    hist.write_csv(out / "history.csv")
    dump_json(tc.to_dict(), out / "train_config.json")
    last = hist.epochs[-1]
    log.info("train: %s done, final total loss %.4f", tc.variant.value, last.total)
    return write_manifest(out, "train", argv, {"train": tc.to_dict()}, seed, seeds, h, started)


def _model_name(p: Path, taken: set) -> str:
    base = p.parent.name if p.name == "model.json" else p.stem
    name, k = base or "model", 2
    while name in taken:
        name, k = f"{base}_{k}", k + 1
    taken.add(name)
    return name


def cmd_audit(args, cfg: dict, argv) -> dict:
    started = _now()
    prep, h, _ = load_prepared(args.data, args.match)
    theta, steps = audit_settings(args, cfg)
    out = _out_dir(args.out)
    if args.split == "test":
        ds, cmap = prep.test, prep.cmap_test
    else:
        ds, cmap = prep.train, prep.cmap_train
    paths = [Path(m) / "model.json" if Path(m).is_dir() else Path(m) for m in args.model]
    taken: set = set()
    reports = {}
    for p in paths:
        if not p.is_file():
            raise CliError(f"model file not found: {p}")
        model = MLPModel.load(p)
        if model.input_dim != ds.d:
            raise CliError(f"{p}: model expects {model.input_dim} inputs, data has {ds.d}")
        name = _model_name(p, taken)
        tc_path = p.parent / "train_config.json"
        tc = json.loads(tc_path.read_text()) if tc_path.is_file() else None
        rep = build_report(model, ds, cmap, prep.baselines, theta_regime=theta, steps=steps,
                           config={"model_name": name, "split": args.split, "train": tc})
        rep.write(out, prefix="" if len(paths) == 1 else f"{name}_")
        reports[name] = rep
        log.info("audit %s: f1 %.4f eo %s cec %.4f pfr %.4f", name, rep.f1, rep.eo_gap, rep.cec, rep.pfr)
    if len(reports) > 1:
        write_rows(compare_runs(reports), out / "pareto.csv")
    config = {"audit": {"theta_regime": theta, "ig_steps": steps, "split": args.split,
                        "workers": audit_workers()},
              "models": {n: sha256_file(p) for n, p in zip(reports, paths)}}
    return write_manifest(out, "audit", argv, config, None, {}, h, started)


def cmd_pipeline(args, cfg: dict, argv) -> dict:
    started = _now()
    seed = root_seed(args, cfg)
    out = _out_dir(args.out)
    ns = argparse.Namespace
    cmd_synth(ns(seed=seed, out=out / "data"), cfg, argv)
    cmd_match(ns(data=out / "data", tau_dist=args.tau_dist, out=out / "match"), cfg, argv)
    variants = args.variant or [cfg.get("train", {}).get("variant", Variant.FULL.value)]
    models = []
    for v in variants:
        tdir = out / "train" / Variant(v).value
        cmd_train(ns(seed=seed, data=out / "data", match=out / "match", out=tdir, variant=v,
                     lambda_eo=args.lambda_eo, lambda_cec=args.lambda_cec, ig_steps=args.ig_steps,
                     epochs=args.epochs, sweep=False, theta_regime=None, audit_steps=None), cfg, argv)
        release_memory()
        models.append(tdir)
    cmd_audit(ns(data=out / "data", match=out / "match", out=out / "audit", model=models,
                 theta_regime=args.theta_regime, audit_steps=args.audit_steps, split="test"), cfg, argv)
    seeds = {k: stage_seed(seed, k) for k in STAGES}
    return write_manifest(out, "pipeline", argv, cfg, seed, seeds, sha256_file(out / "data" / "data.csv"), started)


# ---------------------------------------------------------------- argparse


def _train_flags(p: argparse.ArgumentParser, multi: bool = False) -> None:
    p.add_argument("--variant", choices=[v.value for v in Variant], nargs="+" if multi else None,
                   default=None, help="loss composition" + (" (several for an ablation)" if multi else ""))
    p.add_argument("--lambda-eo", type=float, default=None)
    p.add_argument("--lambda-cec", type=float, default=None)
    p.add_argument("--ig-steps", type=int, default=None, help="IG steps inside the training loss")
    p.add_argument("--epochs", type=int, default=None)


def _audit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--theta-regime", type=float, default=None)
    p.add_argument("--audit-steps", type=int, default=None, help="IG steps for the audit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cecfair", description="Counterfactual explanation consistency pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ingest", help="load a CSV with a schema config")
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--schema", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("match", help="counterfactual matching and baselines")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--tau-dist", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train one model, or the lambda grid with --sweep")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--match", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sweep", action="store_true", help="6x6 lambda grid, audited on the test split")
    _train_flags(p)
    _audit_flags(p)

    p = sub.add_parser("audit", help="audit one or more trained models")
    p.add_argument("--model", nargs="+", required=True, help="model.json files or train output dirs")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--match", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", type=Path, required=True)
    _audit_flags(p)

    p = sub.add_parser("pipeline", help="synth, match, train and audit in one go")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tau-dist", type=float, default=None)
    _train_flags(p, multi=True)
    _audit_flags(p)
    return ap


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "match": cmd_match,
    "train": cmd_train, "audit": cmd_audit, "pipeline": cmd_pipeline,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        with warnings.catch_warnings():
            warnings.simplefilter("always", MatchWarning)
            COMMANDS[args.command](args, cfg, argv)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IngestionError, SchemaError, ContractError, ValueError, KeyError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
