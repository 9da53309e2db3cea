"""Command line harness: dataset generation, single runs, sweeps and the empty-graph attack."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, ExperimentSpec, RunConfig
from .datagen import generate, write_dataset
from .evaluation import aggregate_ci
from .model import load_checkpoint, save_checkpoint
from .training import Dataset, eval_graphs, evaluate, hop_config, load_dataset, train

log = logging.getLogger("hopgraph")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# small file helpers
# ---------------------------------------------------------------------------

def write_json_atomic(path: Path, data) -> None:
    """Write-temp-then-rename so readers never see a half-written file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_metric_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"day": int(r["day"]), "metric": r["metric"], "value": float(r["value"])}
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def resolve_spec(args) -> ExperimentSpec:
    if args.config:
        spec = cfgmod.load(ExperimentSpec, args.config, apply_env=False)
    else:
        spec = ExperimentSpec()
    if getattr(args, "dataset", None):
        spec.run.dataset = args.dataset
    if getattr(args, "seeds", None):
        try:
            spec.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
        spec.run.seed = spec.seeds[0]
    cfgmod.apply_seed_override(spec)
    spec.validate()
    return spec


def run_config(spec: ExperimentSpec, model: str, K: int, seed: int, **overrides) -> RunConfig:
    cfg = dataclasses.replace(spec.run, model=model, K=0 if model == "dnn" else K, seed=seed, **overrides)
    cfg.validate()
    return cfg


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.model}-K{cfg.K}-seed{cfg.seed}"


# ---------------------------------------------------------------------------
# one training job (runs in a worker process when --parallel > 1)
# ---------------------------------------------------------------------------

_DATASETS: dict = {}


def _dataset(path: str, cfg: RunConfig) -> Dataset:
    key = (str(Path(path).resolve()), cfg.window, tuple(cfgmod.to_dict(cfg.split).values()))
    if key not in _DATASETS:
        _DATASETS[key] = load_dataset(path, cfg)
    return _DATASETS[key]


def _check_attack_graphs(ds: Dataset) -> None:
    graphs = eval_graphs(ds, empty_test=True)
    for day in ds.split.test:
        if graphs[day].n_edges:
            raise RuntimeError(f"attack: test snapshot {day} still has {graphs[day].n_edges} edges")


def run_job(cfg_dict: dict, out_dir: str) -> dict:
    """Train one configuration and write its run directory. Returns its test metric rows."""
    cfg = cfgmod.from_dict(RunConfig, cfg_dict, "run")
    out = Path(out_dir)
    ds = _dataset(cfg.dataset, cfg)
    if cfg.drop_test_edges:
        _check_attack_graphs(ds)
    state = train(cfg, ds)
    best = state.best_model()
    rows = evaluate(best, ds, ds.split.test, hop_config(cfg), cfg.eval_k, empty_test=cfg.drop_test_edges)

    write_json_atomic(out / "config.json", cfgmod.to_dict(cfg))
    write_csv(out / "curves.csv", ["epoch", "split", "metric", "value"],
              [(c["epoch"], c["split"], c["metric"], c["value"]) for c in state.curves])
    write_csv(out / "metrics.csv", ["day", "metric", "value"],
              [(r["day"], r["metric"], r["value"]) for r in rows])
    save_checkpoint(out / "checkpoint.npz", best,
                    {"run": cfgmod.to_dict(cfg), "best_epoch": state.best_epoch,
                     "best_valid": state.best_valid})
    return {"rows": rows, "curves": state.curves, "best_epoch": state.best_epoch}


# ---------------------------------------------------------------------------
# manifest-driven execution
# ---------------------------------------------------------------------------

class Manifest:
    """Status of every requested run, persisted atomically after each change."""

    def __init__(self, path: Path):
        self.path = path
        self.runs: dict[str, dict] = {}
        if path.exists():
            try:
                self.runs = json.loads(path.read_text()).get("runs", {})
            except json.JSONDecodeError:
                log.warning("manifest %s is unreadable; starting fresh", path)

    def done(self, rid: str) -> bool:
        return self.runs.get(rid, {}).get("status") == "done"

    def record(self, rid: str, cfg: RunConfig, status: str, error: str | None = None) -> None:
        entry = {"model": cfg.model, "K": cfg.K, "seed": cfg.seed, "status": status}
        if error:
            entry["error"] = error
        self.runs[rid] = entry
        write_json_atomic(self.path, {"runs": self.runs})


def execute(jobs: list[RunConfig], out: Path, parallel: int = 1) -> tuple[dict[str, dict], list[str]]:
    """Run the jobs not already completed; returns ``(results by run id, failed ids)``."""
    manifest = Manifest(out / "manifest.json")
    results: dict[str, dict] = {}
    pending = []
    for cfg in jobs:
        rid = run_id(cfg)
        rdir = out / "runs" / rid
        if manifest.done(rid) and (rdir / "metrics.csv").exists() and (rdir / "curves.csv").exists():
            log.info("%s: already complete, skipping", rid)
            results[rid] = {"rows": read_metric_rows(rdir / "metrics.csv"), "curves": _read_curves(rdir)}
        else:
            pending.append((rid, cfg, rdir))
    failed = []

    def finish(rid, cfg, fn):
        try:
            res = fn()
        except Exception as exc:  # recorded, the sweep continues
            log.error("%s failed: %s", rid, exc)
            manifest.record(rid, cfg, "failed", f"{type(exc).__name__}: {exc}")
            failed.append(rid)
            return
        results[rid] = res
        manifest.record(rid, cfg, "done")
        log.info("%s: done", rid)

    for rid, cfg, _ in pending:
        manifest.record(rid, cfg, "pending")
    if parallel > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = {pool.submit(run_job, cfgmod.to_dict(cfg), str(rdir)): (rid, cfg)
                       for rid, cfg, rdir in pending}
            for fut in as_completed(futures):
                rid, cfg = futures[fut]
                finish(rid, cfg, fut.result)
    else:
        for rid, cfg, rdir in pending:
            log.info("%s: training", rid)
            finish(rid, cfg, lambda: run_job(cfgmod.to_dict(cfg), str(rdir)))
    return results, sorted(failed)


def _read_curves(rdir: Path) -> list[dict]:
    with open(rdir / "curves.csv", newline="") as fh:
        return [{"epoch": int(r["epoch"]), "split": r["split"], "metric": r["metric"],
                 "value": float(r["value"])} for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(spec: ExperimentSpec, out: Path) -> int:
    log_, attrs, _ = generate(spec.synth)
    write_dataset(out, spec.synth, log_, attrs)
    write_json_atomic(out / "experiment.json", cfgmod.to_dict(spec))
    print(f"wrote {len(log_)} events for {spec.synth.n_users} users x {spec.synth.n_items} items to {out}")
    return EXIT_OK


def cmd_train(spec: ExperimentSpec, out: Path) -> int:
    cfg = run_config(spec, spec.run.model, spec.run.K, spec.run.seed)
    write_json_atomic(out / "experiment.json", cfgmod.to_dict(spec))
    res = run_job(cfgmod.to_dict(cfg), str(out))
    ndcg = [r["value"] for r in res["rows"] if r["metric"] == f"ndcg@{cfg.eval_k}"]
    print(f"{run_id(cfg)}: best epoch {res['best_epoch']}, test ndcg@{cfg.eval_k} "
          f"{np.mean(ndcg) if ndcg else float('nan'):.4f}")
    return EXIT_OK


def sweep_jobs(spec: ExperimentSpec) -> list[RunConfig]:
    jobs, seen = [], set()
    for model in spec.models:
        for K in spec.K_values:
            for seed in spec.seeds:
                cfg = run_config(spec, model, K, seed)
                if run_id(cfg) not in seen:  # dnn has no K: one run per seed
                    seen.add(run_id(cfg))
                    jobs.append(cfg)
    return jobs


def summarize(spec: ExperimentSpec, results: dict[str, dict]) -> dict:
    """Per (model, K, metric): mean over seeds of the day-averaged test value, with a 95% CI."""
    summary: dict = {}
    for model in spec.models:
        for K in spec.K_values:
            per_metric: dict[str, list[float]] = {}
            for seed in spec.seeds:
                res = results.get(run_id(run_config(spec, model, K, seed)))
                if res is None:
                    continue
                by_metric: dict[str, list[float]] = {}
                for r in res["rows"]:
                    by_metric.setdefault(r["metric"], []).append(r["value"])
                for metric, vals in by_metric.items():
                    per_metric.setdefault(metric, []).append(float(np.mean(vals)))
            for metric, vals in sorted(per_metric.items()):
                mean, half = aggregate_ci(vals) if len(vals) >= 2 else (float(np.mean(vals)), None)
                summary.setdefault(model, {}).setdefault(str(K), {})[metric] = {
                    "mean": mean, "ci95": half, "n_seeds": len(vals), "per_seed": vals}
    return summary


def cmd_sweep(spec: ExperimentSpec, out: Path, parallel: int = 1) -> int:
    write_json_atomic(out / "experiment.json", cfgmod.to_dict(spec))
    jobs = sweep_jobs(spec)
    results, failed = execute(jobs, out, parallel)
    rows = []
    for cfg in jobs:
        res = results.get(run_id(cfg))
        if res is not None:
            rows.extend((cfg.model, cfg.K, cfg.seed, r["day"], r["metric"], r["value"]) for r in res["rows"])
    rows.sort(key=lambda r: r[:5])
    write_csv(out / "metrics.csv", ["model", "K", "seed", "day", "metric", "value"], rows)
    write_json_atomic(out / "summary.json", summarize(spec, results))
    return _report(len(jobs), failed)


def attack_curves(spec: ExperimentSpec, results: dict[str, dict]) -> list[tuple]:
    key = f"ndcg@{spec.run.eval_k}"
    rows = []
    for model in spec.attack_models:
        for seed in spec.seeds:
            cfg = attack_config(spec, model, seed)
            res = results.get(run_id(cfg))
            if res is None:
                continue
            for c in res["curves"]:
                if c["split"] == "test" and c["metric"] == key:
                    rows.append((model, cfg.K, seed, c["epoch"], c["value"]))
    return rows


def attack_config(spec: ExperimentSpec, model: str, seed: int) -> RunConfig:
    train_cfg = dataclasses.replace(spec.run.train, epochs=spec.attack_epochs)
    return run_config(spec, model, spec.attack_K, seed, track_test=True, drop_test_edges=True, train=train_cfg)


def decay_summary(rows: list[tuple]) -> dict:
    """Peak minus final test NDCG per (model, seed), plus the median per model."""
    curves: dict[tuple, list] = {}
    for model, _, seed, epoch, value in rows:
        curves.setdefault((model, seed), []).append((epoch, value))
    out: dict = {}
    for (model, seed), pts in sorted(curves.items()):
        vals = [v for _, v in sorted(pts)]
        entry = out.setdefault(model, {"per_seed": {}})
        entry["per_seed"][str(seed)] = {"peak": max(vals), "final": vals[-1], "decay": max(vals) - vals[-1]}
    for entry in out.values():
        entry["median_decay"] = float(np.median([s["decay"] for s in entry["per_seed"].values()]))
    return out


def cmd_attack(spec: ExperimentSpec, out: Path, parallel: int = 1) -> int:
    write_json_atomic(out / "experiment.json", cfgmod.to_dict(spec))
    jobs = [attack_config(spec, m, s) for m in spec.attack_models for s in spec.seeds]
    results, failed = execute(jobs, out, parallel)
    rows = attack_curves(spec, results)
    write_csv(out / "attack.csv", ["model", "K", "seed", "epoch", f"test_ndcg@{spec.run.eval_k}"], rows)
    write_json_atomic(out / "attack_summary.json", decay_summary(rows))
    return _report(len(jobs), failed)


def cmd_evaluate(checkpoint: Path, out: Path, dataset: str | None, split: str) -> int:
    model, extra = load_checkpoint(checkpoint)
    if "run" not in extra:
        raise ConfigError(f"{checkpoint}: checkpoint carries no run configuration")
    cfg = cfgmod.from_dict(RunConfig, extra["run"], f"{checkpoint}:run")
    if dataset:
        cfg.dataset = dataset
    ds = load_dataset(cfg.dataset, cfg)
    days = getattr(ds.split, split)
    rows = evaluate(model, ds, days, hop_config(cfg), cfg.eval_k, empty_test=cfg.drop_test_edges)
    write_csv(out / "metrics.csv", ["day", "metric", "value"], [(r["day"], r["metric"], r["value"]) for r in rows])
    write_json_atomic(out / "config.json", cfgmod.to_dict(cfg))
    for metric in sorted({r["metric"] for r in rows}):
        print(f"{metric}\t{np.mean([r['value'] for r in rows if r['metric'] == metric]):.4f}")
    return EXIT_OK


def _report(n_jobs: int, failed: list[str]) -> int:
    if failed:
        print(f"{len(failed)} of {n_jobs} runs failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    print(f"{n_jobs} runs complete")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hopgraph", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(name, help_, out_default):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment JSON; defaults to the built-in benchmark")
        sp.add_argument("--out", default=out_default, help=f"output directory (default: {out_default})")
        return sp

    common("generate", "write a synthetic dataset", None)
    for name, help_, default in [("train", "train one model", "run"),
                                 ("sweep", "model x K x seed sweep", "sweep"),
                                 ("attack", "empty test-graph robustness runs", "attack")]:
        sp = common(name, help_, default)
        sp.add_argument("--dataset", help="dataset directory (overrides run.dataset)")
        sp.add_argument("--seeds", help="comma-separated seeds (overrides the config)")
        if name != "train":
            sp.add_argument("--parallel", type=int, default=1, help="worker processes")
    sp = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--dataset", help="dataset directory (defaults to the one used in training)")
    sp.add_argument("--split", choices=["valid", "test"], default="test")
    sp.add_argument("--out", default="eval")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args.checkpoint, Path(args.out), args.dataset, args.split)
        spec = resolve_spec(args)
        if getattr(args, "parallel", 1) < 1:
            raise ConfigError("--parallel: must be >= 1")
        if args.command == "generate":
            return cmd_generate(spec, Path(args.out or spec.run.dataset))
        if not (Path(spec.run.dataset) / "events.csv").exists():
            print(f"error: no dataset at {spec.run.dataset!r}; run 'hopgraph generate' first", file=sys.stderr)
            return EXIT_FAILED
        out = Path(args.out)
        if args.command == "train":
            return cmd_train(spec, out)
        if args.command == "sweep":
            return cmd_sweep(spec, out, args.parallel)
        return cmd_attack(spec, out, args.parallel)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("%s", traceback.format_exc())
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
