"""Command line entry point: run, sweep, report, verify, gen-synthetic.

Exit codes: 0 ok, 1 verification failure (or failed sweep points),
2 configuration error, 3 training aborted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import records as rec
from .baselines import METHODS as BASELINE_METHODS
from .baselines import BaselineConfig, train_baseline
from .bilevel import BilevelConfig, ConfigError, train
from .data_io import CsvSchema, DataError, GroupedDataset, SyntheticSpec, gen_synthetic, load_csv, load_dataset, save_dataset
from .metrics import MetricError, group_label_pearson
from .models import Head, ReprNet, save_params

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "IMPLICIT_ALIGN_OUTPUT_ROOT"
METHODS = ("implicit",) + BASELINE_METHODS
RUN_FILES = ("records.csv", "timings.csv", "lambda.ckpt", "head0.ckpt", "head1.ckpt")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    """A parsed run config. See ``configs/*.json`` for documented examples."""

    method: str
    data: dict
    model: dict
    train: dict
    seed: int = 0
    output_dir: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        errors = []
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {"method", "data", "model", "train", "seed", "output_dir", "description"}
        unknown = sorted(set(raw) - known)
        if unknown:
            errors.append(f"unknown top-level fields: {unknown}")
        method = raw.get("method")
        if method not in METHODS:
            errors.append(f"method: must be one of {list(METHODS)}, got {method!r}")
        data = raw.get("data")
        if not isinstance(data, dict) or len({"synthetic", "csv", "dataset"} & set(data)) != 1:
            errors.append("data: must contain exactly one of 'synthetic', 'csv' or 'dataset'")
        elif "csv" in data and "schema" not in data:
            errors.append("data.schema: required with data.csv")
        model = raw.get("model", {})
        if not isinstance(model, dict) or "arch" not in model:
            errors.append("model.arch: required (list of layer widths; a null first entry means the input width)")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            errors.append("seed: must be an integer >= 0")
        train_cfg = raw.get("train", {})
        if not isinstance(train_cfg, dict):
            errors.append("train: must be an object")
            train_cfg = {}
        if "seed" in train_cfg:
            errors.append("train.seed: set the top-level seed instead")
        if errors:
            raise ConfigError("; ".join(errors))
        cfg = cls(method, dict(data), dict(model), dict(train_cfg), seed, raw.get("output_dir"), base_dir or Path.cwd())
        cfg.trainer_config()  # validate hyperparameters up front
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "data": self.data, "model": self.model, "train": self.train,
            "seed": self.seed, "output_dir": self.output_dir,
        }

    def trainer_config(self):
        if self.method == "implicit":
            return BilevelConfig.from_dict({**self.train, "seed": self.seed})
        return BaselineConfig.from_dict({**self.train, "method": self.method, "seed": self.seed})

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def dataset(self) -> GroupedDataset:
        d = self.data
        try:
            if "synthetic" in d:
                spec = dict(d["synthetic"])
                spec.setdefault("seed", self.seed)
                return gen_synthetic(SyntheticSpec.from_dict(spec))
            if "dataset" in d:
                return load_dataset(self._path(d["dataset"]))
            schema = d["schema"]
            schema = CsvSchema(**schema) if isinstance(schema, dict) else CsvSchema.from_json(self._path(schema))
            return load_csv(
                self._path(d["csv"]), schema, d.get("fractions", [0.7, 0.1, 0.2]), d.get("split_seed", 0),
                d.get("standardize", True),
            )
        except (TypeError, DataError) as exc:
            raise ConfigError(f"data: {exc}") from None

    def network(self, input_dim: int) -> ReprNet:
        m = self.model
        arch = list(m["arch"])
        if arch and arch[0] is None:
            arch[0] = input_dim
        if len(arch) < 2 or any(not isinstance(a, int) or a < 1 for a in arch):
            raise ConfigError(f"model.arch: need >= 2 positive integer widths, got {m['arch']}")
        if arch[0] != input_dim:
            raise ConfigError(f"model.arch: input width {arch[0]} does not match dataset width {input_dim}")
        extra = sorted(set(m) - {"arch", "activation", "final_activation", "norm_cap", "init_seed"})
        if extra:
            raise ConfigError(f"model: unknown fields {extra}")
        try:
            return ReprNet.init(
                arch, seed=m.get("init_seed", self.seed), activation=m.get("activation", "relu"),
                final_activation=m.get("final_activation", "linear"), norm_cap=m.get("norm_cap"),
            )
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def config_hash(self) -> str:
        return rec.stable_hash(self.to_dict())

    def run_dir(self) -> Path:
        if self.output_dir:
            return self._path(self.output_dir)
        return output_root() / f"{self.method}-{self.config_hash()}"


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, run_dir: Path):
        super().__init__(message)
        self.run_dir = run_dir


def _write_manifest(out: Path, cfg: RunConfig, dataset, extra: dict):
    files = sorted(f for f in RUN_FILES if (out / f).exists())
    try:
        pearson = group_label_pearson(dataset)
    except MetricError:
        pearson = float("nan")
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "dataset": {
            "source": dataset.source,
            "data_hash": dataset.content_hash[:16],
            "split_hash": dataset.split_hash(),
            "n": dataset.n,
            "dim": dataset.dim,
            "task": dataset.task,
            "group_label_pearson": pearson,
        },
        "version": __version__,
        "files": files + ["manifest.json"],
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    return manifest


def execute(cfg: RunConfig, out: Path | None = None, log=None) -> dict:
    """Train per ``cfg``, write the run directory and return its manifest.

    Raises ConfigError on bad input and TrainingAborted (after flushing the
    records gathered so far) when training fails.
    """
    out = Path(out) if out is not None else cfg.run_dir()
    dataset = cfg.dataset()
    net = cfg.network(dataset.dim)
    tcfg = cfg.trainer_config()
    head = Head.zeros(net.embed_dim, dataset.task)
    out.mkdir(parents=True, exist_ok=True)
    for name in RUN_FILES + ("manifest.json",):
        (out / name).unlink(missing_ok=True)

    def on_epoch(r):
        if log is not None:
            log(f"epoch {r.epoch:4d}  perf_test {r.perf_test:.4f}  suf_test {r.suf_test:.4f}  grad {r.grad_norm:.3e}")

    t0 = time.perf_counter()
    try:
        if cfg.method == "implicit":
            result = train(net, head, dataset, tcfg, on_epoch=on_epoch)
        else:
            result = train_baseline(net, head, dataset, tcfg, on_epoch=on_epoch)
    except Exception as exc:
        partial = getattr(exc, "partial_records", [])
        (out / "records.csv").write_text(rec.records_to_csv(partial))
        (out / "timings.csv").write_text(rec.timings_to_csv(partial))
        msg = f"{type(exc).__name__}: {exc}"
        _write_manifest(out, cfg, dataset, {
            "status": "aborted", "error": msg, "epochs_completed": len(partial),
            "wall_seconds": time.perf_counter() - t0,
        })
        raise TrainingAborted(msg, out) from exc
    wall = time.perf_counter() - t0
    (out / "records.csv").write_text(rec.records_to_csv(result.records))
    (out / "timings.csv").write_text(rec.timings_to_csv(result.records))
    save_params(out / "lambda.ckpt", result.net.params)
    save_params(out / "head0.ckpt", result.head0.params)
    save_params(out / "head1.ckpt", result.head1.params)
    final = {k: v for k, v in vars(result.records[-1]).items()} if result.records else {}
    return _write_manifest(out, cfg, dataset, {
        "status": "ok", "epochs_completed": len(result.records), "wall_seconds": wall, "final": final,
    })


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


@dataclass
class SweepSpec:
    method: str
    values: list[float]
    repetitions: int
    base: dict
    workers: int = 1
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        errors = []
        known = {"method", "values", "repetitions", "base", "workers", "output_dir", "description"}
        unknown = sorted(set(raw) - known)
        if unknown:
            errors.append(f"unknown sweep fields: {unknown}")
        if raw.get("method") not in METHODS:
            errors.append(f"method: must be one of {list(METHODS)}")
        values = raw.get("values")
        if not isinstance(values, list) or not values or not all(isinstance(v, (int, float)) for v in values):
            errors.append("values: need a non-empty list of numbers")
        reps = raw.get("repetitions", 1)
        if not isinstance(reps, int) or reps < 1:
            errors.append("repetitions: must be an integer >= 1")
        workers = raw.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            errors.append("workers: must be an integer >= 1")
        if not isinstance(raw.get("base"), dict):
            errors.append("base: a run config object is required")
        if errors:
            raise ConfigError("; ".join(errors))
        return cls(raw["method"], [float(v) for v in values], reps, raw["base"], workers, raw.get("output_dir"))

    @property
    def coeff_field(self) -> str:
        return "kappa" if self.method == "implicit" else "reg_coeff"

    def point_config(self, value: float, rep: int) -> dict:
        base = json.loads(json.dumps(self.base))
        base["method"] = self.method
        base.setdefault("train", {})[self.coeff_field] = value
        base["seed"] = int(base.get("seed", 0)) + rep
        base.pop("output_dir", None)
        return base


def _run_point(args):
    raw, base_dir, out = args
    try:
        manifest = execute(RunConfig.from_dict(raw, Path(base_dir)), Path(out))
        return {"ok": True, "final": manifest["final"], "dir": str(out)}
    except Exception as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "dir": str(out)}


def _std(vals) -> float:
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def pareto_front(points, higher_is_better: bool) -> list[int]:
    """Indices of points not dominated in (performance, suf gap)."""
    keyed = [((-p if higher_is_better else p), s) for p, s in points]
    front = []
    for i, (a, b) in enumerate(keyed):
        dominated = any(
            (c <= a and d <= b) and (c < a or d < b) for j, (c, d) in enumerate(keyed) if j != i
        )
        if not dominated:
            front.append(i)
    return front


def sweep(spec: SweepSpec, base_dir: Path, out: Path, log=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i, v in enumerate(spec.values):
        for r in range(spec.repetitions):
            jobs.append((spec.point_config(v, r), str(base_dir), str(out / "runs" / f"v{i}_r{r}")))
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    rows, failures, task = [], [], None
    for i, v in enumerate(spec.values):
        done = results[i * spec.repetitions : (i + 1) * spec.repetitions]
        for res in done:
            if not res["ok"]:
                failures.append({"value": v, "dir": res["dir"], "error": res["error"]})
                if log:
                    log(f"point value={v} failed: {res['error']}")
        finals = [res["final"] for res in done if res["ok"]]
        if finals:
            task = finals[0]["task"]
        col = lambda k: [f[k] for f in finals]
        rows.append({
            "value": v,
            "n": len(finals),
            "failed": len(done) - len(finals),
            "perf_mean": float(np.mean(col("perf_test"))) if finals else float("nan"),
            "perf_std": _std(col("perf_test")),
            "suf_mean": float(np.mean(col("suf_test"))) if finals else float("nan"),
            "suf_std": _std(col("suf_test")),
            "head_distance_mean": float(np.mean(col("head_distance"))) if finals else float("nan"),
        })
    columns = list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: rec._fmt(v) for k, v in row.items()})
    (out / "tradeoff.csv").write_text(buf.getvalue())
    ok = [i for i, row in enumerate(rows) if row["n"] > 0]
    front = pareto_front([(rows[i]["perf_mean"], rows[i]["suf_mean"]) for i in ok], task == "binary_classification")
    pareto = {
        "method": spec.method,
        "coefficient": spec.coeff_field,
        "performance": "accuracy" if task == "binary_classification" else "mse",
        "front": [rows[ok[k]] for k in front],
        "failures": failures,
    }
    (out / "pareto.json").write_text(json.dumps(pareto, indent=2, default=float) + "\n")
    return {"rows": rows, "pareto": pareto, "failures": failures}


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

REPORT_COLUMNS = (
    "run", "method", "coeff", "dataset", "data_hash", "perf_test", "suf_test", "head_distance", "grad_norm",
    "group_label_pearson",
)


def report(dirs) -> tuple[list[dict], list[str]]:
    rows, warnings, seen = [], [], {}
    for d in dirs:
        d = Path(d)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
            records = rec.records_from_csv((d / "records.csv").read_text())
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ConfigError(f"{d}: not a run directory ({exc})") from None
        ds = manifest["dataset"]
        last = records[-1] if records else None
        rows.append({
            "run": str(d),
            "method": manifest["config"]["method"],
            "coeff": last.coeff if last else float("nan"),
            "dataset": ds["source"],
            "data_hash": ds["data_hash"],
            "perf_test": last.perf_test if last else float("nan"),
            "suf_test": last.suf_test if last else float("nan"),
            "head_distance": last.head_distance if last else float("nan"),
            "grad_norm": last.grad_norm if last else float("nan"),
            "group_label_pearson": ds["group_label_pearson"],
        })
        prev = seen.setdefault(ds["source"], (ds["data_hash"], str(d)))
        if prev[0] != ds["data_hash"]:
            warnings.append(
                f"warning: dataset {ds['source']!r} has data hash {ds['data_hash']} in {d} "
                f"but {prev[0]} in {prev[1]}"
            )
    return rows, warnings


def report_text(rows, warnings) -> str:
    cells = [[str(c) for c in REPORT_COLUMNS]]
    for r in rows:
        cells.append([f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in REPORT_COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines + list(warnings)) + "\n"


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: rec._fmt(v) for k, v in r.items()})
    return buf.getvalue()


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="implicit-align", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="run directory (overrides the config)")
    r.add_argument("--quiet", action="store_true")
    s = sub.add_parser("sweep", help="sweep a coefficient over repetitions")
    s.add_argument("--spec", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    rp = sub.add_parser("report", help="compare run directories")
    rp.add_argument("dirs", nargs="+")
    rp.add_argument("--out", help="directory for report.csv and report.txt")
    v = sub.add_parser("verify", help="run the oracle suite")
    v.add_argument("--filter")
    v.add_argument("--json", action="store_true", help="print one JSON report per line")
    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset file")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    return p


def _err(msg: str):
    print(msg, file=sys.stderr)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = RunConfig.load(args.config)
            log = None if args.quiet else print
            try:
                manifest = execute(cfg, Path(args.out) if args.out else None, log)
            except TrainingAborted as exc:
                _err(f"training aborted: {exc}; partial outputs in {exc.run_dir}")
                return EXIT_ABORT
            out = Path(args.out) if args.out else cfg.run_dir()
            print(f"run directory: {out}")
            f = manifest["final"]
            print(f"final perf_test {f['perf_test']:.4f}  suf_test {f['suf_test']:.4f}  head_distance {f['head_distance']:.4f}")
            return EXIT_OK

        if args.command == "sweep":
            raw = _load_json(args.spec)
            spec = SweepSpec.from_dict(raw)
            if args.workers:
                spec.workers = args.workers
            base_dir = Path(args.spec).parent
            RunConfig.from_dict(spec.point_config(spec.values[0], 0), base_dir)
            if args.out:
                out = Path(args.out)
            elif spec.output_dir:
                out = base_dir / spec.output_dir
            else:
                out = output_root() / f"sweep-{spec.method}-{rec.stable_hash(raw)}"
            res = sweep(spec, base_dir, out, log=_err)
            print((out / "tradeoff.csv").read_text(), end="")
            print(f"sweep directory: {out}")
            return EXIT_VERIFY if res["failures"] else EXIT_OK

        if args.command == "report":
            rows, warnings = report(args.dirs)
            for w in warnings:
                _err(w)
            text = report_text(rows, warnings)
            print(text, end="")
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "report.csv").write_text(report_csv(rows))
                (out / "report.txt").write_text(text)
            return EXIT_OK

        if args.command == "verify":
            from .oracle import run_suite

            reports = run_suite(args.filter)
            if not reports:
                _err(f"no check matches filter {args.filter!r}")
                return EXIT_CONFIG
            for r in reports:
                print(r.to_json() if args.json else r.summary())
            failed = [r.name for r in reports if not r.passed]
            if failed:
                _err("failed: " + ", ".join(failed))
                return EXIT_VERIFY
            print(f"all {len(reports)} checks passed")
            return EXIT_OK

        if args.command == "gen-synthetic":
            spec = SyntheticSpec.from_dict(_load_json(args.spec))
            ds = gen_synthetic(spec)
            digest = save_dataset(ds, args.out)
            print(f"wrote {args.out} ({ds.n} rows, {ds.dim} features, hash {digest[:16]})")
            return EXIT_OK
    except (ConfigError, DataError) as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
