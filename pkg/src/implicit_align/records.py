"""Per-epoch run records, evaluation on every split, and stable hashing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .metrics import MetricError, PredictionSet, head_distance, performance, suf_gap

SPLITS = ("train", "val", "test")
# wall time is kept out of records.csv so reruns are byte-identical
TIMING_FIELDS = ("wall_seconds",)


def stable_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunRecord:
    epoch: int
    method: str
    coeff: float
    task: str
    perf_train: float
    perf_val: float
    perf_test: float
    suf_train: float
    suf_val: float
    suf_test: float
    head_distance: float
    grad_norm: float
    batch_grad_norm: float
    inner_steps: float
    cg_iters: float
    objective: float
    wall_seconds: float
    config_hash: str
    data_hash: str
    split_hash: str
    seed: int

    def perf(self, split: str = "test") -> float:
        return getattr(self, f"perf_{split}")

    def suf(self, split: str = "test") -> float:
        return getattr(self, f"suf_{split}")


RECORD_FIELDS = tuple(f.name for f in fields(RunRecord))
CSV_FIELDS = tuple(f for f in RECORD_FIELDS if f not in TIMING_FIELDS)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records, columns=CSV_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def timings_to_csv(records) -> str:
    return records_to_csv(records, ("epoch",) + TIMING_FIELDS)


def records_from_csv(text: str, timings: str | None = None) -> list[RunRecord]:
    types = {f.name: f.type for f in fields(RunRecord)}
    wall = {}
    if timings:
        for row in csv.DictReader(io.StringIO(timings)):
            wall[int(row["epoch"])] = float(row["wall_seconds"])
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        vals = {}
        for name in RECORD_FIELDS:
            if name == "wall_seconds":
                continue
            raw = row[name]
            t = types[name]
            vals[name] = int(raw) if t == "int" else float(raw) if t == "float" else raw
        vals["wall_seconds"] = wall.get(vals["epoch"], float("nan"))
        out.append(RunRecord(**vals))
    return out


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def evaluate(net, heads, dataset, m: int | None = None) -> dict:
    """Performance and sufficiency gap on every split.

    ``heads`` is ``(head0, head1)``; group g's rows are scored by head g.
    """
    out = {}
    for split in SPLITS:
        parts = []
        for g in (0, 1):
            x, y = dataset.part(split, g)
            parts.append((y, heads[g].scores(net.transform(x)) if y.size else np.empty(0)))
        try:
            preds = PredictionSet.from_groups(parts[0], parts[1], dataset.task)
            out[f"perf_{split}"] = performance(preds)[0]
            out[f"suf_{split}"] = suf_gap(preds, m).value if m else suf_gap(preds).value
        except MetricError:
            out[f"perf_{split}"] = float("nan")
            out[f"suf_{split}"] = float("nan")
    out["head_distance"] = head_distance(heads[0], heads[1])
    return out


def predictions(net, heads, dataset, split: str = "test") -> PredictionSet:
    parts = []
    for g in (0, 1):
        x, y = dataset.part(split, g)
        parts.append((y, heads[g].scores(net.transform(x))))
    return PredictionSet.from_groups(parts[0], parts[1], dataset.task)


def epoch_record(
    epoch: int,
    method: str,
    net,
    heads,
    dataset,
    stats,
    wall: float,
    cfg,
    coeff: float | None = None,
    grad_norm: float | None = None,
) -> RunRecord:
    """Summarise one epoch.

    ``heads`` are the (head0, head1) used for reporting; ``grad_norm`` is the
    outer-gradient norm at the epoch's final net on the full train split
    (``batch_grad_norm`` is the mean over the epoch's mini-batches).
    """
    ev = evaluate(net, heads, dataset)
    cfg_dict = cfg.to_dict()
    if coeff is None:
        coeff = cfg_dict.get("kappa", cfg_dict.get("reg_coeff", 0.0))

    def mean(attr):
        vals = [getattr(s, attr) for s in stats]
        return float(np.mean(vals)) if vals else float("nan")

    return RunRecord(
        epoch=epoch,
        method=method,
        coeff=float(coeff),
        task=dataset.task,
        grad_norm=float(grad_norm) if grad_norm is not None else mean("grad_norm"),
        batch_grad_norm=mean("grad_norm"),
        inner_steps=mean("inner_steps"),
        cg_iters=mean("cg_iters"),
        objective=mean("objective"),
        wall_seconds=float(wall),
        config_hash=stable_hash({"method": method, **cfg_dict}),
        data_hash=dataset.content_hash[:16],
        split_hash=dataset.split_hash(),
        seed=int(cfg_dict.get("seed", 0)),
        **ev,
    )


def is_finite_record(r: RunRecord) -> bool:
    return all(math.isfinite(getattr(r, k)) for k in ("perf_test", "suf_test", "grad_norm"))
