"""Metrics, per-output evaluation records, CSV/SVG reports."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .dynamics import MUSCLES

log = logging.getLogger(__name__)

OUTPUTS = ("angle",) + MUSCLES          # reporting order
METRIC_COLUMNS = ("method", "scenario", "heldout", "generic_ids", "seed", "fraction", "output",
                  "unit", "rmse", "cc", "nrmse", "split_hash")
TIMING_COLUMNS = ("method", "scenario", "heldout", "generic_ids", "seed", "fraction", "wall_seconds")
CURVE_COLUMNS = ("method", "scenario", "heldout", "generic_ids", "seed", "fraction", "iteration", "total", "l_data",
                 "l_phys") + tuple(f"loss_{o}" for o in MUSCLES + ("angle",))


class MetricDimensionError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise MetricDimensionError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size == 0:
        raise MetricDimensionError("empty input")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def pearson_cc(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if y.size < 2:
        raise MetricDimensionError("correlation needs at least two samples")
    dy, dh = y - y.mean(), yhat - yhat.mean()
    sy, sh = np.sqrt(np.sum(dy * dy)), np.sqrt(np.sum(dh * dh))
    if sy == 0 or sh == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    return float(np.clip(np.sum(dy * dh) / (sy * sh), -1.0, 1.0))


def normalized_rmse(y, yhat) -> float:
    """RMSE divided by the ground-truth range."""
    y, yhat = _pair(y, yhat)
    span = float(y.max() - y.min())
    if span <= 0:
        raise NormalizationError("ground truth has zero range")
    return rmse(y, yhat) / span


@dataclass
class EvaluationRecord:
    method: str
    scenario: str
    heldout: int
    generic_ids: list
    seed: int = 0
    fraction: float = 1.0
    rmse: dict = field(default_factory=dict)     # output -> value (angle in deg, forces in N)
    cc: dict = field(default_factory=dict)
    nrmse: dict = field(default_factory=dict)
    split_hash: str = ""
    wall_seconds: float = 0.0
    traces: dict = field(default_factory=dict)   # output -> (truth, prediction)
    loss_curve: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for o in OUTPUTS:
            out.append({
                "method": self.method, "scenario": self.scenario, "heldout": self.heldout,
                "generic_ids": " ".join(str(i) for i in self.generic_ids), "seed": self.seed,
                "fraction": self.fraction, "output": o, "unit": "deg" if o == "angle" else "N",
                "rmse": self.rmse[o], "cc": self.cc[o], "nrmse": self.nrmse[o],
                "split_hash": self.split_hash,
            })
        return out


def score(truth: np.ndarray, pred: np.ndarray):
    """Per-output metrics for ``T x (N+1)`` arrays ordered ``[F_1..F_N, theta]``."""
    n = truth.shape[1] - 1
    cols = {"angle": n, **{m: j for j, m in enumerate(MUSCLES[:n])}}
    r, c, nr, traces = {}, {}, {}, {}
    for name, j in cols.items():
        y, yh = truth[:, j], pred[:, j]
        if name == "angle":
            y, yh = np.degrees(y), np.degrees(yh)
        r[name] = rmse(y, yh)
        try:
            c[name] = pearson_cc(y, yh)
        except UndefinedCorrelationError:
            log.warning("constant prediction or truth for %s; CC recorded as NaN", name)
            c[name] = float("nan")
        try:
            nr[name] = normalized_rmse(y, yh)
        except NormalizationError:
            nr[name] = float("nan")
        traces[name] = (y, yh)
    return r, c, nr, traces


def evaluate(net, target, method: str, scenario: str, generic_ids, wall_seconds=0.0, seed=0,
             fraction=1.0) -> EvaluationRecord:
    """Score ``net`` on the test split of ``target`` (a SubjectData)."""
    from .model import predict
    batch = target.concat("test")
    pred = predict(net, batch.inputs)
    r, c, nr, traces = score(batch.targets, pred)
    return EvaluationRecord(method, scenario, target.id, list(generic_ids), seed, fraction,
                            r, c, nr, target.split_hash, wall_seconds, traces)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(records: list[EvaluationRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rec in records:
        for row in rec.rows():
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        for k in ("rmse", "cc", "nrmse", "fraction"):
            row[k] = float(row[k])
        row["heldout"], row["seed"] = int(row["heldout"]), int(row["seed"])
        rows.append(row)
    return rows


def timing_csv(records: list[EvaluationRecord]) -> str:
    """Wall-clock seconds per run. Kept apart from metrics.csv, which must be
    reproducible byte for byte."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in records:
        w.writerow([r.method, r.scenario, r.heldout, " ".join(map(str, r.generic_ids)), r.seed,
                    repr(r.fraction), repr(r.wall_seconds)])
    return buf.getvalue()


def curves_csv(records: list[EvaluationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for rec in records:
        c = rec.loss_curve
        for i in range(len(c.get("iteration", []))):
            per = [c.get(f"out{j}", [math.nan] * (i + 1))[i] for j in range(len(MUSCLES) + 1)]
            w.writerow([rec.method, rec.scenario, rec.heldout, " ".join(map(str, rec.generic_ids)),
                        rec.seed, repr(rec.fraction), c["iteration"][i],
                        repr(c["total"][i]), repr(c["l_data"][i]), repr(c["l_phys"][i])]
                       + [repr(v) for v in per])
    return buf.getvalue()


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def trace_svg(output: str, records: list[EvaluationRecord], width=800, height=300,
              max_points=600) -> str:
    """Self-contained SVG: ground truth plus one polyline per method."""
    series = []
    if records:
        truth = records[0].traces[output][0]
        series.append(("ground truth", truth, "#000000"))
        for k, rec in enumerate(records):
            series.append((rec.method, rec.traces[output][1], _PALETTE[k % len(_PALETTE)]))
    values = np.concatenate([s[1] for s in series]) if series else np.zeros(1)
    lo, hi = float(values.min()), float(values.max())
    hi = hi if hi > lo else lo + 1.0
    pad = 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<title>{escape(output)}</title>',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, (name, y, color) in enumerate(series):
        n = len(y)
        step = max(1, n // max_points)
        idx = np.arange(0, n, step)
        xs = pad + (width - 2 * pad) * idx / max(n - 1, 1)
        ys = height - pad - (height - 2 * pad) * (y[idx] - lo) / (hi - lo)
        pts = " ".join(f"{x:.2f},{v:.2f}" for x, v in zip(xs, ys))
        parts.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
                     f'stroke-width="1" points="{pts}"/>')
        parts.append(f'<text x="{pad + 5}" y="{14 + 12 * k}" font-size="10" fill="{color}">'
                     f'{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_reports(records: list[EvaluationRecord], out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in (("metrics.csv", metrics_csv(records)),
                           ("loss_curves.csv", curves_csv(records)),
                           ("timing.csv", timing_csv(records))):
            (out / name).write_text(text)
            written.append(out / name)
        if records:
            # one figure per output and held-out subject/seed: first record of each method
            first = {}
            for rec in records:
                first.setdefault(rec.method, rec)
            chosen = [r for r in first.values()
                      if r.heldout == records[0].heldout and r.traces]
            for o in OUTPUTS:
                p = out / f"trace_{o}.svg"
                p.write_text(trace_svg(o, chosen))
                written.append(p)
        return written
    except OSError as exc:
        raise OSError(f"failed writing reports under {out}: {exc}") from exc
