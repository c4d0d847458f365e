"""Plot-ready CSV and JSON-lines reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .experiment import RejectionCurve, ResultRow, aggregate
from .latent_tests import TestResult

CURVE_HEADER = ["method", "regime", "delta", "rate", "stderr", "runs"]
SUMMARY_HEADER = ["dataset", "metric", "method", "mean", "std"]


def _num(x: float) -> str:
    return repr(float(x))


def curve_rows(curves: list[RejectionCurve]) -> list[list[str]]:
    out = []
    for c in curves:
        for d, r, e, n in zip(c.deltas, c.rates, c.stderrs, c.runs):
            out.append([c.method, c.regime, _num(d), _num(r), _num(e), str(n)])
    return out


def summary_rows(curves: list[RejectionCurve], dataset: str, type1_delta=1.0, type2_delta=0.5) -> list[list[str]]:
    """Type I: rejection rate under the null at ``type1_delta``; Type II: one minus the
    rejection rate on the boundary path at ``type2_delta``. ``std`` is the binomial
    standard error."""
    out = []
    for metric, regime, delta in (("Type I", "null", type1_delta), ("Type II", "boundary", type2_delta)):
        for c in curves:
            if c.regime != regime or delta not in c.deltas:
                continue
            i = c.deltas.index(delta)
            rate = c.rates[i] if metric == "Type I" else 1.0 - c.rates[i]
            out.append([dataset, metric, c.method, _num(rate), _num(c.stderrs[i])])
    return out


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_report(
    curves: list[RejectionCurve],
    results: list[ResultRow],
    out_dir,
    dataset: str = "",
    type1_delta: float = 1.0,
    type2_delta: float = 0.5,
) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    paths = {"curves": out / "curves.csv", "results": out / "results.jsonl", "summary": out / "summary.csv"}
    _write_csv(paths["curves"], CURVE_HEADER, curve_rows(curves))
    try:
        with open(paths["results"], "w") as fh:
            for row in results:
                fh.write(json.dumps(row.to_dict()) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {paths['results']}: {exc}") from exc
    _write_csv(paths["summary"], SUMMARY_HEADER, summary_rows(curves, dataset, type1_delta, type2_delta))
    return paths


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                rows.append(ResultRow(d["run"], d["method"], d["regime"], d["delta"], TestResult(**d["test"])))
    return rows


def curves_from_results(rows: list[ResultRow]) -> list[RejectionCurve]:
    """Rebuild curves from stored rows, keeping first-seen order of methods, regimes and deltas."""
    uniq = lambda xs: list(dict.fromkeys(xs))
    return aggregate(rows, uniq(r.method for r in rows), uniq(r.regime for r in rows), uniq(r.delta for r in rows))
