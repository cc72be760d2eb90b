"""Aggregate ND-JSON run logs into tables, CDF data and correlation data."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .engine import METRICS, SCHEMA_VERSION, spearman
from .stats import wilcoxon_signed_rank

# Direction of improvement per metric: True if larger is better.
HIGHER_IS_BETTER = {"approx_disp": False, "cos_sim": True, "continuity": False, "momentum": False}
PAIRINGS = ("sample", "repetition")
VOLATILE_FIELDS = ("wall_clock_s",)


class ReportError(ValueError):
    pass


def expand_log_paths(paths: Iterable) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.ndjson")) if p.is_dir() else [p])
    return out


def read_log(path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ReportError(f"{path}: cannot read log ({exc.strerror})") from None
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return records


def load_logs(paths: Sequence) -> list[dict]:
    """Records from all logs, after checking that the logs share one schema."""
    paths = expand_log_paths(paths)
    if not paths:
        raise ReportError("no run logs given")
    reference = None
    records = []
    for path in paths:
        recs = read_log(path)
        if not recs:
            raise ReportError(f"{path}: log is empty")
        for rec in recs:
            signature = (rec.get("schema_version"), tuple(sorted(rec)),
                         tuple(rec.get("per_sample", {}).get("test_ids", ())))
            if reference is None:
                reference = (path, signature)
            elif signature != reference[1]:
                raise ReportError(f"inconsistent log schemas: {reference[0]} and {path} differ "
                                  "(schema version, record fields or test ids)")
        records.extend(recs)
    if reference[1][0] != SCHEMA_VERSION:
        raise ReportError(f"{reference[0]}: unsupported schema version {reference[1][0]}")
    return records


def _groups(records: Sequence[dict]) -> dict[tuple[str, int], list[dict]]:
    groups = defaultdict(list)
    for rec in records:
        groups[(rec["strategy"], rec["labeled_count"])].append(rec)
    return dict(sorted(groups.items()))


def pooled_values(recs: Sequence[dict], metric: str) -> np.ndarray:
    return np.concatenate([np.asarray(r["per_sample"][metric], dtype=np.float64) for r in recs])


def paired_values(records: Sequence[dict], strategy_a: str, strategy_b: str, labeled_count: int,
                  metric: str = "approx_disp", pairing: str = "sample") -> tuple[np.ndarray, np.ndarray]:
    """Matched metric values of two strategies at one labeled count.

    ``pairing="sample"`` pairs per test shape within each repetition seed;
    ``pairing="repetition"`` pairs the per-seed means.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}")

    def keyed(strategy):
        out = {}
        for rec in records:
            if rec["strategy"] != strategy or rec["labeled_count"] != labeled_count:
                continue
            vals = rec["per_sample"][metric]
            if pairing == "repetition":
                out[(rec["seed"],)] = float(np.mean(vals))
            else:
                for sid, v in zip(rec["per_sample"]["test_ids"], vals):
                    out[(rec["seed"], sid)] = float(v)
        return out

    a, b = keyed(strategy_a), keyed(strategy_b)
    keys = sorted(set(a) & set(b))
    return np.array([a[k] for k in keys]), np.array([b[k] for k in keys])


def table_rows(records: Sequence[dict], pairing: str = "sample", alpha: float = 0.05) -> list[dict]:
    """One row per (strategy, labeled count): pooled mean and population std.

    A metric's ``_sig`` column is "*" on the best strategy's row when a
    Wilcoxon test against the runner-up at that labeled count gives p < alpha.
    """
    groups = _groups(records)
    rows = {}
    for (strategy, count), recs in groups.items():
        row = {"strategy": strategy, "labeled_count": count,
               "repetitions": len({r["seed"] for r in recs})}
        for m in METRICS:
            v = pooled_values(recs, m)
            row[f"{m}_mean"] = float(v.mean())
            row[f"{m}_std"] = float(v.std())
            row[f"{m}_sig"] = ""
            row[f"{m}_p"] = ""
        rows[(strategy, count)] = row
    for count in sorted({c for _, c in rows}):
        at = [r for (s, c), r in rows.items() if c == count]
        if len(at) < 2:
            continue
        for m in METRICS:
            ranked = sorted(at, key=lambda r: r[f"{m}_mean"], reverse=HIGHER_IS_BETTER[m])
            best, second = ranked[0], ranked[1]
            a, b = paired_values(records, best["strategy"], second["strategy"], count, m, pairing)
            try:
                res = wilcoxon_signed_rank(a, b)
            except ValueError:
                continue
            best[f"{m}_p"] = res.p_value
            if res.p_value < alpha:
                best[f"{m}_sig"] = "*"
    return list(rows.values())


def table_columns() -> list[str]:
    cols = ["strategy", "labeled_count", "repetitions"]
    for m in METRICS:
        cols += [f"{m}_mean", f"{m}_std", f"{m}_sig", f"{m}_p"]
    return cols


def cdf_data(records: Sequence[dict], metric: str = "approx_disp") -> dict:
    """Sorted pooled per-sample values per strategy and labeled count."""
    out = defaultdict(dict)
    for (strategy, count), recs in _groups(records).items():
        out[strategy][str(count)] = np.sort(pooled_values(recs, metric)).tolist()
    return dict(out)


def correlation_data(records: Sequence[dict]) -> dict:
    """(query score, true disparity) pairs with Spearman rho per query round.

    ``final_round_median_spearman`` is the median over repetitions of rho at
    each strategy's last round.
    """
    out = {}
    for strategy in sorted({r["strategy"] for r in records}):
        rounds = []
        for rec in sorted((r for r in records if r["strategy"] == strategy),
                          key=lambda r: (r["repetition"], r["round"])):
            q = rec.get("query")
            if not q:
                continue
            ids = sorted(q["scores"])
            pairs = [[q["scores"][i], q["true_disparity"][i]] for i in ids]
            try:
                rho = spearman([p[0] for p in pairs], [p[1] for p in pairs])
            except ValueError:
                rho = None
            rounds.append({"repetition": rec["repetition"], "seed": rec["seed"],
                           "round": rec["round"], "labeled_count": rec["labeled_count"],
                           "spearman": rho, "ids": ids, "pairs": pairs})
        final = max((r["round"] for r in rounds), default=None)
        rhos = [r["spearman"] for r in rounds if r["round"] == final and r["spearman"] is not None]
        out[strategy] = {"rounds": rounds, "final_round": final,
                         "final_round_spearman": rhos,
                         "final_round_median_spearman": float(np.median(rhos)) if rhos else None}
    return out


def median_curve(records: Sequence[dict], strategy: str, metric: str = "approx_disp") -> dict[int, float]:
    """Median of the pooled per-sample metric per labeled count."""
    return {count: float(np.median(pooled_values(recs, metric)))
            for (s, count), recs in _groups(records).items() if s == strategy}


def write_report(records: Sequence[dict], out_dir, pairing: str = "sample",
                 alpha: float = 0.05) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = table_rows(records, pairing, alpha)
    paths = {"table": out / "table.csv", "cdf": out / "cdf.json",
             "correlation": out / "correlation.json"}
    with open(paths["table"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=table_columns())
        writer.writeheader()
        writer.writerows(rows)
    paths["cdf"].write_text(json.dumps(cdf_data(records), sort_keys=True))
    paths["correlation"].write_text(json.dumps(correlation_data(records), sort_keys=True))
    return paths


def format_table(rows: Sequence[dict]) -> str:
    lines = ["strategy  labeled  " + "  ".join(f"{m:>22s}" for m in METRICS)]
    for r in rows:
        cells = [f"{r[f'{m}_mean']:.4g} ± {r[f'{m}_std']:.3g}{r[f'{m}_sig']}" for m in METRICS]
        lines.append(f"{r['strategy']:<8s}  {r['labeled_count']:>7d}  "
                     + "  ".join(f"{c:>22s}" for c in cells))
    return "\n".join(lines)
