"""Metadata-versus-error analysis: failure flags, correlations, binned summaries."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .synth import METADATA_HEADER, ConditionTags, metadata_row

FAILURE_THRESHOLD = 2.0
MAX_GPS_ERROR = 20.0
TAG_COLUMNS = list(METADATA_HEADER[1:])


def failure_flags(errors, threshold: float = FAILURE_THRESHOLD) -> np.ndarray:
    """``error > threshold`` (strict); infinite errors are failures."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return np.asarray(errors, dtype=np.float64) > threshold


def read_report(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    expected = ["query_id", "error_m", "gps_error_m", "rank_of_nearest_true"]
    if list(df.columns) != expected:
        raise ValueError(f"{path}: unexpected report columns {list(df.columns)}")
    return df


def build_table(reports: Mapping[str, pd.DataFrame], metadata: Mapping[int, ConditionTags] | pd.DataFrame,
                threshold: float = FAILURE_THRESHOLD) -> tuple[pd.DataFrame, int]:
    """Join per-method reports with metadata on query id.

    Produces ``error_<method>`` and ``failure_<method>`` (0/1) columns, one
    ``gps_error_m`` column, and every tag column. Queries lacking metadata or
    a numeric cell are dropped; the dropped count is returned.
    """
    if not reports:
        raise ValueError("need at least one method report")
    if isinstance(metadata, pd.DataFrame):
        meta = metadata.copy()
    else:
        meta = pd.DataFrame([metadata_row(k, v) for k, v in sorted(metadata.items())], columns=list(METADATA_HEADER))
    meta = meta.set_index("reading_id")
    table = None
    gps = None
    for name in sorted(reports):
        rep = reports[name].set_index("query_id")
        cols = pd.DataFrame(index=rep.index)
        cols[f"error_{name}"] = rep["error_m"].astype(float)
        cols[f"failure_{name}"] = failure_flags(cols[f"error_{name}"].to_numpy(), threshold).astype(float)
        if gps is None and rep["gps_error_m"].notna().any():
            gps = rep["gps_error_m"].astype(float)
        table = cols if table is None else table.join(cols, how="inner")
    table["gps_error_m"] = gps if gps is not None else np.nan
    n_before = len(table)
    table = table.join(meta[TAG_COLUMNS], how="inner")
    table = table.dropna()
    table.index.name = "query_id"
    return table.sort_index(), n_before - len(table)


def gps_filter(table: pd.DataFrame, max_gps_error: float = MAX_GPS_ERROR) -> tuple[pd.DataFrame, int]:
    """Drop rows whose GPS error exceeds ``max_gps_error``."""
    keep = table["gps_error_m"] <= max_gps_error
    return table[keep], int((~keep).sum())


def pearson_matrix(table: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    """Pairwise Pearson r. Constant or non-finite columns give NaN (undefined) entries."""
    if len(table) < 2:
        raise ValueError("need at least two rows")
    X = table[list(columns)].to_numpy(dtype=np.float64)
    finite = np.all(np.isfinite(X), axis=0)
    C = X - np.where(finite, X.mean(axis=0), 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        norm = np.sqrt(np.einsum("ij,ij->j", C, C))
    # constant columns, and those whose spread underflows, have no defined r
    ok = finite & np.isfinite(norm) & (norm > 0)
    k = len(columns)
    R = np.full((k, k), np.nan)
    for i in range(k):
        if not ok[i]:
            continue
        R[i, i] = 1.0
        for j in range(i + 1, k):
            if ok[j]:
                r = float((C[:, i] / norm[i]) @ (C[:, j] / norm[j]))
                R[i, j] = R[j, i] = min(1.0, max(-1.0, r))
    return pd.DataFrame(R, index=list(columns), columns=list(columns))


def binned_summary(table: pd.DataFrame, tag_column: str, edges: Sequence[float], value_column: str,
                   statistic: str = "mean", threshold: float = FAILURE_THRESHOLD) -> pd.DataFrame:
    """Summarize ``value_column`` over bins of ``tag_column``.

    Bins are ``[e_i, e_{i+1})`` except the last, which includes its right
    edge. ``statistic`` is ``mean`` or ``failure-rate`` (share of values
    above ``threshold``). Empty bins report count 0 and a NaN statistic.
    """
    e = np.asarray(edges, dtype=np.float64)
    if e.size < 2 or np.any(np.diff(e) <= 0):
        raise ValueError("edges must be strictly increasing with at least two entries")
    if statistic not in ("mean", "failure-rate"):
        raise ValueError(f"unknown statistic {statistic!r}")
    tag = table[tag_column].to_numpy(dtype=np.float64)
    val = table[value_column].to_numpy(dtype=np.float64)
    idx = np.searchsorted(e, tag, side="right") - 1
    idx[tag == e[-1]] = e.size - 2
    rows = []
    for b in range(e.size - 1):
        v = val[idx == b]
        if v.size == 0:
            stat = math.nan
        elif statistic == "mean":
            stat = float(v.mean())
        else:
            stat = float(np.mean(v > threshold))
        rows.append({"bin_lo": e[b], "bin_hi": e[b + 1], "statistic": stat, "count": int(v.size)})
    return pd.DataFrame(rows, columns=["bin_lo", "bin_hi", "statistic", "count"])


def oracle_fusion_error(table: pd.DataFrame, method_columns: Sequence[str]) -> pd.Series:
    """Per-query best error over several methods."""
    if len(method_columns) < 2:
        raise ValueError("need at least two method columns")
    return table[list(method_columns)].min(axis=1).rename("error_oracle_fusion")


def write_correlations(matrix: pd.DataFrame, path) -> None:
    cols = list(matrix.columns)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("col_a,col_b,r\n")
        for i, a in enumerate(cols):
            for b in cols[i:]:
                r = matrix.loc[a, b]
                fh.write(f"{a},{b},{'' if np.isnan(r) else repr(float(r))}\n")


def write_bins(summary: pd.DataFrame, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("bin_lo,bin_hi,statistic,count\n")
        for row in summary.itertuples(index=False):
            stat = "" if math.isnan(row.statistic) else repr(float(row.statistic))
            fh.write(f"{float(row.bin_lo)!r},{float(row.bin_hi)!r},{stat},{int(row.count)}\n")


def analyze_reports(report_paths: Mapping[str, Path], metadata: Mapping[int, ConditionTags], outdir,
                    threshold: float = FAILURE_THRESHOLD, max_gps_error: float = MAX_GPS_ERROR,
                    bins: Mapping[str, Sequence[float]] | None = None) -> dict:
    """Filter, correlate and bin; writes ``correlations.csv`` and ``bins_<tag>.csv``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {name: read_report(p) for name, p in report_paths.items()}
    table, excluded = build_table(reports, metadata, threshold)
    table, dropped = gps_filter(table, max_gps_error)
    methods = sorted(reports)
    cols = [f"failure_{m}" for m in methods] + ["gps_error_m"] + TAG_COLUMNS
    info = {"rows": len(table), "excluded_missing": excluded, "dropped_gps": dropped}
    if len(table) >= 2:
        write_correlations(pearson_matrix(table, cols), out / "correlations.csv")
    else:
        (out / "correlations.csv").write_text("col_a,col_b,r\n", encoding="utf-8")
    if len(methods) >= 2:
        table = table.assign(error_oracle_fusion=oracle_fusion_error(table, [f"error_{m}" for m in methods]))
        methods = methods + ["oracle_fusion"]
    bins = bins or {"lidar_occlusion_pct": (0, 5, 10, 15, 20, 25), "sun_angle_deg": (-10, 0, 10, 20, 40, 60, 90)}
    for tag, edges in bins.items():
        frames = []
        for m in methods:
            s = binned_summary(table, tag, edges, f"error_{m}", "failure-rate", threshold)
            s.insert(0, "method", m)
            frames.append(s)
        with open(out / f"bins_{tag}.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("method,bin_lo,bin_hi,failure_rate,count\n")
            for f in frames:
                for row in f.itertuples(index=False):
                    stat = "" if math.isnan(row.statistic) else repr(float(row.statistic))
                    fh.write(f"{row.method},{float(row.bin_lo)!r},{float(row.bin_hi)!r},{stat},{int(row.count)}\n")
    return info
