#!/usr/bin/env python3
"""
Output Handler Module
Builds the tables written by each subcommand: traces, symbol samples,
solver reports and sweep summaries
"""
import numpy as np
import pandas as pd

TRACE_COLUMNS = ["t", "z0", "z1", "z2", "v0", "v1", "v2", "gamma1", "gamma2_1", "gamma2_2"]
SYMBOL_COLUMNS = ["z0", "z1", "z2", "xi", "eta1", "eta2", "h", "re", "im", "abs", "variant"]
REPORT_COLUMNS = [
    "h",
    "variant",
    "basis",
    "balance",
    "grid_dims",
    "iterations",
    "residual",
    "unscaled_residual",
    "converged",
    "l2_error",
    "sup_error",
    "stability_ratio",
    "sigma_min",
    "sigma_ratio",
    "message",
]


def standardize_dataframe(df, columns):
    """
    Put a table into a fixed column order

    Args:
        df: DataFrame built from row dicts
        columns: Leading columns in output order; missing ones are added as NaN

    Returns:
        DataFrame with the listed columns first and any extras after them
    """
    processed_df = df.copy()
    for col in columns:
        if col not in processed_df.columns:
            processed_df[col] = np.nan
    extras = [col for col in processed_df.columns if col not in columns]
    return processed_df[list(columns) + extras].reset_index(drop=True)


def trace_frame(trace, geometry):
    """One row per geodesic sample, with the foliation coordinates along it"""
    base_point = trace.z[np.argmin(np.abs(trace.t))]
    gamma2 = trace.gamma2(geometry, base_point)
    df = pd.DataFrame(
        {
            "t": trace.t,
            "z0": trace.z[:, 0],
            "z1": trace.z[:, 1],
            "z2": trace.z[:, 2],
            "v0": trace.v[:, 0],
            "v1": trace.v[:, 1],
            "v2": trace.v[:, 2],
            "gamma1": trace.gamma1(geometry),
            "gamma2_1": gamma2[:, 0],
            "gamma2_2": gamma2[:, 1],
        }
    )
    return standardize_dataframe(df, TRACE_COLUMNS)


def symbol_frame(samples):
    if not samples:
        return pd.DataFrame(columns=SYMBOL_COLUMNS)
    df = pd.DataFrame([s.to_dict() for s in samples])
    return standardize_dataframe(df, SYMBOL_COLUMNS)


def ellipticity_frame(samples):
    """Symbol samples with |zeta| and the scaled magnitude |a_0| <zeta>"""
    df = symbol_frame(samples)
    if df.empty:
        return df
    df["radius"] = np.sqrt(df["xi"] ** 2 + df["eta1"] ** 2 + df["eta2"] ** 2)
    df["scaled_abs"] = df["abs"] * np.sqrt(1.0 + df["radius"] ** 2)
    return df


def ellipticity_summary(df):
    """Worst scaled magnitude per frequency radius"""
    if df.empty:
        return pd.DataFrame(columns=["radius", "min_scaled_abs", "max_scaled_abs", "samples"])
    grouped = df.groupby(df["radius"].round(9))["scaled_abs"]
    return (
        grouped.agg(min_scaled_abs="min", max_scaled_abs="max", samples="count")
        .reset_index()
        .sort_values("radius")
        .reset_index(drop=True)
    )


def report_frame(reports):
    df = pd.DataFrame([r.to_dict() for r in reports])
    return standardize_dataframe(df, REPORT_COLUMNS)


def error_decay_order(df, column="l2_error"):
    """
    Least-squares slope of log(error) against log(h) over converged rows

    Returns:
        float: Estimated order, NaN with fewer than two usable rows
    """
    usable = df[df["converged"].astype(bool) & (df[column] > 0) & np.isfinite(df[column])]
    if len(usable) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(usable["h"]), np.log(usable[column]), 1)
    return float(slope)
