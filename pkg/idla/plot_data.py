import logging
import math
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd
from scipy import stats

from idla.errors import SchemaError

log = logging.getLogger(__name__)

KINDS = ("delta-vs-sqrtlog", "missprob-vs-gap2", "zeroprob-vs-lambda")

INPUT_COLUMNS: Dict[str, List[str]] = {
    "delta-vs-sqrtlog": ["replica", "n", "delta_inner", "delta_outer", "seed"],
    "missprob-vs-gap2": ["replica", "n", "gap", "miss", "seed"],
    "zeroprob-vs-lambda": ["grid_value", "estimate", "stderr", "replicas", "seed"],
}

OUTPUT_COLUMNS: Dict[str, List[str]] = {
    "delta-vs-sqrtlog": [
        "n", "sqrt_log_n", "mean_delta_inner", "stderr_delta_inner",
        "mean_delta_outer", "stderr_delta_outer", "replicas", "slope_inner", "slope_outer",
    ],
    "missprob-vs-gap2": ["n", "gap", "gap2", "miss_prob", "stderr", "log_miss_prob", "replicas"],
    "zeroprob-vs-lambda": ["lambda", "x", "p_zero", "stderr", "neg_log_p", "replicas"],
}


def read_results_csv(path: Path, kind: str) -> pd.DataFrame:
    """Results CSV checked against the columns the kind needs; empty files give an empty frame."""
    if kind not in KINDS:
        raise SchemaError(f"unknown plot kind {kind!r}; expected one of {', '.join(KINDS)}")
    expected = INPUT_COLUMNS[kind]
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=expected)
    missing = [c for c in expected if c not in df.columns]
    if missing:
        raise SchemaError(f"results file {path} does not fit kind {kind}", expected, list(df.columns))
    return df


def _stderr(s: pd.Series) -> float:
    if len(s) < 2:
        return 0.0
    return float(s.std(ddof=1) / math.sqrt(len(s)))


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    if len(np.unique(x)) < 2:
        return float("nan")
    return float(stats.linregress(x, y).slope)


def _delta_frame(df: pd.DataFrame) -> pd.DataFrame:
    g = df.groupby("n", sort=True)
    out = pd.DataFrame({
        "n": g.size().index.astype(int),
        "mean_delta_inner": g["delta_inner"].mean().to_numpy(),
        "stderr_delta_inner": g["delta_inner"].apply(_stderr).to_numpy(),
        "mean_delta_outer": g["delta_outer"].mean().to_numpy(),
        "stderr_delta_outer": g["delta_outer"].apply(_stderr).to_numpy(),
        "replicas": g.size().to_numpy(),
    })
    out["sqrt_log_n"] = np.sqrt(np.log(out["n"].astype(float)))
    x = out["sqrt_log_n"].to_numpy()
    out["slope_inner"] = _slope(x, out["mean_delta_inner"].to_numpy())
    out["slope_outer"] = _slope(x, out["mean_delta_outer"].to_numpy())
    return out


def _miss_frame(df: pd.DataFrame) -> pd.DataFrame:
    g = df.groupby(["n", "gap"], sort=True)["miss"]
    out = g.agg(miss_prob="mean", replicas="size").reset_index()
    out["stderr"] = np.sqrt(out["miss_prob"] * (1 - out["miss_prob"]) / out["replicas"])
    out["gap2"] = out["gap"] ** 2
    with np.errstate(divide="ignore"):
        out["log_miss_prob"] = np.where(out["miss_prob"] > 0, np.log(out["miss_prob"].clip(lower=1e-300)), np.nan)
    return out


def _zero_frame(df: pd.DataFrame, scale: float) -> pd.DataFrame:
    out = pd.DataFrame({
        "lambda": df["grid_value"].astype(float),
        "p_zero": df["estimate"].astype(float),
        "stderr": df["stderr"].astype(float),
        "replicas": df["replicas"].astype(int),
    }).sort_values("lambda", kind="mergesort")
    out["x"] = out["lambda"] * scale
    out["neg_log_p"] = np.where(out["p_zero"] > 0, -np.log(out["p_zero"].clip(lower=1e-300)), np.nan)
    return out


def plot_frame(df: pd.DataFrame, kind: str, scale: float = 1.0) -> pd.DataFrame:
    if df.empty:
        return pd.DataFrame(columns=OUTPUT_COLUMNS[kind])
    if kind == "delta-vs-sqrtlog":
        out = _delta_frame(df)
    elif kind == "missprob-vs-gap2":
        out = _miss_frame(df)
    else:
        out = _zero_frame(df, scale)
    return out[OUTPUT_COLUMNS[kind]].reset_index(drop=True)


def emit_plot_data(input_path: Path, kind: str, out_path: Path, scale: float = 1.0) -> Path:
    """
    Aggregated, plot-ready CSV: means/stderr per x value with the regressor
    √log n, gap² or λ·scale (scale = R/‖z‖^{d−1}).
    """
    df = read_results_csv(Path(input_path), kind)
    out = plot_frame(df, kind, scale)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(out_path, index=False, float_format="%.17g", lineterminator="\n")
    log.info("plot data %s: %d rows -> %s", kind, len(out), out_path)
    return out_path
