"""Data ingestion, normalization, windowing, synthetic generation, metrics.

Series live as (n, steps, c) float64 arrays. Two interchangeable on-disk
encodings: CSV rows `node,step,c0[,c1...]` and raw little-endian f64 with a
JSON sidecar {n, t, c, freq_minutes, name}. Loading rejects NaN outright.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    HeaderMismatchError,
    InputError,
    NanPayloadError,
    NodeCountError,
    ShapeError,
)
from .graph import SpatialGraph, build_epsilon_graph, connected_components, load_coords, load_graph

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    series: np.ndarray  # (n, steps, c)
    graph: SpatialGraph
    freq_minutes: int = 15
    name: str = "dataset"

    def __post_init__(self):
        if self.series.ndim != 3:
            raise ShapeError(f"series must be (n, steps, c), got {self.series.shape}")
        if self.series.shape[0] != self.graph.n:
            raise NodeCountError(
                f"series has {self.series.shape[0]} nodes, graph has {self.graph.n}"
            )
        if np.isnan(self.series).any():
            raise NanPayloadError("series contains NaN values")

    @property
    def n(self):
        return self.series.shape[0]

    @property
    def steps(self):
        return self.series.shape[1]

    @property
    def c(self):
        return self.series.shape[2]


@dataclass
class Normalizer:
    """Per-channel affine z-score; fit on the training range only."""

    mean: np.ndarray  # (c,)
    std: np.ndarray  # (c,)

    @classmethod
    def fit(cls, series: np.ndarray) -> "Normalizer":
        mean = series.mean(axis=(0, 1))
        std = series.std(axis=(0, 1))
        if (std <= 0).any():
            raise InputError("a channel is constant over the fit range; std would be 0")
        return cls(mean=mean, std=std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class WindowSet:
    """Forecast windows (start, t, f): input [start, start+t), target next f steps."""

    indices: list
    split: str
    too_short: bool = False

    def __len__(self):
        return len(self.indices)


def chrono_split(total_steps: int, ratios=(0.6, 0.2, 0.2), min_len: int | None = None):
    """Contiguous (start, end) ranges; floor boundaries, remainder to test."""
    ratios = tuple(float(r) for r in ratios)
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be positive and sum to 1, got {ratios}")
    n_train = math.floor(ratios[0] * total_steps)
    n_val = math.floor(ratios[1] * total_steps)
    bounds = (
        (0, n_train),
        (n_train, n_train + n_val),
        (n_train + n_val, total_steps),
    )
    if min_len is not None:
        for (lo, hi), label in zip(bounds, ("train", "val", "test")):
            if hi - lo < min_len:
                raise ConfigError(
                    f"{label} split has {hi - lo} steps, need at least {min_len}"
                )
    return bounds


def make_windows(step_range, t: int, f: int, stride: int = 1, split: str = "train") -> WindowSet:
    """All windows whose input and horizon lie fully inside the range."""
    lo, hi = step_range
    if t < 1 or f < 1 or stride < 1:
        raise ConfigError("t, f, and stride must be >= 1")
    too_short = hi - lo < t + f
    if too_short:
        log.warning("range %s too short for t=%d f=%d; empty window set", step_range, t, f)
        starts = []
    else:
        starts = range(lo, hi - t - f + 1, stride)
    return WindowSet(indices=[(s, t, f) for s in starts], split=split, too_short=too_short)


def window_arrays(series: np.ndarray, windows, at=None):
    """Stack (inputs, targets) for the given windows: (w, n, t, c) and (w, n, f, c)."""
    idx = windows.indices if isinstance(windows, WindowSet) else windows
    if at is not None:
        idx = [idx[i] for i in at]
    xs = np.stack([series[:, s : s + t, :] for s, t, f in idx])
    ys = np.stack([series[:, s + t : s + t + f, :] for s, t, f in idx])
    return xs, ys


# ---------------------------------------------------------------------------
# synthetic data


def make_grid_graph(rows: int, cols: int) -> SpatialGraph:
    """4-neighbor grid with unit spacing, built as a distance-threshold graph."""
    xs, ys = np.meshgrid(np.arange(cols), np.arange(rows))
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    return build_epsilon_graph(coords, epsilon=1.5)


def _grid_shape(n: int):
    rows = int(math.isqrt(n))
    while n % rows != 0:
        rows -= 1
    return rows, n // rows


def synth_diffusion(
    n: int = 64,
    steps: int = 2048,
    graph: SpatialGraph | None = None,
    gamma: float = 0.3,
    season_amp: float = 1.0,
    noise_std: float = 0.05,
    period: float = 64.0,
    seed: int = 0,
    freq_minutes: int = 15,
    name: str = "synthetic",
) -> Dataset:
    """Diffusion on a graph plus a spatially smooth seasonal drive plus noise.

    x[t+1] = (1-gamma) x[t] + gamma A_hat x[t] + amp sin(2 pi t/period + phi)
    + std eta[t], with A_hat the degree-normalized adjacency and phi a smooth
    per-node phase from the coordinates. Deterministic for a fixed seed.
    Neighbors end up more correlated than distant pairs by construction.
    gamma = 0 freezes the dynamics entirely (with amp = std = 0 the series
    stays at its initial state).
    """
    if not 0 <= gamma < 1:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    if graph is None:
        graph = make_grid_graph(*_grid_shape(n))
    if graph.n != n:
        raise ConfigError(f"graph has {graph.n} nodes, requested n={n}")
    if len(connected_components(graph)) != 1:
        raise ConfigError("synthetic generator needs a connected graph")
    a = graph.dense_adjacency()
    deg = a.sum(axis=1)
    a_hat = np.divide(a, deg[:, None], out=np.zeros_like(a), where=deg[:, None] > 0)

    if graph.coords is not None:
        span = graph.coords.sum(axis=1)
        phi = 2.0 * np.pi * (span - span.min()) / (np.ptp(span) + 1.0)
    else:
        phi = 2.0 * np.pi * np.arange(n) / n

    rng = np.random.default_rng(seed)
    x = np.empty((n, steps, 1))
    state = np.sin(phi) + 0.1 * rng.standard_normal(n)
    x[:, 0, 0] = state
    for t in range(1, steps):
        forcing = season_amp * np.sin(2.0 * np.pi * (t - 1) / period + phi)
        state = (1.0 - gamma) * state + gamma * (a_hat @ state) + forcing
        if noise_std > 0:
            state = state + noise_std * rng.standard_normal(n)
        x[:, t, 0] = state
    return Dataset(series=x, graph=graph, freq_minutes=freq_minutes, name=name)


# ---------------------------------------------------------------------------
# series files


def save_series(path, series: np.ndarray, fmt: str = "bin",
                freq_minutes: int = 15, name: str = "dataset"):
    path = str(path)
    n, t, c = series.shape
    if fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(series, dtype="<f8").tobytes())
        sidecar = {"n": n, "t": t, "c": c, "freq_minutes": freq_minutes, "name": name}
        with open(_sidecar_path(path), "w") as fh:
            json.dump(sidecar, fh, sort_keys=True, indent=2)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w") as fh:
            fh.write("node,step," + ",".join(f"c{i}" for i in range(c)) + "\n")
            for node in range(n):
                for step in range(t):
                    vals = ",".join(repr(float(v)) for v in series[node, step])
                    fh.write(f"{node},{step},{vals}\n")
    else:
        raise InputError(f"unknown series format {fmt!r}")


def _sidecar_path(path: str) -> str:
    return (path[:-4] if path.endswith(".bin") else path) + ".json"


def load_series(path, fmt: str = "bin"):
    """Returns (series, meta dict or None). Raises distinct errors per failure."""
    path = str(path)
    if fmt == "bin":
        with open(_sidecar_path(path)) as fh:
            meta = json.load(fh)
        flat = np.fromfile(path, dtype="<f8")
        expect = meta["n"] * meta["t"] * meta["c"]
        if flat.size != expect:
            raise HeaderMismatchError(
                f"{path}: payload holds {flat.size} values, header implies {expect}"
            )
        series = flat.reshape(meta["n"], meta["t"], meta["c"]).astype(np.float64)
    elif fmt == "csv":
        meta = None
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if header[:2] != ["node", "step"]:
                raise HeaderMismatchError(f"{path}: expected node,step,c0... header")
            c = len(header) - 2
            rows = {}
            for lineno, line in enumerate(fh, 2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 2 + c:
                    raise HeaderMismatchError(f"{path}:{lineno}: expected {2 + c} fields")
                rows[(int(parts[0]), int(parts[1]))] = [float(v) for v in parts[2:]]
        if not rows:
            raise HeaderMismatchError(f"{path}: no data rows")
        n = max(k[0] for k in rows) + 1
        t = max(k[1] for k in rows) + 1
        if len(rows) != n * t:
            raise HeaderMismatchError(
                f"{path}: {len(rows)} rows do not cover the {n}x{t} grid"
            )
        series = np.empty((n, t, c))
        for (node, step), vals in rows.items():
            series[node, step] = vals
    else:
        raise InputError(f"unknown series format {fmt!r}")
    if np.isnan(series).any():
        raise NanPayloadError(f"{path}: payload contains NaN")
    return series, meta


def load_dataset(
    series_path,
    graph_path,
    coords_path=None,
    schema: str = "bin",
    freq_minutes: int | None = None,
    name: str | None = None,
) -> Dataset:
    """Load and cross-validate a series file plus its graph (and coordinates)."""
    series, meta = load_series(series_path, schema)
    graph = load_graph(graph_path, n=series.shape[0])
    if coords_path is not None:
        coords = load_coords(coords_path)
        if coords.shape[0] != series.shape[0]:
            raise NodeCountError(
                f"coords file has {coords.shape[0]} nodes, series has {series.shape[0]}"
            )
        graph.coords = coords
    if meta is not None:
        freq_minutes = meta["freq_minutes"] if freq_minutes is None else freq_minutes
        name = meta["name"] if name is None else name
    return Dataset(
        series=series,
        graph=graph,
        freq_minutes=15 if freq_minutes is None else freq_minutes,
        name="dataset" if name is None else name,
    )


# ---------------------------------------------------------------------------
# evaluation metrics


def metrics(pred: np.ndarray, target: np.ndarray, null_threshold: float = 1e-4) -> dict:
    """MAE/RMSE over everything; MAPE in percent over |target| >= threshold.

    The horizon axis is -2, and the report carries a per-step breakdown in
    the same three metrics. Excluded-entry counts make the MAPE masking
    auditable. RMSE >= MAE is asserted on the way out.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"metric shapes differ: {pred.shape} vs {target.shape}")
    err = pred - target

    def _one(e, t):
        mae = float(np.abs(e).mean())
        rmse = float(np.sqrt((e * e).mean()))
        keep = np.abs(t) >= null_threshold
        excluded = int(t.size - keep.sum())
        mape = (
            float((np.abs(e[keep]) / np.abs(t[keep])).mean() * 100.0)
            if keep.any()
            else None
        )
        if rmse < mae - 1e-12:
            raise ContractError(f"rmse {rmse} < mae {mae}")
        return {"mae": mae, "rmse": rmse, "mape_pct": mape, "excluded": excluded}

    report = _one(err, target)
    horizon = []
    for step in range(pred.shape[-2]):
        horizon.append(_one(err[..., step, :], target[..., step, :]))
    report["horizon_breakdown"] = horizon
    return report
