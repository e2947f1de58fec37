"""Goodness-of-fit metrics and the experiment runners built on them.

All metric inputs are in tesla; tables render mT (and cm for positions).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Dataset, DatasetError, i_max, split_ids

MAPE_FLOOR = 0.5e-3
CURRENT_BIN_EDGES = tuple(float(e) for e in range(0, 36, 5))
LOW_CONFIDENCE_BELOW = 30
ABLATION_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class UndefinedMetricError(ValueError):
    """R^2 requested for a target with zero variance (or too few samples)."""


def r2_component(measured, predicted) -> float:
    b = np.asarray(measured, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if b.size < 2:
        raise UndefinedMetricError("R^2 needs at least two samples")
    # exact test: the mean of equal values can round away from them
    if np.all(b == b[0]):
        raise UndefinedMetricError("R^2 is undefined for a constant target")
    ss_tot = np.sum((b - b.mean()) ** 2)
    return float(1.0 - np.sum((b - p) ** 2) / ss_tot)


def rmse_component(measured, predicted) -> float:
    b = np.asarray(measured, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if b.size < 1:
        raise ValueError("RMSE needs at least one sample")
    return float(np.sqrt(np.mean((b - p) ** 2)))


def norm_metrics(measured_fields, predicted_fields) -> tuple[float, float]:
    """(R^2, RMSE) of the field magnitudes, i.e. of ``|b|`` against ``|b_hat|``."""
    bn = np.linalg.norm(np.atleast_2d(measured_fields), axis=1)
    pn = np.linalg.norm(np.atleast_2d(predicted_fields), axis=1)
    return r2_component(bn, pn), rmse_component(bn, pn)


@dataclass(frozen=True)
class ComponentMetrics:
    r2_x: float
    r2_y: float
    r2_z: float
    r2_norm: float
    rmse_x: float
    rmse_y: float
    rmse_z: float
    rmse_norm: float

    def row_mT(self) -> dict:
        d = asdict(self)
        return {k if k.startswith("r2") else f"{k}_mT": (v if k.startswith("r2") or v is None else v * 1e3)
                for k, v in d.items()}


def component_metrics(measured, predicted, strict: bool = True) -> ComponentMetrics:
    """All eight metrics. With ``strict=False`` an undefined R^2 becomes None."""
    b = np.atleast_2d(np.asarray(measured, dtype=np.float64))
    p = np.atleast_2d(np.asarray(predicted, dtype=np.float64))

    def r2(x, y):
        try:
            return r2_component(x, y)
        except UndefinedMetricError:
            if strict:
                raise
            return None

    bn = np.linalg.norm(b, axis=1)
    pn = np.linalg.norm(p, axis=1)
    return ComponentMetrics(
        r2(b[:, 0], p[:, 0]), r2(b[:, 1], p[:, 1]), r2(b[:, 2], p[:, 2]), r2(bn, pn),
        rmse_component(b[:, 0], p[:, 0]), rmse_component(b[:, 1], p[:, 1]),
        rmse_component(b[:, 2], p[:, 2]), rmse_component(bn, pn),
    )


def predict_all(models: dict, test: Dataset) -> dict:
    return {name: m.predict(test.positions, test.currents) for name, m in models.items()}


def overall_table(test: Dataset, predictions: dict) -> dict:
    return {name: component_metrics(test.fields, p) for name, p in predictions.items()}


# --------------------------------------------------------------------------
# spatial


@dataclass
class SpatialReport:
    mape: dict = field(default_factory=dict)  # model -> {sensor_id: percent}
    counts: dict = field(default_factory=dict)  # model -> {sensor_id: K}
    flagged: dict = field(default_factory=dict)  # model -> sensor ids without usable samples
    positions: dict = field(default_factory=dict)

    def maxima(self) -> dict:
        return {m: max(v.values()) if v else None for m, v in self.mape.items()}


def mape_per_location(test: Dataset, predictions, floor: float = MAPE_FLOOR,
                      report: SpatialReport | None = None, name: str = "model") -> SpatialReport:
    """Mean absolute percentage error of ``|b|`` at every sensor location.

    ``predictions`` is an array aligned with ``test`` or a model with
    ``predict``. Samples whose measured magnitude is below ``floor`` are
    skipped; sensors left without samples are flagged.
    """
    pred = predictions.predict(test.positions, test.currents) if hasattr(predictions, "predict") else predictions
    report = report or SpatialReport()
    bn = np.linalg.norm(test.fields, axis=1)
    pn = np.linalg.norm(np.asarray(pred), axis=1)
    usable = bn >= floor
    ape = np.zeros_like(bn)
    ape[usable] = np.abs((bn[usable] - pn[usable]) / bn[usable]) * 100.0
    mape, counts, flagged = {}, {}, []
    for sid in sorted(test.sensor_positions):
        sel = (test.sensor_id == sid) & usable
        k = int(sel.sum())
        counts[sid] = k
        if k == 0:
            flagged.append(sid)
            continue
        mape[sid] = float(np.mean(ape[sel]))
    report.mape[name] = mape
    report.counts[name] = counts
    report.flagged[name] = flagged
    report.positions = dict(test.sensor_positions)
    return report


# --------------------------------------------------------------------------
# current-level stratification


@dataclass
class StratifiedReport:
    edges: tuple
    counts: list  # samples per bin
    metrics: dict  # model -> list of ComponentMetrics | None per bin

    def low_confidence(self) -> list[bool]:
        return [n < LOW_CONFIDENCE_BELOW for n in self.counts]

    def rmse_norm(self, model: str) -> list:
        return [None if m is None else m.rmse_norm for m in self.metrics[model]]


def current_bins(imax, edges=CURRENT_BIN_EDGES) -> np.ndarray:
    """Bin index per sample; bins are right-closed ``(lo, hi]`` and the first
    bin also takes ``i_max == edges[0]``. Values above the top edge join the
    top bin."""
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    k = np.searchsorted(edges, np.asarray(imax), side="left") - 1
    return np.clip(k, 0, edges.size - 2)


def stratify_by_current(test: Dataset, predictions: dict, edges=CURRENT_BIN_EDGES) -> StratifiedReport:
    bins = current_bins(i_max(test.currents), edges)
    nb = len(edges) - 1
    counts = [int(np.sum(bins == k)) for k in range(nb)]
    metrics = {}
    for name, pred in predictions.items():
        rows = []
        for k in range(nb):
            sel = bins == k
            rows.append(component_metrics(test.fields[sel], pred[sel], strict=False) if sel.any() else None)
        metrics[name] = rows
    return StratifiedReport(tuple(edges), counts, metrics)


# --------------------------------------------------------------------------
# training-size ablation


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)  # dicts: model, fraction, subset_seed, n_current_vectors, n_samples, metrics


def ablation_subset(train: Dataset, fraction: float, seed: int) -> tuple[Dataset, list]:
    """Random draw of ``floor(fraction * n)`` whole current vectors; each
    fraction uses its own stream so subsets are not nested."""
    if not 0 < fraction <= 1:
        raise ValueError("fractions must lie in (0, 1]")
    if fraction == 1:
        return train, [seed, 1_000_000]
    sub_seed = [seed, int(round(fraction * 1_000_000))]
    _, keep = split_ids(train.current_vector_ids(), fraction, sub_seed)
    return train.select_current_vectors(keep), sub_seed


def run_ablation(train: Dataset, test: Dataset, fractions=ABLATION_FRACTIONS,
                 trainers: dict | None = None, seed: int = 0) -> AblationReport:
    """Retrain every model on random training subsets; evaluate on ``test``.

    ``trainers`` maps a model name to ``fn(train_subset) -> model``.
    """
    if not trainers:
        raise ValueError("no models to train")
    report = AblationReport()
    for fraction in fractions:
        subset, sub_seed = ablation_subset(train, fraction, seed)
        if subset.n_current_vectors < 10:
            raise DatasetError(
                f"fraction {fraction} leaves {subset.n_current_vectors} current vectors; need at least 10"
            )
        for name, fit in trainers.items():
            model = fit(subset)
            pred = model.predict(test.positions, test.currents)
            report.rows.append({
                "model": name, "fraction": float(fraction), "subset_seed": sub_seed,
                "n_current_vectors": subset.n_current_vectors, "n_samples": len(subset),
                "metrics": component_metrics(test.fields, pred),
            })
    return report


# --------------------------------------------------------------------------
# report rendering


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


METRIC_COLUMNS = ["r2_x", "r2_y", "r2_z", "r2_norm", "rmse_x_mT", "rmse_y_mT", "rmse_z_mT", "rmse_norm_mT"]


def _metric_cells(m: ComponentMetrics | None) -> list:
    if m is None:
        return [None] * len(METRIC_COLUMNS)
    row = m.row_mT()
    return [row[c] for c in METRIC_COLUMNS]


def overall_csv(table: dict) -> str:
    return _csv(["model"] + METRIC_COLUMNS, [[name] + _metric_cells(m) for name, m in table.items()])


def stratified_csv(rep: StratifiedReport) -> str:
    rows = []
    for name, per_bin in rep.metrics.items():
        for k, m in enumerate(per_bin):
            rows.append([name, rep.edges[k], rep.edges[k + 1], rep.counts[k],
                         int(rep.counts[k] < LOW_CONFIDENCE_BELOW)] + _metric_cells(m))
    return _csv(["model", "imax_lo_A", "imax_hi_A", "n_samples", "low_confidence"] + METRIC_COLUMNS, rows)


def spatial_csv(rep: SpatialReport) -> str:
    rows = []
    for name, per_sensor in rep.mape.items():
        for sid in sorted(rep.counts[name]):
            p = rep.positions[sid] * 100
            rows.append([name, sid, float(p[0]), float(p[1]), float(p[2]), rep.counts[name][sid],
                         per_sensor.get(sid)])
    return _csv(["model", "sensor_id", "x_cm", "y_cm", "z_cm", "k_samples", "mape_norm_pct"], rows)


def ablation_csv(rep: AblationReport) -> str:
    rows = [[r["model"], r["fraction"], ":".join(str(s) for s in r["subset_seed"]), r["n_current_vectors"],
             r["n_samples"]] + _metric_cells(r["metrics"]) for r in rep.rows]
    return _csv(["model", "fraction", "subset_seed", "n_current_vectors", "n_samples"] + METRIC_COLUMNS, rows)


def summary_json(overall: dict, strat: StratifiedReport | None = None,
                 spatial: SpatialReport | None = None) -> str:
    out: dict = {"overall": {k: v.row_mT() for k, v in overall.items()}}
    if strat is not None:
        out["stratified"] = {
            "edges_A": list(strat.edges), "counts": strat.counts,
            "rmse_norm_mT": {k: [None if v is None else v * 1e3 for v in strat.rmse_norm(k)] for k in strat.metrics},
        }
    if spatial is not None:
        out["spatial_max_mape_pct"] = spatial.maxima()
        out["spatial_flagged"] = spatial.flagged
    return json.dumps(out, indent=1, sort_keys=True) + "\n"
