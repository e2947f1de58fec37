"""Dataset container, feature scaling and current-vector-level splitting.

Units are SI throughout (m, A, T). Reports convert to cm / mT on output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

N_COILS = 8
N_POSITION_FEATURES = 3
MAX_CURRENT = 35.0
POWER_LIMIT = 15_000.0
RESISTANCE_PER_COIL = 1.53
FIELD_LIMIT = 0.2


class DatasetError(ValueError):
    """Raised for malformed, incomplete or unusable datasets."""


def feature_names(n_coils: int = N_COILS) -> list[str]:
    return ["x", "y", "z"] + [f"i{k + 1}" for k in range(n_coils)]


def csv_header(n_coils: int = N_COILS) -> list[str]:
    return (
        ["current_vector_id", "sensor_id", "x_m", "y_m", "z_m"]
        + [f"i{k + 1}_A" for k in range(n_coils)]
        + ["bx_T", "by_T", "bz_T"]
    )


def power_of(currents, resistance_per_coil: float = RESISTANCE_PER_COIL):
    """Total ohmic power ``sum_k R * i_k**2`` in watts.

    Accepts a single current vector or an ``(N, n_coils)`` array.
    """
    i = np.asarray(currents, dtype=np.float64)
    return resistance_per_coil * np.sum(i * i, axis=-1)


def i_max(currents):
    """Largest absolute coil current of each current vector."""
    return np.max(np.abs(np.asarray(currents, dtype=np.float64)), axis=-1)


class Sample(NamedTuple):
    position: np.ndarray
    currents: np.ndarray
    field: np.ndarray
    sensor_id: int
    current_vector_id: int


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented collection of (position, currents, field) samples.

    ``sensor_positions`` maps every declared sensor id to its position and
    ``n_current_vectors`` counts the distinct current vectors present.
    """

    current_vector_id: np.ndarray
    sensor_id: np.ndarray
    positions: np.ndarray
    currents: np.ndarray
    fields: np.ndarray
    sensor_positions: dict = field(default_factory=dict)
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        cv = _frozen(self.current_vector_id, np.int64).reshape(-1)
        n = cv.shape[0]
        object.__setattr__(self, "current_vector_id", cv)
        object.__setattr__(self, "sensor_id", _frozen(self.sensor_id, np.int64).reshape(n))
        object.__setattr__(self, "positions", _frozen(self.positions, np.float64).reshape(n, 3))
        currents = _frozen(self.currents, np.float64)
        object.__setattr__(self, "currents", currents.reshape(n, -1) if n else currents.reshape(0, N_COILS))
        object.__setattr__(self, "fields", _frozen(self.fields, np.float64).reshape(n, 3))
        if not self.sensor_positions and n:
            ids, first = np.unique(self.sensor_id, return_index=True)
            sp = {int(s): self.positions[j].copy() for s, j in zip(ids, first)}
            object.__setattr__(self, "sensor_positions", sp)
        else:
            sp = {int(k): np.asarray(v, dtype=np.float64).reshape(3) for k, v in self.sensor_positions.items()}
            object.__setattr__(self, "sensor_positions", sp)

    def __len__(self) -> int:
        return self.current_vector_id.shape[0]

    @property
    def n_coils(self) -> int:
        return self.currents.shape[1]

    @property
    def n_current_vectors(self) -> int:
        return int(np.unique(self.current_vector_id).size)

    def current_vector_ids(self) -> np.ndarray:
        return np.unique(self.current_vector_id)

    def features(self) -> np.ndarray:
        """Raw ``(N, 3 + n_coils)`` feature matrix in (x, y, z, i_1..i_n) order."""
        return np.hstack([self.positions, self.currents])

    def samples(self) -> Iterator[Sample]:
        for j in range(len(self)):
            yield Sample(
                self.positions[j], self.currents[j], self.fields[j],
                int(self.sensor_id[j]), int(self.current_vector_id[j]),
            )

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        return Dataset(
            self.current_vector_id[idx], self.sensor_id[idx], self.positions[idx],
            self.currents[idx], self.fields[idx], self.sensor_positions,
            self.provenance, dict(self.meta),
        )

    def select_current_vectors(self, ids) -> "Dataset":
        return self.subset(np.isin(self.current_vector_id, np.asarray(ids)))

    def content_hash(self) -> str:
        """SHA-256 over the numeric content; stable across save/load."""
        h = hashlib.sha256()
        for a in (self.current_vector_id, self.sensor_id, self.positions, self.currents, self.fields):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# scaling


@dataclass(frozen=True, eq=False)
class ScalerParams:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.minimum, np.float64)
        hi = _frozen(self.maximum, np.float64)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("scaler bounds must have equal shapes with max >= min")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.array(d["min"]), np.array(d["max"]))


def fit_scaler(train: Dataset) -> ScalerParams:
    """Per-feature min/max over the training samples."""
    if len(train) == 0:
        raise DatasetError("cannot fit a scaler on an empty dataset")
    X = train.features()
    return ScalerParams(X.min(axis=0), X.max(axis=0))


def transform(positions, currents, scaler: ScalerParams) -> np.ndarray:
    """Min-max scale features into [0, 1], clamping out-of-range values.

    Features with ``max == min`` map to 0.
    """
    X = np.hstack([np.atleast_2d(np.asarray(positions, dtype=np.float64)),
                   np.atleast_2d(np.asarray(currents, dtype=np.float64))])
    return transform_features(X, scaler)


def transform_features(X, scaler: ScalerParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != scaler.minimum.shape[0]:
        raise ValueError(
            f"feature width {X.shape[-1]} does not match scaler width {scaler.minimum.shape[0]}"
        )
    span = scaler.maximum - scaler.minimum
    live = span > 0
    out = np.zeros_like(X)
    out[..., live] = (X[..., live] - scaler.minimum[live]) / span[live]
    return np.clip(out, 0.0, 1.0)


def inverse_transform(Z, scaler: ScalerParams) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    return scaler.minimum + Z * (scaler.maximum - scaler.minimum)


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    test_fraction: float = 0.1


def _count_for_fraction(n: int, fraction) -> int:
    frac = Fraction(fraction).limit_denominator(10**6)
    return (n * frac.numerator) // frac.denominator


def split_by_current_vector(d: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Randomly partition whole current vectors into (train, test)."""
    ids = d.current_vector_ids()
    if ids.size < 10:
        raise DatasetError(f"need at least 10 current vectors to split, got {ids.size}")
    if not 0 < spec.test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = _count_for_fraction(ids.size, spec.test_fraction)
    perm = np.random.default_rng(spec.seed).permutation(ids.size)
    test_ids = np.sort(ids[perm[:n_test]])
    in_test = np.isin(d.current_vector_id, test_ids)
    return d.subset(~in_test), d.subset(in_test)


def split_ids(ids, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle ``ids`` and cut off ``floor(len * fraction)`` of them.

    Returns ``(kept, held_out)``, both sorted.
    """
    ids = np.asarray(ids)
    n_out = _count_for_fraction(ids.size, fraction)
    perm = np.random.default_rng(seed).permutation(ids.size)
    return np.sort(ids[perm[n_out:]]), np.sort(ids[perm[:n_out]])


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    checks: dict = field(default_factory=dict)  # name -> (passed, detail)
    column_ranges: dict = field(default_factory=dict)  # column -> (min, max), SI units

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def failures(self) -> list[str]:
        return [name for name, (ok, _) in self.checks.items() if not ok]

    def table_rows(self) -> list[tuple[str, float, float, str]]:
        """Column statistics rendered in cm / A / mT."""
        rows = []
        for col, (lo, hi) in self.column_ranges.items():
            if col in ("x", "y", "z"):
                rows.append((col, lo * 100, hi * 100, "cm"))
            elif col.startswith("b"):
                rows.append((col, lo * 1e3, hi * 1e3, "mT"))
            else:
                rows.append((col, lo, hi, "A"))
        return rows


def validate_dataset(
    d: Dataset,
    max_current: float = MAX_CURRENT,
    power_limit: float = POWER_LIMIT,
    resistance_per_coil: float = RESISTANCE_PER_COIL,
    field_limit: float = FIELD_LIMIT,
    n_current_vectors: int | None = None,
) -> ValidationReport:
    """Check ranges, finiteness, power feasibility and completeness."""
    rep = ValidationReport()
    n = len(d)
    rep.checks["non_empty"] = (n > 0, f"{n} samples")
    finite = bool(np.all(np.isfinite(d.positions)) and np.all(np.isfinite(d.currents))
                  and np.all(np.isfinite(d.fields)))
    rep.checks["finite"] = (finite, "all numeric columns finite" if finite else "non-finite values present")
    if n == 0:
        return rep

    imax = float(np.max(np.abs(d.currents)))
    rep.checks["current_range"] = (imax <= max_current, f"max |i| = {imax:.4f} A (limit {max_current} A)")
    pmax = float(np.max(power_of(d.currents, resistance_per_coil)))
    rep.checks["power"] = (pmax <= power_limit, f"max power = {pmax:.1f} W (limit {power_limit} W)")
    bmax = float(np.max(np.abs(d.fields)))
    rep.checks["field_range"] = (bmax <= field_limit, f"max |b_*| = {bmax * 1e3:.2f} mT (limit {field_limit * 1e3} mT)")

    pairs = d.current_vector_id * (int(d.sensor_id.max()) + 1) + d.sensor_id
    n_unique = np.unique(pairs).size
    rep.checks["unique_pairs"] = (n_unique == n, f"{n - n_unique} duplicated (sensor, current vector) pairs")
    declared = np.isin(d.sensor_id, np.fromiter(d.sensor_positions.keys(), dtype=np.int64))
    rep.checks["sensors_declared"] = (bool(declared.all()), f"{int((~declared).sum())} samples with undeclared sensor")
    n_cv = n_current_vectors if n_current_vectors is not None else d.n_current_vectors
    expected = n_cv * len(d.sensor_positions)
    rep.checks["complete"] = (n == expected, f"{n} samples, expected {n_cv} x {len(d.sensor_positions)} = {expected}")

    for k, name in enumerate(["x", "y", "z"]):
        rep.column_ranges[name] = (float(d.positions[:, k].min()), float(d.positions[:, k].max()))
    for k in range(d.n_coils):
        rep.column_ranges[f"i{k + 1}"] = (float(d.currents[:, k].min()), float(d.currents[:, k].max()))
    for k, name in enumerate(["bx", "by", "bz"]):
        rep.column_ranges[name] = (float(d.fields[:, k].min()), float(d.fields[:, k].max()))
    return rep


# --------------------------------------------------------------------------
# CSV + sidecar


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_kv(path, items: dict) -> None:
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(d: Dataset, path, extra_meta: dict | None = None) -> None:
    """Write the dataset CSV plus a ``.meta`` key-value sidecar."""
    path = Path(path)
    nc = d.n_coils
    cols = [d.positions[:, k] for k in range(3)] + [d.currents[:, k] for k in range(nc)] + \
        [d.fields[:, k] for k in range(3)]
    # repr() gives the shortest round-tripping decimal
    float_cols = [[_fmt(v) for v in c.tolist()] for c in cols]
    with open(path, "w", newline="\n") as f:
        f.write(",".join(csv_header(nc)) + "\n")
        cv = d.current_vector_id.tolist()
        sid = d.sensor_id.tolist()
        for j in range(len(d)):
            f.write(f"{cv[j]},{sid[j]}," + ",".join(col[j] for col in float_cols) + "\n")

    meta = {"provenance": d.provenance, "n_coils": nc,
            "n_current_vectors": d.n_current_vectors, "n_sensors": len(d.sensor_positions)}
    meta.update({k: v for k, v in d.meta.items()})
    if extra_meta:
        meta.update(extra_meta)
    for sid_, p in sorted(d.sensor_positions.items()):
        meta[f"sensor.{sid_}"] = ",".join(_fmt(v) for v in p)
    write_kv(sidecar_path(path), meta)


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as f:
        header = f.readline().strip().split(",")
    n_coils = len(header) - 8
    if n_coils < 1 or header != csv_header(n_coils):
        raise DatasetError(f"{path}: unexpected CSV header {header}")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    if raw.shape[0] and raw.shape[1] != len(header):
        raise DatasetError(f"{path}: expected {len(header)} columns, found {raw.shape[1]}")
    sensor_positions: dict = {}
    provenance = str(path)
    meta: dict = {}
    side = sidecar_path(path)
    if side.exists():
        kv = read_kv(side)
        for k, v in kv.items():
            if k.startswith("sensor."):
                sensor_positions[int(k.split(".", 1)[1])] = np.array([float(t) for t in v.split(",")])
            elif k == "provenance":
                provenance = v
            else:
                meta[k] = v
    cv = raw[:, 0].astype(np.int64)
    sid = raw[:, 1].astype(np.int64)
    return Dataset(cv, sid, raw[:, 2:5], raw[:, 5:5 + n_coils], raw[:, 5 + n_coils:],
                   sensor_positions, provenance, meta)
