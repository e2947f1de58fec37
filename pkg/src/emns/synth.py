"""Synthetic eMNS: saturating point-dipole electromagnets and a sensor-grid
data-collection protocol.

Each coil is a point dipole whose moment follows a tanh saturation curve of
its effective drive ``coupling @ currents``. Fields add linearly over coils,
so the only nonlinearity is the per-core saturation.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    MAX_CURRENT, N_COILS, POWER_LIMIT, RESISTANCE_PER_COIL, Dataset, power_of,
)

MU0_OVER_4PI = 1e-7
MIN_STANDOFF = 0.01

# Defaults: coils 22 cm from the workspace centre along cube-diagonal
# directions (layout turned 45 deg about z so no diagonal hits a grid corner).
COIL_RADIUS = 0.22
COIL_LAYOUT_ROTATION_DEG = 45.0
# m_sat bounds every field component on the default grid to ~196 mT even
# with all coils saturated
COIL_M_SAT = 540.0
# gain * drive / m_sat = 0.6 at 10 A: linear within 5% up to ~6.5 A, about
# half the linear extrapolation at 35 A
COIL_GAIN = COIL_M_SAT * 0.06
COUPLING_OFFDIAG = 0.05
DROPPED_SENSORS = frozenset({12, 37, 58, 71, 96, 118})


class StandoffError(ValueError):
    """Query point too close to a coil centre for the dipole model."""


@dataclass(frozen=True, eq=False)
class CoilSpec:
    center: np.ndarray
    axis: np.ndarray
    gain: float
    m_sat: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(a) - 1.0) > 1e-12:
            raise ValueError("coil axis must be a unit vector")
        if self.gain <= 0 or self.m_sat <= 0:
            raise ValueError("coil gain and m_sat must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "axis", a)


def default_coils(radius=COIL_RADIUS, rotation_deg=COIL_LAYOUT_ROTATION_DEG,
                  gain=COIL_GAIN, m_sat=COIL_M_SAT) -> tuple[CoilSpec, ...]:
    th = np.deg2rad(rotation_deg)
    rz = np.array([[np.cos(th), -np.sin(th), 0.0], [np.sin(th), np.cos(th), 0.0], [0.0, 0.0, 1.0]])
    coils = []
    for corner in itertools.product((-1.0, 1.0), repeat=3):
        d = rz @ (np.array(corner) / np.sqrt(3.0))
        d /= np.linalg.norm(d)
        coils.append(CoilSpec(radius * d, -d, gain, m_sat))
    return tuple(coils)


def default_coupling(n: int = N_COILS, offdiag: float = COUPLING_OFFDIAG) -> np.ndarray:
    c = np.full((n, n), offdiag)
    np.fill_diagonal(c, 1.0)
    return c


@dataclass(frozen=True, eq=False)
class SynthEmnsConfig:
    coils: tuple = field(default_factory=default_coils)
    coupling: np.ndarray = field(default_factory=default_coupling)
    resistance_per_coil: float = RESISTANCE_PER_COIL
    power_limit: float = POWER_LIMIT
    max_current: float = MAX_CURRENT
    field_noise_sd: float = 148e-6
    current_noise_sd: float = 0.169
    averaging_window: int = 8
    grid_shape: tuple = (5, 5, 5)
    grid_pitch: float = 0.05
    grid_center: tuple = (0.0, 0.0, 0.0)
    dropped_sensors: frozenset = DROPPED_SENSORS
    saturation: bool = True
    current_sampling: str = "leveled"
    seed: int = 0

    def __post_init__(self):
        coupling = np.array(self.coupling, dtype=np.float64)
        n = len(self.coils)
        if coupling.shape != (n, n):
            raise ValueError(f"coupling must be {n}x{n}")
        if np.any(np.diag(coupling) != 1.0):
            raise ValueError("coupling diagonal must be 1")
        off = coupling[~np.eye(n, dtype=bool)]
        if off.size and np.max(np.abs(off)) > 0.1:
            raise ValueError("coupling off-diagonal magnitudes must be <= 0.1")
        if self.field_noise_sd < 0 or self.current_noise_sd < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.averaging_window < 1:
            raise ValueError("averaging_window must be >= 1")
        if self.current_sampling not in ("uniform", "leveled"):
            raise ValueError("current_sampling must be 'uniform' or 'leveled'")
        coupling.setflags(write=False)
        object.__setattr__(self, "coupling", coupling)
        object.__setattr__(self, "coils", tuple(self.coils))
        object.__setattr__(self, "dropped_sensors", frozenset(int(s) for s in self.dropped_sensors))
        object.__setattr__(self, "grid_shape", tuple(int(g) for g in self.grid_shape))
        object.__setattr__(self, "grid_center", tuple(float(g) for g in self.grid_center))

    @property
    def n_coils(self) -> int:
        return len(self.coils)

    @property
    def centers(self) -> np.ndarray:
        return np.array([c.center for c in self.coils])

    def replace(self, **kw) -> "SynthEmnsConfig":
        return replace(self, **kw)

    def sensor_grid(self) -> dict[int, np.ndarray]:
        """All grid sensors, id = row-major index over (x, y, z)."""
        axes = [(np.arange(n) - (n - 1) / 2) * self.grid_pitch + c
                for n, c in zip(self.grid_shape, self.grid_center)]
        return {sid: np.array(p) for sid, p in enumerate(itertools.product(*axes))}

    def active_sensors(self) -> dict[int, np.ndarray]:
        return {k: v for k, v in self.sensor_grid().items() if k not in self.dropped_sensors}

    def to_kv(self) -> dict[str, str]:
        kv = {}
        for k, c in enumerate(self.coils, 1):
            kv[f"coil{k}.center"] = ",".join(repr(float(v)) for v in c.center)
            kv[f"coil{k}.axis"] = ",".join(repr(float(v)) for v in c.axis)
            kv[f"coil{k}.gain"] = repr(float(c.gain))
            kv[f"coil{k}.m_sat"] = repr(float(c.m_sat))
        for k, row in enumerate(self.coupling, 1):
            kv[f"coupling.row{k}"] = ",".join(repr(float(v)) for v in row)
        kv.update({
            "resistance_per_coil": repr(float(self.resistance_per_coil)),
            "power_limit": repr(float(self.power_limit)),
            "max_current": repr(float(self.max_current)),
            "field_noise_sd": repr(float(self.field_noise_sd)),
            "current_noise_sd": repr(float(self.current_noise_sd)),
            "averaging_window": str(self.averaging_window),
            "grid_shape": ",".join(str(g) for g in self.grid_shape),
            "grid_pitch": repr(float(self.grid_pitch)),
            "grid_center": ",".join(repr(float(g)) for g in self.grid_center),
            "dropped_sensors": ",".join(str(s) for s in sorted(self.dropped_sensors)),
            "saturation": "true" if self.saturation else "false",
            "current_sampling": self.current_sampling,
            "seed": str(self.seed),
        })
        return kv

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_kv().items()))
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_kv(cls, kv: dict[str, str], base: "SynthEmnsConfig | None" = None) -> "SynthEmnsConfig":
        """Overlay string key-values on ``base`` (defaults when omitted).

        Unknown keys raise ``KeyError``.
        """
        base = base or cls()
        floats = lambda s: [float(t) for t in s.split(",") if t.strip()]  # noqa: E731
        coils = [dict(center=c.center, axis=c.axis, gain=c.gain, m_sat=c.m_sat) for c in base.coils]
        coupling = np.array(base.coupling)
        kw: dict = {}
        scalar = {"resistance_per_coil": float, "power_limit": float, "max_current": float,
                  "field_noise_sd": float, "current_noise_sd": float, "averaging_window": int,
                  "grid_pitch": float, "seed": int, "current_sampling": str}
        for key, val in kv.items():
            if key.startswith("coil") and "." in key and key[4:].split(".")[0].isdigit():
                idx_s, attr = key[4:].split(".", 1)
                idx = int(idx_s) - 1
                if not 0 <= idx < len(coils) or attr not in coils[idx]:
                    raise KeyError(f"unknown config key {key!r}")
                coils[idx][attr] = floats(val) if attr in ("center", "axis") else float(val)
            elif key.startswith("coupling.row"):
                coupling[int(key[len("coupling.row"):]) - 1] = floats(val)
            elif key in scalar:
                kw[key] = scalar[key](val)
            elif key == "grid_shape":
                kw[key] = tuple(int(t) for t in val.split(","))
            elif key == "grid_center":
                kw[key] = tuple(floats(val))
            elif key == "dropped_sensors":
                kw[key] = frozenset(int(t) for t in val.split(",") if t.strip())
            elif key == "saturation":
                kw[key] = val.strip().lower() in ("1", "true", "yes", "on")
            else:
                raise KeyError(f"unknown config key {key!r}")
        kw["coils"] = tuple(CoilSpec(**c) for c in coils)
        kw["coupling"] = coupling
        return replace(base, **kw)


# --------------------------------------------------------------------------
# physics


def effective_moment(currents, cfg: SynthEmnsConfig) -> np.ndarray:
    """Dipole moments of all coils, shape ``(..., n_coils, 3)`` in A m^2.

    ``m_k = axis_k * m_sat * tanh(gain * drive_k / m_sat)`` with
    ``drive = coupling @ i``; linear ``gain * drive`` when saturation is off.
    """
    i = np.asarray(currents, dtype=np.float64)
    drive = i @ cfg.coupling.T
    gain = np.array([c.gain for c in cfg.coils])
    if cfg.saturation:
        m_sat = np.array([c.m_sat for c in cfg.coils])
        mag = m_sat * np.tanh(gain * drive / m_sat)
    else:
        mag = gain * drive
    axes = np.array([c.axis for c in cfg.coils])
    return mag[..., :, None] * axes


def dipole_field(r, m) -> np.ndarray:
    """Point-dipole flux density at offsets ``r`` for moments ``m``."""
    dist = np.linalg.norm(r, axis=-1, keepdims=True)
    rhat = r / dist
    return MU0_OVER_4PI * (3.0 * rhat * np.sum(rhat * m, axis=-1, keepdims=True) - m) / dist**3


def ground_truth_field(positions, currents, cfg: SynthEmnsConfig) -> np.ndarray:
    """Noiseless field of the synthetic system, broadcasting over leading axes.

    ``positions`` is ``(..., 3)`` and ``currents`` ``(..., n_coils)``.
    """
    p = np.asarray(positions, dtype=np.float64)
    m = effective_moment(currents, cfg)
    b = np.zeros(np.broadcast_shapes(p.shape, m.shape[:-2] + (3,)))
    for k, coil in enumerate(cfg.coils):
        r = p - coil.center
        if np.any(np.linalg.norm(r, axis=-1) < MIN_STANDOFF):
            raise StandoffError(f"query point within {MIN_STANDOFF} m of coil {k + 1}")
        b = b + dipole_field(r, m[..., k, :])
    return b


# --------------------------------------------------------------------------
# collection protocol


def generate_current_vectors(n: int, cfg: SynthEmnsConfig, rng=None) -> tuple[np.ndarray, float]:
    """Rejection-sample ``n`` power-feasible current vectors.

    ``uniform`` draws every coil from U(-max, max). ``leveled`` first draws a
    level s ~ U(0, max] per vector, then every coil from U(-s, s), so that the
    largest coil current is spread over the whole range.

    Returns ``(currents, acceptance_rate)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 0])
    nc, imax = cfg.n_coils, cfg.max_current
    accepted: list = []
    n_tried = 0
    while len(accepted) < n:
        batch = max(n - len(accepted), 16)
        u = rng.uniform(-1.0, 1.0, size=(batch, nc))
        if cfg.current_sampling == "uniform":
            cand = imax * u
        else:
            level = imax * (1.0 - rng.random(batch))  # (0, imax]
            cand = level[:, None] * u
        ok = power_of(cand, cfg.resistance_per_coil) <= cfg.power_limit
        for row, good in zip(cand, ok):
            n_tried += 1
            if good:
                accepted.append(row)
                if len(accepted) == n:
                    break
    return np.array(accepted), n / n_tried


def collect_dataset(n_currents: int, cfg: SynthEmnsConfig | None = None,
                    all_sensors: bool = False) -> Dataset:
    """Replay the collection protocol on the synthetic system.

    Every current vector is applied once; each sensor records the averaged
    field (noise sd / sqrt(window) per axis) and the recorded currents are the
    averaged current readings, clipped to the hardware limit.
    """
    cfg = cfg or SynthEmnsConfig()
    currents, rate = generate_current_vectors(n_currents, cfg)
    sensors = cfg.sensor_grid() if all_sensors else cfg.active_sensors()
    sids = np.array(sorted(sensors))
    pos = np.array([sensors[s] for s in sids])
    n_s = sids.size

    w = np.sqrt(cfg.averaging_window)
    field_sd = cfg.field_noise_sd / w
    current_sd = cfg.current_noise_sd / w
    fields = np.empty((n_currents, n_s, 3))
    recorded = np.empty_like(currents)
    for k in range(n_currents):
        # one stream per current vector keeps results independent of work order
        rng = np.random.default_rng([cfg.seed, 1, k])
        b = ground_truth_field(pos, currents[k], cfg)
        fields[k] = b + field_sd * rng.standard_normal((n_s, 3)) if field_sd > 0 else b
        noise = current_sd * rng.standard_normal(cfg.n_coils) if current_sd > 0 else 0.0
        recorded[k] = np.clip(currents[k] + noise, -cfg.max_current, cfg.max_current)

    cv = np.repeat(np.arange(n_currents), n_s)
    meta = {"seed": cfg.seed, "acceptance_rate": repr(rate), "config_hash": cfg.config_hash(),
            "current_sampling": cfg.current_sampling}
    return Dataset(
        cv, np.tile(sids, n_currents), np.tile(pos, (n_currents, 1)),
        np.repeat(recorded, n_s, axis=0), fields.reshape(-1, 3),
        {int(s): sensors[s] for s in sids},
        provenance=f"synthetic seed={cfg.seed} (grid centred on origin)", meta=meta,
    )
