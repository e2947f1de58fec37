"""Linear multipole electromagnet model.

Each coil's field per ampere is expanded in gradients of real irregular solid
harmonics ``r**-(l+1) Y_lm`` about the coil's own centre, so every basis
field is curl- and divergence-free. The prediction is ``A(p) @ i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import qr, solve_triangular

from .core import Dataset, i_max

FORMAT = "emns.lmem"
VERSION = 1


class LmemFitError(ValueError):
    pass


def n_terms(max_degree: int) -> int:
    return max_degree * (max_degree + 2)


def term_index(max_degree: int) -> list[tuple[int, int]]:
    """(l, m) pairs in coefficient order: l ascending, then m from -l to l."""
    return [(l, m) for l in range(1, max_degree + 1) for m in range(-l, l + 1)]


def _regular_complex(r: np.ndarray, max_degree: int):
    """Unnormalised complex regular solid harmonics ``r**l P_l^m e^{i m phi}``
    for ``0 <= m <= l <= max_degree`` and their Cartesian gradients.

    Returns dicts keyed by (l, m): values ``(N,)`` and gradients ``(N, 3)``.
    """
    x, y, z = r[:, 0], r[:, 1], r[:, 2]
    n = r.shape[0]
    w = x + 1j * y
    r2 = x * x + y * y + z * z
    dw = np.array([1.0, 1j, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    val: dict = {}
    grad: dict = {}
    for m in range(max_degree + 1):
        # sectoral seed: (-1)^m (2m-1)!! w^m
        c = (-1) ** m * math.prod(range(1, 2 * m, 2))
        val[m, m] = c * w**m
        grad[m, m] = (c * m * w ** (m - 1))[:, None] * dw if m else np.zeros((n, 3), complex)
        if m + 1 <= max_degree:
            val[m + 1, m] = (2 * m + 1) * z * val[m, m]
            grad[m + 1, m] = (2 * m + 1) * (val[m, m][:, None] * ez + z[:, None] * grad[m, m])
        for l in range(m + 1, max_degree):
            a = (2 * l + 1) / (l - m + 1)
            b = (l + m) / (l - m + 1)
            val[l + 1, m] = a * z * val[l, m] - b * r2 * val[l - 1, m]
            grad[l + 1, m] = (a * (val[l, m][:, None] * ez + z[:, None] * grad[l, m])
                              - b * (2.0 * val[l - 1, m][:, None] * r + r2[:, None] * grad[l - 1, m]))
    return val, grad


def solid_harmonic_fields(offsets, max_degree: int, reference_radius: float = 1.0) -> np.ndarray:
    """Field basis ``-grad(I_lm) * reference_radius**(l+2)`` at ``offsets``.

    ``I_lm`` are Schmidt semi-normalised real irregular solid harmonics,
    cosine type for m >= 0 and sine type for m < 0. Returns
    ``(N, n_terms, 3)``.
    """
    r = np.atleast_2d(np.asarray(offsets, dtype=np.float64))
    rn2 = np.sum(r * r, axis=1)
    if np.any(rn2 == 0):
        raise ZeroDivisionError("basis field is singular at the expansion centre")
    val, grad = _regular_complex(r, max_degree)
    out = np.empty((r.shape[0], n_terms(max_degree), 3))
    for q, (l, m) in enumerate(term_index(max_degree)):
        am = abs(m)
        norm = math.sqrt((1 if am == 0 else 2) * math.factorial(l - am) / math.factorial(l + am))
        R, gR = val[l, am], grad[l, am]
        if m < 0:
            R, gR = R.imag, gR.imag
        else:
            R, gR = R.real, gR.real
        # Kelvin transform: I = R / r^(2l+1)
        inv = rn2 ** (-(2 * l + 1) / 2)
        gI = gR * inv[:, None] - (2 * l + 1) * (R * inv / rn2)[:, None] * r
        out[:, q, :] = -norm * reference_radius ** (l + 2) * gI
    return out


def basis_field(center, l: int, m: int, p, reference_radius: float = 1.0) -> np.ndarray:
    """Single basis field of degree ``l``, order ``m`` at point(s) ``p``."""
    if l < 1 or abs(m) > l:
        raise ValueError("need l >= 1 and |m| <= l")
    offsets = np.atleast_2d(np.asarray(p, dtype=np.float64) - np.asarray(center, dtype=np.float64))
    q = term_index(l).index((l, m))
    out = solid_harmonic_fields(offsets, l, reference_radius)[:, q, :]
    return out[0] if np.ndim(p) == 1 else out


@dataclass(frozen=True, eq=False)
class MultipoleBasis:
    centers: np.ndarray  # (n_coils, 3)
    max_degree: int = 3
    reference_radius: float = 0.2

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64).reshape(-1, 3)
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        if not 1 <= self.max_degree <= 5:
            raise ValueError("max_degree must lie in 1..5")

    @property
    def n_coils(self) -> int:
        return self.centers.shape[0]

    @property
    def terms_per_coil(self) -> int:
        return n_terms(self.max_degree)

    def fields(self, positions) -> np.ndarray:
        """Per-coil basis fields, ``(N, n_coils, n_terms, 3)``."""
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        return np.stack([solid_harmonic_fields(p - c, self.max_degree, self.reference_radius)
                         for c in self.centers], axis=1)


@dataclass(frozen=True, eq=False)
class LmemModel:
    basis: MultipoleBasis
    coefficients: np.ndarray  # (n_coils, n_terms)
    diagnostics: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    def actuation_matrix(self, positions) -> np.ndarray:
        return actuation_matrix(self, positions)

    def predict(self, positions, currents) -> np.ndarray:
        return predict(self, positions, currents)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "basis": {
                "centers": self.basis.centers.tolist(),
                "max_degree": self.basis.max_degree,
                "reference_radius": self.basis.reference_radius,
                "coefficient_order": "coil,l,m",
            },
            "coefficients": self.coefficients.tolist(),
            "diagnostics": self.diagnostics,
            "training": self.training,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmemModel":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError(f"not an {FORMAT} v{VERSION} document")
        b = d["basis"]
        basis = MultipoleBasis(np.array(b["centers"]), b["max_degree"], b["reference_radius"])
        return cls(basis, np.array(d["coefficients"], dtype=np.float64),
                   d.get("diagnostics", {}), d.get("training", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "LmemModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def design_matrix(basis: MultipoleBasis, positions, currents) -> np.ndarray:
    """Rows (sample, axis) x columns (coil, l, m): ``basis_field * i_k``."""
    F = basis.fields(positions)  # (N, K, T, 3)
    i = np.asarray(currents, dtype=np.float64)
    D = F * i[:, :, None, None]
    n = D.shape[0]
    return D.transpose(0, 3, 1, 2).reshape(n * 3, -1)


def fit(train: Dataset, basis: MultipoleBasis, current_cap: float = 5.0) -> LmemModel:
    """Least-squares fit on the samples whose largest coil current is at most
    ``current_cap``, using column-pivoted QR."""
    if train.n_coils != basis.n_coils:
        raise LmemFitError(f"dataset has {train.n_coils} coils, basis has {basis.n_coils}")
    keep = i_max(train.currents) <= current_cap
    n_keep = int(keep.sum())
    n_coef = basis.n_coils * basis.terms_per_coil
    if n_keep < n_coef:
        raise LmemFitError(
            f"only {n_keep} samples with i_max <= {current_cap} A; need at least {n_coef}"
        )
    A = design_matrix(basis, train.positions[keep], train.currents[keep])
    y = train.fields[keep].reshape(-1)
    Q, R, piv = qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * diag[0]
    deficient = np.flatnonzero(diag <= tol)
    if deficient.size:
        col = int(piv[deficient[0]])
        coil, q = divmod(col, basis.terms_per_coil)
        l, m = term_index(basis.max_degree)[q]
        raise LmemFitError(
            f"rank-deficient design: coil {coil + 1}, degree {l} (order {m}) not identifiable"
        )
    sol = solve_triangular(R, Q.T @ y)
    coef = np.empty(n_coef)
    coef[piv] = sol
    resid = y - A @ coef
    diagnostics = {
        "n_samples": n_keep,
        "current_cap_A": current_cap,
        "residual_rmse_T": float(np.sqrt(np.mean(resid**2))),
        "condition_estimate": float(diag[0] / diag[-1]),
    }
    return LmemModel(basis, coef.reshape(basis.n_coils, basis.terms_per_coil), diagnostics)


def actuation_matrix(model: LmemModel, positions) -> np.ndarray:
    """``A(p)`` in T/A: ``(3, n_coils)`` for one point, ``(N, 3, n_coils)`` for many."""
    p = np.asarray(positions, dtype=np.float64)
    F = model.basis.fields(p)  # (N, K, T, 3)
    A = np.einsum("nkta,kt->nak", F, model.coefficients)
    return A[0] if p.ndim == 1 else A


def predict(model: LmemModel, positions, currents) -> np.ndarray:
    A = actuation_matrix(model, positions)
    i = np.asarray(currents, dtype=np.float64)
    if A.ndim == 2:
        return A @ i if i.ndim == 1 else i @ A.T
    return np.einsum("nak,nk->na", A, np.broadcast_to(i, (A.shape[0], A.shape[2])))
