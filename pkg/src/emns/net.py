"""Fully connected tanh network trained with Adam on mean squared error."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, ScalerParams, fit_scaler, split_ids, transform_features

FORMAT = "emns.mlp"
VERSION = 1


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    widths: tuple = (11, 100, 50, 25, 3)
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("need at least one hidden layer")
        if self.hidden_activation != "tanh" or self.output_activation != "identity":
            raise ValueError("only tanh hidden layers with a linear output are supported")


@dataclass(eq=False)
class MlpParams:
    weights: list  # (fan_in, fan_out) per layer
    biases: list

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        n = len(arrays) // 2
        return cls(list(arrays[:n]), list(arrays[n:]))

    def map(self, fn, *others) -> "MlpParams":
        return MlpParams.from_arrays([fn(a, *(o.arrays()[k] for o in others))
                                      for k, a in enumerate(self.arrays())])


def init_params(arch: MlpArchitecture, rng) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(arch.widths[:-1], arch.widths[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def _activations(params: MlpParams, X) -> list:
    acts = [X]
    a = X
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W + b
        a = z if k == last else np.tanh(z)
        acts.append(a)
    return acts


def forward(params: MlpParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite network input")
    single = X.ndim == 1
    out = _activations(params, np.atleast_2d(X))[-1]
    return out[0] if single else out


def mse(params: MlpParams, X, Y) -> float:
    r = forward(params, X) - Y
    return float(np.mean(r * r))


def backward(params: MlpParams, X, Y) -> tuple[float, MlpParams]:
    """Batch-mean squared error over all outputs and its exact gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    acts = _activations(params, X)
    resid = acts[-1] - Y
    loss = float(np.mean(resid * resid))
    delta = 2.0 * resid / resid.size
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    for k in range(len(params.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ params.weights[k].T) * (1.0 - acts[k] ** 2)
    return loss, MlpParams(gw, gb)


@dataclass(eq=False)
class AdamState:
    m: list
    v: list
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()], **kw)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * m_ + (1 - b1) * g for m_, g in zip(state.m, grads.arrays())]
    v = [b2 * v_ + (1 - b2) * g * g for v_, g in zip(state.v, grads.arrays())]
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = [p - state.learning_rate * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps)
           for p, m_, v_ in zip(params.arrays(), m, v)]
    return MlpParams.from_arrays(new), AdamState(m, v, t, state.learning_rate, b1, b2, state.eps)


@dataclass(frozen=True)
class TrainSpec:
    batch_size: int = 128
    max_epochs: int = 50
    validation_fraction: float = 0.1
    patience: int = 5
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strictly lower loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, loss: float, epoch: int) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def train_arrays(Xtr, Ytr, Xva, Yva, arch: MlpArchitecture, spec: TrainSpec,
                 params: MlpParams | None = None) -> tuple[MlpParams, list[dict]]:
    """Mini-batch Adam with per-epoch shuffling and best-epoch restoration.

    Returns the parameters of the epoch with the lowest validation loss and
    the per-epoch history.
    """
    if params is None:
        params = init_params(arch, np.random.default_rng([spec.seed, 0]))
    shuffle_rng = np.random.default_rng([spec.seed, 1])
    state = AdamState.zeros_like(params, learning_rate=spec.learning_rate)
    stopper = EarlyStopping(spec.patience)
    best = params.copy()
    history = []
    n = Xtr.shape[0]
    for epoch in range(1, spec.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        # overflow is caught below as a non-finite loss
        with np.errstate(over="ignore", invalid="ignore"):
            for s in range(0, n, spec.batch_size):
                b = perm[s:s + spec.batch_size]
                loss, grads = backward(params, Xtr[b], Ytr[b])
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, step {state.t + 1}")
                params, state = adam_step(params, grads, state)
                total += loss * b.size
            val = mse(params, Xva, Yva)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_mse": total / n, "val_mse": val})
        improved, stop = stopper.update(val, epoch)
        if improved:
            best = params.copy()
        if stop:
            break
    return best, history


@dataclass(eq=False)
class MlpModel:
    """Network plus the feature scaler and the target unit it was trained in.

    The network outputs fields in units of ``target_scale`` tesla.
    """

    arch: MlpArchitecture
    params: MlpParams
    scaler: ScalerParams
    target_scale: float = 1.0
    history: list = field(default_factory=list)
    training: dict = field(default_factory=dict)

    def predict_scaled(self, Z) -> np.ndarray:
        return forward(self.params, Z) * self.target_scale

    def predict(self, positions, currents) -> np.ndarray:
        X = np.hstack([np.atleast_2d(positions), np.atleast_2d(currents)])
        return self.predict_scaled(transform_features(X, self.scaler))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "architecture": asdict(self.arch),
            "weights": [w.tolist() for w in self.params.weights],
            "biases": [b.tolist() for b in self.params.biases],
            "scaler": self.scaler.to_dict(),
            "target_scale_T": self.target_scale,
            "training": self.training,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError(f"not an {FORMAT} v{VERSION} document")
        arch = MlpArchitecture(**d["architecture"])
        params = MlpParams([np.array(w, dtype=np.float64).reshape(a, b) for w, a, b in
                            zip(d["weights"], arch.widths[:-1], arch.widths[1:])],
                           [np.array(b, dtype=np.float64) for b in d["biases"]])
        return cls(arch, params, ScalerParams.from_dict(d["scaler"]), float(d["target_scale_T"]),
                   [], d.get("training", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def history_csv(self) -> str:
        lines = ["epoch,train_mse,val_mse"]
        lines += [f"{h['epoch']},{h['train_mse']!r},{h['val_mse']!r}" for h in self.history]
        return "\n".join(lines) + "\n"


def train(train_set: Dataset, arch: MlpArchitecture = MlpArchitecture(),
          spec: TrainSpec = TrainSpec()) -> MlpModel:
    """Scale features on the training set, hold out whole current vectors for
    validation and fit the network.

    Targets are divided by their root-mean-square over the training set;
    the recorded history is converted back to T^2.
    """
    if arch.widths[0] != 3 + train_set.n_coils or arch.widths[-1] != 3:
        raise ValueError(f"architecture {arch.widths} does not match {3 + train_set.n_coils} inputs / 3 outputs")
    fit_ids, val_ids = split_ids(train_set.current_vector_ids(), spec.validation_fraction, [spec.seed, 2])
    if val_ids.size == 0:
        raise ValueError("validation split is empty; need more current vectors")
    fit_part = train_set.select_current_vectors(fit_ids)
    val_part = train_set.select_current_vectors(val_ids)
    scaler = fit_scaler(train_set)
    Xtr = transform_features(fit_part.features(), scaler)
    Xva = transform_features(val_part.features(), scaler)
    scale = float(np.sqrt(np.mean(train_set.fields**2)))
    if not scale > 0:
        raise ValueError("training targets are all zero")
    params, history = train_arrays(Xtr, fit_part.fields / scale, Xva, val_part.fields / scale, arch, spec)
    history = [{"epoch": h["epoch"], "train_mse": h["train_mse"] * scale**2,
                "val_mse": h["val_mse"] * scale**2} for h in history]
    best = min(history, key=lambda h: h["val_mse"])
    return MlpModel(arch, params, scaler, scale, history, {
        "n_samples": len(train_set),
        "n_current_vectors": train_set.n_current_vectors,
        "best_epoch": best["epoch"],
        "best_val_mse": best["val_mse"],
        "epochs_run": len(history),
    })
