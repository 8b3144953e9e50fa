"""Losses, the physics residual of the discretized oxygen balance, Adam, and
the sequential (never shuffled) training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numgrad as ng
from .asm1 import Asm1Params, oxygen_rate
from .cells import Model
from .data import NormStats, WindowBatch
from .numgrad import Param, Tensor2D

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
HISTORY_COLUMNS = ("epoch", "train_objective", "train_mse", "train_mae", "val_mse", "val_mae")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"objective diverged to {value!r} at epoch {epoch}")
        self.epoch = epoch
        self.value = value


class OptimizerStateError(RuntimeError):
    pass


class PhysicsConfigError(ValueError):
    pass


def _vectors(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    a = np.asarray(actual, dtype=np.float64).reshape(-1)
    if p.size == 0 or a.size == 0:
        raise ValueError("empty vectors")
    if p.size != a.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {a.size} actual values")
    return p, a


def mse(pred, actual) -> float:
    p, a = _vectors(pred, actual)
    d = p - a
    return float(np.mean(d * d))


def mae(pred, actual) -> float:
    p, a = _vectors(pred, actual)
    return float(np.mean(np.abs(p - a)))


def _mse_tensor(pred: Tensor2D, actual: np.ndarray) -> Tensor2D:
    diff = ng.sub(pred, actual.reshape(pred.shape))
    return ng.mean(ng.square(diff))


# -- physics ---------------------------------------------------------------

RateFn = Callable[[object, dict], object]


def asm1_rate(params: Asm1Params) -> RateFn:
    """Right-hand side f(S_O; S_S, S_NH, x_BH, x_BA) of the oxygen balance."""

    def f(S_O, exog):
        return oxygen_rate(S_O, exog["S_S"], exog["S_NH"], exog["x_BH"], exog["x_BA"], params)

    f.params = params
    return f


@dataclass
class PhysicsLossConfig:
    """Everything needed to evaluate the physics residual during training.

    ``feature_map`` maps each ODE input to a (feature column, factor) pair;
    ``stats`` are the normalization handles that take network outputs and
    window features back to physical units (None means already physical).
    """

    alpha: float = 0.1
    rate_fn: RateFn | None = None
    feature_map: dict[str, tuple[str, float]] = field(default_factory=dict)
    dt: float = 1.0
    stats: NormStats | None = None
    target_name: str = "S_O"

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise PhysicsConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not self.dt > 0:
            raise PhysicsConfigError(f"dt must be > 0, got {self.dt}")
        if self.rate_fn is None:
            raise PhysicsConfigError("rate_fn is required")

    def check_features(self, feature_names: Sequence[str]) -> None:
        missing = [col for col, _ in self.feature_map.values() if col not in feature_names]
        if missing:
            raise PhysicsConfigError(f"physics feature_map needs columns {missing} not among {list(feature_names)}")

    def exog_from_windows(self, batch: WindowBatch) -> dict[str, np.ndarray]:
        """ODE inputs at each window's last day, physical units, shape (N, 1)."""
        self.check_features(batch.feature_names)
        last = batch.x[:, -1, :]
        out = {}
        for ode_name, (col, factor) in self.feature_map.items():
            v = last[:, batch.feature_names.index(col)]
            if self.stats is not None:
                v = self.stats.unscale_column(col, v)
            out[ode_name] = factor * v.reshape(-1, 1)
        return out

    def to_physical(self, y):
        """Normalized target values (array or tensor) to physical units."""
        if self.stats is None:
            return y
        k = self.stats.columns.index(self.target_name)
        lo, hi = float(self.stats.min[k]), float(self.stats.max[k])
        half = 0.5 * (hi - lo)
        if isinstance(y, Tensor2D):
            return ng.add_const(ng.scale(y, half), half + lo)
        return (np.asarray(y, dtype=np.float64) + 1.0) * half + lo


def physics_residual(y, y_hat, exog: dict, cfg: PhysicsLossConfig):
    """Mean squared violation of the backward-Euler step by the predictions.

    ``sum_{i>=1} (y_i - y_{i-1} - dt f(x_i, y_hat_i))^2 / N`` with actual values
    on the left and the prediction inside f.  All inputs are physical units.
    ``y_hat`` may be a tensor, in which case a differentiable 1x1 tensor is
    returned; negative predictions are clipped at 0 before entering f.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    n = y.shape[0]
    if n < 2:
        raise ValueError("physics residual needs at least 2 points")
    missing = [k for k in cfg.feature_map if k not in exog]
    if missing:
        raise PhysicsConfigError(f"exogenous inputs missing: {missing}")
    ex = {k: np.asarray(v, dtype=np.float64).reshape(-1, 1) for k, v in exog.items()}
    dy = y[1:] - y[:-1]
    ex1 = {k: v[1:] for k, v in ex.items()}
    if isinstance(y_hat, Tensor2D):
        if y_hat.shape != (n, 1):
            raise ValueError(f"y_hat shape {y_hat.shape} does not match {n} targets")
        s_o = ng.relu(ng.rows_slice(y_hat, 1, n))
        rate = cfg.rate_fn(s_o, ex1)
        if not isinstance(rate, Tensor2D):
            rate = Tensor2D(np.broadcast_to(np.asarray(rate, dtype=np.float64), (n - 1, 1)))
        r = ng.sub(dy, ng.scale(rate, cfg.dt))
        return ng.scale(ng.total(ng.square(r)), 1.0 / n)
    yh = np.asarray(y_hat, dtype=np.float64).reshape(-1, 1)
    if yh.shape[0] != n:
        raise ValueError(f"{yh.shape[0]} predictions vs {n} targets")
    rate = np.broadcast_to(np.asarray(cfg.rate_fn(np.maximum(yh[1:], 0.0), ex1), dtype=np.float64), (n - 1, 1))
    r = dy - cfg.dt * rate
    return float(np.sum(r * r) / n)


def objective(pred, actual, physics: PhysicsLossConfig | None = None, exog: dict | None = None):
    """MSE, plus alpha times the physics residual when ``physics`` is given.

    ``pred`` and ``actual`` are in model (normalized) units; the residual is
    evaluated after mapping both to physical units.  Returns a tensor when
    ``pred`` is a tensor, else a float.
    """
    if isinstance(pred, Tensor2D):
        actual = np.asarray(actual, dtype=np.float64).reshape(-1, 1)
        loss = _mse_tensor(pred, actual)
        if physics is not None and physics.alpha > 0 and pred.rows >= 2:
            pr = physics_residual(physics.to_physical(actual), physics.to_physical(pred), exog, physics)
            loss = ng.ew_add(loss, ng.scale(pr, physics.alpha))
        return loss
    value = mse(pred, actual)
    if physics is not None and physics.alpha > 0 and np.size(pred) >= 2:
        pr = physics_residual(physics.to_physical(np.asarray(actual)), physics.to_physical(np.asarray(pred)), exog, physics)
        value += physics.alpha * pr
    return value


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Param]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Param],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of every non-frozen parameter, in place."""
    if len(params) != len(state.m):
        raise OptimizerStateError(f"state tracks {len(state.m)} tensors but {len(params)} parameters given")
    for p, m in zip(params, state.m):
        if p.grad is None:
            raise OptimizerStateError(f"parameter {p.name!r} has no gradient; run backward first")
        if m.shape != p.data.shape:
            raise OptimizerStateError(f"state shape {m.shape} does not match parameter {p.name!r} {p.shape}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, m, v in zip(params, state.m, state.v):
        if p.frozen:
            continue
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + epsilon)


# -- training loop -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int | None = None  # None: full batch
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.shuffle:
            raise ValueError("shuffling is not supported: windows are sequential")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + ["" if r[c] is None else format(r[c], ".17g") for c in HISTORY_COLUMNS[1:]])


def evaluate(model: Model, batch: WindowBatch, physics: PhysicsLossConfig | None = None) -> dict:
    pred = model.predict(batch.x)
    out = {"mse": mse(pred, batch.y), "mae": mae(pred, batch.y)}
    exog = physics.exog_from_windows(batch) if physics is not None else None
    out["objective"] = objective(pred, batch.y, physics, exog) if physics is not None else out["mse"]
    if physics is not None and len(batch) >= 2:
        out["physics"] = physics_residual(physics.to_physical(batch.y), physics.to_physical(pred), exog, physics)
    out["pred"] = pred
    return out


def _batches(n: int, size: int | None) -> list[tuple[int, int]]:
    size = n if not size else size
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def train(
    model: Model,
    windows: WindowBatch,
    cfg: TrainConfig,
    physics: PhysicsLossConfig | None = None,
    val: WindowBatch | None = None,
    state: AdamState | None = None,
) -> History:
    """Minimize MSE (+ alpha p_r) over ordered mini-batches with Adam.

    Train columns of each history row are batch-size weighted means of the
    values seen by the optimizer during that epoch (before each update), so
    in full-batch mode they describe the parameters entering the epoch.
    Validation columns are evaluated after the epoch.
    """
    if len(windows) == 0:
        raise ValueError("no training windows")
    if windows.x.shape[2] != model.input_width:
        raise ValueError(f"windows carry {windows.x.shape[2]} features, model expects {model.input_width}")
    use_physics = physics is not None and physics.alpha > 0
    if physics is not None:
        physics.check_features(windows.feature_names)
    params = model.parameters()
    state = state or AdamState.for_params(params)
    history = History()
    spans = _batches(len(windows), cfg.batch_size)
    exogs = [physics.exog_from_windows(windows[a:b]) if use_physics else None for a, b in spans]
    n = len(windows)
    for epoch in range(cfg.epochs):
        sums = {"objective": 0.0, "mse": 0.0, "mae": 0.0}
        for (a, b), exog in zip(spans, exogs):
            ng.zero_grad(params)
            with ng.Tape() as tape:
                pred = model.forward(windows.x[a:b])
                loss = objective(pred, windows.y[a:b], physics if use_physics else None, exog)
            value = loss.item()
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise TrainingDiverged(epoch + 1, value)
            p = pred.data[:, 0]
            sums["objective"] += value * (b - a)
            sums["mse"] += mse(p, windows.y[a:b]) * (b - a)
            sums["mae"] += mae(p, windows.y[a:b]) * (b - a)
            tape.backward(loss)
            adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        row = {
            "epoch": epoch + 1,
            "train_objective": sums["objective"] / n,
            "train_mse": sums["mse"] / n,
            "train_mae": sums["mae"] / n,
            "val_mse": None,
            "val_mae": None,
        }
        if val is not None and len(val):
            vp = model.predict(val.x)
            row["val_mse"], row["val_mae"] = mse(vp, val.y), mae(vp, val.y)
        history.rows.append(row)
    return history
