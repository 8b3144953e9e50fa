"""Reduced ASM1 aerobic oxygen balance and synthetic plant data generation.

Only the dissolved-oxygen equation is simulated.  The concentrations that drive
it (readily biodegradable substrate, ammonium, heterotrophic and autotrophic
biomass) are generated as exogenous signals, never co-simulated.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np

from .data import Dataset

DRIVER_FIELDS = ("S_S", "S_NH", "x_BH", "x_BA")
NITRIFICATION_O2 = 4.57  # g O2 per g N oxidized to nitrate


class Asm1DomainError(ValueError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


@dataclass(frozen=True)
class Asm1Params:
    Y_H: float
    Y_A: float
    mu_H: float  # 1/day
    mu_A: float  # 1/day
    K_S: float  # g COD/m3
    K_NH: float  # g NH3-N/m3
    K_OH: float  # g O2/m3
    K_OA: float  # g O2/m3
    kla: float = 0.0  # 1/day, 0 disables the aeration term
    so_sat: float = 8.0  # g O2/m3

    def __post_init__(self):
        for name in ("Y_H", "Y_A", "mu_H", "mu_A", "K_S", "K_NH", "K_OH", "K_OA", "so_sat"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if self.Y_H >= 1 or self.Y_A >= 1:
            raise ValueError("yields Y_H and Y_A must be < 1")
        if not (math.isfinite(self.kla) and self.kla >= 0):
            raise ValueError(f"kla must be >= 0, got {self.kla}")

    def with_aeration(self, kla: float, so_sat: float | None = None) -> Asm1Params:
        return replace(self, kla=kla, so_sat=self.so_sat if so_sat is None else so_sat)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Asm1Params:
        return cls(**{k: float(v) for k, v in d.items()})


def load_defaults() -> Asm1Params:
    """Packaged BSM1 kinetic constants, aeration off."""
    text = resources.files("pitl").joinpath("asm1_defaults.json").read_text(encoding="utf-8")
    return Asm1Params.from_dict(json.loads(text)["params"])


@dataclass
class Asm1Point:
    t: float
    S_O: float
    S_S: float
    S_NH: float
    x_BH: float
    x_BA: float
    aux: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("S_O", "S_S", "S_NH", "x_BH", "x_BA"):
            if getattr(self, name) < 0:
                raise Asm1DomainError(f"negative concentration {name}={getattr(self, name)}")
        for name, v in self.aux.items():
            if v < 0:
                raise Asm1DomainError(f"negative concentration {name}={v}")


def _consumption_coeffs(S_S, S_NH, x_BH, x_BA, p: Asm1Params):
    het = (1.0 - p.Y_H) / p.Y_H * p.mu_H * (S_S / (p.K_S + S_S)) * x_BH
    aut = (NITRIFICATION_O2 - p.Y_A) / p.Y_A * p.mu_A * (S_NH / (p.K_NH + S_NH)) * x_BA
    return het, aut


def oxygen_rate(S_O, S_S, S_NH, x_BH, x_BA, p: Asm1Params):
    """dS_O/dt in g O2/m3/day.

    Works element-wise on floats, numpy arrays, or (for ``S_O`` only) numgrad
    tensors, which is how the training objective differentiates through it.
    """
    het, aut = _consumption_coeffs(S_S, S_NH, x_BH, x_BA, p)
    rate = -het * (S_O / (S_O + p.K_OH)) - aut * (S_O / (S_O + p.K_OA))
    if p.kla > 0:
        rate = rate + (-p.kla * S_O + p.kla * p.so_sat)
    return rate


def oxygen_rate_dso(S_O, S_S, S_NH, x_BH, x_BA, p: Asm1Params):
    """Partial derivative of :func:`oxygen_rate` with respect to S_O."""
    het, aut = _consumption_coeffs(S_S, S_NH, x_BH, x_BA, p)
    return -het * p.K_OH / (p.K_OH + S_O) ** 2 - aut * p.K_OA / (p.K_OA + S_O) ** 2 - p.kla


def do_rate(point: Asm1Point, params: Asm1Params) -> float:
    for name in ("S_O", "S_S", "S_NH", "x_BH", "x_BA"):
        v = getattr(point, name)
        if not math.isfinite(v) or v < 0:
            raise Asm1DomainError(f"{name} must be finite and >= 0, got {v}")
    return float(oxygen_rate(point.S_O, point.S_S, point.S_NH, point.x_BH, point.x_BA, params))


# -- exogenous drivers -----------------------------------------------------


@dataclass
class SignalProfile:
    """mean + sum of sinusoids + bounded low-pass noise, floored at 0.

    ``sinusoids`` holds (period_days, amplitude) pairs; phases are seeded.  The
    noise is an AR(1) filter of uniform(-1, 1) innovations, so its magnitude
    never exceeds ``noise_amp``.
    """

    mean: float
    sinusoids: list[tuple[float, float]] = field(default_factory=list)
    noise_amp: float = 0.0
    noise_corr: float = 0.8

    @property
    def bound(self) -> float:
        return sum(abs(a) for _, a in self.sinusoids) + abs(self.noise_amp)


@dataclass
class DriverSeries:
    t: np.ndarray
    columns: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.t)

    def at(self, t: float) -> dict[str, float]:
        if t < self.t[0] - 1e-9 or t > self.t[-1] + 1e-9:
            raise ValueError(f"drivers do not cover t={t} (span {self.t[0]}..{self.t[-1]})")
        return {k: float(np.interp(t, self.t, v)) for k, v in self.columns.items()}

    @classmethod
    def constant(cls, values: dict[str, float], horizon: float) -> DriverSeries:
        t = np.array([0.0, float(horizon)])
        return cls(t, {k: np.full(2, float(v)) for k, v in values.items()})


def gen_drivers(seed: int, horizon_days: int, profiles: dict[str, SignalProfile]) -> DriverSeries:
    """Daily-sampled driver signals over ``horizon_days`` days."""
    if horizon_days < 1:
        raise ValueError("horizon_days must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(horizon_days, dtype=np.float64)
    cols = {}
    for name in sorted(profiles):
        prof = profiles[name]
        x = np.full(horizon_days, float(prof.mean))
        for period, amp in prof.sinusoids:
            phase = rng.uniform(0.0, 2.0 * np.pi)
            x += amp * np.sin(2.0 * np.pi * t / period + phase)
        u = rng.uniform(-1.0, 1.0, size=horizon_days)
        if prof.noise_amp:
            rho = prof.noise_corr
            noise = np.empty(horizon_days)
            noise[0] = u[0]
            for k in range(1, horizon_days):
                noise[k] = rho * noise[k - 1] + (1.0 - rho) * u[k]
            x += prof.noise_amp * noise
        cols[name] = np.maximum(x, 0.0)
    return DriverSeries(t, cols)


# -- integration -------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray
    S_O: np.ndarray
    drivers: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> Asm1Point:
        d = {name: float(v[k]) for name, v in self.drivers.items()}
        core = {name: d.pop(name) for name in DRIVER_FIELDS}
        return Asm1Point(float(self.t[k]), float(self.S_O[k]), aux=d, **core)


def _rate_at(y: float, d: dict[str, float], p: Asm1Params) -> float:
    return float(oxygen_rate(y, d["S_S"], d["S_NH"], d["x_BH"], d["x_BA"], p))


def backward_euler_step(y_prev: float, d: dict[str, float], p: Asm1Params, h: float, step_index: int = 0) -> float:
    """Solve ``y = y_prev + h f(y)`` for y >= 0.

    Fixed-point iteration damped by the local slope, ``y <- y - g(y)/g'(y)``
    with ``g(y) = y - y_prev - h f(y)``; stops once the update is below 1e-10.
    """
    y = y_prev
    for _ in range(100):
        g = y - y_prev - h * _rate_at(y, d, p)
        dg = 1.0 - h * float(oxygen_rate_dso(y, d["S_S"], d["S_NH"], d["x_BH"], d["x_BA"], p))
        y_new = max(y - g / dg, 0.0)
        if abs(y_new - y) < 1e-10:
            # one more update to land on the rounding floor of the residual
            g = y_new - y_prev - h * _rate_at(y_new, d, p)
            dg = 1.0 - h * float(oxygen_rate_dso(y_new, d["S_S"], d["S_NH"], d["x_BH"], d["x_BA"], p))
            return max(y_new - g / dg, 0.0)
        y = y_new
    raise IntegrationError("backward Euler solve did not converge in 100 iterations", step_index)


def rk4_step(y: float, t: float, drivers: DriverSeries, p: Asm1Params, h: float) -> float:
    d0, dm, d1 = drivers.at(t), drivers.at(t + 0.5 * h), drivers.at(t + h)
    k1 = _rate_at(y, d0, p)
    k2 = _rate_at(max(y + 0.5 * h * k1, 0.0), dm, p)
    k3 = _rate_at(max(y + 0.5 * h * k2, 0.0), dm, p)
    k4 = _rate_at(max(y + h * k3, 0.0), d1, p)
    return max(y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)


def integrate(
    initial_S_O: float,
    drivers: DriverSeries,
    params: Asm1Params,
    step: float,
    method: str = "euler_backward",
) -> Trajectory:
    """Integrate S_O over the span of ``drivers`` starting from ``initial_S_O``."""
    if step <= 0:
        raise ValueError("step must be > 0")
    if initial_S_O < 0:
        raise Asm1DomainError("initial S_O must be >= 0")
    if method not in ("euler_backward", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    missing = [f for f in DRIVER_FIELDS if f not in drivers.columns]
    if missing:
        raise ValueError(f"drivers lack columns {missing}")
    t0, t1 = float(drivers.t[0]), float(drivers.t[-1])
    n = int(round((t1 - t0) / step))
    if abs(t0 + n * step - t1) > 1e-9 * max(1.0, abs(t1)):
        raise ValueError(f"step {step} does not divide the driver span {t1 - t0}")
    t = t0 + step * np.arange(n + 1)
    y = np.empty(n + 1)
    y[0] = initial_S_O
    for k in range(1, n + 1):
        if method == "euler_backward":
            y[k] = backward_euler_step(y[k - 1], drivers.at(t[k]), params, step, k)
        else:
            y[k] = rk4_step(y[k - 1], t[k - 1], drivers, params, step)
    cols = {name: np.interp(t, drivers.t, v) for name, v in drivers.columns.items()}
    return Trajectory(t, y, cols)


def steady_state_do(d: dict[str, float], params: Asm1Params) -> float:
    """S_O with zero net rate under fixed drivers (0 without aeration)."""
    if params.kla <= 0:
        return 0.0
    # a huge implicit step converges to the fixed point of the rate
    return backward_euler_step(params.so_sat, d, params, 1e9)


# -- datasets ----------------------------------------------------------------

OPEN_SOURCE_FEATURES = ("S_S", "X_S", "X_I", "Q", "S_ND", "X_ND", "x_BH", "S_NH")


@dataclass
class SourcePlantConfig:
    """Open-source (simulated) plant used as the first transfer source."""

    kla: float = 10.0
    so_sat: float = 8.0
    x_BA_per_x_BH: float = 0.1
    profiles: dict[str, SignalProfile] = field(
        default_factory=lambda: {
            "S_S": SignalProfile(10.0, [(7.0, 2.0), (23.0, 4.0)], 3.0),
            "S_NH": SignalProfile(3.0, [(7.0, 0.5), (19.0, 1.2)], 0.8),
            "x_BH": SignalProfile(30.0, [(13.0, 4.0), (41.0, 7.0)], 4.0),
            "X_S": SignalProfile(200.0, [(7.0, 30.0), (29.0, 40.0)], 30.0),
            "X_I": SignalProfile(50.0, [(17.0, 10.0)], 8.0),
            "Q": SignalProfile(18000.0, [(7.0, 2000.0), (31.0, 3000.0)], 1500.0),
            "S_ND": SignalProfile(7.0, [(7.0, 1.0), (37.0, 2.0)], 1.0),
            "X_ND": SignalProfile(10.0, [(23.0, 3.0)], 2.0),
        }
    )


def emit_source_dataset(
    seed: int,
    n_points: int = 673,
    params: Asm1Params | None = None,
    config: SourcePlantConfig | None = None,
) -> Dataset:
    """Daily table of the eight open-source features and simulated S_O."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    cfg = config or SourcePlantConfig()
    p = (params or load_defaults()).with_aeration(cfg.kla, cfg.so_sat)
    drivers = gen_drivers(seed, n_points, cfg.profiles)
    drivers.columns["x_BA"] = cfg.x_BA_per_x_BH * drivers.columns["x_BH"]
    y0 = steady_state_do(drivers.at(0.0), p)
    traj = integrate(y0, drivers, p, 1.0, "euler_backward")
    features = np.column_stack([traj.drivers[name] for name in OPEN_SOURCE_FEATURES])
    return Dataset(
        name="source_open",
        t=traj.t.copy(),
        features=features,
        feature_names=list(OPEN_SOURCE_FEATURES),
        target=traj.S_O.copy(),
        provenance=f"asm1 simulation seed={seed} kla={p.kla} backward-euler dt=1",
    )


PLANT_FEATURES = ("Q_OWS", "pH", "TSS_DAF", "COD", "grease", "NH4_N", "phenol", "sulfur", "TSS_RAS", "TSS_A", "TSS_B")
TARGET_FEATURES = PLANT_FEATURES[1:]
INDUSTRIAL_FEATURES = ("Q_OWS", "pH", "COD", "NH4_N")


@dataclass
class PlantConfig:
    """A refinery-like plant whose DO follows the reduced ASM1 balance.

    The ODE inputs are exact linear proxies of measured columns, given by
    ``feature_map`` as {ode_input: (column, factor)}.
    """

    kla: float = 10.0
    so_sat: float = 8.0
    feature_map: dict[str, tuple[str, float]] = field(
        default_factory=lambda: {
            "S_S": ("COD", 0.05),
            "S_NH": ("NH4_N", 0.1),
            "x_BH": ("TSS_A", 0.015),
            "x_BA": ("TSS_A", 0.0015),
        }
    )
    profiles: dict[str, SignalProfile] = field(
        default_factory=lambda: {
            "Q_OWS": SignalProfile(400.0, [(7.0, 30.0), (19.0, 60.0)], 40.0),
            "pH": SignalProfile(7.4, [(7.0, 0.1), (13.0, 0.2)], 0.15),
            "TSS_DAF": SignalProfile(60.0, [(7.0, 5.0), (29.0, 12.0)], 10.0),
            "COD": SignalProfile(200.0, [(7.0, 20.0), (23.0, 60.0)], 50.0),
            "grease": SignalProfile(15.0, [(17.0, 4.0)], 4.0),
            "NH4_N": SignalProfile(30.0, [(11.0, 5.0), (31.0, 10.0)], 8.0),
            "phenol": SignalProfile(2.0, [(19.0, 0.5)], 0.5),
            "sulfur": SignalProfile(5.0, [(13.0, 1.0)], 1.0),
            "TSS_A": SignalProfile(2000.0, [(17.0, 200.0), (37.0, 350.0)], 200.0),
        }
    )
    # TSS_B and TSS_RAS follow TSS_A: gain * TSS_A + independent wander
    followers: dict[str, tuple[float, SignalProfile]] = field(
        default_factory=lambda: {
            "TSS_B": (0.9, SignalProfile(100.0, [(43.0, 60.0)], 80.0)),
            "TSS_RAS": (2.0, SignalProfile(200.0, [(37.0, 150.0)], 150.0)),
        }
    )
    feature_noise: float = 0.02  # measurement noise std as a fraction of column std
    target_noise: float = 0.25


def industrial_plant_config(target_noise: float = 0.1) -> PlantConfig:
    """Plant behind the industrial source: same physics, tighter labels and a
    nearly constant activated-sludge inventory, so the few measured columns
    (no TSS) still determine S_O."""
    cfg = PlantConfig(target_noise=target_noise)
    cfg.profiles["TSS_A"] = SignalProfile(2000.0, [(37.0, 30.0)], 20.0)
    return cfg


def plant_drivers(ds_or_columns, feature_map: dict[str, tuple[str, float]]) -> dict[str, np.ndarray]:
    """ODE inputs from measured columns through ``feature_map``."""
    if isinstance(ds_or_columns, Dataset):
        cols = {n: ds_or_columns.features[:, k] for k, n in enumerate(ds_or_columns.feature_names)}
    else:
        cols = ds_or_columns
    out = {}
    for ode_name, (column, factor) in feature_map.items():
        if column not in cols:
            raise KeyError(f"feature_map needs column {column!r} for {ode_name}")
        out[ode_name] = factor * np.asarray(cols[column], dtype=np.float64)
    return out


def emit_plant_dataset(
    seed: int,
    n_points: int = 900,
    params: Asm1Params | None = None,
    config: PlantConfig | None = None,
    name: str = "plant",
) -> Dataset:
    """Daily plant table (11 measured columns + S_O) from the reduced ASM1 balance."""
    cfg = config or PlantConfig()
    p = (params or load_defaults()).with_aeration(cfg.kla, cfg.so_sat)
    base = gen_drivers(seed, n_points, cfg.profiles)
    cols = dict(base.columns)
    follow = gen_drivers(seed + 7919, n_points, {k: prof for k, (_, prof) in cfg.followers.items()})
    for k, (gain, _) in cfg.followers.items():
        cols[k] = gain * cols["TSS_A"] + follow.columns[k]
    drivers = DriverSeries(base.t, plant_drivers(cols, cfg.feature_map))
    y0 = steady_state_do(drivers.at(0.0), p)
    traj = integrate(y0, drivers, p, 1.0, "euler_backward")
    features = np.column_stack([cols[n] for n in PLANT_FEATURES])
    target = traj.S_O.copy()
    rng = np.random.default_rng(seed + 104729)
    if cfg.feature_noise:
        features = features + rng.normal(size=features.shape) * (cfg.feature_noise * features.std(axis=0))
        features = np.maximum(features, 0.0)
    if cfg.target_noise:
        target = np.maximum(target + rng.normal(size=target.shape) * (cfg.target_noise * target.std()), 0.0)
    return Dataset(
        name=name,
        t=traj.t.copy(),
        features=features,
        feature_names=list(PLANT_FEATURES),
        target=target,
        provenance=(
            f"asm1 plant seed={seed} kla={p.kla} backward-euler dt=1 "
            f"feature_noise={cfg.feature_noise} target_noise={cfg.target_noise}"
        ),
    )
