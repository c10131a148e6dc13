"""Ground-truth benchmark data and the CSV dataset format.

Data is produced by fine-step RK4 (at least 100 steps per sample interval)
and read off the sample grid.  Parameters for Lorenz, F8 and the pathogen
model are the usual textbook values, not fitted ones.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .library import SparseODEModel, build_library
from .ode import Trajectory, save_trajectory_csv, solve

SYSTEMS = ("lotka_volterra", "lorenz", "f8_cruiser", "pathogen")


class GenerationError(RuntimeError):
    pass


class CSVFormatError(ValueError):
    pass


@dataclass
class BenchmarkSpec:
    system: str
    x0: list[float]
    duration: float = 200.0
    rate: float = 1.0
    input: dict = field(default_factory=lambda: {"kind": "zero"})
    noise: float = 0.0
    seed: int = 0
    substeps: int = 100
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        if self.duration <= 0 or self.rate <= 0:
            raise ValueError("duration and rate must be positive")
        if self.substeps < 100:
            raise ValueError("generation needs at least 100 solver steps per sample interval")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        n = self.duration * self.rate
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"duration * rate = {n} is not an integer sample count")
        self.x0 = [float(v) for v in self.x0]

    @property
    def n_intervals(self) -> int:
        return int(round(self.duration * self.rate))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValueError(f"bad benchmark spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "BenchmarkSpec":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ValueError(f"{path}: expected a JSON object")
        return cls.from_dict(d)


LV_PARAMS = {"a": 0.52, "b": -0.026, "c": 0.999, "d": -0.501, "e": 0.005}
LORENZ_PARAMS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
PATHOGEN_PARAMS = {"s": 10.0, "d": 0.1, "beta": 0.002, "delta": 0.5, "p": 5.0, "c": 3.0}


def lotka_volterra_model(params: dict | None = None) -> SparseODEModel:
    p = {**LV_PARAMS, **(params or {})}
    lib = build_library(2, 1, 2)
    return SparseODEModel.from_terms(lib, [
        {"x1": p["a"], "x1*x2": p["b"]},
        {"u": p["c"], "x2": p["d"], "x1*x2": p["e"]},
    ])


def lorenz_model(params: dict | None = None) -> SparseODEModel:
    p = {**LORENZ_PARAMS, **(params or {})}
    lib = build_library(3, 0, 2)
    return SparseODEModel.from_terms(lib, [
        {"x1": -p["sigma"], "x2": p["sigma"]},
        {"x1": p["rho"], "x2": -1.0, "x1*x3": -1.0},
        {"x1*x2": 1.0, "x3": -p["beta"]},
    ])


def f8_rhs(x, u):
    """Longitudinal F8 Crusader dynamics (Garrard-Jordan cubic fit)."""
    x1, x2, x3 = x
    u = u[0]
    return np.array([
        -0.877 * x1 + x3 - 0.088 * x1 * x3 + 0.47 * x1 ** 2 - 0.019 * x2 ** 2 - x1 ** 2 * x3
        + 3.846 * x1 ** 3 - 0.215 * u + 0.28 * x1 ** 2 * u + 0.47 * x1 * u ** 2 + 0.63 * u ** 3,
        x3,
        -4.208 * x1 - 0.396 * x3 - 0.47 * x1 ** 2 - 3.564 * x1 ** 3 - 20.967 * u
        + 6.265 * x1 ** 2 * u + 46.0 * x1 * u ** 2 + 61.4 * u ** 3,
    ])


def pathogen_rhs(x, u, p=None):
    """Target-cell / infected-cell / pathogen load with treatment efficacy u."""
    p = {**PATHOGEN_PARAMS, **(p or {})}
    T, I, V = x
    eff = 1.0 - u[0]
    return np.array([
        p["s"] - p["d"] * T - p["beta"] * eff * T * V,
        p["beta"] * eff * T * V - p["delta"] * I,
        p["p"] * I - p["c"] * V,
    ])


def default_spec(system: str, **overrides) -> BenchmarkSpec:
    base = {
        "lotka_volterra": dict(x0=[30.0, 4.0], rate=1.0, input={"kind": "constant", "value": [1.0]}),
        "lorenz": dict(x0=[-8.0, 7.0, 27.0], rate=20.0),
        "f8_cruiser": dict(x0=[0.1, 0.0, 0.0], rate=10.0,
                           input={"kind": "sine", "amplitude": [0.05], "frequency": [0.1]}),
        "pathogen": dict(x0=[100.0, 1.0, 1.0], rate=1.0, input={"kind": "constant", "value": [0.3]}),
    }[system]
    base.update(overrides)
    return BenchmarkSpec(system=system, **base)


def n_inputs_of(system: str) -> int:
    return {"lotka_volterra": 1, "lorenz": 0, "f8_cruiser": 1, "pathogen": 1}[system]


def ground_truth_model(spec: BenchmarkSpec) -> SparseODEModel | None:
    if spec.system == "lotka_volterra":
        return lotka_volterra_model(spec.params)
    if spec.system == "lorenz":
        return lorenz_model(spec.params)
    return None


def input_signal(desc: dict, times: np.ndarray, m: int) -> np.ndarray:
    kind = desc.get("kind", "zero")
    if m == 0:
        return np.zeros((len(times), 0))
    if kind == "zero":
        return np.zeros((len(times), m))
    if kind == "constant":
        return np.tile(np.asarray(desc["value"], dtype=float).reshape(1, m), (len(times), 1))
    if kind == "sine":
        amp = np.asarray(desc["amplitude"], dtype=float).reshape(1, m)
        freq = np.asarray(desc["frequency"], dtype=float).reshape(1, m)
        offset = np.asarray(desc.get("offset", [0.0] * m), dtype=float).reshape(1, m)
        return offset + amp * np.sin(2 * np.pi * freq * times[:, None])
    raise ValueError(f"unknown input kind {kind!r}")


def _rk4_closed_form(rhs, x0, u, dt, n_intervals, substeps):
    h = dt / substeps
    x = np.asarray(x0, dtype=float)
    out = np.empty((n_intervals + 1, len(x)))
    out[0] = x
    for s in range(n_intervals):
        us = u[s]
        for _ in range(substeps):
            k1 = rhs(x, us)
            k2 = rhs(x + 0.5 * h * k1, us)
            k3 = rhs(x + 0.5 * h * k2, us)
            k4 = rhs(x + h * k3, us)
            x = x + h / 6.0 * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
        if not np.all(np.isfinite(x)):
            return out, s + 1
        out[s + 1] = x
    return out, None


def generate(spec: BenchmarkSpec) -> Trajectory:
    """Simulate the benchmark and return it on the sample grid (plus optional noise)."""
    dt = 1.0 / spec.rate
    N = spec.n_intervals
    times = dt * np.arange(N + 1)
    m = n_inputs_of(spec.system)
    u = input_signal(spec.input, times, m)
    truth = ground_truth_model(spec)
    if len(spec.x0) != (3 if spec.system != "lotka_volterra" else 2):
        raise ValueError(f"x0 has wrong length for {spec.system}")
    if truth is not None:
        traj, _ = solve(truth, spec.x0, u, dt, N, substeps=spec.substeps)
        states, div = traj.states, traj.diverged_at
    elif spec.system == "f8_cruiser":
        states, div = _rk4_closed_form(f8_rhs, spec.x0, u, dt, N, spec.substeps)
    else:
        states, div = _rk4_closed_form(lambda x, uu: pathogen_rhs(x, uu, spec.params), spec.x0, u, dt, N,
                                       spec.substeps)
    if div is not None:
        raise GenerationError(f"{spec.system} ground truth diverged at t={div * dt:g}")
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        states = states + rng.normal(0.0, spec.noise, size=states.shape)
    return Trajectory(times, states, u)


def save_csv(dataset: Trajectory, path) -> None:
    save_trajectory_csv(dataset, path)


def load_csv(path, rtol: float = 1e-9) -> Trajectory:
    """Read a ``t, x1..xn, u1..um`` CSV; the time grid must be uniform."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise CSVFormatError(f"{path}: first column must be 't'")
    xs = [h for h in header[1:] if h.startswith("x")]
    us = header[1 + len(xs):]
    if not xs or xs != [f"x{i + 1}" for i in range(len(xs))] or us != [f"u{j + 1}" for j in range(len(us))]:
        raise CSVFormatError(f"{path}: header must be t, x1..xn, u1..um; got {header}")
    data = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CSVFormatError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        try:
            data.append([float(c) for c in row])
        except ValueError:
            raise CSVFormatError(f"{path}: non-numeric cell in row {r}") from None
    arr = np.asarray(data, dtype=float).reshape(-1, len(header))
    t = arr[:, 0]
    if len(t) >= 2:
        steps = np.diff(t)
        dt = steps[0]
        if dt <= 0:
            raise CSVFormatError(f"{path}: time must increase (row 3)")
        bad = np.flatnonzero(np.abs(steps - dt) > rtol * abs(dt) + 1e-12 * abs(t[1:]))
        if bad.size:
            raise CSVFormatError(f"{path}: non-uniform time grid at row {int(bad[0]) + 3}")
    return Trajectory(t, arr[:, 1:1 + len(xs)], arr[:, 1 + len(xs):])
