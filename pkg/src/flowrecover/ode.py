"""Fixed-step RK4 integration of sparse models and its discrete adjoint.

Inputs are held constant over each sample interval (zero-order hold).
``solve`` can take several RK4 substeps per sample; the returned
trajectory is always on the sample grid.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .library import LibraryError, SparseODEModel, TermLibrary


class TapeMismatchError(ValueError):
    """The tape was recorded with different coefficients than the ones supplied."""


@dataclass
class Trajectory:
    """Sampled states and inputs on a uniform time grid.

    ``diverged_at`` is the index of the first non-finite sample when the
    solve blew up, else ``None``; rows from there on are NaN.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    diverged_at: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(len(self.times), -1)
        if len(self.states) != len(self.times):
            raise ValueError("states and times have different lengths")

    @property
    def n_samples(self) -> int:
        return len(self.times)

    @property
    def n_states(self) -> int:
        return self.states.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.times[start:stop], self.states[start:stop], self.inputs[start:stop])


# the same container doubles as the dataset interchange type
TimeSeriesDataset = Trajectory


@dataclass
class SolveTape:
    """Stage states and derivatives of every RK4 step, for the adjoint pass."""

    stage_states: np.ndarray  # (steps, 4, B, n)
    stage_derivs: np.ndarray
    inputs: np.ndarray  # (B, samples, m), effective inputs used by the solve
    dt: float  # inner step
    substeps: int
    n_valid: np.ndarray
    checksum: str
    consumed: bool = field(default=False, repr=False)

    def __len__(self) -> int:
        return self.stage_states.shape[0]


def theta_checksum(theta: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(theta, dtype=float).tobytes()).hexdigest()


def _coefficients(model) -> tuple[np.ndarray, TermLibrary]:
    if isinstance(model, SparseODEModel):
        return model.coefficients, model.library
    theta, lib = model
    return np.asarray(theta, dtype=float), lib


def solve_batch(theta, library: TermLibrary, x0, u, dt: float, n_steps: int, substeps: int = 1,
                record: bool = False, backend: str | None = None):
    """Batched solve: ``x0`` is (B, n), ``u`` is (B, n_steps+1, m).

    Returns ``(states, n_valid, tape_or_None)``; ``states`` is (B, n_steps+1, n).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    impl = kernels.get(backend)
    theta = np.ascontiguousarray(theta, dtype=float)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    B = x0.shape[0]
    u = np.asarray(u, dtype=float).reshape(B, n_steps + 1, library.n_inputs)
    fptr, fidx, inidx = library.kernel_layout
    h = dt / substeps
    states, sst, sdv, n_valid = impl.solve_batch(theta, fptr, fidx, inidx, x0, u, h, n_steps, substeps, record)
    tape = None
    if record:
        tape = SolveTape(sst, sdv, u, h, substeps, n_valid, theta_checksum(theta))
    return states, n_valid, tape


def adjoint_batch(tape: SolveTape, theta, library: TermLibrary, gstates, backend: str | None = None):
    """Gradients of ``sum(gstates * states)`` w.r.t. theta, x0 and inputs."""
    theta = np.ascontiguousarray(theta, dtype=float)
    if theta_checksum(theta) != tape.checksum:
        raise TapeMismatchError("coefficients differ from the ones the tape was recorded with")
    impl = kernels.get(backend)
    fptr, fidx, inidx = library.kernel_layout
    return impl.adjoint_batch(theta, fptr, fidx, inidx, tape.stage_states, tape.inputs, tape.dt,
                              tape.substeps, np.asarray(gstates, dtype=float), tape.n_valid)


def _input_series(library: TermLibrary, u_series, n_rows: int) -> np.ndarray:
    m = library.n_inputs
    if u_series is None:
        return np.zeros((n_rows, m))
    u = np.asarray(u_series, dtype=float)
    if u.ndim <= 1 and u.size == m:
        return np.tile(u.reshape(1, m), (n_rows, 1))
    u = u.reshape(len(u), -1) if u.ndim == 1 and m == 1 else u
    if u.shape != (n_rows, m):
        raise LibraryError(f"input series has shape {u.shape}, expected {(n_rows, m)}")
    return u


def rk4_step(model: SparseODEModel, x, u=None, dt: float = 0.01):
    """One classical RK4 step with ``u`` held fixed.

    Returns ``(x_next, stage_states, stage_derivs)``; the stage arrays are (4, n).
    """
    theta, lib = _coefficients(model)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != lib.n_states:
        raise LibraryError("state vector does not match library")
    u = _input_series(lib, u, 2)
    states, n_valid, tape = solve_batch(theta, lib, x, u[None], dt, 1, 1, record=True)
    return states[0, 1], tape.stage_states[0, :, 0], tape.stage_derivs[0, :, 0]


def solve(model: SparseODEModel, x0, u_series=None, dt: float = 0.01, n_steps: int = 0, record: bool = False,
          substeps: int = 1, t0: float = 0.0, backend: str | None = None):
    """Integrate ``model`` from ``x0`` over ``n_steps`` sample intervals of ``dt``.

    ``u_series`` has ``n_steps + 1`` rows (a single input vector is
    broadcast).  A diverging solve returns the finite prefix, NaN rows after
    it, and ``diverged_at`` set; it does not raise.
    """
    theta, lib = _coefficients(model)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != lib.n_states:
        raise LibraryError("initial state does not match library")
    u = _input_series(lib, u_series, n_steps + 1)
    states, n_valid, tape = solve_batch(theta, lib, x0[None], u[None], dt, n_steps, substeps, record, backend)
    nv = int(n_valid[0])
    traj = Trajectory(t0 + dt * np.arange(n_steps + 1), states[0], u, None if nv == n_steps + 1 else nv)
    return traj, tape


def adjoint_grad(tape: SolveTape, model: SparseODEModel, dl_dtraj, backend: str | None = None):
    """Exact gradient of the discrete RK4 solve.

    ``dl_dtraj`` is dL/dstates for every sample, shape (n_steps+1, n).
    Returns ``(dL/dTheta, dL/dx0)``.
    """
    theta, lib = _coefficients(model)
    g = np.asarray(dl_dtraj, dtype=float)
    if g.ndim == 2:
        g = g[None]
    dtheta, dx0, _ = adjoint_batch(tape, theta, lib, g, backend)
    return dtheta, dx0[0]


def save_trajectory_csv(traj: Trajectory, path) -> None:
    n, m = traj.n_states, traj.n_inputs
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(traj.n_samples):
            row = [traj.times[k], *traj.states[k], *traj.inputs[k]]
            w.writerow([repr(float(v)) for v in row])
