"""Finite-difference checks of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from . import trainer as tr
from .benchmarks import default_spec, generate


@dataclass
class GradCheckResult:
    name: str
    n_checked: int
    max_rel_error: float
    median_rel_error: float
    loss: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol

    def line(self) -> str:
        return (f"{self.name}: checked={self.n_checked} max_rel={self.max_rel_error:.3e} "
                f"median_rel={self.median_rel_error:.3e}")


def relative_errors(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|n|, floor)."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.abs(n), floor)


def _fd(loss_fn, x: np.ndarray, idx, delta: float) -> np.ndarray:
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        v = x.copy()
        v[i] = x[i] + delta
        lp = loss_fn(v)
        v[i] = x[i] - delta
        lm = loss_fn(v)
        out[j] = (lp - lm) / (2.0 * delta)
    return out


def gru_gradcheck(seed: int = 0, hidden: int = 2, k: int = 1, delta: float = 1e-6) -> GradCheckResult:
    """Small GRU (one timestep, V=2 by default) with its dense head, scored by a random linear functional."""
    rng = np.random.default_rng(seed)
    params = net.init_params(1, 1, hidden, 3, q=1, seed=seed)
    batch = rng.normal(size=(2, params.channels, k))
    w = rng.normal(size=(2, params.n_coef))
    ws = rng.normal(size=(2, params.q))

    def loss(vec):
        p = params.copy()
        p.set_flat(vec)
        raw, sh, _ = net.forward(p, batch)
        return float(np.sum(w * raw) + np.sum(ws * sh))

    raw, sh, tape = net.forward(params, batch)
    ga = net.flatten_grads(net.net_backward(params, tape, w, ws))
    x = params.flat()
    idx = np.arange(len(x))
    gn = _fd(loss, x, idx, delta)
    rel = relative_errors(ga[idx], gn)
    return GradCheckResult(f"gru_V{hidden}_k{k}", len(idx), float(rel.max()), float(np.median(rel)), loss(x))


def pipeline_gradcheck(hidden: int = 8, window: int = 20, seed: int = 0, delta: float = 1e-4,
                       max_params: int | None = None) -> GradCheckResult:
    """GRU, head, dropout, RK4 and MSE on the Lotka-Volterra benchmark, full window horizon.

    The head is initialised small (out_scale 0.5) so the random model stays
    well inside the divergence cap, where the loss is smooth.
    """
    ds = generate(default_spec("lotka_volterra"))
    cfg = tr.TrainConfig(hidden=hidden, window=window, substeps=2, out_scale=0.5, seed=seed)
    problem, params = tr.setup(ds, cfg)
    batch = tr.make_batches(ds, cfg.batch_size, window, seed=seed)[0]
    loss0, grads, info = tr.batch_loss(params, batch, problem)
    ga = net.flatten_grads(grads)
    x = params.flat()

    def loss(vec):
        p = params.copy()
        p.set_flat(vec)
        return tr.batch_loss(p, batch, problem, grad=False)[0]

    idx = np.arange(len(x))
    if max_params is not None and max_params < len(x):
        idx = np.sort(np.random.default_rng(seed).choice(len(x), max_params, replace=False))
    gn = _fd(loss, x, idx, delta)
    rel = relative_errors(ga[idx], gn)
    return GradCheckResult(f"pipeline_V{hidden}_k{window}", len(idx), float(rel.max()), float(np.median(rel)), loss0)


def dense_gradcheck(seed: int = 0, hidden: int = 4, delta: float = 1e-6) -> GradCheckResult:
    """Head parameters only, GRU held fixed; scored by a random linear functional."""
    rng = np.random.default_rng(seed)
    params = net.init_params(2, 1, hidden, 6, q=1, seed=seed)
    batch = rng.normal(size=(3, params.channels, 5))
    w = rng.normal(size=(3, params.n_coef))
    names = ("W1", "b1", "W2", "b2")
    sizes = [params.weights[k].size for k in names]

    def split(vec):
        out, pos = {}, 0
        for k, sz in zip(names, sizes):
            out[k] = vec[pos:pos + sz].reshape(params.weights[k].shape)
            pos += sz
        return out

    def loss(vec):
        p = params.copy()
        p.weights.update(split(vec))
        raw, _, _ = net.forward(p, batch)
        return float(np.sum(w * raw))

    _, _, tape = net.forward(params, batch)
    grads = net.net_backward(params, tape, w, None, gru=False)
    ga = np.concatenate([grads[k].ravel() for k in names])
    x = np.concatenate([params.weights[k].ravel() for k in names])
    gn = _fd(loss, x, np.arange(len(x)), delta)
    rel = relative_errors(ga, gn)
    return GradCheckResult("dense_only", len(x), float(rel.max()), float(np.median(rel)), loss(x))


def zero_loss_check(seed: int = 0, window: int = 20) -> GradCheckResult:
    """Head pinned to the generating coefficients on data from the same solver: loss and gradient vanish."""
    from .benchmarks import lotka_volterra_model
    from .ode import solve

    truth = lotka_volterra_model()
    cfg = tr.TrainConfig(hidden=4, window=window, substeps=2, seed=seed, coef_scaling="none")
    u = np.ones((101, 1))
    traj, _ = solve(truth, [30.0, 4.0], u, 1.0, 100, substeps=cfg.substeps)
    problem, params = tr.setup(traj, cfg)
    params.weights["W2"][:] = 0.0
    params.weights["b2"][:params.n_coef] = truth.coefficients.ravel()
    batch = tr.make_batches(traj, cfg.batch_size, window, seed=seed)[0]
    loss, grads, _ = tr.batch_loss(params, batch, problem)
    g = np.abs(net.flatten_grads(grads))
    return GradCheckResult("zero_loss", g.size, float(g.max()), float(np.median(g)), loss)
