"""Windowed batching, ODE loss and the end-to-end training loop."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import net
from .library import SparseODEModel, TermLibrary, build_library, eval_features
from .ode import Trajectory, adjoint_batch, solve, solve_batch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    window: int = 50
    hidden: int = 16
    dense_hidden: int | None = None
    order: int = 2
    include_constant: bool = False
    tau: float = 1e-3
    lr: float = 1e-2
    lr_final: float | None = 1e-4  # exponential decay target; None keeps lr constant
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    substeps: int = 4
    seed: int = 0
    loss_cap: float = 1e6
    coef_scaling: str = "auto"  # "auto" | "none"
    coef_gain: float = 1.0
    out_scale: float = 1.0
    input_shift: bool = False
    sparsify: str = "threshold"  # "threshold" | "top_p"
    top_p: int | None = None
    steps_per_batch: int = 50  # optimizer steps taken on each batch per epoch
    horizon_start: int = 2  # sub-window length at epoch 0
    horizon_fraction: float = 0.5  # share of epochs over which sub-windows grow to the full window
    tau_warmup: float = 0.6  # share of epochs trained before dropout switches on
    eval_substeps: int = 10
    threads: int = 1

    def __post_init__(self):
        for name in ("epochs",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "hidden", "order", "substeps", "eval_substeps", "threads", "steps_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.horizon_start < 2 or not 0.0 <= self.horizon_fraction <= 1.0:
            raise ValueError("horizon_start must be >= 2 and horizon_fraction in [0, 1]")
        if not 0.0 <= self.tau_warmup <= 1.0:
            raise ValueError("tau_warmup must be in [0, 1]")
        if self.tau < 0 or self.lr <= 0 or self.loss_cap <= 0:
            raise ValueError("tau must be >= 0; lr and loss_cap must be positive")
        if self.coef_scaling not in ("auto", "none"):
            raise ValueError(f"unknown coef_scaling {self.coef_scaling!r}")
        if self.sparsify not in ("threshold", "top_p"):
            raise ValueError(f"unknown sparsify mode {self.sparsify!r}")
        if self.sparsify == "top_p" and not self.top_p:
            raise ValueError("top_p mode needs top_p > 0")

    def horizon(self, epoch: int) -> int:
        """Sub-window length at ``epoch``: geometric growth, then the full window."""
        k = self.window
        ramp = self.horizon_fraction * self.epochs
        h0 = min(self.horizon_start, k)
        if ramp <= 0 or epoch >= ramp:
            return k
        return int(min(k, round(h0 * (k / h0) ** (epoch / ramp))))

    def threshold(self, epoch: int) -> float:
        return 0.0 if epoch < self.tau_warmup * self.epochs else self.tau

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BatchTensor:
    """Windows stacked as (B, C, k); also carries the raw slices the solver needs."""

    data: np.ndarray
    states: np.ndarray  # (B, k, n)
    inputs: np.ndarray  # (B, k, m)
    starts: np.ndarray

    @property
    def x0(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def k(self) -> int:
        return self.data.shape[2]


def window_starts(n_samples: int, k: int) -> np.ndarray:
    if n_samples < k:
        raise DatasetError(f"dataset has {n_samples} samples, shorter than window {k}")
    return np.arange(n_samples // k) * k


def make_batches(dataset: Trajectory, batch_size: int, k: int, seed: int = 0) -> list[BatchTensor]:
    """Non-overlapping length-k windows, shuffled by ``seed``, grouped by ``batch_size``."""
    starts = window_starts(dataset.n_samples, k)
    order = np.random.default_rng(seed).permutation(len(starts))
    starts = starts[order]
    out = []
    for lo in range(0, len(starts), batch_size):
        sel = starts[lo:lo + batch_size]
        st = np.stack([dataset.states[s:s + k] for s in sel])
        ins = np.stack([dataset.inputs[s:s + k] for s in sel])
        data = np.concatenate([st, ins], axis=2).transpose(0, 2, 1).copy()
        out.append(BatchTensor(data, st, ins, sel))
    return out


def ode_loss(reference, estimate, cap: float = math.inf) -> float:
    """Mean squared difference over all samples and states; diverged estimates score ``cap``."""
    ref = np.asarray(getattr(reference, "states", reference), dtype=float)
    est = np.asarray(getattr(estimate, "states", estimate), dtype=float)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {est.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        v = float(np.mean((est - ref) ** 2))
    if not math.isfinite(v) or v > cap:
        return float(cap)
    return v


def coefficient_scale(dataset: Trajectory, library: TermLibrary, gain: float = 1.0) -> np.ndarray:
    """Per-coefficient output scale ``gain * rms(dx_i/dt) / rms(term_j)``, flattened row-major.

    A unit head output then moves equation i by about its typical
    derivative whichever term it feeds, so every output sees a similarly
    conditioned loss.
    """
    dx = np.diff(dataset.states, axis=0) / dataset.dt
    rms_dx = np.sqrt(np.mean(dx ** 2, axis=0))
    feats = np.stack([eval_features(library, x, u) for x, u in zip(dataset.states, dataset.inputs)])
    rms_f = np.sqrt(np.mean(feats ** 2, axis=0))
    rms_f = np.where(rms_f > 0, rms_f, 1.0)
    rms_dx = np.where(rms_dx > 0, rms_dx, 1.0)
    return (gain * rms_dx[:, None] / rms_f[None, :]).ravel()


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, dataset: Trajectory) -> "Normalizer":
        full = np.concatenate([dataset.states, dataset.inputs], axis=1)
        std = full.std(axis=0)
        return cls(full.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mean[None, :, None]) / self.std[None, :, None]


@dataclass
class Problem:
    """Everything fixed for a training run besides the network parameters."""

    library: TermLibrary
    config: TrainConfig
    dt: float
    norm: Normalizer

    def sparsify(self, raw: np.ndarray, tau: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        if cfg.sparsify == "top_p":
            theta = net.top_p_dropout(raw, cfg.top_p)
            return theta, (theta != 0.0).astype(float)
        tau = cfg.tau if tau is None else tau
        return net.threshold_dropout(raw, tau), net.dropout_mask(raw, tau)


def _solve_chunks(theta, lib, x0, u, dt, n_steps, substeps, threads, record=True):
    B = x0.shape[0]
    if threads <= 1 or B < 2:
        return [(slice(0, B), solve_batch(theta, lib, x0, u, dt, n_steps, substeps, record))]
    bounds = np.linspace(0, B, min(threads, B) + 1).astype(int)
    sl = [slice(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    with ThreadPoolExecutor(len(sl)) as pool:
        res = list(pool.map(lambda s: solve_batch(theta, lib, x0[s], u[s], dt, n_steps, substeps, record), sl))
    return list(zip(sl, res))


def sub_windows(k: int, h: int) -> np.ndarray:
    """Start offsets of the length-h sub-windows tiling a length-k window (adjacent ones share a sample)."""
    h = min(max(h, 2), k)
    return np.arange(0, k - h + 1, h - 1)


def batch_loss(params: net.RecoveryNetParams, batch: BatchTensor, problem: Problem, grad: bool = True,
               horizon: int | None = None, tau: float | None = None):
    """Forward (GRU, head, dropout, RK4, MSE) and optionally the full backward pass.

    Returns ``(loss, grads or None, info)``; ``loss`` is the sum of per-window
    MSEs, each capped at ``loss_cap``.  With ``horizon`` h < k every window is
    cut into length-h sub-windows, each solved from its own measured first
    sample; the GRU still reads the whole window.
    """
    cfg = problem.config
    lib = problem.library
    raw, shifts, tape = net.forward(params, problem.norm(batch.data))
    B = batch.size
    k = batch.k
    h = k if horizon is None else min(max(horizon, 2), k)
    offs = sub_windows(k, h)
    ns = len(offs)
    n, T = lib.n_states, lib.term_count
    mean_raw = raw.mean(axis=0)
    theta_flat, mask = problem.sparsify(mean_raw, tau)
    theta = theta_flat.reshape(n, T)
    idx = offs[:, None] + np.arange(h)[None, :]  # (ns, h)
    u = batch.inputs[:, idx].reshape(B * ns, h, -1)
    if cfg.input_shift:
        u = u + shifts.mean(axis=0)[None, None, :]
    ref = batch.states[:, idx]  # (B, ns, h, n)
    x0 = ref[:, :, 0].reshape(B * ns, n)

    chunks = _solve_chunks(theta, lib, x0, u, problem.dt, h - 1, cfg.substeps, cfg.threads, record=grad)
    states = np.concatenate([c[1][0] for c in chunks]).reshape(B, ns, h, n)
    n_valid = np.concatenate([c[1][1] for c in chunks]).reshape(B, ns)

    losses = np.empty(B)
    g = np.zeros_like(states)
    denom = ns * h * n
    valid = np.arange(h)[None, None, :] < n_valid[:, :, None]  # (B, ns, h)
    with np.errstate(over="ignore", invalid="ignore"):
        for b in range(B):
            diff = np.where(valid[b][..., None], states[b] - ref[b], 0.0)
            peak = np.max(np.abs(diff)) if diff.size else 0.0
            lw = float(np.sum(diff * diff) / denom) if valid[b].all() else math.inf
            if math.isfinite(lw) and lw <= cfg.loss_cap:
                losses[b] = lw
                g[b] = 2.0 * diff / denom
            else:
                losses[b] = cfg.loss_cap
                if peak > 0 and math.isfinite(peak):
                    # prefix gradient rescaled so that it belongs to a loss of size cap
                    d = diff / peak
                    g[b] = cfg.loss_cap * 2.0 * d / (peak * np.sum(d * d))
    loss = float(losses.sum())
    info = {"theta": theta, "window_losses": losses, "n_valid": n_valid, "states": states}
    if not grad:
        return loss, None, info

    g = g.reshape(B * ns, h, n)
    dtheta = np.zeros((n, T))
    du = []
    for sl, (_, nvc, stape) in chunks:
        dth, _, duc = adjoint_batch(stape, theta, lib, g[sl])
        dtheta += dth
        du.append(duc)
    du = np.concatenate(du)
    d_mean = dtheta.ravel() * mask
    d_raw = np.broadcast_to(d_mean / B, (B, n * T))
    d_shift = None
    if cfg.input_shift:
        d_shift = np.broadcast_to(du.sum(axis=(0, 1)) / B, (B, params.q))
    grads = net.net_backward(params, tape, d_raw, d_shift)
    return loss, grads, info


class Adam:
    def __init__(self, params: net.RecoveryNetParams, cfg: TrainConfig, total_steps: int):
        self.m = {k: np.zeros_like(v) for k, v in params.weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.weights.items()}
        self.t = 0
        self.cfg = cfg
        self.total = max(total_steps, 1)

    def lr(self) -> float:
        cfg = self.cfg
        if cfg.lr_final is None:
            return cfg.lr
        frac = min(self.t / self.total, 1.0)
        return cfg.lr * (cfg.lr_final / cfg.lr) ** frac

    def step(self, params: net.RecoveryNetParams, grads: dict) -> None:
        cfg = self.cfg
        lr = self.lr()
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in net.TRAINABLE:
            gk = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * gk
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * gk * gk
            params.weights[k] = params.weights[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.adam_eps)


@dataclass
class SupportReport:
    true_positives: int
    false_positives: int
    false_negatives: int
    exact: bool
    spurious: list[str]
    missing: list[str]


def support_report(model: SparseODEModel, truth: SparseODEModel) -> SupportReport:
    names = model.library.names
    got, want = model.support, truth.support
    spurious = [f"eq{i + 1}:{names[j]}" for i, j in np.argwhere(got & ~want)]
    missing = [f"eq{i + 1}:{names[j]}" for i, j in np.argwhere(~got & want)]
    tp = int((got & want).sum())
    return SupportReport(tp, len(spurious), len(missing), not spurious and not missing, spurious, missing)


@dataclass
class EvalMetrics:
    mse: float
    support: list[set[str]]
    diverged: bool
    horizon_samples: int


def evaluate(model: SparseODEModel, dataset: Trajectory, substeps: int = 10, horizon: float | None = None) -> EvalMetrics:
    """Re-solve from the first sample and score against the whole record (or ``horizon`` seconds)."""
    lib = model.library
    if lib.n_states != dataset.n_states or lib.n_inputs != dataset.n_inputs:
        raise DatasetError("model library does not match dataset dimensions")
    n_rows = dataset.n_samples
    if horizon is not None:
        n_rows = min(n_rows, int(round(horizon / dataset.dt)) + 1)
    traj, _ = solve(model, dataset.states[0], dataset.inputs[:n_rows], dataset.dt, n_rows - 1, substeps=substeps)
    if traj.diverged:
        mse = math.inf
    else:
        mse = float(np.mean((traj.states - dataset.states[:n_rows]) ** 2))
        if not math.isfinite(mse):
            mse = math.inf
    return EvalMetrics(mse, model.support_terms(), not math.isfinite(mse), n_rows)


@dataclass
class RecoveryResult:
    model: SparseODEModel
    mse: float
    loss_history: list[float]
    support_history: list[int]
    params: net.RecoveryNetParams
    support: SupportReport | None = None
    wall_seconds: float = 0.0
    config: TrainConfig = field(default_factory=TrainConfig)

    def report(self) -> str:
        """Human-readable summary (4 significant digits)."""
        lines = ["recovered model:"]
        lines += ["  " + eq for eq in self.model.equations()]
        lines.append(f"reconstruction MSE: {self.mse:.4g}")
        lines.append(f"support size: {self.model.support_size}")
        lines.append(f"final training loss: {self.loss_history[-1]:.4g}" if self.loss_history else "final training loss: n/a")
        if self.support is not None:
            s = self.support
            lines.append(f"support vs truth: tp={s.true_positives} fp={s.false_positives} fn={s.false_negatives} "
                         f"exact={'yes' if s.exact else 'no'}")
            if s.spurious:
                lines.append("  spurious: " + ", ".join(s.spurious))
            if s.missing:
                lines.append("  missing: " + ", ".join(s.missing))
        return "\n".join(lines) + "\n"

    def metrics(self) -> dict:
        d = {"mse": self.mse, "support_size": self.model.support_size, "epochs": len(self.loss_history),
             "final_loss": self.loss_history[-1] if self.loss_history else None,
             "support": [sorted(s) for s in self.model.support_terms()]}
        if self.support is not None:
            d["support_vs_truth"] = asdict(self.support)
        return d


def setup(dataset: Trajectory, config: TrainConfig) -> tuple[Problem, net.RecoveryNetParams]:
    if dataset.n_samples < config.window:
        raise DatasetError(f"dataset has {dataset.n_samples} samples, shorter than window {config.window}")
    lib = build_library(dataset.n_states, dataset.n_inputs, config.order, config.include_constant)
    params = net.init_params(dataset.n_states, dataset.n_inputs, config.hidden, lib.term_count,
                             q=dataset.n_inputs, tau=config.tau, seed=config.seed,
                             dense_hidden=config.dense_hidden, out_scale=config.out_scale)
    if config.coef_scaling == "auto":
        params.coef_scale = coefficient_scale(dataset, lib, config.coef_gain)
    problem = Problem(lib, config, dataset.dt, Normalizer.fit(dataset))
    return problem, params


def aggregate_model(params: net.RecoveryNetParams, batches: list[BatchTensor], problem: Problem) -> SparseODEModel:
    """Mean of per-batch mean head outputs, then dropout."""
    means = []
    for batch in batches:
        raw, _, _ = net.forward(params, problem.norm(batch.data))
        means.append(raw.mean(axis=0))
    theta, _ = problem.sparsify(np.mean(means, axis=0))
    lib = problem.library
    return SparseODEModel(lib, theta.reshape(lib.n_states, lib.term_count),
                          problem.config.tau if problem.config.sparsify == "threshold" else 0.0)


def train(dataset: Trajectory, config: TrainConfig | None = None, truth: SparseODEModel | None = None,
          progress=None) -> RecoveryResult:
    """Fit the network to ``dataset`` and extract the sparse model.

    ``progress`` is called as ``progress(epoch, loss, support_size)`` after
    every epoch.
    """
    config = config or TrainConfig()
    t_start = time.perf_counter()
    problem, params = setup(dataset, config)
    n_batches = math.ceil(len(window_starts(dataset.n_samples, config.window)) / config.batch_size)
    opt = Adam(params, config, config.epochs * n_batches * config.steps_per_batch)
    history: list[float] = []
    support_hist: list[int] = []
    for epoch in range(config.epochs):
        batches = make_batches(dataset, config.batch_size, config.window, seed=config.seed + epoch)
        epoch_loss = 0.0
        horizon, tau = config.horizon(epoch), config.threshold(epoch)
        for bi, batch in enumerate(batches):
            for _ in range(config.steps_per_batch):
                loss, grads, info = batch_loss(params, batch, problem, horizon=horizon, tau=tau)
                flat = net.flatten_grads(grads)
                if not math.isfinite(loss) or not np.all(np.isfinite(flat)):
                    raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, batch {bi}")
                opt.step(params, grads)
            epoch_loss += loss
        support = int(np.count_nonzero(info["theta"]))
        history.append(epoch_loss)
        support_hist.append(support)
        if progress is not None:
            progress(epoch, epoch_loss, support)
        log.debug("epoch %d loss %.6g support %d", epoch, epoch_loss, support)

    final_batches = make_batches(dataset, config.batch_size, config.window, seed=config.seed)
    model = aggregate_model(params, final_batches, problem)
    if config.epochs == 0:
        history.append(sum(batch_loss(params, b, problem, grad=False)[0] for b in final_batches))
        support_hist.append(model.support_size)
    metrics = evaluate(model, dataset, substeps=config.eval_substeps)
    report = support_report(model, truth) if truth is not None else None
    return RecoveryResult(model, metrics.mse, history, support_hist, params, report,
                          time.perf_counter() - t_start, config)
