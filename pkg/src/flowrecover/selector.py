"""Surrogate-driven choice of platform, task and training hyperparameters.

Ridge surrogates are fitted to a measurement table, every point of the
discrete design space is scored, and the feasible minimiser of
``O = gamma * P + (1 - gamma) * M`` is returned.  The space is small
(288 points), so plain enumeration stands in for a MILP solver.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy.optimize import minimize

PLATFORMS = (0, 1)  # 0 = FPGA, 1 = GPU
TASKS = (0, 1, 2)  # 0 = ML, 1 = ML + PG, 2 = MR
HIDDEN = (16, 32, 64, 128)
EPOCHS = (16, 32, 64, 128)
SEQ_LEN = (50, 100, 200)

PLATFORM_NAMES = {0: "FPGA", 1: "GPU"}
TASK_NAMES = {0: "ML", 1: "ML+PG", 2: "MR"}

COLUMNS = ("platform", "task", "hi", "e", "N", "error", "time_s", "energy_J", "dram_MB")
TARGETS = {"error": "error", "time": "time_s", "energy": "energy_J", "memory": "dram_MB"}
UNITS = {"error": "", "time_s": "s", "energy_J": "J", "dram_MB": "MB"}

# DRAM (MB) as a linear function of (e, N, hi, eps); reproduced verbatim as a regression target
DRAM_COEF = {"e": 4.7316, "N": -194.3639, "hi": 39.4598, "eps": -2.4789}
DRAM_BIAS = 503.8408


class RankDeficientError(np.linalg.LinAlgError):
    pass


class TableError(ValueError):
    pass


@dataclass
class MeasurementTable:
    rows: np.ndarray  # (R, 9) in COLUMNS order

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float).reshape(-1, len(COLUMNS))
        for r, row in enumerate(self.rows):
            a, h, hi, e, n = row[:5]
            if a not in PLATFORMS or h not in TASKS:
                raise TableError(f"row {r + 1}: platform/task outside {{0,1}} x {{0,1,2}}")
            if min(hi, e, n) <= 0:
                raise TableError(f"row {r + 1}: hi, e and N must be positive")
            if not np.all(np.isfinite(row)):
                raise TableError(f"row {r + 1}: non-finite value")
            if np.any(row[6:] <= 0):
                raise TableError(f"row {r + 1}: time, energy and dram must be positive")

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, COLUMNS.index(name)]

    def points(self) -> list[dict]:
        return [dict(zip(COLUMNS[:5], map(float, r[:5]))) for r in self.rows]

    @classmethod
    def load(cls, path=None) -> "MeasurementTable":
        """Read a table CSV; with no path, the bundled performance table."""
        if path is None:
            text = resources.files("flowrecover").joinpath("data/performance_table.csv").read_text()
            lines, src = text.splitlines(), "performance_table.csv"
        else:
            with open(path, newline="") as fh:
                lines, src = fh.read().splitlines(), str(path)
        reader = csv.reader(lines)
        header = [h.strip() for h in next(reader, [])]
        if tuple(header) != COLUMNS:
            raise TableError(f"{src}: header must be {','.join(COLUMNS)}")
        rows = []
        for i, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(COLUMNS):
                raise TableError(f"{src}: row {i} has {len(rec)} cells")
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                raise TableError(f"{src}: non-numeric cell in row {i}") from None
        if not rows:
            raise TableError(f"{src}: no data rows")
        return cls(np.array(rows))


@dataclass(frozen=True)
class FeatureSpec:
    """Polynomial basis over numeric variables, optionally with (a, h) indicators.

    Variables are divided by ``scales`` before the monomials are formed.
    Each of the six (a, h) indicators enters alone and multiplied by every
    scaled linear term.
    """

    variables: tuple = ("hi", "e", "N")
    degree: int = 3
    scales: tuple = (128.0, 128.0, 200.0)
    categorical: bool = True

    def __post_init__(self):
        if len(self.scales) != len(self.variables):
            raise ValueError("one scale per variable is required")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")

    def _monomials(self):
        v = len(self.variables)
        for d in range(1, self.degree + 1):
            yield from itertools.combinations_with_replacement(range(v), d)

    def names(self) -> list[str]:
        out = ["*".join(self.variables[i] for i in mono) for mono in self._monomials()]
        if self.categorical:
            for a, h in itertools.product(PLATFORMS, TASKS):
                tag = f"[a={a},h={h}]"
                out.append(tag)
                out += [f"{tag}*{var}" for var in self.variables]
        return out

    def __len__(self) -> int:
        return len(self.names())

    def transform(self, points) -> np.ndarray:
        """Feature matrix (no bias column) for a list of point mappings."""
        pts = [points] if isinstance(points, dict) else list(points)
        try:
            raw = np.array([[float(p[v]) for v in self.variables] for p in pts]).reshape(len(pts), -1)
        except KeyError as exc:
            raise ValueError(f"point lacks variable {exc.args[0]!r}") from None
        z = raw / np.asarray(self.scales, dtype=float)
        cols = [np.prod(z[:, list(mono)], axis=1) for mono in self._monomials()]
        if self.categorical:
            try:
                ah = [(int(p["a"] if "a" in p else p["platform"]), int(p["h"] if "h" in p else p["task"])) for p in pts]
            except KeyError:
                raise ValueError("categorical features need platform 'a' and task 'h'") from None
            for a, h in itertools.product(PLATFORMS, TASKS):
                ind = np.array([1.0 if c == (a, h) else 0.0 for c in ah])
                cols.append(ind)
                cols += [ind * z[:, i] for i in range(len(self.variables))]
        return np.stack(cols, axis=1) if cols else np.zeros((len(pts), 0))

    def to_dict(self) -> dict:
        return {"variables": list(self.variables), "degree": self.degree, "scales": list(self.scales),
                "categorical": self.categorical}


@dataclass
class SurrogateModel:
    features: FeatureSpec
    coef: np.ndarray
    bias: float
    lam: float = 0.0
    target: str = ""
    unit: str = ""

    def predict(self, point) -> float:
        phi = self.features.transform(point)
        if phi.shape[1] != len(self.coef):
            raise ValueError(f"feature length {phi.shape[1]} does not match {len(self.coef)} coefficients")
        return float(phi[0] @ self.coef + self.bias)

    def predict_many(self, points) -> np.ndarray:
        return self.features.transform(points) @ self.coef + self.bias

    def to_dict(self) -> dict:
        return {"target": self.target, "unit": self.unit, "lambda": self.lam, "bias": self.bias,
                "features": self.features.to_dict(), "terms": dict(zip(self.features.names(), self.coef.tolist()))}


def ridge_fit(X, y, lam: float = 1.0) -> tuple[np.ndarray, float]:
    """Ridge regression with an unpenalised intercept.

    Centring removes the intercept from the penalised problem; the rest is
    solved by QR on the stacked system [Xc; sqrt(lam) I] w = [yc; 0].
    Returns ``(coef, bias)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X has shape {X.shape}, y has {y.shape[0]} entries")
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    p = X.shape[1]
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    if p == 0:
        return np.zeros(0), float(ym)
    A = np.vstack([Xc, math.sqrt(lam) * np.eye(p)]) if lam > 0 else Xc
    b = np.concatenate([yc, np.zeros(p)]) if lam > 0 else yc
    if A.shape[0] < p:
        raise RankDeficientError(f"{X.shape[0]} samples cannot determine {p} coefficients without regularisation")
    Q, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if d.min() <= max(A.shape) * np.finfo(float).eps * max(d.max(), 1.0):
        raise RankDeficientError("design matrix is rank deficient; use lambda > 0")
    coef = np.linalg.solve(R, Q.T @ b)
    return coef, float(ym - xm @ coef)


def fit_surrogate(table: MeasurementTable, target: str, features: FeatureSpec | None = None,
                  lam: float = 1.0) -> SurrogateModel:
    col = TARGETS.get(target, target)
    if col not in COLUMNS[5:]:
        raise ValueError(f"unknown target {target!r}")
    features = features or FeatureSpec()
    X = features.transform(table.points())
    coef, bias = ridge_fit(X, table.column(col), lam)
    return SurrogateModel(features, coef, bias, lam, col, UNITS[col])


def fit_all(table: MeasurementTable | None = None, lam: float = 1.0, degree: int = 3) -> dict[str, SurrogateModel]:
    table = table or MeasurementTable.load()
    feats = FeatureSpec(degree=degree)
    return {name: fit_surrogate(table, name, feats, lam) for name in TARGETS}


def dram_formula() -> SurrogateModel:
    feats = FeatureSpec(("e", "N", "hi", "eps"), degree=1, scales=(1.0, 1.0, 1.0, 1.0), categorical=False)
    coef = np.array([DRAM_COEF[v] for v in feats.variables])
    return SurrogateModel(feats, coef, DRAM_BIAS, 0.0, "dram_MB", "MB")


def candidates():
    """All (a, h, hi, e, N) tuples of the design space, in lexicographic order."""
    return list(itertools.product(PLATFORMS, TASKS, HIDDEN, EPOCHS, SEQ_LEN))


@dataclass
class SelectionResult:
    config: tuple
    error: float
    time: float
    P: float
    M: float
    objective: float
    feasible: bool
    error_ok: bool
    time_ok: bool
    n_candidates: int
    gamma: float
    eps: float | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def platform(self) -> int:
        return self.config[0]

    @property
    def task(self) -> int:
        return self.config[1]

    def report(self) -> str:
        a, h, hi, e, n = self.config
        lines = [
            f"feasible: {'yes' if self.feasible else 'no'}",
            f"platform a={a} ({PLATFORM_NAMES[a]}), task h={h} ({TASK_NAMES[h]})",
            f"hidden hi={hi}, epochs e={e}, sequence N={n}",
            f"predicted error: {self.error:.4g}",
            f"predicted time: {self.time:.4g}",
            f"P: {self.P:.4g}",
            f"M: {self.M:.4g}",
            f"objective O = {self.gamma:g}*P + {1 - self.gamma:g}*M = {self.objective:.4g}",
            f"candidates: {self.n_candidates}",
        ]
        if self.eps is not None:
            lines.append(f"refined eps: {self.eps:.4g}")
        lines += [f"note: {f}" for f in self.flags]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = dict(zip(("a", "h", "hi", "e", "N"), self.config))
        return d


def enumerate_select(surrogates: dict, gamma: float = 0.5, eps_max: float = math.inf, R: float = math.inf,
                     P: str = "energy", M: str = "memory") -> SelectionResult:
    """Exhaustive minimisation of gamma*P + (1-gamma)*M under f_e < eps_max and t_ex < R.

    Ties go to lower predicted error, then lower time, then the smaller
    configuration tuple.  With nothing feasible the least-violating point is
    returned, marked infeasible.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    missing = {"error", "time", P, M} - set(surrogates)
    if missing:
        raise ValueError(f"missing surrogates: {sorted(missing)}")
    cands = candidates()
    pts = [dict(zip(("a", "h", "hi", "e", "N"), c)) for c in cands]
    err = surrogates["error"].predict_many(pts)
    tim = surrogates["time"].predict_many(pts)
    pp = surrogates[P].predict_many(pts)
    mm = surrogates[M].predict_many(pts)
    obj = gamma * pp + (1.0 - gamma) * mm
    e_ok = err < eps_max
    t_ok = tim < R
    ok = e_ok & t_ok
    if ok.any():
        idx = min(np.flatnonzero(ok), key=lambda i: (obj[i], err[i], tim[i], cands[i]))
    else:
        with np.errstate(invalid="ignore"):
            viol = np.maximum(err - eps_max, 0.0) + np.maximum(tim - R, 0.0)
        viol = np.nan_to_num(viol, nan=math.inf)
        idx = min(range(len(cands)), key=lambda i: (viol[i], obj[i], err[i], tim[i], cands[i]))
    flags = []
    if surrogates[M].target == "dram_MB" and mm[idx] <= 0:
        flags.append("non-positive memory prediction")
    return SelectionResult(cands[idx], float(err[idx]), float(tim[idx]), float(pp[idx]), float(mm[idx]),
                           float(obj[idx]), bool(ok[idx]), bool(e_ok[idx]), bool(t_ok[idx]), len(cands), gamma,
                           flags=flags)


def select(table: MeasurementTable | None = None, goal: str = "energy", gamma: float = 1.0,
           eps_max: float = math.inf, R: float = math.inf, lam: float = 1.0, degree: int = 3) -> SelectionResult:
    """Fit surrogates to ``table`` and select.

    ``goal`` names the surrogate used as P (``energy`` or ``error``); M is
    always the memory surrogate.
    """
    sur = fit_all(table, lam, degree)
    return enumerate_select(sur, gamma, eps_max, R, P=goal, M="memory")


def _central_grad(f, x: float, lo: float, hi: float, step: float) -> float:
    a, b = max(lo, x - step), min(hi, x + step)
    if b <= a:
        return 0.0
    return (f(b) - f(a)) / (b - a)


def refine_continuous(objective, lo: float, hi: float, tol: float = 1e-6, step: float = 1e-6) -> float:
    """Bounded quasi-Newton (L-BFGS-B) minimisation of a scalar objective on [lo, hi].

    Starts from the midpoint with central-difference gradients; the result
    is compared against both bounds and the best of the three is returned.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
        raise ValueError("bounds must be finite with lo <= hi")

    def f(x):
        v = float(objective(float(x)))
        if not math.isfinite(v):
            raise ValueError(f"objective is not finite at {float(x)!r}")
        return v

    if hi == lo:
        f(lo)
        return float(lo)
    span = hi - lo
    h = step * max(1.0, span)
    res = minimize(lambda z: f(z[0]), np.array([0.5 * (lo + hi)]),
                   jac=lambda z: np.array([_central_grad(f, float(z[0]), lo, hi, h)]),
                   method="L-BFGS-B", bounds=[(lo, hi)], options={"gtol": tol * 1e-3, "ftol": 1e-15, "maxiter": 500})
    x = float(np.clip(res.x[0], lo, hi))
    best = min((f(x), x), (f(lo), lo), (f(hi), hi))
    return float(best[1])
