"""Candidate-term libraries and sparse polynomial ODE models.

A library is the ordered list of terms a recovered right-hand side may use:
one linear term per external input, an optional constant, then every
monomial of total degree 1..order in the state variables (graded
lexicographic order).  A :class:`SparseODEModel` holds one coefficient row
per state equation over that list.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np


class LibraryError(ValueError):
    """Raised for invalid library dimensions or mismatched vectors."""


@dataclass(frozen=True)
class Term:
    """One library term: a state monomial or a single input channel.

    ``exponents`` has one entry per state variable.  For an input term the
    exponents are all zero and ``input_index`` names the channel.
    """

    exponents: tuple[int, ...]
    input_index: int | None = None
    n_inputs: int = 0

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    @property
    def is_input(self) -> bool:
        return self.input_index is not None

    @property
    def factors(self) -> tuple[int, ...]:
        """State indices of the monomial as a multiset, e.g. x1^2*x3 -> (0, 0, 2)."""
        out: list[int] = []
        for i, e in enumerate(self.exponents):
            out.extend([i] * e)
        return tuple(out)

    @property
    def name(self) -> str:
        if self.input_index is not None:
            return "u" if self.n_inputs == 1 else f"u{self.input_index + 1}"
        if self.degree == 0:
            return "1"
        parts = []
        for i, e in enumerate(self.exponents):
            if e == 1:
                parts.append(f"x{i + 1}")
            elif e > 1:
                parts.append(f"x{i + 1}^{e}")
        return "*".join(parts)


@dataclass(frozen=True)
class TermLibrary:
    n_states: int
    n_inputs: int
    order: int
    include_constant: bool
    terms: tuple[Term, ...]

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def term_count(self) -> int:
        return len(self.terms)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no term named {name!r} in library") from None

    @cached_property
    def kernel_layout(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat CSR description consumed by the solver kernels.

        Returns ``(fptr, fidx, inidx)``: the factors of term j are
        ``fidx[fptr[j]:fptr[j+1]]`` and ``inidx[j]`` is its input channel
        or -1.
        """
        fptr = [0]
        fidx: list[int] = []
        inidx = []
        for t in self.terms:
            fidx.extend(t.factors)
            fptr.append(len(fidx))
            inidx.append(-1 if t.input_index is None else t.input_index)
        return (
            np.asarray(fptr, dtype=np.int64),
            np.asarray(fidx, dtype=np.int64),
            np.asarray(inidx, dtype=np.int64),
        )

    def describe(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_inputs": self.n_inputs,
            "order": self.order,
            "include_constant": self.include_constant,
        }


def expected_term_count(n_states: int, n_inputs: int, order: int, include_constant: bool = False) -> int:
    return math.comb(order + n_states, n_states) - 1 + n_inputs + int(include_constant)


def build_library(n_states: int, n_inputs: int = 0, order: int = 2, include_constant: bool = False) -> TermLibrary:
    """Build the ordered candidate-term library.

    >>> build_library(2, 1, 2).names
    ['u', 'x1', 'x2', 'x1^2', 'x1*x2', 'x2^2']
    """
    if n_states < 1:
        raise LibraryError(f"n_states must be >= 1, got {n_states}")
    if order < 1:
        raise LibraryError(f"order must be >= 1, got {order}")
    if n_inputs < 0:
        raise LibraryError(f"n_inputs must be >= 0, got {n_inputs}")

    terms = [Term((0,) * n_states, j, n_inputs) for j in range(n_inputs)]
    if include_constant:
        terms.append(Term((0,) * n_states))
    for degree in range(1, order + 1):
        # combinations_with_replacement walks the multisets in graded-lex order
        for combo in itertools.combinations_with_replacement(range(n_states), degree):
            exps = [0] * n_states
            for i in combo:
                exps[i] += 1
            terms.append(Term(tuple(exps)))
    return TermLibrary(n_states, n_inputs, order, include_constant, tuple(terms))


def _check_point(library: TermLibrary, x, u) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != library.n_states:
        raise LibraryError(f"state vector has length {x.shape[0]}, library expects {library.n_states}")
    if u.shape[0] != library.n_inputs:
        raise LibraryError(f"input vector has length {u.shape[0]}, library expects {library.n_inputs}")
    return x, u


def eval_features(library: TermLibrary, x, u=None) -> np.ndarray:
    """Value of every library term at the point ``(x, u)``."""
    x, u = _check_point(library, x, u)
    out = np.empty(library.term_count)
    for j, term in enumerate(library.terms):
        v = 1.0
        for i in term.factors:
            v *= x[i]
        if term.input_index is not None:
            v *= u[term.input_index]
        out[j] = v
    return out


@dataclass
class SparseODEModel:
    """Polynomial ODE ``dx_i/dt = coefficients[i] . features(x, u)``.

    Entries with magnitude below ``threshold`` are stored as exact zeros.
    """

    library: TermLibrary
    coefficients: np.ndarray
    threshold: float = 0.0

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float)
        expected = (self.library.n_states, self.library.term_count)
        if coef.shape != expected:
            raise LibraryError(f"coefficient matrix has shape {coef.shape}, expected {expected}")
        if self.threshold < 0:
            raise LibraryError("threshold must be non-negative")
        coef[np.abs(coef) < self.threshold] = 0.0
        self.coefficients = coef

    @classmethod
    def from_terms(cls, library: TermLibrary, equations: Sequence[Mapping[str, float]], threshold: float = 0.0):
        """Build from one ``{term name: coefficient}`` mapping per equation."""
        if len(equations) != library.n_states:
            raise LibraryError(f"need {library.n_states} equations, got {len(equations)}")
        coef = np.zeros((library.n_states, library.term_count))
        for i, eq in enumerate(equations):
            for name, c in eq.items():
                coef[i, library.index(name)] = c
        return cls(library, coef, threshold)

    @property
    def support(self) -> np.ndarray:
        return self.coefficients != 0.0

    @property
    def support_size(self) -> int:
        return int(self.support.sum())

    def support_terms(self) -> list[set[str]]:
        names = self.library.names
        return [{names[j] for j in np.flatnonzero(row)} for row in self.support]

    def rhs(self, x, u=None) -> np.ndarray:
        return model_rhs(self, x, u)

    def equations(self, digits: int = 4) -> list[str]:
        lines = []
        names = self.library.names
        for i, row in enumerate(self.coefficients):
            parts = [f"{c:+.{digits}g}*{names[j]}" for j, c in enumerate(row) if c != 0.0]
            lines.append(f"dx{i + 1}/dt = " + (" ".join(parts) if parts else "0"))
        return lines

    def to_dict(self) -> dict:
        names = self.library.names
        return {
            "format": "flowrecover.model",
            "version": 1,
            **self.library.describe(),
            "threshold": self.threshold,
            "equations": [
                [{"term": names[j], "coef": float(c)} for j, c in enumerate(row) if c != 0.0]
                for row in self.coefficients
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SparseODEModel":
        if d.get("format") != "flowrecover.model":
            raise LibraryError("not a flowrecover model document")
        lib = build_library(d["n_states"], d["n_inputs"], d["order"], d.get("include_constant", False))
        eqs = [{item["term"]: item["coef"] for item in row} for row in d["equations"]]
        return cls.from_terms(lib, eqs, d.get("threshold", 0.0))

    @classmethod
    def from_json(cls, text: str) -> "SparseODEModel":
        return cls.from_dict(json.loads(text))


def model_rhs(model: SparseODEModel, x, u=None) -> np.ndarray:
    return model.coefficients @ eval_features(model.library, x, u)


@dataclass
class SensitivityReport:
    """Finite-difference sensitivity of the trajectory to each supported coefficient."""

    entries: list[tuple[int, int]]
    sensitivity: np.ndarray
    identifiable: np.ndarray
    diverged: np.ndarray
    horizon: float
    tol: float
    names: list[str] = field(default_factory=list)

    def as_matrix(self, shape) -> np.ndarray:
        out = np.full(shape, np.nan)
        for (i, j), s in zip(self.entries, self.sensitivity):
            out[i, j] = s
        return out


def check_identifiability(model: SparseODEModel, x0, u_series=None, horizon: float = 20.0, dt: float = 0.01,
                          tol: float = 1e-6) -> SensitivityReport:
    """Numerical check that each supported coefficient moves the trajectory.

    Each coefficient is perturbed by +-delta with delta = max(1e-4, 1e-4*|c|);
    the sensitivity is the largest state deviation over ``[0, horizon]``
    divided by 2*delta.  A perturbation that makes the solve diverge marks
    that coefficient only.
    """
    from .ode import solve

    if horizon <= 0:
        raise ValueError("horizon must be positive")
    entries = [tuple(int(v) for v in ij) for ij in np.argwhere(model.support)]
    if not entries:
        raise LibraryError("model has empty support; nothing to check")
    n_steps = int(round(horizon / dt))
    m = model.library.n_inputs
    if u_series is None:
        u_series = np.zeros((n_steps + 1, m))
    u_series = np.asarray(u_series, dtype=float)
    if u_series.ndim == 1 and m > 0 and u_series.shape[0] == m:
        u_series = np.tile(u_series, (n_steps + 1, 1))
    u_series = u_series.reshape(n_steps + 1, m)

    sens = np.zeros(len(entries))
    diverged = np.zeros(len(entries), dtype=bool)
    names = []
    for k, (i, j) in enumerate(entries):
        c = model.coefficients[i, j]
        delta = max(1e-4, 1e-4 * abs(c))
        runs = []
        for sign in (1.0, -1.0):
            coef = model.coefficients.copy()
            coef[i, j] = c + sign * delta
            traj, _ = solve(SparseODEModel(model.library, coef), x0, u_series, dt, n_steps)
            runs.append(traj)
        names.append(f"eq{i + 1}:{model.library.terms[j].name}")
        if any(r.diverged_at is not None for r in runs):
            diverged[k] = True
            sens[k] = np.nan
            continue
        sens[k] = np.max(np.abs(runs[0].states - runs[1].states)) / (2 * delta)
    identifiable = np.where(diverged, False, sens > tol)
    return SensitivityReport(entries, sens, identifiable, diverged, horizon, tol, names)
