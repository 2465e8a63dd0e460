"""Degenerate diffusion coefficients a(x) on [0, 1] and their degeneracy class.

A coefficient vanishes at x = 0 and is positive on (0, 1].  Weak degeneracy
(WD) means x a'(x) <= K a(x) with K in [0, 1); strong degeneracy (SD) means
K in [1, 2) plus a monotonicity condition on a(x) / x**p near 0.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DegeneracyClass(str, enum.Enum):
    WD = "WD"
    SD = "SD"
    NON_DEGENERATE = "NonDegenerate"


class CoefficientError(ValueError):
    """Raised when a coefficient violates the degeneracy hypotheses."""


@dataclass(frozen=True)
class DiffusionCoefficient:
    """Either a power law ``x**alpha`` or tabulated samples of (x, a, a').

    ``K`` is the degeneracy bound.  For power laws it equals ``alpha``; for
    tabulated data it is filled in by :func:`validate_degeneracy` (or given).
    """

    kind: str
    alpha: float | None = None
    x: np.ndarray | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)
    derivs: np.ndarray | None = field(default=None, repr=False)
    K: float = 0.0
    degeneracy_class: DegeneracyClass = DegeneracyClass.WD

    @classmethod
    def power_law(cls, alpha: float) -> "DiffusionCoefficient":
        if alpha < 0:
            raise CoefficientError(f"power-law exponent must be >= 0, got {alpha}")
        if alpha == 0:
            cls_ = DegeneracyClass.NON_DEGENERATE
        elif alpha < 1:
            cls_ = DegeneracyClass.WD
        else:
            cls_ = DegeneracyClass.SD
        return cls(kind="power", alpha=float(alpha), K=float(alpha), degeneracy_class=cls_)

    @classmethod
    def constant(cls) -> "DiffusionCoefficient":
        """a == 1, the uniformly parabolic reference case."""
        return cls.power_law(0.0)

    @classmethod
    def tabulated(cls, x, values, derivs, K: float | None = None,
                  degeneracy_class: DegeneracyClass | None = None) -> "DiffusionCoefficient":
        x = np.asarray(x, dtype=float)
        values = np.asarray(values, dtype=float)
        derivs = np.asarray(derivs, dtype=float)
        if not (x.shape == values.shape == derivs.shape) or x.ndim != 1 or x.size < 2:
            raise CoefficientError("tabulated samples must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(x) <= 0) or x[0] != 0.0 or x[-1] != 1.0:
            raise CoefficientError("tabulated abscissae must increase from 0 to 1")
        if K is None or degeneracy_class is None:
            probe = default_probe_grid()
            tmp = cls(kind="tabulated", x=x, values=values, derivs=derivs)
            report = validate_degeneracy(tmp, probe)
            K, degeneracy_class = report.K, report.degeneracy_class
        return cls(kind="tabulated", x=x, values=values, derivs=derivs,
                   K=float(K), degeneracy_class=degeneracy_class)

    @classmethod
    def from_csv(cls, path: str | Path) -> "DiffusionCoefficient":
        """Read a three-column CSV ``x, a, a'`` (an optional header row is skipped)."""
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row[:3]])
                except ValueError:
                    if rows:
                        raise
        data = np.array(rows)
        return cls.tabulated(data[:, 0], data[:, 1], data[:, 2])

    @property
    def is_degenerate(self) -> bool:
        return self.degeneracy_class is not DegeneracyClass.NON_DEGENERATE

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        x = _check_range(x)
        if self.kind == "power":
            if self.alpha == 0:
                return np.ones_like(x) if isinstance(x, np.ndarray) else 1.0
            return np.power(x, self.alpha)
        return np.interp(x, self.x, self.values)

    def eval_derivative(self, x):
        x = _check_range(x)
        if self.kind == "power":
            if self.alpha == 0:
                return np.zeros_like(x) if isinstance(x, np.ndarray) else 0.0
            with np.errstate(divide="ignore"):
                return self.alpha * np.power(x, self.alpha - 1.0)
        return np.interp(x, self.x, self.derivs)

    def x_over_a(self, x):
        """x / a(x), extended to x = 0 by its limit (0, 1 or +inf)."""
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        pos = x > 0
        out[pos] = x[pos] / self.eval(x[pos])
        if np.any(~pos):
            out[~pos] = self._limit_at_zero(1.0)
        return out if out.ndim else float(out)

    def x2_over_a(self, x):
        """x**2 / a(x), extended to x = 0 by its limit (0 whenever K < 2)."""
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        pos = x > 0
        out[pos] = x[pos] ** 2 / self.eval(x[pos])
        if np.any(~pos):
            out[~pos] = self._limit_at_zero(2.0)
        return out if out.ndim else float(out)

    def _limit_at_zero(self, power: float) -> float:
        # x**power / a(x) near 0 behaves like x**(power - alpha)
        if not self.is_degenerate:
            return 0.0
        if self.kind == "power":
            e = power - self.alpha
        else:
            # first table segment: a is linear, so x / a is constant there
            e = power - 1.0
            if e == 0.0:
                return float(self.x[1] / self.values[1])
        if e > 0:
            return 0.0
        if e == 0:
            return 1.0
        return float("inf")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "K": self.K, "class": self.degeneracy_class.value}
        if self.kind == "power":
            d["alpha"] = self.alpha
        else:
            d["samples"] = int(self.x.size)
        return d


def _check_range(x):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise ValueError("coefficient evaluated outside [0, 1]")
    return arr if arr.ndim else float(arr)


def default_probe_grid(n: int = 10_000) -> np.ndarray:
    """Log-spaced points in (0, 1], clustered at the degenerate endpoint."""
    return np.logspace(-8, 0, n)


@dataclass
class ValidationReport:
    degeneracy_class: DegeneracyClass | None
    K: float
    mono_exponent: float | None
    max_violation: float
    x2_over_a_nondecreasing: bool
    valid: bool
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "class": None if self.degeneracy_class is None else self.degeneracy_class.value,
            "K": self.K,
            "mono_exponent": self.mono_exponent,
            "max_violation": self.max_violation,
            "x2_over_a_nondecreasing": self.x2_over_a_nondecreasing,
            "valid": self.valid,
            "message": self.message,
        }


def validate_degeneracy(a: DiffusionCoefficient, probe_grid=None, tol: float = 1e-10,
                        strict: bool = True) -> ValidationReport:
    """Classify ``a`` and check the structural hypotheses on ``probe_grid``.

    With ``strict`` the invalid cases raise :class:`CoefficientError`;
    otherwise they come back with ``valid=False``.
    """
    probe = default_probe_grid() if probe_grid is None else np.asarray(probe_grid, dtype=float)
    if probe.size == 0 or np.any(probe <= 0) or np.any(probe > 1) or np.any(np.diff(probe) <= 0):
        raise ValueError("probe grid must be nonempty, increasing and inside (0, 1]")

    av = a.eval(probe)
    if np.any(av <= 0):
        bad = probe[np.argmax(av <= 0)]
        raise CoefficientError(f"a(x) <= 0 at interior probe x = {bad:g}")

    ratio = probe * a.eval_derivative(probe) / av
    if a.kind == "power":
        K = float(a.alpha)
    else:
        K = max(float(ratio.max()), 0.0)
    max_violation = float(np.max(probe * a.eval_derivative(probe) - K * av))

    a0 = float(a.eval(0.0))
    if a0 != 0.0:
        cls_ = DegeneracyClass.NON_DEGENERATE
    elif K < 1:
        cls_ = DegeneracyClass.WD
    elif K < 2:
        cls_ = DegeneracyClass.SD
    else:
        cls_ = None

    x2a = probe ** 2 / av
    x2a_ok = bool(np.all(np.diff(x2a) >= -tol * np.maximum(1.0, np.abs(x2a[1:]))))

    mono = None
    if cls_ is DegeneracyClass.SD:
        mono = _mono_exponent(a, probe, K, tol)

    valid = cls_ is not None and max_violation <= tol and x2a_ok
    msg = ""
    if cls_ is None:
        msg = f"K = {K:g} outside [0, 2)"
    elif cls_ is DegeneracyClass.SD and mono is None:
        valid = False
        msg = "no exponent p makes a(x)/x**p nondecreasing near 0"
    elif not x2a_ok:
        msg = "x**2/a(x) is not nondecreasing"
    elif max_violation > tol:
        msg = f"x a'(x) <= K a(x) violated by {max_violation:g}"
    if strict and cls_ is None:
        raise CoefficientError(msg)
    return ValidationReport(cls_, K, mono, max_violation, x2a_ok, valid, msg)


def _mono_exponent(a: DiffusionCoefficient, probe: np.ndarray, K: float,
                   tol: float) -> float | None:
    near = probe[probe <= 0.1]
    if near.size < 2:
        near = probe[:2]
    av = a.eval(near)
    if K > 1:
        candidates = [1.0 + k / 100.0 * (K - 1.0) for k in range(100, 0, -1)]
    else:
        candidates = [k / 100.0 for k in range(99, 0, -1)]
    # scan from the largest candidate: the exponent K itself is the natural
    # answer for power laws (constant ratio)
    for p in candidates:
        r = av / near ** p
        if np.all(np.diff(r) >= -tol * np.maximum(1.0, np.abs(r[1:]))):
            return p
    return None
