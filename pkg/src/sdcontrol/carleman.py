"""Empirical verification of the weighted (Carleman-type) inequalities.

Every inequality is checked as a ratio ``lhs / rhs`` over an ensemble of
solutions and a sweep of the large parameter s.  Because ``exp(-2 s phi)``
spans thousands of orders of magnitude, all weighted integrals are kept as
logarithms (log-sum-exp over the space-time quadrature) and only the ratio is
exponentiated.

Solutions enter through :class:`Moments`, the per-level second moments that
the quadratures need.  They come either from the noise tree or, for data that
are deterministic in the noise, from closed moment recursions that reproduce
the tree expectation exactly without its ``2**N`` memory cost.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .noise import AdaptedField, NoiseTree
from .solvers import (BackwardProblem, ForwardProblem, Propagator, SDIRK2, coefficient_table,
                      solve_backward, solve_forward)
from .spacegrid import DegenerateOperator
from .weights import BAR, STANDARD, WeightSystem

TREE = "tree"
MOMENTS = "moments"


# --------------------------------------------------------------------------
# random data

def _trig_poly(rng: np.random.Generator, amplitude: float, modes: int = 3) -> Callable:
    """Smooth random function of (t, x) with sup norm <= amplitude."""
    coef = rng.standard_normal(modes)
    coef *= amplitude / max(np.sum(np.abs(coef)), 1e-300)
    kx = rng.integers(1, 4, size=modes) * np.pi
    kt = rng.uniform(0.0, 4.0, size=modes)
    ph = rng.uniform(0.0, 2 * np.pi, size=modes)

    def fn(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        out = 0.0
        for a_, kx_, kt_, ph_ in zip(coef, kx, kt, ph):
            out = out + a_ * np.cos(kx_ * x + kt_ * t + ph_)
        return out

    return fn


@dataclass
class Sample:
    """One ensemble member: smooth initial datum and frozen coefficients.

    All data are functions of (t, x), so the same sample can be replayed on
    any grid or tree depth.
    """

    y0_modes: np.ndarray
    b: Callable | None = None
    c: Callable | None = None
    f: Callable | None = None
    g: Callable | None = None
    # backward runs: terminal datum  p(x) + q(x) * W(T)
    terminal_modes: np.ndarray | None = None
    terminal_noise_modes: np.ndarray | None = None

    def y0(self, x) -> np.ndarray:
        return _sine_series(self.y0_modes, x)

    def terminal(self, x, w) -> np.ndarray:
        p = _sine_series(self.terminal_modes, x)
        q = _sine_series(self.terminal_noise_modes, x)
        return p[None, :] + np.asarray(w, dtype=float)[:, None] * q[None, :]

    def scaled(self, lam: float) -> "Sample":
        """Same sample with every datum multiplied by ``lam`` (coefficients b, c unchanged)."""
        sc = (lambda fn: None if fn is None else (lambda t, x: lam * fn(t, x)))
        return Sample(self.y0_modes * lam, self.b, self.c, sc(self.f), sc(self.g),
                      None if self.terminal_modes is None else self.terminal_modes * lam,
                      None if self.terminal_noise_modes is None else self.terminal_noise_modes * lam)


def _sine_series(modes, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if modes is None:
        return np.zeros_like(x)
    k = np.arange(1, len(modes) + 1)
    return np.sin(np.pi * np.outer(x, k)) @ np.asarray(modes, dtype=float)


def make_ensemble(seed: int, size: int, *, modes: int = 6, reaction: bool = True,
                  amplitude: float = 1.0, drift_source: bool = False,
                  noise_source: bool = False, backward: bool = False,
                  zero_initial: bool = False) -> list[Sample]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        y0 = np.zeros(modes) if zero_initial else rng.standard_normal(modes) / np.arange(1, modes + 1)
        s = Sample(y0_modes=y0)
        if reaction:
            s.b = _trig_poly(rng, amplitude)
            s.c = _trig_poly(rng, amplitude)
        if drift_source:
            s.f = _trig_poly(rng, amplitude, modes=4)
        if noise_source:
            s.g = _trig_poly(rng, amplitude, modes=4)
        if backward:
            s.terminal_modes = rng.standard_normal(modes) / np.arange(1, modes + 1)
            s.terminal_noise_modes = rng.standard_normal(modes) / np.arange(1, modes + 1)
        out.append(s)
    return out


# --------------------------------------------------------------------------
# second moments of solutions

@dataclass
class Moments:
    """Per-level second moments of a solution and of its sources.

    ``y2[n]``: E y_n^2 at nodes (levels 0..N); ``yx2[n]``: E ((y_{i+1}-y_i)/h)^2
    per cell; ``f2``, ``g2``, ``gx2``: the same for the drift source, the noise
    integrand and its gradient on levels 0..N-1 (``g`` is ``k`` for backward
    solutions).
    """

    y2: np.ndarray
    yx2: np.ndarray
    f2: np.ndarray | None = None
    g2: np.ndarray | None = None
    gx2: np.ndarray | None = None


def _grad2(op: DegenerateOperator, arr: np.ndarray) -> np.ndarray:
    return (np.diff(arr, axis=-1) / op.grid.h) ** 2


def sample_tables(sample: Sample, op: DegenerateOperator, T: float, N: int) -> dict:
    """Coefficient and source tables ``(N, M)`` sampled at the step midpoints.

    The data are deterministic, so midpoint sampling keeps every step adapted
    while making the deterministic part of the scheme second order in time.
    """
    t = (np.arange(N) + 0.5) * (T / N)
    return {k: coefficient_table(getattr(sample, k), None, op, times=t) for k in "bcfg"}


def forward_moments_tree(op: DegenerateOperator, tree: NoiseTree, sample: Sample,
                         effective_sources: bool = False, scheme: str = SDIRK2) -> Moments:
    """Moments from an explicit tree solve.

    With ``effective_sources`` the source moments are those of
    ``F = b y + f`` and ``G = c y + g``, i.e. the problem rewritten with the
    reaction and multiplicative noise moved into the sources.
    """
    tab = sample_tables(sample, op, tree.T, tree.N)
    b, c, f, g = tab["b"], tab["c"], tab["f"], tab["g"]
    y = solve_forward(ForwardProblem(op, tree, sample.y0(op.nodes), b=b, c=c, f=f, g=g,
                                     scheme=scheme))
    y2 = np.array([np.mean(y[n] ** 2, axis=0) for n in range(tree.N + 1)])
    yx2 = np.array([np.mean(_grad2(op, y[n]), axis=0) for n in range(tree.N + 1)])
    m = Moments(y2, yx2)
    if effective_sources:
        F = [op.project(b[n] * y[n] + f[n]) for n in range(tree.N)]
        G = [op.project(c[n] * y[n] + g[n]) for n in range(tree.N)]
        m.f2 = np.array([np.mean(v ** 2, axis=0) for v in F])
        m.g2 = np.array([np.mean(v ** 2, axis=0) for v in G])
        m.gx2 = np.array([np.mean(_grad2(op, v), axis=0) for v in G])
    return m


def forward_moments_cov(op: DegenerateOperator, T: float, N: int, sample: Sample,
                        effective_sources: bool = False, scheme: str = SDIRK2) -> Moments:
    """Moments from the exact mean/covariance recursion (deterministic data only).

    One step is ``y' = A y + dt Q f + R v dW`` with ``A = R + dt Q diag(b)`` and
    ``v = c y + g``; as the increment is independent of the past with variance
    dt::

        mu'  = A mu + dt Q f
        P'   = E[(A y + dt Q f)(A y + dt Q f)^T] + dt R E[v v^T] R^T

    which matches the Bernoulli tree expectation to rounding error.
    """
    dt = T / N
    tab = sample_tables(sample, op, T, N)
    b, c, f, g = tab["b"], tab["c"], tab["f"], tab["g"]
    mask = op.free_mask.astype(float)
    R, Q = Propagator(op, dt, scheme).matrices(op.M)

    mu = op.project(sample.y0(op.nodes))
    P = np.outer(mu, mu)
    y2 = [np.diag(P).copy()]
    yx2 = [_cell_var(op, P)]
    f2, g2, gx2 = [], [], []
    for n in range(N):
        fn, gn, cn = f[n] * mask, g[n] * mask, c[n]
        A = R + dt * Q * b[n][None, :]
        e = dt * Q @ fn
        Amu = A @ mu
        Ev = cn[:, None] * P * cn[None, :] + np.outer(cn * mu, gn) + np.outer(gn, cn * mu) \
            + np.outer(gn, gn)
        if effective_sources:
            bn = b[n] * mask
            EF = bn[:, None] * P * bn[None, :] + np.outer(bn * mu, fn) + np.outer(fn, bn * mu) \
                + np.outer(fn, fn)
            f2.append(np.diag(EF).copy())
            Evp = Ev * mask[:, None] * mask[None, :]
            g2.append(np.diag(Evp).copy())
            gx2.append(_cell_var(op, Evp))
        P = A @ P @ A.T + np.outer(Amu, e) + np.outer(e, Amu) + np.outer(e, e) + dt * R @ Ev @ R.T
        P = 0.5 * (P + P.T)
        mu = Amu + e
        y2.append(np.diag(P).copy())
        yx2.append(_cell_var(op, P))
    m = Moments(np.array(y2), np.array(yx2))
    if effective_sources:
        m.f2, m.g2, m.gx2 = np.array(f2), np.array(g2), np.array(gx2)
    return m


def _cell_var(op: DegenerateOperator, P: np.ndarray) -> np.ndarray:
    d = np.diag(P)
    off = np.diag(P, 1)
    return (d[1:] + d[:-1] - 2.0 * off) / op.grid.h ** 2


def backward_moments_tree(op: DegenerateOperator, tree: NoiseTree, sample: Sample,
                          scheme: str = SDIRK2) -> Moments:
    """Backward solve of ``dy = (-(a y_x)_x + F) dt + ybar dW``, ``y(T) = y_T``."""
    zT = sample.terminal(op.nodes, tree.brownian(tree.N))
    F = sample_tables(sample, op, tree.T, tree.N)["f"] * op.free_mask
    z, k = solve_backward(BackwardProblem(op, tree, zT, source=F, scheme=scheme))
    y2 = np.array([np.mean(z[n] ** 2, axis=0) for n in range(tree.N + 1)])
    yx2 = np.array([np.mean(_grad2(op, z[n]), axis=0) for n in range(tree.N + 1)])
    k2 = np.array([np.mean(k[n] ** 2, axis=0) for n in range(tree.N)])
    return Moments(y2, yx2, f2=F ** 2, g2=k2)


def backward_moments_affine(op: DegenerateOperator, T: float, N: int, sample: Sample,
                            scheme: str = SDIRK2) -> Moments:
    """Same moments via ``z_n = A_n + B_n W(t_n)`` (terminal affine in W(T), F deterministic)."""
    dt = T / N
    F = sample_tables(sample, op, T, N)["f"] * op.free_mask
    prop = Propagator(op, dt, scheme)
    A = op.project(_sine_series(sample.terminal_modes, op.nodes))
    B = op.project(_sine_series(sample.terminal_noise_modes, op.nodes))
    y2 = [None] * (N + 1)
    yx2 = [None] * (N + 1)
    k2 = [None] * N
    y2[N] = A ** 2 + T * B ** 2
    yx2[N] = _grad2(op, A) + T * _grad2(op, B)
    for n in range(N - 1, -1, -1):
        k2[n] = B ** 2
        nxt = prop(np.stack([A, B]))
        A = nxt[0] - dt * F[n]
        B = nxt[1]
        tn = n * dt
        y2[n] = A ** 2 + tn * B ** 2
        yx2[n] = _grad2(op, A) + tn * _grad2(op, B)
    return Moments(np.array(y2), np.array(yx2), f2=F ** 2, g2=np.array(k2))


# --------------------------------------------------------------------------
# weighted space-time quadrature in log form

class LogQuadrature:
    """``log E int int s^p theta^q(t) pref(x) exp(sign 2 s phi) u(t, x) dx dt``.

    Each time step is integrated with Gauss-Legendre points, so ``theta`` is
    never evaluated at a time node and the steep time profile of the weight is
    integrated exactly per step.  Level values (arrays with N + 1 rows) are
    held at the end of each step, as in the implicit energy balance of the
    scheme (linear interpolation would charge a whole step to the initial
    transient of stiff modes); source values (N rows) are held at their step.
    """

    def __init__(self, ws: WeightSystem, op: DegenerateOperator, N: int, sign: float = -1.0,
                 points: int = 8):
        self.ws, self.op, self.N = ws, op, N
        self.T = ws.T
        self.dt = ws.T / N
        self.sign = sign
        z, w = np.polynomial.legendre.leggauss(points)
        self.lam = 0.5 * (z + 1.0)                       # position inside the step
        self.wq = 0.5 * w * self.dt
        self.t = (np.arange(N)[:, None] + self.lam[None, :]) * self.dt      # (N, Q)
        self.theta = np.asarray(ws.theta(self.t), dtype=float)
        x = op.nodes
        self.beta_n = ws.beta(x)
        self.w_n = op.weights * op.free_mask
        self.h = op.grid.h
        self.a_c = op.a_mid
        self.x2a_n = np.asarray(op.a.x2_over_a(x), dtype=float)
        self.xn, self.xc = x, op.grid.midpoints

    def log_exp_weight(self, s: float, cells: bool = False) -> np.ndarray:
        """(N, Q, K) logarithm of ``exp(sign 2 s theta beta)``."""
        nodes = self.sign * 2.0 * s * self.theta[:, :, None] * self.beta_n[None, None, :]
        if not cells:
            return nodes
        # cell weight = the smaller endpoint weight, so a gradient term never
        # sees a weight larger than at the nodes (a midpoint value of beta
        # could otherwise dominate the ratio at large s, for either sign)
        return np.minimum(nodes[..., :-1], nodes[..., 1:])

    def mask(self, interval, cells: bool = False) -> np.ndarray:
        """Fraction of each dual cell (node) or cell lying inside ``interval``."""
        x = self.xn
        if cells:
            lo_c, hi_c = x[:-1], x[1:]
        else:
            mid = self.xc
            lo_c = np.concatenate(([x[0]], mid))
            hi_c = np.concatenate((mid, [x[-1]]))
        if interval is None:
            return np.ones_like(lo_c)
        lo, hi = interval
        width = hi_c - lo_c
        overlap = np.clip(np.minimum(hi_c, hi) - np.maximum(lo_c, lo), 0.0, None)
        return np.divide(overlap, width, out=np.zeros_like(width), where=width > 0)

    def _in_time(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[0] == self.N + 1:
            values = values[1:]
        if values.shape[0] == self.N:
            return np.broadcast_to(values[:, None, :], (self.N, self.lam.size, values.shape[1]))
        raise ValueError("values need N or N + 1 rows")

    def integral(self, s: float, values: np.ndarray, *, s_pow: float = 0.0,
                 theta_pow: float = 0.0, space=None, cells: bool = False,
                 interval=None) -> float:
        """``space`` is a nonnegative spatial factor on nodes (or cells)."""
        quad = (self.h if cells else self.w_n) * self.mask(interval, cells)
        if space is not None:
            quad = quad * space
        logw = (self.log_exp_weight(s, cells) + s_pow * math.log(s)
                + theta_pow * np.log(self.theta)[:, :, None])
        b = self._in_time(values) * quad[None, None, :] * self.wq[None, :, None]
        with np.errstate(divide="ignore"):
            return float(logsumexp(np.where(b > 0, logw, 0.0), b=b))


def _log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


# --------------------------------------------------------------------------
# reports

@dataclass
class InequalityReport:
    inequality: str
    s_values: list[float]
    ensemble_size: int
    rows: list[dict] = field(default_factory=list)   # sample, s, log_lhs, log_rhs, ratio
    meta: dict = field(default_factory=dict)

    def add(self, sample: int, s: float, log_lhs: float, log_rhs: float) -> None:
        if log_lhs == -math.inf:
            ratio = 0.0
        elif log_rhs == -math.inf:
            ratio = math.inf            # rhs = 0 < lhs: a violation
        else:
            d = log_lhs - log_rhs
            ratio = math.exp(d) if d < 700 else math.inf
        self.rows.append({"sample": sample, "s": s, "log_lhs": log_lhs, "log_rhs": log_rhs,
                          "ratio": ratio})

    def ratios(self, s: float | None = None) -> np.ndarray:
        return np.array([r["ratio"] for r in self.rows if s is None or r["s"] == s])

    def ratio_matrix(self) -> np.ndarray:
        """(samples, s) array of ratios."""
        out = np.zeros((self.ensemble_size, len(self.s_values)))
        idx = {s: j for j, s in enumerate(self.s_values)}
        for r in self.rows:
            out[r["sample"], idx[r["s"]]] = r["ratio"]
        return out

    def max_by_s(self) -> list[float]:
        return [float(np.max(self.ratios(s))) for s in self.s_values]

    def mean_by_s(self) -> list[float]:
        return [float(np.mean(self.ratios(s))) for s in self.s_values]

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios()))

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.ratios())))

    def violations(self) -> int:
        return int(np.sum(~np.isfinite(self.ratios())))

    def log_scale(self, s: float) -> float:
        """Largest finite ``|log lhs|``, ``|log rhs|`` at ``s`` (sets the rounding floor)."""
        vals = [abs(v) for r in self.rows if r["s"] == s
                for v in (r["log_lhs"], r["log_rhs"]) if math.isfinite(v)]
        return max(vals, default=0.0)

    def nonincreasing_top_decade(self, rtol: float | None = None) -> bool:
        """Max ratio non-increasing over the top decade of s.

        The ratio is ``exp(log lhs - log rhs)``, so its relative rounding error
        is a few ulps of the log magnitudes; by default that is the tolerance.
        """
        s = np.array(self.s_values)
        mx = np.array(self.max_by_s())
        top = np.flatnonzero(s >= s.max() / 10.0 * (1 - 1e-12))
        top = top[np.argsort(s[top])]
        for i, j in zip(top[:-1], top[1:]):
            tol = rtol if rtol is not None else 64 * np.finfo(float).eps * max(
                self.log_scale(s[i]), self.log_scale(s[j]), 1.0)
            if mx[j] > mx[i] * (1.0 + tol):
                return False
        return True

    @property
    def passed(self) -> bool:
        ok = self.finite
        if len(self.s_values) > 1:
            ok = ok and self.nonincreasing_top_decade()
        return ok

    def summary(self) -> dict:
        return {"inequality": self.inequality, "ensemble_size": self.ensemble_size,
                "s_values": self.s_values, "max_ratio_by_s": self.max_by_s(),
                "mean_ratio_by_s": self.mean_by_s(), "max_ratio": self.max_ratio,
                "finite": self.finite, "violations": self.violations(), "passed": self.passed}

    def to_json(self, path, config: dict | None = None) -> None:
        data = {"summary": self.summary(), "meta": self.meta, "config": config or {}}
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, default=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "s", "lhs", "rhs", "ratio", "log_lhs", "log_rhs"])
            for r in self.rows:
                w.writerow([r["sample"], repr(float(r["s"])), repr(_safe_exp(r["log_lhs"])),
                            repr(_safe_exp(r["log_rhs"])), repr(float(r["ratio"])),
                            repr(float(r["log_lhs"])), repr(float(r["log_rhs"]))])


def _safe_exp(v: float) -> float:
    return math.exp(v) if v < 700 else math.inf


def refinement_change(coarse: InequalityReport, fine: InequalityReport) -> float:
    """Largest relative change of a recorded ratio between two resolutions."""
    a, b = coarse.ratio_matrix(), fine.ratio_matrix()
    if a.shape != b.shape:
        raise ValueError("reports cover different samples or s values")
    both_zero = (a == 0) & (b == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(b - a) / np.abs(a)
    rel[both_zero] = 0.0
    return float(np.max(rel))


def geometric_s_grid(s0: float = 1.0, decades: float = 2.0, per_decade: int = 3) -> list[float]:
    n = int(round(decades * per_decade))
    return [float(s0 * 10.0 ** (k / per_decade)) for k in range(n + 1)]


# --------------------------------------------------------------------------
# verifiers

def _moments_for(op, ws, N, samples, kind, backend, threads, **kw):
    tree = NoiseTree(N, ws.T) if backend == TREE else None

    def one(sample):
        if kind == "forward":
            if backend == TREE:
                return forward_moments_tree(op, tree, sample, **kw)
            return forward_moments_cov(op, ws.T, N, sample, **kw)
        if backend == TREE:
            return backward_moments_tree(op, tree, sample)
        return backward_moments_affine(op, ws.T, N, sample)

    if backend not in (TREE, MOMENTS):
        raise ValueError(f"unknown backend {backend!r}")
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, samples))
    return [one(s) for s in samples]


def _carleman_lhs(q: LogQuadrature, m: Moments, s: float) -> float:
    grad = q.integral(s, m.yx2, s_pow=1, theta_pow=1, space=q.a_c, cells=True)
    mass = q.integral(s, m.y2, s_pow=3, theta_pow=3, space=q.x2a_n)
    return float(np.logaddexp(grad, mass))


def _omega_term(q: LogQuadrature, m: Moments, s: float, omega) -> float:
    return q.integral(s, m.y2, s_pow=3, theta_pow=3, interval=omega)


def verify_carleman_forward(ws: WeightSystem, op: DegenerateOperator, N: int,
                            samples: list[Sample], s_grid, backend: str = TREE,
                            threads: int = 1) -> InequalityReport:
    """Global weighted energy of y against its weighted mass on omega."""
    if ws.theta_variant != STANDARD:
        raise ValueError("the forward estimate uses the standard time weight")
    q = LogQuadrature(ws, op, N)
    moms = _moments_for(op, ws, N, samples, "forward", backend, threads)
    rep = InequalityReport("carleman_forward", list(map(float, s_grid)), len(samples),
                           meta={"M": op.M, "N": N, "T": ws.T, "omega": ws.omega,
                                 "backend": backend})
    for i, m in enumerate(moms):
        for s in rep.s_values:
            rep.add(i, s, _carleman_lhs(q, m, s), _omega_term(q, m, s, ws.omega))
    return rep


def verify_carleman_sources(ws: WeightSystem, op: DegenerateOperator, N: int,
                            samples: list[Sample], s_grid, backend: str = TREE,
                            threads: int = 1, details: bool = False):
    """Weighted energy bounded by weighted sources plus the omega term.

    The sources are the effective ones ``F = b y + f``, ``G = c y + g``, so a
    sample with b, c set reproduces the equation with reaction and
    multiplicative noise.  With ``details`` the per-term logs are returned too.
    """
    q = LogQuadrature(ws, op, N)
    moms = _moments_for(op, ws, N, samples, "forward", backend, threads, effective_sources=True)
    rep = InequalityReport("carleman_sources", list(map(float, s_grid)), len(samples),
                           meta={"M": op.M, "N": N, "T": ws.T, "omega": ws.omega,
                                 "backend": backend})
    parts = []
    for i, m in enumerate(moms):
        for s in rep.s_values:
            lhs = _carleman_lhs(q, m, s)
            om = _omega_term(q, m, s, ws.omega)
            tf = q.integral(s, m.f2)
            tg = q.integral(s, m.g2, s_pow=2, theta_pow=2, space=q.x2a_n)
            tgx = q.integral(s, m.gx2, space=q.a_c, cells=True)
            rhs = float(logsumexp([tf, tg, tgx, om]))
            rep.add(i, s, lhs, rhs)
            parts.append({"sample": i, "s": s, "lhs": lhs, "omega": om, "f": tf, "g": tg,
                          "gx": tgx})
    return (rep, parts) if details else rep


def verify_observability(ws: WeightSystem, op: DegenerateOperator, N: int,
                         samples: list[Sample], s: float, omega=None, backend: str = TREE,
                         threads: int = 1) -> InequalityReport:
    """Terminal energy ``E ||y(T)||^2`` against the weighted omega mass."""
    omega = ws.omega if omega is None else omega
    q = LogQuadrature(ws, op, N)
    moms = _moments_for(op, ws, N, samples, "forward", backend, threads)
    rep = InequalityReport("observability", [float(s)], len(samples),
                           meta={"M": op.M, "N": N, "T": ws.T, "omega": omega,
                                 "backend": backend})
    for i, m in enumerate(moms):
        lhs = float(_log(np.sum(q.w_n * m.y2[-1])))
        rep.add(i, float(s), lhs, _omega_term(q, m, s, omega))
    return rep


def verify_backward_carleman(ws: WeightSystem, op: DegenerateOperator, N: int,
                             samples: list[Sample], s_grid, backend: str = TREE,
                             threads: int = 1) -> InequalityReport:
    """Backward estimate with the time weight frozen on [0, T/2].

    lhs: trace term ``A(0) exp(-2 s phi(0)) y(0)^2`` plus the weighted energy;
    rhs: source, noise-integrand and omega terms.
    """
    if ws.theta_variant != BAR:
        raise ValueError("the backward estimate uses the frozen ('bar') time weight")
    q = LogQuadrature(ws, op, N)
    moms = _moments_for(op, ws, N, samples, "backward", backend, threads)
    rep = InequalityReport("carleman_backward", list(map(float, s_grid)), len(samples),
                           meta={"M": op.M, "N": N, "T": ws.T, "omega": ws.omega,
                                 "backend": backend})
    x = op.nodes
    th0 = float(ws.theta(0.0))
    for i, m in enumerate(moms):
        for s in rep.s_values:
            wss = ws.with_s(s)
            A0 = np.asarray(wss.drift_factor(np.array([0.0]), x, "backward"))[0]
            log_trace = float(logsumexp(-2 * s * th0 * q.beta_n + _log(A0),
                                        b=q.w_n * m.y2[0]))
            lhs = float(logsumexp([log_trace, _carleman_lhs(q, m, s)]))
            tF = q.integral(s, m.f2) if m.f2 is not None else -math.inf
            tk = q.integral(s, m.g2, s_pow=2, theta_pow=2)
            om = _omega_term(q, m, s, ws.omega)
            rep.add(i, s, lhs, float(logsumexp([tF, tk, om])))
    return rep


def verify_caccioppoli(ws: WeightSystem, op: DegenerateOperator, N: int,
                       samples: list[Sample], inner, outer, mu_grid, weight_sign: float = -1.0,
                       backend: str = TREE, threads: int = 1) -> InequalityReport:
    """Interior gradient on ``inner`` against the function and source on ``outer``.

    ``weight_sign`` selects ``exp(-2 mu phi)`` (-1) or ``exp(+2 mu phi)`` (+1).
    Each sample should carry a drift source ``f`` and no noise coefficient.
    """
    lo_o, hi_o = outer
    lo_i, hi_i = inner
    if not (0 < lo_o < lo_i < hi_i < hi_o < 1):
        raise ValueError("need inner interval compactly inside the outer one")
    a_out = op.a.eval(np.linspace(lo_o, hi_o, 50))
    if np.min(a_out) <= 0:
        raise ValueError("the coefficient must not vanish on the outer interval")
    q = LogQuadrature(ws, op, N, sign=weight_sign)
    moms = _moments_for(op, ws, N, samples, "forward", backend, threads, effective_sources=True)
    rep = InequalityReport("caccioppoli", list(map(float, mu_grid)), len(samples),
                           meta={"M": op.M, "N": N, "T": ws.T, "inner": inner, "outer": outer,
                                 "weight_sign": weight_sign, "backend": backend})
    for i, m in enumerate(moms):
        for mu in rep.s_values:
            lhs = q.integral(mu, m.yx2, cells=True, interval=inner)
            tv = q.integral(mu, m.y2, s_pow=2, theta_pow=2, interval=outer)
            tf = q.integral(mu, m.f2, interval=outer)
            rep.add(i, mu, lhs, float(np.logaddexp(tv, tf)))
    return rep
