"""Forward and backward stochastic degenerate parabolic solvers on the noise tree.

Forward step (b, sources and noise explicit, the stiff part propagated by a
rational approximation ``R(dt L)`` of the semigroup)::

    y_{n+1} = R(dt L) [ y_n + (c_n y_n + g_n) dW_n ] + dt Q(dt L) [ b_n y_n + f_n ]

``R`` is the L-stable two-stage SDIRK function (second order, ``R(-inf) = 0``)
or the implicit Euler one ``1 / (1 - z)``; ``Q(z) = (R(z) - 1) / z`` is the
matching source function, which keeps the steady response ``-L^{-1} f`` to a
frozen source exact in every mode.  Both are rational in the self-adjoint L,
hence self-adjoint themselves.

Backward step, the exact transpose of the forward step for the pairing
``E <., .>`` (grid inner product averaged over tree nodes)::

    k_n = K_n[z_{n+1}]
    z_n = R E_n[z_{n+1}] + dt b_n Q E_n[z_{n+1}] + dt c_n R k_n - dt s_n

with ``E_n`` the two-point conditional expectation and ``K_n`` the
martingale coefficient.  With these two steps the discrete Ito duality

    E<eta, y_N> - <z_0, y_0> = sum_n dt E<s_n, y_n> + sum_n dt E<Q E_n z_{n+1}, f_n>

holds to rounding error.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .noise import AdaptedField, NoiseTree, conditional_expectation, martingale_coefficient, recombine
from .spacegrid import DegenerateOperator

Coef = float | np.ndarray | Callable | None


SDIRK2 = "sdirk2"
IMPLICIT_EULER = "implicit_euler"
_GAMMA = 1.0 - 1.0 / np.sqrt(2.0)


class Propagator:
    """Applies ``R(dt L)`` (call) or ``Q(dt L)`` (:meth:`source`) to stacks of vectors."""

    def __init__(self, op: DegenerateOperator, dt: float, scheme: str = SDIRK2):
        if scheme not in (SDIRK2, IMPLICIT_EULER):
            raise ValueError(f"unknown time scheme {scheme!r}")
        self.scheme = scheme
        self.dt = dt
        self._solver = op.implicit_factor(_GAMMA * dt if scheme == SDIRK2 else dt)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        s1 = self._solver.solve(r)
        if self.scheme == IMPLICIT_EULER:
            return s1
        # R(z) = (1 + sqrt2) / (1 - g z)^2 - sqrt2 / (1 - g z)
        s2 = self._solver.solve(s1)
        return (1.0 + np.sqrt(2.0)) * s2 - np.sqrt(2.0) * s1

    def source(self, r: np.ndarray) -> np.ndarray:
        s1 = self._solver.solve(r)
        if self.scheme == IMPLICIT_EULER:
            return s1
        # Q(z) = (R(z) - 1) / z = g (1 + sqrt2) / (1 - g z)^2 + g / (1 - g z)
        s2 = self._solver.solve(s1)
        return _GAMMA * ((1.0 + np.sqrt(2.0)) * s2 + s1)

    def both(self, r: np.ndarray, q: np.ndarray) -> np.ndarray:
        """``R r + Q q`` with one pair of solves."""
        if self.scheme == IMPLICIT_EULER:
            return self._solver.solve(r + q)
        s1 = self._solver.solve(np.concatenate([r, q]))
        s2 = self._solver.solve(s1)
        n = r.shape[0]
        c = 1.0 + np.sqrt(2.0)
        return (c * s2[:n] - np.sqrt(2.0) * s1[:n]) + _GAMMA * (c * s2[n:] + s1[n:])

    def matrices(self, M: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(R, Q)`` acting on full-length column vectors."""
        eye = np.eye(M)
        return self(eye).T, self.source(eye).T


def coefficient_table(value: Coef, tree: NoiseTree | None, op: DegenerateOperator,
                      times: np.ndarray | None = None) -> np.ndarray:
    """Normalise a reaction/noise coefficient to an ``(N, M)`` table at ``t_0..t_{N-1}``.

    ``times`` overrides the tree's time grid (and then ``tree`` may be None).
    """
    N = tree.N if times is None else len(times)
    M = op.M
    if value is None:
        return np.zeros((N, M))
    if callable(value):
        t = tree.times[:-1] if times is None else times
        tab = np.asarray(value(t[:, None], op.nodes[None, :]), dtype=float)
        tab = np.broadcast_to(tab, (N, M)).copy()
    else:
        tab = np.broadcast_to(np.asarray(value, dtype=float), (N, M)).copy()
    if not np.all(np.isfinite(tab)):
        raise ValueError("coefficient is not finite on the grid")
    return tab


def _source_level(src: AdaptedField | np.ndarray | None, n: int) -> np.ndarray | float:
    if src is None:
        return 0.0
    if isinstance(src, AdaptedField):
        return src[n]
    arr = np.asarray(src, dtype=float)
    return arr[n][None, :] if arr.ndim == 2 else arr


def omega_indicator(op: DegenerateOperator, omega) -> np.ndarray:
    """1 on nodes strictly inside the open interval ``omega``."""
    lo, hi = omega
    x = op.nodes
    return ((x > lo) & (x < hi)).astype(float)


@dataclass
class ForwardProblem:
    op: DegenerateOperator
    tree: NoiseTree
    y0: np.ndarray
    b: Coef = None
    c: Coef = None
    f: AdaptedField | np.ndarray | None = None
    g: AdaptedField | np.ndarray | None = None
    scheme: str = SDIRK2


@dataclass
class BackwardProblem:
    op: DegenerateOperator
    tree: NoiseTree
    terminal: np.ndarray
    b: Coef = None
    c: Coef = None
    source: AdaptedField | np.ndarray | None = None
    scheme: str = SDIRK2


def solve_forward(p: ForwardProblem) -> AdaptedField:
    op, tree = p.op, p.tree
    dt = tree.dt
    b = coefficient_table(p.b, tree, op)
    c = coefficient_table(p.c, tree, op)
    y0 = np.atleast_2d(np.asarray(p.y0, dtype=float))
    if y0.shape != (1, op.M):
        raise ValueError(f"y0 must have length {op.M}")
    prop = Propagator(op, dt, p.scheme)
    levels = [op.project(y0)]
    for n in range(tree.N):
        yn = levels[-1]
        drift = dt * np.broadcast_to(b[n] * yn + _source_level(p.f, n), yn.shape)
        noise = c[n] * yn + _source_level(p.g, n)
        rhs = recombine(yn, np.broadcast_to(noise, yn.shape), dt)
        levels.append(prop.both(rhs, np.repeat(drift, 2, axis=0)))
    return AdaptedField(tree, levels)


def solve_mean(p: ForwardProblem, N: int | None = None) -> np.ndarray:
    """``E[y_n]`` for deterministic b and sources, shape ``(N + 1, M)``.

    The noise increment has zero mean, so the mean obeys the deterministic
    recursion exactly; this is not limited by the tree depth guard.
    """
    if isinstance(p.f, AdaptedField):
        raise ValueError("solve_mean needs a deterministic drift source")
    op = p.op
    N = p.tree.N if N is None else N
    dt = p.tree.T / N
    t = np.arange(N) * dt
    b = np.zeros((N, op.M)) if p.b is None else (
        np.broadcast_to(np.asarray(p.b(t[:, None], op.nodes[None, :]), float), (N, op.M))
        if callable(p.b) else np.broadcast_to(np.asarray(p.b, float), (N, op.M)))
    prop = Propagator(op, dt, p.scheme)
    out = np.empty((N + 1, op.M))
    out[0] = op.project(np.asarray(p.y0, dtype=float))
    for n in range(N):
        f = 0.0 if p.f is None else np.asarray(p.f, float)[n] if np.ndim(p.f) == 2 else p.f
        out[n + 1] = prop.both(out[n][None, :], dt * (b[n] * out[n] + f)[None, :])[0]
    return out


def solve_backward(p: BackwardProblem, return_hat: bool = False):
    """Returns ``(z, k)``; with ``return_hat`` also ``zhat_n = Q E_n z_{n+1}``.

    ``k`` lives on levels 0..N-1.
    """
    op, tree = p.op, p.tree
    dt = tree.dt
    N = tree.N
    b = coefficient_table(p.b, tree, op)
    c = coefficient_table(p.c, tree, op)
    zT = np.asarray(p.terminal, dtype=float)
    if zT.ndim == 1:
        zT = np.repeat(zT[None, :], 2 ** N, axis=0)
    if zT.shape != (2 ** N, op.M):
        raise ValueError("terminal condition must be a level-N field")
    prop = Propagator(op, dt, p.scheme)
    z = [None] * (N + 1)
    k = [None] * N
    hat = [None] * N
    z[N] = op.project(zT)
    for n in range(N - 1, -1, -1):
        nxt = z[n + 1]
        kn = martingale_coefficient(nxt, dt)
        mean = conditional_expectation(nxt)
        sol = prop(np.concatenate([mean, kn]))
        m_r, k_r = sol[: mean.shape[0]], sol[mean.shape[0]:]
        m_q = prop.source(mean)
        zn = m_r + dt * b[n] * m_q + dt * c[n] * k_r - dt * op.project(
            np.broadcast_to(_source_level(p.source, n), mean.shape))
        z[n] = zn
        k[n] = kn
        hat[n] = m_q
    zf = AdaptedField(tree, z)
    kf = AdaptedField(tree, k)
    if return_hat:
        return zf, kf, AdaptedField(tree, hat)
    return zf, kf


def pairing(op: DegenerateOperator, u: np.ndarray, v: np.ndarray) -> float:
    """``E <u, v>`` for two arrays on the same tree level."""
    return float(np.mean(op.inner(u, v)))


def duality_residual(op: DegenerateOperator, y: AdaptedField, z: AdaptedField,
                     eta: np.ndarray, v: AdaptedField | np.ndarray | None, omega,
                     f: AdaptedField | np.ndarray | None = None,
                     zhat: AdaptedField | None = None) -> float:
    """Relative defect of the discrete duality identity.

    ``v`` is the control entering the backward source as ``1_omega v``.  When
    the forward problem has a drift source ``f``, pass ``zhat`` from
    ``solve_backward(..., return_hat=True)``.
    """
    tree = y.tree
    if z.tree.N != tree.N or z.M != y.M or y.M != op.M:
        raise ValueError("forward and backward solutions use different discretisations")
    N, dt = tree.N, tree.dt
    ind = omega_indicator(op, omega)
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = np.broadcast_to(eta, y[N].shape)
    terminal = pairing(op, eta, y[N])
    initial = pairing(op, z[0], y[0])
    control = sum(dt * pairing(op, ind * np.broadcast_to(_source_level(v, n), y[n].shape), y[n])
                  for n in range(N)) if v is not None else 0.0
    drift = 0.0
    if f is not None:
        if zhat is None:
            raise ValueError("zhat is required when f is given")
        drift = sum(dt * pairing(op, zhat[n], np.broadcast_to(_source_level(f, n), zhat[n].shape))
                    for n in range(N))
    scale = abs(terminal) + abs(initial) + abs(control) + abs(drift)
    if scale == 0.0:
        return 0.0
    return abs(terminal - initial - control - drift) / scale


def solve_forward_mc(op: DegenerateOperator, T: float, y0, increments: np.ndarray,
                     b: Coef = None, c: Coef = None, f=None, g=None,
                     scheme: str = SDIRK2) -> np.ndarray:
    """Monte Carlo paths with Gaussian increments ``(count, N)``.

    Sources ``f``, ``g`` must be deterministic ``(N, M)`` tables or vectors.
    Returns ``(count, N + 1, M)``.
    """
    count, N = increments.shape
    dt = T / N
    t = np.arange(N) * dt
    bt = coefficient_table(b, None, op, times=t)
    ct = coefficient_table(c, None, op, times=t)
    prop = Propagator(op, dt, scheme)
    out = np.empty((count, N + 1, op.M))
    out[:, 0] = op.project(np.asarray(y0, dtype=float))
    for n in range(N):
        yn = out[:, n]
        fn = 0.0 if f is None else np.asarray(f, dtype=float)[n] if np.ndim(f) == 2 else f
        gn = 0.0 if g is None else np.asarray(g, dtype=float)[n] if np.ndim(g) == 2 else g
        rhs = yn + (ct[n] * yn + gn) * increments[:, n:n + 1]
        out[:, n + 1] = prop.both(rhs, dt * np.broadcast_to(bt[n] * yn + fn, yn.shape))
    return out


def level_statistics(op: DegenerateOperator, y: AdaptedField) -> list[dict]:
    """Per-level ``E||y||^2`` and energy ``E<-Ly, y>``."""
    rows = []
    for n in y.level_range:
        yn = y[n]
        l2 = float(np.mean(op.inner(yn, yn)))
        energy = float(np.mean(-op.inner(op.apply(yn), yn)))
        rows.append({"level": n, "t": n * y.tree.dt, "mean_sq_norm": l2, "energy": energy})
    return rows


def write_statistics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["level", "t", "mean_sq_norm", "energy"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})
