"""Penalised HUM control synthesis on the noise tree.

Two constructions:

* :func:`null_control_backward` drives the backward equation to ``z(0) = 0``
  up to the penalty: it minimises over deterministic initial data ``y0`` the
  dual functional ``1/2 ||G y0||^2 + eps/2 ||y0||^2 + E<eta, y(T)>`` with
  ``G y0 = (1_omega y_n)_n`` and takes ``v = -1_omega y`` at the minimiser.
  Then ``z(0) = -eps y0``, so ``||z(0)||^2`` vanishes as eps does.
* :func:`two_control_forward` minimises the weighted penalised functional
  ``J_eps(h, H)`` for the forward equation with a control ``h`` on omega in the
  drift and a control ``H`` in the diffusion.

Both use conjugate gradients whose operator applications are one forward and
one backward sweep; the backward sweep is the exact transpose of the forward
one, so the operators are symmetric to rounding error.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .noise import AdaptedField, NoiseTree, martingale_coefficient
from .solvers import (BackwardProblem, ForwardProblem, Propagator, SDIRK2, coefficient_table,
                      omega_indicator, solve_backward, solve_forward)
from .spacegrid import DegenerateOperator
from .weights import BAR, BAR_EPS, STANDARD, WeightSystem, theta as theta_std


# --------------------------------------------------------------------------
# conjugate gradients

@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float          # final relative residual
    converged: bool


def conjugate_gradient(apply: Callable, rhs: np.ndarray, inner: Callable,
                       x0: np.ndarray | None = None, precond: Callable | None = None,
                       tol: float = 1e-8, max_iter: int = 500) -> CGResult:
    """Preconditioned CG for an operator symmetric positive definite in ``inner``.

    Stops when ``||r|| <= tol ||rhs||`` (norms from ``inner``).
    """
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float, copy=True)
    r = rhs - apply(x) if x0 is not None else rhs.copy()
    bnorm = math.sqrt(max(inner(rhs, rhs), 0.0))
    if bnorm == 0.0:
        return CGResult(np.zeros_like(rhs), 0, 0.0, True)
    pre = precond if precond is not None else (lambda v: v)
    z = pre(r)
    p = z.copy()
    rz = inner(r, z)
    res = math.sqrt(max(inner(r, r), 0.0)) / bnorm
    it = 0
    while res > tol and it < max_iter:
        Ap = apply(p)
        pAp = inner(p, Ap)
        if pAp <= 0:
            raise FloatingPointError("CG operator is not positive definite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = pre(r)
        rz_new = inner(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        res = math.sqrt(max(inner(r, r), 0.0)) / bnorm
    return CGResult(x, it, res, res <= tol)


def halving_schedule(eps_start: float, eps_stop: float) -> list[float]:
    """``eps_start, eps_start/2, ...`` down to (and including) the first value <= eps_stop."""
    if not (eps_start > 0 and eps_stop > 0):
        raise ValueError("penalty parameters must be positive")
    out = [eps_start]
    while out[-1] > eps_stop:
        out.append(out[-1] / 2.0)
    return out


# --------------------------------------------------------------------------
# results

@dataclass
class ControlResult:
    kind: str
    eps: float
    controls: dict[str, AdaptedField | np.ndarray]
    target_norm: float           # ||z(0)||^2 or E||y(T)||^2
    iterations: int
    residual: float
    converged: bool
    functional: float
    costs: dict[str, float] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"kind": self.kind, "eps": self.eps, "target_norm": self.target_norm,
                "target_over_eps": self.target_norm / self.eps, "iterations": self.iterations,
                "residual": self.residual, "converged": self.converged,
                "functional": self.functional, "costs": self.costs,
                **{k: v for k, v in self.extras.items() if np.isscalar(v)}}


def write_sweep(results: list[ControlResult], json_path=None, csv_path=None,
                config: dict | None = None) -> None:
    """JSON (summaries plus config) and CSV (eps, target norm, ratio, iterations)."""
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"results": [r.summary() for r in results], "config": config or {}}, fh,
                      indent=2, sort_keys=True, default=float)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "target_norm", "target_over_eps", "iterations", "residual"])
            for r in results:
                w.writerow([repr(float(r.eps)), repr(float(r.target_norm)),
                            repr(float(r.target_norm / r.eps)), r.iterations,
                            repr(float(r.residual))])


# --------------------------------------------------------------------------
# null control of the backward equation

@dataclass
class BackwardControlProblem:
    op: DegenerateOperator
    tree: NoiseTree
    omega: tuple[float, float]
    eta: np.ndarray                      # level-N field or deterministic vector
    b: object = None
    c: object = None
    scheme: str = SDIRK2


class _DualMap:
    """``y0 -> (1_omega y_n)_n`` and its transpose for a backward control problem."""

    def __init__(self, p: BackwardControlProblem):
        self.p = p
        self.ind = omega_indicator(p.op, p.omega)
        self.b = coefficient_table(p.b, p.tree, p.op)
        self.c = coefficient_table(p.c, p.tree, p.op)

    def forward(self, y0: np.ndarray) -> AdaptedField:
        p = self.p
        return solve_forward(ForwardProblem(p.op, p.tree, y0, b=self.b, c=self.c,
                                            scheme=p.scheme))

    def backward(self, terminal, source) -> np.ndarray:
        p = self.p
        z, _ = solve_backward(BackwardProblem(p.op, p.tree, terminal, b=self.b, c=self.c,
                                              source=source, scheme=p.scheme))
        return z[0][0]

    def gram(self, y0: np.ndarray) -> np.ndarray:
        """``G* G y0``: backward solve with eta = 0 and source ``-1_omega y``."""
        y = self.forward(y0)
        src = AdaptedField(self.p.tree, [-self.ind * y[n] for n in range(self.p.tree.N)])
        return self.backward(np.zeros(self.p.op.M), src)

    def observe_norm(self, y0: np.ndarray) -> float:
        y = self.forward(y0)
        tree, op = self.p.tree, self.p.op
        return sum(tree.dt * float(np.mean(op.inner(self.ind * y[n], y[n])))
                   for n in range(tree.N))


def null_control_backward(p: BackwardControlProblem, eps: float, cg_tol: float = 1e-8,
                          cg_max_iter: int = 500, y0_start: np.ndarray | None = None
                          ) -> ControlResult:
    """Penalised HUM control ``v`` with ``z(0) = -eps y0_hat``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    op, tree = p.op, p.tree
    dm = _DualMap(p)
    S0 = dm.backward(p.eta, None)                       # S_0 eta = z(0) with v = 0
    free = op.free_mask.astype(float)

    def apply(y0):
        return dm.gram(y0) + eps * y0 * free

    cg = conjugate_gradient(apply, -S0 * free, op.inner, x0=y0_start, tol=cg_tol,
                            max_iter=cg_max_iter)
    y0 = cg.x
    y = dm.forward(y0)
    v = AdaptedField(tree, [-dm.ind * y[n] for n in range(tree.N)])
    z, k = solve_backward(BackwardProblem(op, tree, p.eta, b=dm.b, c=dm.c, source=v,
                                          scheme=p.scheme))
    z0 = z[0][0]
    obs = sum(tree.dt * float(np.mean(op.inner(dm.ind * y[n], y[n]))) for n in range(tree.N))
    eta = np.broadcast_to(np.asarray(p.eta, dtype=float), y[tree.N].shape)
    functional = 0.5 * obs + 0.5 * eps * float(op.inner(y0, y0)) + float(
        np.mean(op.inner(eta, y[tree.N])))
    return ControlResult(
        kind="null_control_backward", eps=eps, controls={"v": v, "y0": y0},
        target_norm=float(op.inner(z0, z0)), iterations=cg.iterations, residual=cg.residual,
        converged=cg.converged, functional=functional,
        costs={"control_l2": obs},
        extras={"z0": z0, "y": y, "z": z, "y0_norm": float(op.inner(y0, y0))})


def null_control_sweep(p: BackwardControlProblem, eps_values, **kw) -> list[ControlResult]:
    """Successive penalties, each warm-started from the previous minimiser."""
    out, start = [], None
    for eps in eps_values:
        res = null_control_backward(p, eps, y0_start=start, **kw)
        start = res.controls["y0"]
        out.append(res)
    return out


# --------------------------------------------------------------------------
# two controls for the forward equation

@dataclass
class ForwardControlProblem:
    op: DegenerateOperator
    tree: NoiseTree
    ws: WeightSystem                    # supplies a, omega, s and the space weight beta
    y0: np.ndarray
    F: AdaptedField | np.ndarray | None = None
    G: AdaptedField | np.ndarray | None = None
    b: object = None
    scheme: str = SDIRK2


class TwoControlFunctional:
    """Discrete ``J_eps(h, H)`` with bounded weights, and its exact gradient.

    Controls at level n act on the step ``t_n -> t_{n+1}``; all weights are
    evaluated at the step midpoint ``t_{n+1/2}``, and the state term is
    charged on ``y_{n+1}``::

        J = 1/2 sum dt E<W_y y_{n+1}, y_{n+1}> + 1/2 sum dt E<W_h h_n, h_n>_omega
            + 1/2 sum dt E<W_H H_n, H_n> + 1/(2 eps) E||y_N||^2

    with ``W_y = exp(-2 s phi_bar_eps)``, ``W_h = exp(-2 s phi_bar) s^-3 theta_bar^-3``
    and ``W_H = exp(-2 s phi_bar) s^-2 theta_bar^-3``.

    Controls are packed into one flat vector: for every level, the ``(2**n, M)``
    block of h followed by that of H.
    """

    def __init__(self, p: ForwardControlProblem, eps: float):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if p.ws.theta_variant == STANDARD:
            raise ValueError("the standard time weight blows up at t = 0; use the bar variant")
        self.p, self.eps = p, eps
        op, tree = p.op, p.tree
        self.N, self.M, self.dt = tree.N, op.M, tree.dt
        ws_bar = p.ws.with_variant(BAR)
        ws_eps = p.ws.with_variant(BAR_EPS, eps)
        s = p.ws.s
        th = tree.half_times
        beta = ws_bar.beta(op.nodes)
        tb = np.asarray(ws_bar.theta(th), dtype=float)[:, None]
        te = np.asarray(ws_eps.theta(th), dtype=float)[:, None]
        self.W_y = np.exp(-2.0 * s * te * beta)
        base = np.exp(-2.0 * s * tb * beta)
        self.W_h = base * s ** -3 * tb ** -3
        self.W_H = base * s ** -2 * tb ** -3
        # weighted costs with the standard theta and exp(+2 s phi), reported alongside
        tstd = np.asarray(theta_std(th, tree.T), dtype=float)[:, None]
        with np.errstate(over="ignore"):
            plus = np.exp(2.0 * s * tstd * beta)
            self.W_h_std = plus * s ** -3 * tstd ** -3
            self.W_H_std = plus * s ** -2 * tstd ** -3
        if np.min(self.W_h) < 1e-150 or np.min(self.W_H) < 1e-150:
            raise FloatingPointError("control weights underflow on this grid; reduce s")
        self.ind = omega_indicator(op, p.ws.omega) * op.free_mask
        self.free = op.free_mask.astype(float)
        self.prop = Propagator(op, self.dt, p.scheme)
        self.btab = coefficient_table(p.b, tree, op)
        sizes = [2 ** n * self.M for n in range(self.N)]
        self._offsets = np.concatenate(([0], np.cumsum([2 * s_ for s_ in sizes])))
        # inner-product weights and preconditioner of the flat control vector
        qw, pre, mask = [], [], []
        for n in range(self.N):
            lvl = np.full((2 ** n, 1), self.dt / 2 ** n) * op.weights[None, :]
            qw += [lvl.ravel(), lvl.ravel()]
            pre += [np.broadcast_to(self.W_h[n], (2 ** n, self.M)).ravel(),
                    np.broadcast_to(self.W_H[n], (2 ** n, self.M)).ravel()]
            mask += [np.broadcast_to(self.ind, (2 ** n, self.M)).ravel(),
                     np.broadcast_to(self.free, (2 ** n, self.M)).ravel()]
        self.qw = np.concatenate(qw)
        self.diag = np.concatenate(pre)
        self.mask = np.concatenate(mask)
        self.size = self.qw.size

    # -- packing ---------------------------------------------------------------
    def unpack(self, u: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        h, H = [], []
        for n in range(self.N):
            a, m = self._offsets[n], 2 ** n * self.M
            h.append(u[a:a + m].reshape(2 ** n, self.M))
            H.append(u[a + m:a + 2 * m].reshape(2 ** n, self.M))
        return h, H

    def pack(self, h, H) -> np.ndarray:
        return np.concatenate([np.concatenate([np.ravel(a), np.ravel(b)]) for a, b in zip(h, H)])

    def inner(self, u, v) -> float:
        return float(np.sum(self.qw * u * v))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    # -- state and adjoint -----------------------------------------------------
    def _sources(self, u, homogeneous: bool):
        h, H = self.unpack(u * self.mask)
        tree, p = self.p.tree, self.p
        f, g = [], []
        for n in range(self.N):
            fn = self.ind * h[n]
            gn = H[n].copy()
            if not homogeneous:
                fn = fn + _level(p.F, n)
                gn = gn + _level(p.G, n)
            f.append(np.broadcast_to(fn, (2 ** n, self.M)).copy())
            g.append(np.broadcast_to(gn, (2 ** n, self.M)).copy())
        return AdaptedField(tree, f), AdaptedField(tree, g)

    def state(self, u, homogeneous: bool = False) -> AdaptedField:
        p = self.p
        f, g = self._sources(u, homogeneous)
        y0 = np.zeros(self.M) if homogeneous else p.y0
        return solve_forward(ForwardProblem(p.op, p.tree, y0, b=self.btab, f=f, g=g,
                                            scheme=p.scheme))

    def adjoint(self, y: AdaptedField) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """``(z_n, Z_n) = (Q E_n p_{n+1}, R K_n p_{n+1})`` with p the state adjoint."""
        p, dt, N = self.p, self.dt, self.N
        terminal = y[N] / self.eps + dt * self.W_y[N - 1] * y[N]
        src = [np.zeros((1, self.M))] + [-self.W_y[n - 1] * y[n] for n in range(1, N)]
        pz, _, zhat = solve_backward(BackwardProblem(p.op, p.tree, terminal, b=self.btab,
                                                     source=AdaptedField(p.tree, src),
                                                     scheme=p.scheme), return_hat=True)
        z = [zhat[n] for n in range(N)]
        Z = [self.prop(martingale_coefficient(pz[n + 1], dt)) for n in range(N)]
        return z, Z

    # -- functional ------------------------------------------------------------
    def value(self, u, homogeneous: bool = False) -> float:
        y = self.state(u, homogeneous)
        return self._value(u, y)

    def _value(self, u, y) -> float:
        op, dt, N = self.p.op, self.dt, self.N
        h, H = self.unpack(u * self.mask)
        J = 0.0
        for n in range(N):
            J += 0.5 * dt * float(np.mean(op.inner(self.W_y[n] * y[n + 1], y[n + 1])))
            J += 0.5 * dt * float(np.mean(op.inner(self.W_h[n] * self.ind * h[n], h[n])))
            J += 0.5 * dt * float(np.mean(op.inner(self.W_H[n] * H[n], H[n])))
        J += 0.5 / self.eps * float(np.mean(op.inner(y[N], y[N])))
        return J

    def gradient(self, u, homogeneous: bool = False) -> np.ndarray:
        """Riesz representer of dJ in :meth:`inner`: ``(W_h h + 1_omega z, W_H H + Z)``."""
        y = self.state(u, homogeneous)
        z, Z = self.adjoint(y)
        h, H = self.unpack(u * self.mask)
        gh = [self.ind * (self.W_h[n] * h[n] + z[n]) for n in range(self.N)]
        gH = [self.free * (self.W_H[n] * H[n] + Z[n]) for n in range(self.N)]
        return self.pack(gh, gH)

    def hessian(self, u) -> np.ndarray:
        return self.gradient(u, homogeneous=True)

    def optimality_defect(self, u) -> float:
        """Defect of ``h = -1_omega W_h^-1 z``, ``H = -W_H^-1 Z`` at ``u``.

        Measured as ``||W (u - u_rel)|| / ||grad J(0)||`` where ``u_rel`` is the
        control given by the relations; this is the relative residual that CG
        drives below its tolerance, recomputed from a fresh state/adjoint pair.
        """
        y = self.state(u)
        z, Z = self.adjoint(y)
        rel = self.pack([-self.ind * z[n] / self.W_h[n] for n in range(self.N)],
                        [-self.free * Z[n] / self.W_H[n] for n in range(self.N)])
        diff = self.diag * (u * self.mask - rel) * self.mask
        g0 = self.gradient(self.zeros())
        return math.sqrt(self.inner(diff, diff) / self.inner(g0, g0))

    def costs(self, u) -> dict[str, float]:
        op, dt = self.p.op, self.dt
        h, H = self.unpack(u * self.mask)
        out = {}
        for name, Wh, WH in (("bar", self.W_h, self.W_H), ("standard", self.W_h_std,
                                                              self.W_H_std)):
            with np.errstate(over="ignore", invalid="ignore"):
                out[f"h_{name}"] = float(sum(dt * np.mean(op.inner(Wh[n] * self.ind * h[n], h[n]))
                                             for n in range(self.N)))
                out[f"H_{name}"] = float(sum(dt * np.mean(op.inner(WH[n] * H[n], H[n]))
                                             for n in range(self.N)))
        return out


def _level(src, n):
    if src is None:
        return 0.0
    if isinstance(src, AdaptedField):
        return src[n]
    arr = np.asarray(src, dtype=float)
    return arr[n] if arr.ndim == 2 else arr


def two_control_forward(p: ForwardControlProblem, eps: float, cg_tol: float = 1e-8,
                        cg_max_iter: int = 500, u_start: np.ndarray | None = None
                        ) -> ControlResult:
    """Minimise ``J_eps`` over ``(h, H)`` by diagonally preconditioned CG."""
    J = TwoControlFunctional(p, eps)
    rhs = -J.gradient(J.zeros())
    pre_inv = np.where(J.mask > 0, 1.0 / np.where(J.diag > 0, J.diag, 1.0), 0.0)
    cg = conjugate_gradient(J.hessian, rhs, J.inner, x0=u_start, precond=lambda r: pre_inv * r,
                            tol=cg_tol, max_iter=cg_max_iter)
    u = cg.x * J.mask
    y = J.state(u)
    value = J._value(u, y)
    h, H = J.unpack(u)
    target = float(np.mean(p.op.inner(y[p.tree.N], y[p.tree.N])))
    return ControlResult(
        kind="two_control_forward", eps=eps,
        controls={"h": AdaptedField(p.tree, [a.copy() for a in h]),
                  "H": AdaptedField(p.tree, [a.copy() for a in H]), "u": u},
        target_norm=target, iterations=cg.iterations, residual=cg.residual,
        converged=cg.converged, functional=value, costs=J.costs(u),
        extras={"J_zero": J.value(J.zeros()), "functional_obj": J, "y": y})


def two_control_sweep(p: ForwardControlProblem, eps_values, **kw) -> list[ControlResult]:
    out, start = [], None
    for eps in eps_values:
        res = two_control_forward(p, eps, u_start=start, **kw)
        start = res.controls["u"]
        out.append(res)
    return out


def gradient_audit(J: TwoControlFunctional, u: np.ndarray, directions: int = 10,
                   seed: int = 0, step: float = 1e-3) -> float:
    """Largest relative mismatch between ``<grad J, d>`` and central differences."""
    rng = np.random.default_rng(seed)
    g = J.gradient(u)
    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(J.size) * J.mask
        d /= math.sqrt(J.inner(d, d))
        fd = (J.value(u + step * d) - J.value(u - step * d)) / (2 * step)
        an = J.inner(g, d)
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-300))
    return worst


# --------------------------------------------------------------------------
# unique continuation

@dataclass
class UniqueContinuationReport:
    local: list[float]
    global_: list[float]
    flagged: list[int]
    threshold: float

    @property
    def violations(self) -> int:
        return len(self.flagged)

    def to_dict(self) -> dict:
        return {"local_energy": self.local, "global_energy": self.global_,
                "flagged": self.flagged, "violations": self.violations,
                "threshold": self.threshold}


def unique_continuation_probe(op: DegenerateOperator, tree: NoiseTree, candidates,
                              omega, t1: float | None = None, threshold: float = 1e-12,
                              b=None, c=None, scheme: str = SDIRK2) -> UniqueContinuationReport:
    """Local energy on ``omega x (0, t1]`` against the global space-time energy.

    A candidate is flagged when its local energy is below ``threshold`` times
    its global energy while the latter is positive.
    """
    t1 = tree.T if t1 is None else t1
    ind = omega_indicator(op, omega)
    last = max(1, int(math.floor(t1 / tree.dt + 1e-12)))
    loc, glob, flagged = [], [], []
    for i, y0 in enumerate(candidates):
        y = solve_forward(ForwardProblem(op, tree, y0, b=b, c=c, scheme=scheme))
        lo = sum(tree.dt * float(np.mean(op.inner(ind * y[n], y[n]))) for n in range(1, last + 1))
        gl = sum(tree.dt * float(np.mean(op.inner(y[n], y[n]))) for n in range(1, tree.N + 1))
        loc.append(lo)
        glob.append(gl)
        if gl > 0 and lo <= threshold * gl:
            flagged.append(i)
    return UniqueContinuationReport(loc, glob, flagged, threshold)
