"""Carleman weights.

The spatial profile is ``beta = xi * phi_loc + (1 - xi) * psi`` where
``phi_loc(x) = d - int_0^x v/a(v) dv`` is used near the degenerate end,
``psi(x) = exp(2 |rho|_inf) - exp(rho(x))`` with ``rho(x) = int_x^1 v/a(v) dv``
is used near x = 1, and ``xi`` is a cutoff switching between them inside
``omega1``.  The full weight is ``phi(t, x) = theta(t) * beta(x)``.

Three time profiles are provided:

* ``standard``: ``theta = 1 / (t (T - t))**4``, singular at both ends;
* ``bar``: frozen at its minimum ``(2/T)**8`` on ``[0, T/2]``;
* ``bar_eps``: the ``bar`` profile shifted by ``eps`` so it stays finite at T.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coeff import DiffusionCoefficient

STANDARD = "standard"
BAR = "bar"
BAR_EPS = "bar_eps"


# --------------------------------------------------------------------------
# time profiles

def theta(t, T):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t >= T):
        raise ValueError("standard theta is only defined on the open interval (0, T)")
    return (t * (T - t)) ** -4.0


def theta_dot(t, T):
    t = np.asarray(t, dtype=float)
    u = t * (T - t)
    return -4.0 * (T - 2.0 * t) * u ** -5.0


def theta_ddot(t, T):
    t = np.asarray(t, dtype=float)
    u = t * (T - t)
    return 20.0 * (T - 2.0 * t) ** 2 * u ** -6.0 + 8.0 * u ** -5.0


def theta_bar(t, T, eps: float = 0.0):
    """The non-vanishing-at-0 profile; ``eps > 0`` gives the regularised one."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError("time outside [0, T]")
    if eps == 0.0 and np.any(t >= T):
        raise ValueError("theta_bar is singular at t = T")
    late = t >= T / 2
    # clip keeps the masked-out branch finite
    tl = np.where(late, t, T / 2)
    out = np.where(late, ((tl + eps) * (T - tl + eps)) ** -4.0, (T / 2 + eps) ** -8.0)
    return out if out.ndim else float(out)


def theta_bar_dot(t, T, eps: float = 0.0):
    t = np.asarray(t, dtype=float)
    late = t > T / 2
    tl = np.where(late, t, T / 2)
    u = (tl + eps) * (T - tl + eps)
    out = np.where(late, -4.0 * (T - 2.0 * tl) * u ** -5.0, 0.0)
    return out if out.ndim else float(out)


def theta_constants(T: float) -> dict[str, float]:
    return {
        "c1": (2.0 / T) ** 8,
        "c2": 8.0 * (T / 2.0) ** 7,
        "c3": 80.0 * (T / 2.0) ** 14,
        "c4": T ** 3,
        "c5": 80.0 * (T / 2.0) ** 6,
    }


@dataclass
class ThetaBoundsReport:
    T: float
    samples: int
    constants: dict[str, float]
    max_ratio: dict[str, float]
    residual: dict[str, float]
    relative_residual: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(v <= 1e-9 for v in self.relative_residual.values())

    def to_dict(self) -> dict:
        return {"T": self.T, "samples": self.samples, "constants": self.constants,
                "max_ratio": self.max_ratio, "residual": self.residual,
                "relative_residual": self.relative_residual, "passed": self.passed}


def verify_theta_bounds(T: float, sample_count: int = 100_000) -> ThetaBoundsReport:
    """Check the five growth bounds on theta at interior sample times.

    For each bound ``lhs(t) <= c * theta(t)**p`` the report holds
    ``max_t lhs / theta**p`` and its signed distance to ``c`` (negative means
    the bound holds).  The lower bound ``theta >= c1`` is rendered as
    ``c1 / theta <= 1``.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    t = np.linspace(0.0, T, sample_count + 2)[1:-1]
    th = theta(t, T)
    d1 = np.abs(theta_dot(t, T))
    d2 = np.abs(theta_ddot(t, T))
    c = theta_constants(T)
    ratios = {
        "theta>=c1": float(np.max(c["c1"] / th)),
        "dtheta<=c2*theta^2": float(np.max(d1 / th ** 2)),
        "ddtheta<=c3*theta^3": float(np.max(d2 / th ** 3)),
        "dtheta<=c4*theta^1.5": float(np.max(d1 / th ** 1.5)),
        "ddtheta<=c5*theta^2": float(np.max(d2 / th ** 2)),
    }
    bound = {
        "theta>=c1": 1.0,
        "dtheta<=c2*theta^2": c["c2"],
        "ddtheta<=c3*theta^3": c["c3"],
        "dtheta<=c4*theta^1.5": c["c4"],
        "ddtheta<=c5*theta^2": c["c5"],
    }
    residual = {k: ratios[k] - bound[k] for k in ratios}
    rel = {k: residual[k] / bound[k] for k in ratios}
    return ThetaBoundsReport(T, sample_count, c, ratios, residual, rel)


# --------------------------------------------------------------------------
# spatial profile

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def primitive_x_over_a(a: DiffusionCoefficient, x) -> np.ndarray:
    """``int_0^x v / a(v) dv``.

    Closed form for power laws; otherwise Gauss-Legendre panels on a mesh
    refined geometrically toward 0, where the integrand loses smoothness.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if a.kind == "power":
        e = 2.0 - a.alpha
        if e <= 0:
            raise ValueError("int v/a(v) dv diverges for alpha >= 2")
        return x ** e / e
    out = np.zeros_like(x)
    knots = np.union1d(a.x, [])
    for i, xi in enumerate(x):
        if xi <= 0:
            continue
        inner = knots[(knots > 0) & (knots < xi)]
        first = inner[0] if inner.size else xi
        # geometric panels on (0, first], plain panels between table knots
        geo = first * 0.5 ** np.arange(48)[::-1]
        edges = np.concatenate(([0.0], geo, inner[1:] if inner.size else [], [xi]))
        edges = np.unique(edges)
        lo, hi = edges[:-1], edges[1:]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        v = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        f = v / a.eval(v)
        out[i] = float(np.sum(half[:, None] * _GL_WEIGHTS[None, :] * f))
    return out


def smoothstep_cutoff(x, a1: float, b1: float):
    """Quintic cutoff: 1 on [0, a1], 0 on [b1, 1], C^2 across both junctions."""
    x = np.asarray(x, dtype=float)
    u = np.clip((x - a1) / (b1 - a1), 0.0, 1.0)
    return 1.0 - u ** 3 * (10.0 - 15.0 * u + 6.0 * u ** 2)


def smoothstep_cutoff_dx(x, a1: float, b1: float):
    x = np.asarray(x, dtype=float)
    u = np.clip((x - a1) / (b1 - a1), 0.0, 1.0)
    return -30.0 * u ** 2 * (1.0 - u) ** 2 / (b1 - a1)


@dataclass(frozen=True)
class WeightSystem:
    a: DiffusionCoefficient
    T: float
    omega: tuple[float, float]
    omega1: tuple[float, float]
    s: float
    theta_variant: str = STANDARD
    eps: float = 0.0
    d: float = field(default=0.0)
    rho_inf: float = field(default=0.0)
    _total: float = field(default=0.0, repr=False)

    # -- time factor ------------------------------------------------------
    def theta(self, t):
        if self.theta_variant == STANDARD:
            return theta(t, self.T)
        return theta_bar(t, self.T, self.eps if self.theta_variant == BAR_EPS else 0.0)

    def theta_t(self, t):
        if self.theta_variant == STANDARD:
            if np.any(np.asarray(t) <= 0) or np.any(np.asarray(t) >= self.T):
                raise ValueError("standard theta is only defined on (0, T)")
            return theta_dot(t, self.T)
        return theta_bar_dot(t, self.T, self.eps if self.theta_variant == BAR_EPS else 0.0)

    def with_variant(self, variant: str, eps: float = 0.0) -> "WeightSystem":
        return build_weight_system(self.a, self.T, self.omega, self.omega1, self.s,
                                   variant, eps)

    def with_s(self, s: float) -> "WeightSystem":
        return build_weight_system(self.a, self.T, self.omega, self.omega1, s,
                                   self.theta_variant, self.eps)

    # -- space factor -----------------------------------------------------
    def xi(self, x):
        return smoothstep_cutoff(x, *self.omega1)

    def phi_loc(self, x):
        return self.d - primitive_x_over_a(self.a, x)

    def rho(self, x):
        return self._total - primitive_x_over_a(self.a, x)

    def psi(self, x):
        return np.exp(2.0 * self.rho_inf) - np.exp(self.rho(x))

    def beta(self, x):
        x = np.asarray(x, dtype=float)
        xi = self.xi(x)
        return (xi * self.phi_loc(x) + (1.0 - xi) * self.psi(x)).reshape(x.shape)

    def beta_x(self, x):
        x = np.asarray(x, dtype=float)
        xa = np.asarray(self.a.x_over_a(x), dtype=float)
        xi = self.xi(x)
        dxi = smoothstep_cutoff_dx(x, *self.omega1)
        phi, psi = self.phi_loc(x), self.psi(x)
        # phi_loc' = -x/a and psi' = (x/a) e^rho; psi only matters where xi < 1,
        # which keeps the x -> 0 singularity of x/a out of the psi branch
        psi_x = np.where(xi < 1.0, xa * np.exp(self.rho(x)), 0.0)
        phi_x = -xa
        with np.errstate(invalid="ignore"):
            out = dxi * (phi - psi) + xi * phi_x + (1.0 - xi) * psi_x
        return out.reshape(x.shape)

    # -- space-time weight --------------------------------------------------
    def phi(self, t, x):
        return np.multiply.outer(self.theta(t), self.beta(x))

    def phi_x(self, t, x):
        return np.multiply.outer(self.theta(t), self.beta_x(x))

    def phi_t(self, t, x):
        return np.multiply.outer(self.theta_t(t), self.beta(x))

    def log_weight(self, t, x, sign: float = -1.0):
        """``sign * 2 s phi(t, x)``, the logarithm of ``exp(sign * 2 s phi)``."""
        return sign * 2.0 * self.s * self.phi(t, x)

    def drift_factor(self, t, x, direction: str = "forward"):
        """Forward: ``s phi_t - s^2 a phi_x^2``.  Backward: ``s phi_t + s^2 a phi_x^2``.

        At x = 0 the product ``a phi_x^2`` is replaced by its limit, 0.
        """
        s = self.s
        x = np.asarray(x, dtype=float)
        th = np.asarray(self.theta(t), dtype=float)
        bx = self.beta_x(x)
        av = np.asarray(self.a.eval(x), dtype=float)
        with np.errstate(invalid="ignore"):
            abx2 = np.where(x > 0, av * bx ** 2, 0.0)
        grad = s ** 2 * np.multiply.outer(th ** 2, abx2)
        time = s * self.phi_t(t, x)
        if direction == "forward":
            return time - grad
        if direction == "backward":
            return time + grad
        raise ValueError(f"unknown direction {direction!r}")

    def export_csv(self, path: str | Path, times, xs) -> None:
        times = np.asarray(times, dtype=float)
        xs = np.asarray(xs, dtype=float)
        th = np.asarray(self.theta(times), dtype=float)
        be = self.beta(xs)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "theta", "beta", "phi", "exp_minus_2s_phi"])
            for ti, thi in zip(times, th):
                for xi, bi in zip(xs, be):
                    ph = thi * bi
                    w.writerow([f"{ti:.17g}", f"{xi:.17g}", f"{thi:.17g}", f"{bi:.17g}",
                                f"{ph:.17g}", f"{np.exp(-2 * self.s * ph):.17g}"])


def build_weight_system(a: DiffusionCoefficient, T: float, omega, omega1, s: float,
                        theta_variant: str = STANDARD, eps: float = 0.0) -> WeightSystem:
    aw, bw = map(float, omega)
    a1, b1 = map(float, omega1)
    if not (0.0 < aw < a1 < b1 < bw < 1.0):
        raise ValueError(f"need 0 < a_omega < a1 < b1 < b_omega < 1, got {omega}, {omega1}")
    if T <= 0 or s <= 0:
        raise ValueError("T and s must be positive")
    if theta_variant not in (STANDARD, BAR, BAR_EPS):
        raise ValueError(f"unknown theta variant {theta_variant!r}")
    if theta_variant == BAR_EPS and eps <= 0:
        raise ValueError("bar_eps variant needs eps > 0")
    total = float(primitive_x_over_a(a, 1.0)[0])
    if not np.isfinite(total):
        raise ValueError("int_0^1 v/a(v) dv diverges")
    # unit margin keeps phi_loc >= 1 on [0, 1]
    d = total + 1.0
    return WeightSystem(a=a, T=float(T), omega=(aw, bw), omega1=(a1, b1), s=float(s),
                        theta_variant=theta_variant, eps=float(eps), d=d,
                        rho_inf=total, _total=total)
