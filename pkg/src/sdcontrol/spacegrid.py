"""Flux-form finite differences for u -> (a u_x)_x on [0, 1].

Nodes ``x_0 = 0 < ... < x_{M-1} = 1``.  The discrete inner product is
``<u, v> = sum_i w_i u_i v_i`` with dual-cell widths ``w_i``.  The operator is
stored through its symmetric stiffness matrix ``S`` (``<-Lu, v> = v^T S u`` on
the free nodes) so that ``L = W^{-1} S`` is exactly self-adjoint for ``<., .>``.

Boundary regimes:

* ``wd_dirichlet``: u(0) = u(1) = 0, free nodes 1..M-2;
* ``sd_neumann``: (a u_x)(0) = 0 and u(1) = 0, free nodes 0..M-2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .coeff import DegeneracyClass, DiffusionCoefficient

WD_DIRICHLET = "wd_dirichlet"
SD_NEUMANN = "sd_neumann"


@dataclass(frozen=True)
class SpatialGrid:
    nodes: np.ndarray
    weights: np.ndarray = field(repr=False)

    @property
    def M(self) -> int:
        return self.nodes.size

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    @classmethod
    def uniform(cls, M: int) -> "SpatialGrid":
        return cls.graded(M, 1.0)

    @classmethod
    def graded(cls, M: int, stretch: float = 1.0) -> "SpatialGrid":
        """Geometric clustering at x = 0.

        ``stretch`` is the ratio of the last cell width to the first; it is kept
        fixed as M grows so that refinement resolves one fixed mapping.
        """
        if M < 4:
            raise ValueError("need at least 4 nodes")
        if stretch <= 0:
            raise ValueError("grading stretch must be positive")
        q = stretch ** (1.0 / (M - 2))
        widths = q ** np.arange(M - 1, dtype=float)
        nodes = np.concatenate(([0.0], np.cumsum(widths)))
        nodes /= nodes[-1]
        nodes[-1] = 1.0
        return cls.from_nodes(nodes)

    @classmethod
    def power(cls, M: int, exponent: float = 1.0) -> "SpatialGrid":
        """Nodes ``x_i = (i / (M - 1))**exponent``.

        Clusters nodes at x = 0 like ``M**-exponent`` while interior cells stay
        of width ``O(1/M)``; exponent 1 is the uniform grid.
        """
        if M < 4:
            raise ValueError("need at least 4 nodes")
        if exponent < 1:
            raise ValueError("power-grid exponent must be >= 1")
        nodes = np.linspace(0.0, 1.0, M) ** exponent
        nodes[-1] = 1.0
        return cls.from_nodes(nodes)

    @classmethod
    def from_nodes(cls, nodes) -> "SpatialGrid":
        nodes = np.asarray(nodes, dtype=float)
        if nodes.size < 4:
            raise ValueError("need at least 4 nodes")
        if nodes[0] != 0.0 or nodes[-1] != 1.0:
            raise ValueError("nodes must start at 0 and end at 1")
        h = np.diff(nodes)
        if np.any(h <= 0):
            raise ValueError("degenerate or unordered cell (h <= 0)")
        w = np.zeros_like(nodes)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        return cls(nodes=nodes, weights=w)


def default_grid(a: DiffusionCoefficient, M: int) -> SpatialGrid:
    """Power grid matched to the regularity at x = 0.

    WD solutions behave like ``x**(1 - alpha)`` near 0 (unbounded gradient),
    so nodes are clustered cubically; SD solutions are regular under the
    flux-free condition and get quadratic clustering, which keeps the interior
    finer; nondegenerate coefficients use the uniform grid.
    """
    cls = a.degeneracy_class
    exponent = 3.0 if cls is DegeneracyClass.WD else 2.0 if cls is DegeneracyClass.SD else 1.0
    return SpatialGrid.power(M, exponent)


def default_bc(a: DiffusionCoefficient) -> str:
    return SD_NEUMANN if a.degeneracy_class is DegeneracyClass.SD else WD_DIRICHLET


@dataclass(frozen=True)
class DegenerateOperator:
    grid: SpatialGrid
    a: DiffusionCoefficient
    bc: str
    free: np.ndarray = field(repr=False)          # indices of unknown nodes
    a_mid: np.ndarray = field(repr=False)         # a at cell midpoints
    stiffness: sp.csr_matrix = field(repr=False)  # S on free nodes, symmetric PSD

    @property
    def M(self) -> int:
        return self.grid.M

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def weights(self) -> np.ndarray:
        return self.grid.weights

    @property
    def free_mask(self) -> np.ndarray:
        m = np.zeros(self.M, dtype=bool)
        m[self.free] = True
        return m

    def project(self, u: np.ndarray) -> np.ndarray:
        """Zero the constrained (Dirichlet) entries along the last axis."""
        out = np.array(u, dtype=float, copy=True)
        out[..., ~self.free_mask] = 0.0
        return out

    def inner(self, u, v) -> np.ndarray:
        """Grid inner product along the last axis."""
        return np.sum(np.asarray(u) * np.asarray(v) * self.weights, axis=-1)

    def apply(self, u: np.ndarray) -> np.ndarray:
        """(L u) on full-length vectors (last axis); constrained rows are 0."""
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        uf = u[..., self.free]
        Su = (self.stiffness @ uf.reshape(-1, uf.shape[-1]).T).T.reshape(uf.shape)
        out[..., self.free] = -Su / self.weights[self.free]
        return out

    def dense_L(self) -> np.ndarray:
        """L restricted to the free nodes as a dense matrix."""
        return -self.stiffness.toarray() / self.weights[self.free][:, None]

    def implicit_factor(self, dt: float) -> "ImplicitSolver":
        return ImplicitSolver(self, dt)

    def energy_matrix(self) -> np.ndarray:
        """Dense S: ``u^T S u = ||sqrt(a) u_x||^2`` for u supported on free nodes."""
        return self.stiffness.toarray()

    def export_coo(self, path) -> None:
        """Write the stiffness matrix as ``row col value`` lines (free-node numbering)."""
        coo = self.stiffness.tocoo()
        with open(path, "w") as fh:
            fh.write(f"# {len(self.free)} {len(self.free)} {coo.nnz}\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {v:.17g}\n")


class ImplicitSolver:
    """Solves ``(I - dt L) u = r`` on the free nodes for many right-hand sides.

    Multiplying by W turns the system into the symmetric positive definite
    banded problem ``(W + dt S) u = W r``, factorised once by Cholesky.
    """

    def __init__(self, op: DegenerateOperator, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.op = op
        self.dt = dt
        wf = op.weights[op.free]
        S = op.stiffness
        n = wf.size
        ab = np.zeros((2, n))
        ab[1] = wf + dt * S.diagonal()
        ab[0, 1:] = dt * S.diagonal(1)
        self._wf = wf
        self._chol = sla.cholesky_banded(ab, lower=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``rhs`` has shape (..., M); returns full-length solutions, constrained entries 0."""
        rhs = np.asarray(rhs, dtype=float)
        op = self.op
        r = rhs[..., op.free] * self._wf
        flat = r.reshape(-1, r.shape[-1]).T
        sol = sla.cho_solve_banded((self._chol, False), flat, check_finite=False)
        out = np.zeros(rhs.shape)
        out[..., op.free] = sol.T.reshape(r.shape)
        return out


def assemble(a: DiffusionCoefficient, grid: SpatialGrid, bc: str | None = None) -> DegenerateOperator:
    """Flux-form assembly with the coefficient sampled at cell midpoints."""
    bc = default_bc(a) if bc is None else bc
    if bc not in (WD_DIRICHLET, SD_NEUMANN):
        raise ValueError(f"unknown boundary regime {bc!r}")
    if grid.M < 4:
        raise ValueError("need at least 4 nodes")
    h = grid.h
    if np.any(h <= 0):
        raise ValueError("degenerate cell (h = 0)")
    a_mid = np.asarray(a.eval(grid.midpoints), dtype=float)
    cond = a_mid / h                       # flux conductances, one per cell

    M = grid.M
    # full-node Neumann stiffness: sum over cells of cond * (u_{i+1} - u_i)^2;
    # dropping no cell flux at x = 0 realises (a u_x)(0) = 0 for the SD regime
    main = np.zeros(M)
    main[:-1] += cond
    main[1:] += cond
    off = -cond
    if bc == WD_DIRICHLET:
        free = np.arange(1, M - 1)
    else:
        free = np.arange(0, M - 1)
    full = sp.diags([off, main, off], [-1, 0, 1], shape=(M, M), format="csr")
    S = full[free][:, free].tocsr()
    return DegenerateOperator(grid=grid, a=a, bc=bc, free=free, a_mid=a_mid, stiffness=S)


def weighted_norms(op: DegenerateOperator, u) -> tuple[float, float, float, float]:
    """``(||u||^2, ||sqrt(a) u_x||^2, ||x u / sqrt(a)||^2, ||(sqrt(a)/x) u||^2)``.

    Node quadrature for the first and third, cell-midpoint quadrature for the
    gradient and for the a/x^2 weight (never evaluated at x = 0).
    """
    u = np.asarray(u, dtype=float)
    g = op.grid
    h = g.h
    du = np.diff(u, axis=-1)
    l2 = op.inner(u, u)
    energy = np.sum(op.a_mid * du ** 2 / h, axis=-1)
    x2a = op.a.x2_over_a(g.nodes)
    weighted = np.sum(g.weights * x2a * u ** 2, axis=-1)
    umid = 0.5 * (u[..., 1:] + u[..., :-1])
    hardy = np.sum(h * op.a_mid / g.midpoints ** 2 * umid ** 2, axis=-1)
    return tuple(float(v) if np.ndim(v) == 0 else v for v in (l2, energy, weighted, hardy))


def hardy_matrix(op: DegenerateOperator) -> np.ndarray:
    """Dense B with ``u^T B u = ||(sqrt(a)/x) u||^2`` for u on the free nodes."""
    g = op.grid
    M = g.M
    c = g.h * op.a_mid / g.midpoints ** 2
    # u_mid = (u_i + u_{i+1}) / 2  ->  B = sum_c c_c * p_c p_c^T with p_c = (1/2, 1/2)
    B = np.zeros((M, M))
    idx = np.arange(M - 1)
    B[idx, idx] += 0.25 * c
    B[idx + 1, idx + 1] += 0.25 * c
    B[idx, idx + 1] += 0.25 * c
    B[idx + 1, idx] += 0.25 * c
    return B[np.ix_(op.free, op.free)]


def hardy_poincare_constant(op: DegenerateOperator) -> float:
    """Smallest C with ``||(sqrt(a)/x) u||^2 <= C ||sqrt(a) u_x||^2`` on the grid.

    Largest generalised eigenvalue of the pencil (B, S).
    """
    if op.free.size == 0:
        raise ValueError("no free nodes: energy form is empty")
    S = op.energy_matrix()
    B = hardy_matrix(op)
    try:
        vals = sla.eigh(B, S, eigvals_only=True, subset_by_index=[S.shape[0] - 1, S.shape[0] - 1])
    except np.linalg.LinAlgError as exc:
        raise ValueError("energy form is singular") from exc
    return float(vals[-1])
