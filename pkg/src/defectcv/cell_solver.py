"""Periodic corrector problems on ``Q_N = [0, N)^d`` and apparent tensors.

Discretization: conforming multilinear (Q1) elements on a uniform periodic
grid with ``r`` elements per unit cell side and an element-wise constant
coefficient.  Element stiffness blocks are integrated exactly.  The flux
average uses the element-centre gradient, which is the exact element mean of
the gradient of a Q1 function, so the apparent tensor equals the discrete
energy form for a converged Galerkin solution.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DEFAULT_RESOLUTION = 4
DEFAULT_TOL = 1e-9
# 1D systems are tiny; a tighter default keeps the flux average exact to ~1e-12.
DEFAULT_TOL_1D = 1e-12


def default_tol(d: int) -> float:
    return DEFAULT_TOL_1D if d == 1 else DEFAULT_TOL


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"PCG did not converge in {iterations} iterations (relative residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class EllipticityError(SolverError):
    pass


def _reference_element(d: int):
    """Exact Q1 integrals on the unit reference element ``[0, 1]^d``.

    Returns ``corners`` (2^d, d), ``stiff[a, b, i, j] = int d_a phi_i d_b phi_j``
    and ``grad[a, i] = int d_a phi_i``.
    """
    corners = np.array(list(itertools.product((0, 1), repeat=d)))
    gp = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)
    pts = np.array(list(itertools.product(gp, repeat=d)))
    w = 1.0 / len(pts)
    n = len(corners)
    stiff = np.zeros((d, d, n, n))
    grad = np.zeros((d, n))
    for x in pts:
        val = np.where(corners == 1, x, 1.0 - x)  # (n, d) factor values
        sgn = np.where(corners == 1, 1.0, -1.0)
        g = np.empty((n, d))
        for a in range(d):
            others = np.prod(np.delete(val, a, axis=1), axis=1)
            g[:, a] = sgn[:, a] * others
        stiff += w * np.einsum("ia,jb->abij", g, g)
        grad += w * g.T
    return corners, stiff, grad


@dataclass(frozen=True)
class DiscreteGrid:
    """Uniform periodic grid: ``N`` cells per side, ``r`` elements per cell side."""

    N: int
    r: int
    d: int

    def __post_init__(self):
        if self.N < 1 or self.r < 1 or self.d not in (1, 2):
            raise ValueError(f"invalid grid N={self.N}, r={self.r}, d={self.d}")

    @property
    def n(self) -> int:
        """Nodes (= elements) per side; opposite faces are identified."""
        return self.N * self.r

    @property
    def h(self) -> float:
        return 1.0 / self.r

    @property
    def n_elements(self) -> int:
        return self.n**self.d

    @property
    def n_dofs(self) -> int:
        return self.n**self.d

    @cached_property
    def _ref(self):
        return _reference_element(self.d)

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """Global node index of each (element, local corner), shape ``(n_el, 2^d)``."""
        n, d = self.n, self.d
        idx = np.indices((n,) * d).reshape(d, -1).T  # element lower corners
        corners = self._ref[0]
        nodes = (idx[:, None, :] + corners[None, :, :]) % n
        return np.ravel_multi_index(tuple(nodes.transpose(2, 0, 1)), (n,) * d)

    @cached_property
    def _pattern(self):
        en = self.element_nodes
        k = en.shape[1]
        rows = np.repeat(en, k, axis=1).ravel()
        cols = np.tile(en, (1, k)).ravel()
        key = rows.astype(np.int64) * self.n_dofs + cols
        uniq, perm = np.unique(key, return_inverse=True)
        u_rows, u_cols = np.divmod(uniq, self.n_dofs)
        indptr = np.searchsorted(u_rows, np.arange(self.n_dofs + 1))
        return perm.ravel(), u_cols.astype(np.int32), indptr.astype(np.int32), len(uniq)

    @cached_property
    def stiffness_basis(self) -> np.ndarray:
        """Element stiffness per coefficient entry: ``(d, d, 2^d, 2^d)``, scaled to element size."""
        return self._ref[1] * self.h ** (self.d - 2)

    @cached_property
    def gradient_integrals(self) -> np.ndarray:
        """``int_e d_a phi_i`` for each local corner: ``(d, 2^d)``."""
        return self._ref[2] * self.h ** (self.d - 1)

    def stiffness(self, coef: np.ndarray) -> sp.csr_matrix:
        """Assemble the periodic stiffness matrix for element coefficients ``(n_el, d, d)``."""
        coef = coef.reshape(self.n_elements, self.d, self.d)
        local = np.einsum("eab,abij->eij", coef, self.stiffness_basis)
        perm, indices, indptr, nnz = self._pattern
        data = np.bincount(perm, weights=local.ravel(), minlength=nnz)
        return sp.csr_matrix((data, indices, indptr), shape=(self.n_dofs, self.n_dofs))

    def load(self, coef: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Right-hand side ``F_i = -int grad(phi_i) . A p``."""
        coef = coef.reshape(self.n_elements, self.d, self.d)
        flux = coef @ np.asarray(p, dtype=float)  # (n_el, d)
        local = -flux @ self.gradient_integrals  # (n_el, 2^d)
        return np.bincount(self.element_nodes.ravel(), weights=local.ravel(), minlength=self.n_dofs)

    def element_gradients(self, w: np.ndarray) -> np.ndarray:
        """Element-mean gradient of a nodal field, shape ``(n_el, d)``."""
        vol = self.h**self.d
        return w[self.element_nodes] @ self.gradient_integrals.T / vol

    def cell_elements(self, k) -> np.ndarray:
        """Flat indices of the ``r^d`` elements of unit cell ``k``."""
        k = np.atleast_1d(k)
        ranges = [np.arange(ki * self.r, (ki + 1) * self.r) % self.n for ki in k]
        mesh = np.meshgrid(*ranges, indexing="ij")
        return np.ravel_multi_index(tuple(m.ravel() for m in mesh), (self.n,) * self.d)

    def shift(self, w: np.ndarray, cells) -> np.ndarray:
        """Translate a nodal field by a whole number of unit cells (periodically)."""
        field_ = w.reshape((self.n,) * self.d)
        shifted = np.roll(field_, tuple(int(c) * self.r for c in np.atleast_1d(cells)), axis=tuple(range(self.d)))
        return shifted.ravel()


@dataclass
class CorrectorSolution:
    p: np.ndarray
    w: np.ndarray = field(repr=False)
    grad: np.ndarray = field(repr=False)
    residual: float = 0.0
    iterations: int = 0


def pcg(K: sp.csr_matrix, b: np.ndarray, tol: float = DEFAULT_TOL, maxiter: int | None = None, x0=None):
    """Jacobi-preconditioned CG on the mean-zero subspace of a periodic stiffness matrix.

    ``b`` must be orthogonal to constants.  Iterates and search directions are
    projected so the constant null space never enters the solution.  Returns
    ``(x, relative_residual, iterations)``.
    """
    n = b.size
    maxiter = 10 * n if maxiter is None else maxiter
    b = b - b.mean()
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) - np.mean(x0)
    if bnorm == 0.0:
        return np.zeros(n), 0.0, 0
    diag = K.diagonal()
    if np.any(diag <= 0):
        raise EllipticityError("non-positive diagonal entry in stiffness matrix")
    inv_diag = 1.0 / diag
    r = b - K @ x if x0 is not None else b.copy()
    z = inv_diag * r
    z -= z.mean()
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol:
        if it >= maxiter:
            raise ConvergenceError(res, it)
        Kp = K @ p
        pKp = p @ Kp
        if pKp <= 0:
            raise EllipticityError(f"non-positive energy p^T K p = {pKp:.3e}")
        step = rz / pKp
        x += step * p
        r -= step * Kp
        z = inv_diag * r
        z -= z.mean()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        res = np.linalg.norm(r) / bnorm
        it += 1
    return x - x.mean(), res, it


def _as_element_array(coefficient, grid: DiscreteGrid) -> np.ndarray:
    if callable(coefficient):
        h = grid.h
        centers = (np.indices((grid.n,) * grid.d).reshape(grid.d, -1).T + 0.5) * h
        return np.array([coefficient(x) for x in centers]).reshape(grid.n_elements, grid.d, grid.d)
    arr = np.asarray(coefficient, dtype=float)
    if arr.size != grid.n_elements * grid.d * grid.d:
        raise ValueError(f"coefficient array of size {arr.size} does not match grid with {grid.n_elements} elements")
    return arr.reshape(grid.n_elements, grid.d, grid.d)


def solve_corrector(coefficient, grid: DiscreteGrid, p, tol: float | None = None, maxiter: int | None = None,
                    K: sp.csr_matrix | None = None) -> CorrectorSolution:
    """Solve ``-div A (p + grad w) = 0`` with ``w`` periodic and mean zero.

    ``coefficient`` is either a callable ``x -> (d, d)`` matrix (sampled at
    element centres) or an array of element coefficients.
    """
    tol = default_tol(grid.d) if tol is None else tol
    if tol <= 0:
        raise ValueError("tol must be positive")
    coef = _as_element_array(coefficient, grid)
    p = np.asarray(p, dtype=float).reshape(grid.d)
    K = grid.stiffness(coef) if K is None else K
    b = grid.load(coef, p)
    maxiter = 50 * grid.n if maxiter is None else maxiter
    w, res, it = pcg(K, b, tol=tol, maxiter=maxiter)
    return CorrectorSolution(p, w, grid.element_gradients(w), res, it)


def apparent_tensor(coefficient, grid: DiscreteGrid, correctors) -> np.ndarray:
    """Average of ``A (e_j + grad w_j)`` over ``Q_N``; column ``j`` from corrector ``j``."""
    coef = _as_element_array(coefficient, grid)
    correctors = list(correctors)
    if len(correctors) != grid.d:
        raise ValueError(f"need {grid.d} correctors, got {len(correctors)}")
    out = np.empty((grid.d, grid.d))
    for j, sol in enumerate(correctors):
        if sol.w.size != grid.n_dofs:
            raise ValueError("corrector was computed on a different grid")
        g = grid.element_gradients(sol.w)
        out[:, j] = np.einsum("eab,eb->a", coef, sol.p[None, :] + g) / grid.n_elements
    return out


@dataclass
class SolveStats:
    solves: int = 0
    iterations: int = 0

    def add(self, sols):
        for s in sols:
            self.solves += 1
            self.iterations += s.iterations


def homogenize(coef: np.ndarray, grid: DiscreteGrid, tol: float | None = None, stats: SolveStats | None = None,
               return_correctors: bool = False):
    """Apparent tensor of an element coefficient array (all ``d`` corrector solves)."""
    coef = _as_element_array(coef, grid)
    K = grid.stiffness(coef)
    sols = [solve_corrector(coef, grid, e, tol=tol, K=K) for e in np.eye(grid.d)]
    if stats is not None:
        stats.add(sols)
    A = apparent_tensor(coef, grid, sols)
    return (A, sols) if return_correctors else A


def periodic_tensor(model, r: int = DEFAULT_RESOLUTION, tol: float | None = None, defect: bool = False) -> np.ndarray:
    """Homogenized tensor of the defect-free periodic material (``defect=True``: all-defect material)."""
    from defectcv.tensor_field import element_coefficients

    bits = np.full((1,) * model.d, int(defect), dtype=np.uint8)
    grid = DiscreteGrid(1, r, model.d)
    return homogenize(element_coefficients(model, bits, r), grid, tol=tol)


def field_tensor(model, bits, r: int = DEFAULT_RESOLUTION, tol: float | None = None, stats=None) -> np.ndarray:
    """Apparent tensor ``A*_N`` for one realization of the defect lattice."""
    from defectcv.tensor_field import element_coefficients

    bits = np.asarray(bits)
    grid = DiscreteGrid(bits.shape[0], r, model.d)
    return homogenize(element_coefficients(model, bits, r), grid, tol=tol, stats=stats)


def write_corrector(sol: CorrectorSolution, grid: DiscreteGrid, path) -> None:
    """Plain-text dump: ``N r d p`` header then nodal values row-major."""
    p_str = " ".join(repr(float(v)) for v in sol.p)
    rows = sol.w.reshape(-1, grid.n) if grid.d == 2 else sol.w[None, :]
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in rows)
    Path(path).write_text(f"{grid.N} {grid.r} {grid.d} {p_str}\n{body}\n")


def read_corrector(path):
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split()
    N, r, d = int(head[0]), int(head[1]), int(head[2])
    p = np.array([float(v) for v in head[3:3 + d]])
    w = np.array([float(v) for ln in lines[1:] for v in ln.split()])
    return DiscreteGrid(N, r, d), p, w
