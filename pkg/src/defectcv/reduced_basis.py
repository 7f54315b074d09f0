"""Reduced-basis approximation of the two-defect tensor table.

For each direction ``p`` the reduced space for the pair problem with defects
in cells ``0`` and ``l`` is spanned by the one-defect corrector ``w1``, its
lattice translate ``w1(. - l)`` and a user-declared set of exact two-defect
correctors (the snapshots).  The translate captures far-separated pairs; the
snapshots capture near-field interaction.

Everything independent of ``l`` is precomputed once.  Per offset only the
restriction of the basis to the ``(r + 1)^d`` nodes of the two defect cells
is touched, plus one entry of an FFT cross-correlation giving the coupling of
the fixed basis to the translated corrector through the defect-free
operator.
"""
from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from defectcv.cell_solver import DEFAULT_RESOLUTION, DiscreteGrid, periodic_tensor
from defectcv.defect_catalog import (SideTables, _check_side, all_offsets, config_bits, offset_orbits,
                                     point_group, solve_configuration)
from defectcv.tensor_field import MaterialModel, element_coefficients

RANK_TOL = 1e-10
COND_LIMIT = 1e12

# Nested snapshot sets of increasing size around the origin.
_RING4 = [(0, 1), (0, -1), (1, 0), (-1, 0)]
_RING8 = _RING4 + [(1, 1), (1, -1), (-1, 1), (-1, -1)]
_RING12 = _RING8 + [(2, 0), (-2, 0), (0, 2), (0, -2)]
_RING20 = _RING12 + [(1, 2), (1, -2), (-1, 2), (-1, -2), (2, 1), (2, -1), (-2, 1), (-2, -1)]
SNAPSHOT_PRESETS = {4: tuple(_RING4), 8: tuple(_RING8), 12: tuple(_RING12), 20: tuple(_RING20)}


class RankDeficiencyWarning(RuntimeWarning):
    pass


def snapshot_preset(card, N: int, d: int = 2) -> tuple:
    """Snapshot offsets for a preset size (4, 8, 12, 20) or ``"all"``, reduced mod ``N``."""
    if card == "all":
        return tuple(all_offsets(N, d))
    if d == 1:
        base = [(k,) for k in range(1, int(card) // 2 + 1)] + [(-k,) for k in range(1, int(card) // 2 + 1)]
    else:
        if int(card) not in SNAPSHOT_PRESETS:
            raise ValueError(f"no snapshot preset of size {card}; choose from {sorted(SNAPSHOT_PRESETS)} or 'all'")
        base = SNAPSHOT_PRESETS[int(card)]
    return normalize_offsets(base, N, d)


def normalize_offsets(offsets, N: int, d: int) -> tuple:
    """Reduce offsets mod ``N``, drop duplicates (order kept) and reject ``0``."""
    out = []
    for l in offsets:
        l = tuple(int(v) % N for v in np.atleast_1d(l))
        if len(l) != d:
            raise ValueError(f"offset {l} does not have {d} components")
        if not any(l):
            raise ValueError("snapshot offsets must be non-zero modulo N")
        if l not in out:
            out.append(l)
    if not out:
        raise ValueError("snapshot set is empty")
    return tuple(out)


def parse_snapshot_spec(spec: str, N: int, d: int = 2) -> tuple:
    """``"4"``, ``"all"`` or an explicit list ``"0,1;1,0"``."""
    spec = spec.strip()
    if spec == "all" or spec.isdigit():
        return snapshot_preset(spec if spec == "all" else int(spec), N, d)
    return normalize_offsets([tuple(int(v) for v in item.split(",")) for item in spec.split(";")], N, d)


def _is_symmetric_set(offsets, N: int, d: int) -> bool:
    s = set(offsets)
    for g in point_group(d):
        if {tuple(int(v) for v in (g @ np.array(l)) % N) for l in s} != s:
            return False
    return True


def _cell_local_operators(model: MaterialModel, r: int, side: str, grid: DiscreteGrid):
    """Stiffness and loads of the defect perturbation on one cell, on its ``(r+1)^d`` local nodes."""
    d = model.d
    one = np.ones((1,) * d, dtype=np.uint8)
    ref = element_coefficients(model, 0 * one if side == "A" else one, r).reshape(-1, d, d)
    dfc = element_coefficients(model, one if side == "A" else 0 * one, r).reshape(-1, d, d)
    delta = dfc - ref  # (r^d, d, d)
    corners = np.array(list(itertools.product((0, 1), repeat=d)))
    elems = np.indices((r,) * d).reshape(d, -1).T
    local = np.ravel_multi_index(tuple((elems[:, None, :] + corners[None]).transpose(2, 0, 1)), (r + 1,) * d)
    L = (r + 1) ** d
    dK = np.zeros((L, L))
    ke = np.einsum("eab,abij->eij", delta, grid.stiffness_basis)
    np.add.at(dK, (local[:, :, None], local[:, None, :]), ke)
    dF = np.zeros((d, L))
    for q in range(d):
        fe = -(delta @ np.eye(d)[q]) @ grid.gradient_integrals
        np.add.at(dF[q], local, fe)
    return dK, dF, delta.mean(axis=0)


def _cell_nodes(grid: DiscreteGrid, k) -> np.ndarray:
    """Global nodes of cell ``k`` in the local ``(r+1)^d`` ordering."""
    r, n = grid.r, grid.n
    ranges = [(int(ki) * r + np.arange(r + 1)) % n for ki in np.atleast_1d(k)]
    mesh = np.meshgrid(*ranges, indexing="ij")
    return np.ravel_multi_index(tuple(m.ravel() for m in mesh), (n,) * grid.d)


@dataclass(eq=False)
class _DirectionBasis:
    phi: np.ndarray  # (n_dofs, m) K_per-orthonormal fixed basis
    w1: np.ndarray
    gram0: np.ndarray  # phi^T (K_per + dK_0) phi
    coupling: np.ndarray  # (m,) + (N,)*d: phi^T K_per shift_l(w1)
    ss0: float  # w1^T (K_per + dK_0) w1
    f0: np.ndarray  # (d, m): phi^T (F_q,per + dF_q,0)
    g0: np.ndarray  # (d,): w1^T (F_q,per + dF_q,0)
    dropped: tuple = ()


@dataclass(eq=False)
class ReducedBasisSet:
    """Precomputed reduced spaces (one per direction) for the pair-defect family of one side."""

    model: MaterialModel = field(repr=False)
    N: int
    r: int
    side: str
    snapshots: tuple
    per: np.ndarray
    one: np.ndarray
    directions: list = field(repr=False)
    dK: np.ndarray = field(repr=False)
    dF: np.ndarray = field(repr=False)
    delta_mean: np.ndarray = field(repr=False)
    base_integral: np.ndarray = field(repr=False)
    solves: int = 0
    fallbacks: int = 0

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def grid(self) -> DiscreteGrid:
        return DiscreteGrid(self.N, self.r, self.d)

    @property
    def offline_cost(self) -> int:
        """Full solves on ``Q_N``: the one-defect problem plus one per snapshot."""
        return 1 + len(self.snapshots)


def _orthonormalize(vectors, K) -> tuple[np.ndarray, list]:
    """Modified Gram-Schmidt in the ``K`` inner product; returns basis and indices of dropped vectors."""
    basis, dropped = [], []
    for i, v in enumerate(vectors):
        v = np.array(v, dtype=float)
        norm0 = np.sqrt(v @ (K @ v))
        for _ in range(2):
            for b in basis:
                v -= (b @ (K @ v)) * b
        norm = np.sqrt(max(v @ (K @ v), 0.0))
        if norm0 == 0.0 or norm < RANK_TOL * norm0:
            dropped.append(i)
            continue
        basis.append(v / norm)
    if not basis:
        return np.zeros((K.shape[0], 0)), dropped
    return np.column_stack(basis), dropped


def _solve_snapshot(args):
    model, N, r, l, side, tol = args
    _, sols = solve_configuration(model, N, r, [(0,) * model.d, l], side, tol, return_correctors=True)
    return [s.w for s in sols]


def build_basis(model: MaterialModel, N: int, r: int = DEFAULT_RESOLUTION, snapshots=4, side: str = "A",
                tol=None, workers: int = 1) -> ReducedBasisSet:
    """Solve the one-defect problem and the snapshot pair problems, then precompute reduced operators.

    ``snapshots`` is a preset size, ``"all"`` or an iterable of offsets.
    """
    side = _check_side(side)
    d = model.d
    if N < 2:
        raise ValueError("reduced basis needs N >= 2")
    if isinstance(snapshots, (int, str)):
        snapshots = snapshot_preset(snapshots, N, d) if not isinstance(snapshots, str) or snapshots == "all" \
            else parse_snapshot_spec(snapshots, N, d)
    else:
        snapshots = normalize_offsets(snapshots, N, d)
    grid = DiscreteGrid(N, r, d)
    per = periodic_tensor(model, r, tol=tol, defect=(side == "C"))
    one, one_sols = solve_configuration(model, N, r, [(0,) * d], side, tol, return_correctors=True)
    jobs = [(model, N, r, l, side, tol) for l in snapshots]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            snaps = list(pool.map(_solve_snapshot, jobs))
    else:
        snaps = [_solve_snapshot(j) for j in jobs]

    base_coef = element_coefficients(model, config_bits(N, d, [], side), r)
    K_per = grid.stiffness(base_coef)
    dK, dF, delta_mean = _cell_local_operators(model, r, side, grid)
    nodes0 = _cell_nodes(grid, (0,) * d)
    F_per = np.array([grid.load(base_coef, e) for e in np.eye(d)])  # (d, n_dofs)
    F0 = F_per.copy()
    F0[:, nodes0] += dF

    directions = []
    for p in range(d):
        w1 = one_sols[p].w
        phi, dropped = _orthonormalize([w1] + [s[p] for s in snaps], K_per)
        if dropped:
            names = ["one-defect corrector" if i == 0 else f"snapshot {snapshots[i - 1]}" for i in dropped]
            warnings.warn(f"direction {p}: dropping linearly dependent basis fields: {', '.join(names)}",
                          RankDeficiencyWarning, stacklevel=2)
        Kphi = K_per @ phi
        P0 = phi[nodes0]
        gram0 = phi.T @ Kphi + P0.T @ dK @ P0
        shape = (grid.n,) * d
        W = np.conj(np.fft.fftn(w1.reshape(shape)))
        cells = tuple(slice(None, None, r) for _ in range(d))
        coupling = np.zeros((phi.shape[1],) + (N,) * d)
        for j in range(phi.shape[1]):
            coupling[j] = np.fft.ifftn(np.fft.fftn(Kphi[:, j].reshape(shape)) * W).real[cells]
        w0 = w1[nodes0]
        ss0 = float(w1 @ (K_per @ w1) + w0 @ dK @ w0)
        directions.append(_DirectionBasis(phi, w1, gram0, coupling, ss0, F0 @ phi, F0 @ w1, tuple(dropped)))

    base_integral = base_coef.reshape(-1, d, d).sum(axis=0) * grid.h**d
    return ReducedBasisSet(model, N, r, side, snapshots, per, one, directions, dK, dF, delta_mean, base_integral,
                           solves=2 + len(snapshots))


def _reduced_system(basis: ReducedBasisSet, db: _DirectionBasis, l):
    grid = basis.grid
    d, r = basis.d, basis.r
    nodes0 = _cell_nodes(grid, (0,) * d)
    nodes_l = _cell_nodes(grid, l)
    nodes_m = _cell_nodes(grid, tuple(-int(v) for v in l))
    dK, dF = basis.dK, basis.dF
    Pl = db.phi[nodes_l]
    s0 = db.w1[nodes_m]  # translate of w1 restricted to cell 0
    sl = db.w1[nodes0]  # translate of w1 restricted to cell l
    m = db.phi.shape[1]
    A = np.empty((m + 1, m + 1))
    A[:m, :m] = db.gram0 + Pl.T @ dK @ Pl
    cross = db.coupling[(slice(None),) + tuple(int(v) % basis.N for v in l)]
    cross = cross + db.phi[nodes0].T @ dK @ s0 + Pl.T @ dK @ sl
    A[:m, m] = A[m, :m] = cross
    A[m, m] = db.ss0 + s0 @ dK @ s0
    B = np.empty((d, m + 1))
    B[:, :m] = db.f0 + dF @ Pl
    B[:, m] = db.g0 + dF @ s0
    return A, B


def _solve_reduced(A: np.ndarray, b: np.ndarray):
    """Solve the SPD reduced system; ``None`` when it is numerically singular."""
    scale = np.sqrt(np.abs(np.diag(A)))
    if np.any(scale == 0):
        return None
    As = A / np.outer(scale, scale)
    evals = np.linalg.eigvalsh(As)
    if evals[0] <= 0 or evals[-1] / evals[0] > COND_LIMIT:
        return None
    return np.linalg.solve(As, b / scale) / scale


def _coefficients(basis: ReducedBasisSet, p: int, l):
    """Reduced coefficients for direction ``p`` and the space they refer to ("full" or "translates")."""
    db = basis.directions[p]
    A, B = _reduced_system(basis, db, l)
    c = _solve_reduced(A, B[p])
    if c is not None:
        return c, "full", A, B
    basis.fallbacks += 1
    m = db.phi.shape[1]
    if m == 0:
        # every fixed field vanished (the defect leaves this direction unperturbed)
        c = np.linalg.lstsq(A, B[p], rcond=None)[0]
        return c, "translates", A, B
    # two-translate subspace: the first fixed vector is w1 normalized, the last is its translate
    t = np.zeros((m + 1, 2))
    t[0, 0] = t[m, 1] = 1.0
    A2, b2 = t.T @ A @ t, t.T @ B[p]
    c2 = _solve_reduced(A2, b2)
    if c2 is None:
        c2 = np.linalg.lstsq(A2, b2, rcond=None)[0]
    return t @ c2, "translates", A, B


def rb_two_defect_tensor(basis: ReducedBasisSet, l) -> np.ndarray:
    """Galerkin approximation of the pair tensor for defects in cells ``0`` and ``l``."""
    l = tuple(int(v) % basis.N for v in np.atleast_1d(l))
    if len(l) != basis.d or not any(l):
        raise ValueError("offset must be non-zero modulo N with d components")
    d = basis.d
    vol = basis.N**d
    integral = basis.base_integral + 2.0 * basis.delta_mean
    out = np.empty((d, d))
    for p in range(d):
        c, _, _, B = _coefficients(basis, p, l)
        out[:, p] = (integral[:, p] - B @ c) / vol
    return out


def rb_solution(basis: ReducedBasisSet, l, p: int = 0) -> np.ndarray:
    """Reduced corrector for direction ``p`` as a nodal field on the full grid."""
    l = tuple(int(v) % basis.N for v in np.atleast_1d(l))
    db = basis.directions[p]
    c, _, _, _ = _coefficients(basis, p, l)
    m = db.phi.shape[1]
    return db.phi @ c[:m] + c[m] * basis.grid.shift(db.w1, l)


def rb_marginal_table(basis: ReducedBasisSet, symmetry: bool | None = None) -> SideTables:
    """Fill every offset by the reduced model; orbit-reduced when model and snapshot set allow it."""
    N, d = basis.N, basis.d
    if symmetry is None:
        symmetry = basis.model.is_lattice_symmetric() and _is_symmetric_set(basis.snapshots, N, d)
    if symmetry:
        pairs = {}
        for rep, members in offset_orbits(N, d).items():
            t = rb_two_defect_tensor(basis, rep)
            for l, g in members:
                pairs[l] = g @ t @ g.T
    else:
        pairs = {l: rb_two_defect_tensor(basis, l) for l in all_offsets(N, d)}
    return SideTables(basis.side, N, basis.r, d, basis.per, basis.one, pairs, "rb", basis.snapshots, basis.solves,
                      basis.model.fingerprint())
