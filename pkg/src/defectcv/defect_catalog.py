"""Deterministic one- and two-defect tensors, their marginals, and the weak expansion.

A *side* fixes the reference periodic material: side ``"A"`` inserts defect
cells (``C_per``) into ``A_per``; side ``"C"`` inserts ``A_per`` cells into
``C_per``.  Periodic boundary conditions make the one-defect tensor
independent of the defect position and the pair tensor a function of the
offset ``l - k`` only, so a side is fully described by its periodic tensor,
one one-defect tensor and a table over offsets ``l != 0``.
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from defectcv.cell_solver import DEFAULT_RESOLUTION, DiscreteGrid, homogenize, periodic_tensor
from defectcv.tensor_field import MaterialModel, element_coefficients

log = logging.getLogger(__name__)

SIDES = ("A", "C")
CATALOG_VERSION = 1


def _check_side(side: str) -> str:
    side = side.upper()
    if side not in SIDES:
        raise ValueError(f"reference side must be 'A' or 'C', got {side!r}")
    return side


def all_offsets(N: int, d: int) -> list[tuple[int, ...]]:
    """Lattice offsets ``l in I_N \\ {0}`` in row-major order."""
    return [l for l in itertools.product(range(N), repeat=d) if any(l)]


def point_group(d: int) -> list[np.ndarray]:
    """Signed permutation matrices of the square (or 1D) lattice, acting about a cell centre."""
    mats = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            g = np.zeros((d, d), dtype=int)
            for i, (j, s) in enumerate(zip(perm, signs)):
                g[i, j] = s
            mats.append(g)
    return mats


def offset_orbits(N: int, d: int) -> dict[tuple[int, ...], list[tuple[tuple[int, ...], np.ndarray]]]:
    """Map orbit representative -> [(offset, g)] with ``offset = g @ rep (mod N)``."""
    group = point_group(d)
    orbits: dict = {}
    for l in all_offsets(N, d):
        images = [tuple(int(v) for v in (g @ np.array(l)) % N) for g in group]
        rep = min(images)
        # g maps rep -> l: take the inverse (transpose) of an element mapping l -> rep
        g_to_rep = group[images.index(rep)]
        orbits.setdefault(rep, []).append((l, g_to_rep.T))
    return orbits


def config_bits(N: int, d: int, cells, side: str) -> np.ndarray:
    """Bit lattice with the given defect cells relative to the reference ``side``."""
    bits = np.zeros((N,) * d, dtype=np.uint8)
    for k in cells:
        bits[tuple(np.atleast_1d(k) % N)] = 1
    return bits if _check_side(side) == "A" else 1 - bits


def solve_configuration(model: MaterialModel, N: int, r: int, cells, side: str = "A", tol=None,
                        return_correctors: bool = False):
    grid = DiscreteGrid(N, r, model.d)
    coef = element_coefficients(model, config_bits(N, model.d, cells, side), r)
    return homogenize(coef, grid, tol=tol, return_correctors=return_correctors)


def one_defect_tensor(model: MaterialModel, N: int, r: int = DEFAULT_RESOLUTION, reference: str = "A",
                      tol=None, k=None) -> np.ndarray:
    """Apparent tensor of the reference material with a single defect in cell ``k`` (default 0)."""
    k = (0,) * model.d if k is None else k
    return solve_configuration(model, N, r, [k], reference, tol)


def two_defect_tensor(model: MaterialModel, N: int, r: int = DEFAULT_RESOLUTION, l=None, reference: str = "A",
                      tol=None, k=None) -> np.ndarray:
    """Apparent tensor with defects in cells ``k`` (default 0) and ``k + l``."""
    l = np.atleast_1d(np.asarray(l, dtype=int))
    if l.shape != (model.d,):
        raise ValueError(f"offset must have {model.d} components")
    if not np.any(l % N):
        raise ValueError("coincident defects: offset l must be non-zero modulo N")
    k = np.zeros(model.d, dtype=int) if k is None else np.atleast_1d(np.asarray(k, dtype=int))
    return solve_configuration(model, N, r, [k, k + l], reference, tol)


@dataclass
class SideTables:
    """Catalog for one reference side.

    ``pairs`` maps every offset ``l != 0`` (components in ``[0, N)``) to the
    two-defect tensor ``A*_{2,0,l,N}``.  ``solves`` counts the full corrector
    problems behind the tables, the periodic cell problem included.
    """

    side: str
    N: int
    r: int
    d: int
    per: np.ndarray
    one: np.ndarray
    pairs: dict = field(repr=False)
    method: str = "exact"
    snapshots: tuple = ()
    solves: int = 0
    model_hash: str = ""

    @property
    def n_cells(self) -> int:
        return self.N**self.d

    @property
    def offline_cost(self) -> int:
        """Solves on ``Q_N`` (the unit-cell periodic solve is not counted)."""
        return self.solves - 1

    @property
    def one_marginal(self) -> np.ndarray:
        return self.one - self.per

    def pair_marginal(self, l) -> np.ndarray:
        key = tuple(int(v) % self.N for v in np.atleast_1d(l))
        if key not in self.pairs:
            raise KeyError(f"offset {key} missing from catalog")
        return self.pairs[key] - 2.0 * self.one + self.per

    def marginal_table(self) -> np.ndarray:
        """Dense table ``T[l] = pair marginal`` over ``l in [0, N)^d``; ``T[0] = 0``."""
        table = np.zeros((self.N,) * self.d + (self.d, self.d))
        missing = [l for l in all_offsets(self.N, self.d) if l not in self.pairs]
        if missing:
            raise KeyError(f"catalog lacks {len(missing)} offsets, e.g. {missing[0]}")
        for l, t in self.pairs.items():
            table[l] = t - 2.0 * self.one + self.per
        return table

    @property
    def bar1(self) -> np.ndarray:
        """First-order coefficient: sum over cells of the one-defect marginal."""
        return self.n_cells * self.one_marginal

    @property
    def bar2(self) -> np.ndarray:
        """Second-order coefficient: half the double sum of pair marginals over ``k != l``."""
        table = self.marginal_table()
        return 0.5 * self.n_cells * table.reshape(-1, self.d, self.d).sum(axis=0)


@dataclass
class DefectCatalog:
    N: int
    r: int
    d: int
    a: SideTables
    c: SideTables | None = None

    def side(self, name: str) -> SideTables:
        tables = self.a if _check_side(name) == "A" else self.c
        if tables is None:
            raise KeyError(f"catalog has no {name}-side tables")
        return tables

    @property
    def offline_cost(self) -> int:
        return sum(s.offline_cost for s in (self.a, self.c) if s is not None)


def _conjugate_fill(reps: dict, orbits, d: int) -> dict:
    table = {}
    for rep, members in orbits.items():
        t = reps[rep]
        for l, g in members:
            table[l] = g @ t @ g.T
    return table


def _solve_pair(args):
    model, N, r, l, side, tol = args
    return solve_configuration(model, N, r, [(0,) * model.d, l], side, tol)


def build_side(model: MaterialModel, N: int, r: int = DEFAULT_RESOLUTION, side: str = "A",
               symmetry: bool | None = None, tol=None, workers: int = 1, pairs: bool = True) -> SideTables:
    """Exact catalog of one side.  ``symmetry=None`` uses orbits when the model allows it."""
    side = _check_side(side)
    symmetry = model.is_lattice_symmetric() if symmetry is None else symmetry
    per = periodic_tensor(model, r, tol=tol, defect=(side == "C"))
    one = one_defect_tensor(model, N, r, side, tol)
    solves = 2
    table = {}
    if pairs and N**model.d > 1:
        if symmetry:
            orbits = offset_orbits(N, model.d)
            todo = list(orbits)
        else:
            todo = all_offsets(N, model.d)
        jobs = [(model, N, r, l, side, tol) for l in todo]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_solve_pair, jobs))
        else:
            results = [_solve_pair(j) for j in jobs]
        solved = dict(zip(todo, results))
        solves += len(todo)
        table = _conjugate_fill(solved, orbits, model.d) if symmetry else solved
        log.debug("side %s N=%d: %d pair solves for %d offsets", side, N, len(todo), len(table))
    return SideTables(side, N, r, model.d, per, one, table, "exact", (), solves, model.fingerprint())


def build_catalog(model: MaterialModel, N: int, r: int = DEFAULT_RESOLUTION, sides=SIDES, symmetry=None,
                  tol=None, workers: int = 1, cache_dir=None) -> DefectCatalog:
    """Exact catalog for the requested sides, reusing cached side files when present."""
    tables = {}
    for side in sides:
        side = _check_side(side)
        path = None if cache_dir is None else catalog_path(cache_dir, model, N, r, side)
        if path is not None and path.exists():
            tables[side] = read_side(path)
            continue
        tables[side] = build_side(model, N, r, side, symmetry, tol, workers)
        if path is not None:
            write_side(tables[side], path)
    return DefectCatalog(N, r, model.d, tables.get("A"), tables.get("C"))


def marginals(catalog: DefectCatalog):
    """``(A one-defect marginal, A pair table, C one-defect marginal, C pair table)``; C entries may be None."""
    a = catalog.a
    out = [a.one_marginal, a.marginal_table()]
    if catalog.c is not None:
        out += [catalog.c.one_marginal, catalog.c.marginal_table()]
    else:
        out += [None, None]
    return tuple(out)


def weakly_stochastic_expectation(catalog: DefectCatalog, eta: float, order: int = 2, around: str = "A") -> np.ndarray:
    """Truncated expansion of ``E[A*_{eta,N}]`` in powers of ``eta`` (or ``1 - eta`` around the C side)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    side = catalog.side(around)
    t = eta if side.side == "A" else 1.0 - eta
    value = side.per + t * side.bar1
    if order == 2:
        value = value + t * t * side.bar2
    return value


# -- invariance checks ---------------------------------------------------------


def translation_defect(model: MaterialModel, N: int, r: int, k, side: str = "A", tol=None) -> float:
    """Max entry difference between the one-defect tensors at cell ``k`` and cell 0."""
    a0 = one_defect_tensor(model, N, r, side, tol)
    ak = one_defect_tensor(model, N, r, side, tol, k=k)
    return float(np.abs(ak - a0).max())


def pair_reduction_defect(model: MaterialModel, N: int, r: int, k, l, side: str = "A", tol=None) -> float:
    """Max entry difference between the pair tensor at ``(k, k + l)`` and at ``(0, l)``."""
    ref = two_defect_tensor(model, N, r, l, side, tol)
    moved = two_defect_tensor(model, N, r, l, side, tol, k=k)
    return float(np.abs(moved - ref).max())


# -- file format ----------------------------------------------------------------


def catalog_path(cache_dir, model: MaterialModel, N: int, r: int, side: str, method: str = "exact") -> Path:
    return Path(cache_dir) / f"catalog_v{CATALOG_VERSION}_{model.fingerprint()}_N{N}_r{r}_{side}_{method}.txt"


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def format_snapshots(snaps) -> str:
    return ";".join(",".join(str(int(v)) for v in l) for l in snaps) or "-"


def parse_snapshots(text: str) -> tuple:
    if text in ("", "-"):
        return ()
    return tuple(tuple(int(v) for v in item.split(",")) for item in text.split(";"))


def format_side(t: SideTables) -> str:
    head = (f"# defectcv catalog v{CATALOG_VERSION}\n"
            f"model={t.model_hash} N={t.N} r={t.r} d={t.d} reference={t.side} method={t.method} "
            f"solves={t.solves} snapshots={format_snapshots(t.snapshots)}\n")
    lines = [f"per {_fmt(t.per)}", f"one {_fmt(t.one)}"]
    for l in sorted(t.pairs):
        lines.append(" ".join(str(v) for v in l) + " " + _fmt(t.pairs[l]))
    return head + "\n".join(lines) + "\n"


def parse_side(text: str) -> SideTables:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    meta = dict(item.split("=", 1) for item in lines[0].split())
    N, r, d = int(meta["N"]), int(meta["r"]), int(meta["d"])
    per = one = None
    pairs = {}
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "per":
            per = np.array([float(v) for v in parts[1:]]).reshape(d, d)
        elif parts[0] == "one":
            one = np.array([float(v) for v in parts[1:]]).reshape(d, d)
        else:
            l = tuple(int(v) for v in parts[:d])
            pairs[l] = np.array([float(v) for v in parts[d:]]).reshape(d, d)
    return SideTables(meta["reference"], N, r, d, per, one, pairs, meta["method"],
                      parse_snapshots(meta["snapshots"]), int(meta["solves"]), meta["model"])


def write_side(t: SideTables, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_side(t))


def read_side(path) -> SideTables:
    return parse_side(Path(path).read_text())
