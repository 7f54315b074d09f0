"""Two-phase random coefficient model on the lattice and defect sampling.

A material is a pair of cell-periodic coefficient tables (``a_table`` for the
reference phase, ``c_table`` for the defect phase) plus the defect probability
``eta``.  Each unit cell ``Q + k`` of the box ``[0, N)^d`` independently holds
the defect phase with probability ``eta``.

Sampling is counter based: bit ``k`` of a field with key ``seed`` is a pure
function of ``(seed, k)`` through numpy's Philox generator, so any single cell
can be regenerated without drawing the others.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MASK64 = (1 << 64) - 1
# High key word that separates the per-sample seed stream from cell streams.
_SEED_STREAM = 0x5EED


@dataclass(frozen=True, eq=False)
class MaterialModel:
    """Reference/defect coefficient tables and defect probability.

    ``a_table`` and ``c_table`` have shape ``(s,) * d + (d, d)``: one constant
    symmetric matrix per subcell of a uniform ``s^d`` partition of the unit
    cell.
    """

    d: int
    a_table: np.ndarray
    c_table: np.ndarray
    eta: float
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        a = np.array(self.a_table, dtype=float)
        c = np.array(self.c_table, dtype=float)
        if a.shape != c.shape:
            raise ValueError("a_table and c_table must share the subcell partition")
        s = a.shape[0]
        if a.shape != (s,) * self.d + (self.d, self.d):
            raise ValueError(f"coefficient table has shape {a.shape}, expected {(s,) * self.d + (self.d, self.d)}")
        for name, t in (("a_table", a), ("c_table", c)):
            mats = t.reshape(-1, self.d, self.d)
            if not np.allclose(mats, mats.transpose(0, 2, 1), rtol=0, atol=1e-14 * np.abs(mats).max()):
                raise ValueError(f"{name} is not symmetric")
            eig = np.linalg.eigvalsh(mats)
            lo, hi = (0.0, np.inf) if self.bounds is None else self.bounds
            if eig.min() <= 0 or eig.min() < lo or eig.max() > hi:
                raise ValueError(f"{name} eigenvalues [{eig.min():g}, {eig.max():g}] violate ellipticity bounds")
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "a_table", a)
        object.__setattr__(self, "c_table", c)

    @property
    def subcells(self) -> int:
        return self.a_table.shape[0]

    def with_eta(self, eta: float) -> MaterialModel:
        return MaterialModel(self.d, self.a_table, self.c_table, eta, self.bounds)

    def swapped(self) -> MaterialModel:
        """Model with the roles of the two phases exchanged (``eta -> 1 - eta``)."""
        return MaterialModel(self.d, self.c_table, self.a_table, 1.0 - self.eta, self.bounds)

    def fingerprint(self) -> str:
        """Short hash of the coefficient tables; ``eta`` is not included."""
        h = hashlib.sha256()
        h.update(f"d={self.d};s={self.subcells};".encode())
        h.update(np.ascontiguousarray(self.a_table).tobytes())
        h.update(np.ascontiguousarray(self.c_table).tobytes())
        return h.hexdigest()[:16]

    def is_lattice_symmetric(self) -> bool:
        """True when both tables are invariant under the point group of the square lattice.

        The group acts about the centre of the unit cell: reflections
        ``x_i -> 1 - x_i`` and (in 2D) the swap ``x_1 <-> x_2``.
        """
        for t in (self.a_table, self.c_table):
            if self.d == 1:
                if not np.allclose(t, t[::-1]):
                    return False
                continue
            refl = np.diag([-1.0, 1.0])
            flipped = np.einsum("ab,ijbc,dc->ijad", refl, t[::-1, :, :, :], refl)
            swap = np.array([[0.0, 1.0], [1.0, 0.0]])
            transposed = np.einsum("ab,jibc,dc->ijad", swap, t, swap)
            if not (np.allclose(t, flipped) and np.allclose(t, transposed)):
                return False
        return True

    def cell_coefficient(self, defect: bool, y) -> np.ndarray:
        """Coefficient matrix at local coordinate ``y`` in ``[0, 1)^d``."""
        table = self.c_table if defect else self.a_table
        s = self.subcells
        idx = tuple(np.minimum((np.asarray(y, dtype=float) * s).astype(int), s - 1))
        return table[idx]


def make_checkerboard_model(alpha: float, beta: float, eta: float, d: int = 2) -> MaterialModel:
    """Random checkerboard: ``alpha * Id`` in regular cells, ``beta * Id`` in defects."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("phase values must be positive")
    eye = np.eye(d)
    shape = (1,) * d + (d, d)
    return MaterialModel(d, (alpha * eye).reshape(shape), (beta * eye).reshape(shape), eta)


def make_laminate_model(alpha: float, beta: float, eta: float = 0.0) -> MaterialModel:
    """2D unit cell split into two stripes normal to ``e_1`` (``alpha`` then ``beta``).

    Both phases of the random model share the same laminated cell, so the
    result is deterministic; it exists to validate the cell solver.
    """
    t = np.zeros((2, 2, 2, 2))
    t[0, :] = alpha * np.eye(2)
    t[1, :] = beta * np.eye(2)
    return MaterialModel(2, t, t.copy(), eta)


@dataclass(frozen=True, eq=False)
class DefectField:
    """Bernoulli lattice ``{B_k}`` on ``[0, N)^d``; ``bits[k]`` is 1 for a defect cell."""

    N: int
    d: int
    eta: float
    seed: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        if b.shape != (self.N,) * self.d:
            raise ValueError(f"bits shape {b.shape} does not match N={self.N}, d={self.d}")
        if b.max(initial=0) > 1:
            raise ValueError("bits must be 0 or 1")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def from_bits(cls, bits, eta: float = float("nan"), seed: int = 0) -> DefectField:
        b = np.asarray(bits, dtype=np.uint8)
        return cls(b.shape[0], b.ndim, eta, seed, b)


def _philox_words(key: int, start: int, count: int) -> np.ndarray:
    """Raw 64-bit Philox outputs at stream positions ``start .. start+count-1``."""
    block, offset = divmod(start, 4)
    gen = np.random.Philox(key=key, counter=block)
    return gen.random_raw(offset + count)[offset:]


def _bernoulli(words: np.ndarray, eta: float) -> np.ndarray:
    u = (words >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return (u < eta).astype(np.uint8)


def sample_defect_field(model: MaterialModel, N: int, seed: int) -> DefectField:
    """Draw ``B_k ~ Bernoulli(eta)`` for every cell; cell ``k`` uses counter ``k`` (row-major)."""
    if N < 1:
        raise ValueError("N must be positive")
    seed = int(seed) & _MASK64
    n_cells = N**model.d
    bits = _bernoulli(_philox_words(seed, 0, n_cells), model.eta)
    return DefectField(N, model.d, model.eta, seed, bits.reshape((N,) * model.d))


def defect_bit(eta: float, N: int, d: int, seed: int, k) -> int:
    """Regenerate the single bit of cell ``k`` of ``sample_defect_field(..., seed)``."""
    counter = int(np.ravel_multi_index(tuple(np.atleast_1d(k)), (N,) * d))
    return int(_bernoulli(_philox_words(int(seed) & _MASK64, counter, 1), eta)[0])


def sample_seeds(master_seed: int, count: int, start: int = 0) -> np.ndarray:
    """Per-sample 64-bit field keys derived from a master seed (counter based as well)."""
    key = (_SEED_STREAM << 64) | (int(master_seed) & _MASK64)
    return _philox_words(key, start, count)


def count_defects(field: DefectField) -> int:
    return int(field.bits.sum(dtype=np.int64))


def coefficient_at(model: MaterialModel, field: DefectField, x) -> np.ndarray:
    """Coefficient matrix at a point ``x`` of ``[0, N)^d``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.d,):
        raise ValueError(f"point must have {model.d} coordinates")
    if np.any(x < 0) or np.any(x >= field.N):
        raise ValueError(f"point {x} lies outside [0, {field.N})^{model.d}")
    k = np.floor(x).astype(int)
    return model.cell_coefficient(bool(field.bits[tuple(k)]), x - k)


def element_coefficients(model: MaterialModel, bits: np.ndarray, r: int) -> np.ndarray:
    """Per-element coefficients on the ``(N r)^d`` grid, shape ``(N r,) * d + (d, d)``.

    ``r`` must be a multiple of the subcell count so that every element lies
    inside a single subcell.
    """
    s = model.subcells
    if r % s:
        raise ValueError(f"resolution r={r} must be a multiple of the subcell count {s}")
    bits = np.asarray(bits)
    d = model.d
    N = bits.shape[0]
    sub = np.arange(r) // (r // s)
    # per-cell element tables, shape (r,)*d + (d, d)
    if d == 1:
        a_loc, c_loc = model.a_table[sub], model.c_table[sub]
    else:
        a_loc = model.a_table[np.ix_(sub, sub)]
        c_loc = model.c_table[np.ix_(sub, sub)]
    expanded = bits
    for ax in range(d):
        expanded = np.repeat(expanded, r, axis=ax)
    a_tiled = np.tile(a_loc, (N,) * d + (1, 1))
    c_tiled = np.tile(c_loc, (N,) * d + (1, 1))
    mask = expanded.astype(bool)[(...,) + (None, None)]
    return np.where(mask, c_tiled, a_tiled)


# -- text format --------------------------------------------------------------


def format_defect_field(field: DefectField) -> str:
    header = f"N={field.N} d={field.d} eta={field.eta!r} seed={field.seed:#018x}"
    rows = np.atleast_2d(field.bits)
    body = "\n".join("".join("1" if b else "0" for b in row) for row in rows)
    return header + "\n" + body + "\n"


def parse_defect_field(text: str) -> DefectField:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    meta = dict(item.split("=", 1) for item in lines[0].split())
    N, d = int(meta["N"]), int(meta["d"])
    rows = np.array([[int(ch) for ch in ln] for ln in lines[1:]], dtype=np.uint8)
    bits = rows.reshape((N,) * d)
    return DefectField(N, d, float(meta["eta"]), int(meta["seed"], 16), bits)


def write_defect_field(field: DefectField, path) -> None:
    Path(path).write_text(format_defect_field(field))


def read_defect_field(path) -> DefectField:
    return parse_defect_field(Path(path).read_text())
