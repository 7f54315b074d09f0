"""Defect-based surrogates, controlled variables and Monte Carlo estimators.

Estimator kinds:

``MC``
    plain empirical mean of ``A*_{eta,N}``.
``CV1``
    controlled by the one-defect surrogate ``A1 = (#defects) * Abar_1def``.
``CV2``
    additionally controlled by the pair surrogate ``A2`` built around ``A_per``.
``CV3``
    additionally controlled by the pair surrogate ``C2`` built around ``C_per``.
``CV3ID``
    ``CV3`` with every pair marginal replaced by the identity (negative control).
``WEAK``
    deterministic weak expansion, no sampling.

Control coefficients are fitted per matrix entry by minimizing the empirical
variance of the controlled samples, with surrogate means taken exactly from
the catalog.
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from defectcv.cell_solver import DEFAULT_RESOLUTION, SolveStats, field_tensor
from defectcv.defect_catalog import DefectCatalog, weakly_stochastic_expectation
from defectcv.tensor_field import DefectField, MaterialModel, sample_defect_field, sample_seeds

KINDS = ("MC", "CV1", "CV2", "CV3", "CV3ID", "WEAK")
N_CONTROLS = {"MC": 0, "CV1": 1, "CV2": 2, "CV3": 3, "CV3ID": 3}
Z95 = 1.96
COND_LIMIT = 1e12


class DegenerateControlError(ValueError):
    """The control variable has zero empirical variance (e.g. ``eta`` in {0, 1})."""


class CollinearControlWarning(RuntimeWarning):
    pass


# -- surrogates --------------------------------------------------------------------


def _bits(field_or_bits) -> np.ndarray:
    return field_or_bits.bits if isinstance(field_or_bits, DefectField) else np.asarray(field_or_bits)


def pair_counts(bits, block: int = 512) -> np.ndarray:
    """Ordered-pair counts ``c[delta] = #{k : B_k = B_{k+delta} = 1}`` for ``delta != 0``.

    Computed from the differences of the ``P`` active cells (``O(P^2)``),
    in row blocks to bound memory.  ``c[0]`` is set to zero.
    """
    bits = np.asarray(bits)
    shape = bits.shape
    N = shape[0]
    pos = np.argwhere(bits)
    counts = np.zeros(bits.size, dtype=np.int64)
    for start in range(0, len(pos), block):
        diff = (pos[None, :, :] - pos[start:start + block, None, :]) % N
        flat = np.ravel_multi_index(tuple(diff.reshape(-1, bits.ndim).T), shape)
        counts += np.bincount(flat, minlength=bits.size)
    counts[0] = 0
    return counts.reshape(shape)


def zero_pair_counts(bits, counts=None) -> np.ndarray:
    """Ordered-pair counts of defect-free cells, from the complement identity."""
    bits = np.asarray(bits)
    counts = pair_counts(bits) if counts is None else counts
    n, P = bits.size, int(bits.sum())
    out = n - 2 * P + counts
    out.flat[0] = 0
    return out


def surrogate_first(field_or_bits, catalog: DefectCatalog) -> np.ndarray:
    """``A1 = (sum_k B_k) * Abar_1def`` (one-defect marginal is position independent)."""
    return int(_bits(field_or_bits).sum()) * catalog.a.one_marginal


def surrogate_second(field_or_bits, catalog: DefectCatalog, side: str = "A", counts=None) -> np.ndarray:
    """Pair surrogate ``1/2 sum_{k != l} w_k w_l Mbar^{l-k}`` with ``w = B`` (A side) or ``1 - B`` (C side)."""
    bits = _bits(field_or_bits)
    tables = catalog.side(side)
    table = tables.marginal_table()
    counts = pair_counts(bits) if counts is None else counts
    if tables.side == "C":
        counts = zero_pair_counts(bits, counts)
    d = table.shape[-1]
    return 0.5 * np.tensordot(counts.astype(float).ravel(), table.reshape(-1, d, d), axes=1)


def degraded_second_order(field_or_bits, eta: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pair surrogates with every marginal set to the identity: ``(1/2 P(P-1) Id, 1/2 Z(Z-1) Id)``.

    ``P`` and ``Z`` are the numbers of defect and defect-free cells.  ``eta``
    is accepted for symmetry with the exact expectations but not needed.
    """
    bits = _bits(field_or_bits)
    d = bits.ndim
    n, P = bits.size, int(bits.sum())
    Z = n - P
    return 0.5 * P * (P - 1) * np.eye(d), 0.5 * Z * (Z - 1) * np.eye(d)


def surrogate_expectations(catalog: DefectCatalog, eta: float) -> dict:
    """Exact means of the surrogates, keyed ``y1``, ``y2``, ``c2`` (``c2`` only with a C side)."""
    a = catalog.a
    out = {"y1": eta * a.bar1}
    if a.pairs:
        out["y2"] = eta**2 * a.bar2
    if catalog.c is not None and catalog.c.pairs:
        out["c2"] = (1.0 - eta) ** 2 * catalog.c.bar2
    return out


def degraded_expectations(n_cells: int, d: int, eta: float) -> tuple[np.ndarray, np.ndarray]:
    pairs = 0.5 * n_cells * (n_cells - 1)
    return pairs * eta**2 * np.eye(d), pairs * (1.0 - eta) ** 2 * np.eye(d)


# -- samples -----------------------------------------------------------------------


@dataclass
class SampleRecord:
    seed: int
    defect_count: int
    astar: np.ndarray
    y1: np.ndarray | None = None
    y2: np.ndarray | None = None
    c2: np.ndarray | None = None
    iterations: int = 0
    bits: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SampleBatch:
    """``M`` realizations of ``A*_{eta,N}`` with their fields and (optionally) surrogates."""

    eta: float
    N: int
    r: int
    d: int
    seeds: np.ndarray
    bits: np.ndarray = field(repr=False)  # (M, N^d) uint8
    astar: np.ndarray = field(repr=False)  # (M, d, d)
    iterations: np.ndarray = field(repr=False)
    model_hash: str = ""
    y1: np.ndarray | None = field(default=None, repr=False)
    y2: np.ndarray | None = field(default=None, repr=False)
    c2: np.ndarray | None = field(default=None, repr=False)
    y2_id: np.ndarray | None = field(default=None, repr=False)
    c2_id: np.ndarray | None = field(default=None, repr=False)
    expectations: dict = field(default_factory=dict, repr=False)
    offline: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.seeds)

    @property
    def counts(self) -> np.ndarray:
        return self.bits.sum(axis=1, dtype=np.int64)

    def field_bits(self, m: int) -> np.ndarray:
        return self.bits[m].reshape((self.N,) * self.d)

    def record(self, m: int) -> SampleRecord:
        pick = lambda a: None if a is None else a[m]  # noqa: E731
        return SampleRecord(int(self.seeds[m]), int(self.counts[m]), self.astar[m], pick(self.y1), pick(self.y2),
                            pick(self.c2), int(self.iterations[m]), self.field_bits(m))

    def subset(self, idx) -> SampleBatch:
        idx = np.asarray(idx)
        cut = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(self, seeds=self.seeds[idx], bits=self.bits[idx], astar=self.astar[idx],
                       iterations=self.iterations[idx], y1=cut(self.y1), y2=cut(self.y2), c2=cut(self.c2),
                       y2_id=cut(self.y2_id), c2_id=cut(self.c2_id))

    def with_surrogates(self, catalog: DefectCatalog) -> SampleBatch:
        """Evaluate all surrogates against ``catalog`` (a new batch; samples unchanged)."""
        if catalog.N != self.N or catalog.d != self.d:
            raise ValueError("catalog and samples must share N and d")
        has_a2 = bool(catalog.a.pairs)
        has_c2 = catalog.c is not None and bool(catalog.c.pairs)
        y1, y2, c2, y2i, c2i = [], [], [], [], []
        for m in range(self.M):
            b = self.field_bits(m)
            y1.append(surrogate_first(b, catalog))
            counts = pair_counts(b) if (has_a2 or has_c2) else None
            if has_a2:
                y2.append(surrogate_second(b, catalog, "A", counts))
            if has_c2:
                c2.append(surrogate_second(b, catalog, "C", counts))
            ya, yc = degraded_second_order(b)
            y2i.append(ya)
            c2i.append(yc)
        ex = surrogate_expectations(catalog, self.eta)
        ex["y2_id"], ex["c2_id"] = degraded_expectations(self.N**self.d, self.d, self.eta)
        offline = {"one": 1, "A": catalog.a.offline_cost, "C": catalog.c.offline_cost if catalog.c else 0}
        stack = lambda v: np.array(v) if v else None  # noqa: E731
        return replace(self, y1=np.array(y1), y2=stack(y2), c2=stack(c2), y2_id=np.array(y2i),
                       c2_id=np.array(c2i), expectations=ex, offline=offline)


def _solve_samples(args):
    model, N, r, tol, seeds = args
    out = []
    for s in seeds:
        f = sample_defect_field(model, N, int(s))
        stats = SolveStats()
        A = field_tensor(model, f.bits, r, tol=tol, stats=stats)
        out.append((f.bits.ravel(), A, stats.iterations))
    return out


def generate_batch(model: MaterialModel, N: int, M: int, seed: int, r: int = DEFAULT_RESOLUTION, tol=None,
                   catalog: DefectCatalog | None = None, workers: int = 1, start: int = 0) -> SampleBatch:
    """Solve ``M`` independent realizations; sample ``m`` uses the ``start + m``-th derived seed.

    Results are folded in sample order, so the batch is identical for any
    worker count.
    """
    if M < 1:
        raise ValueError("M must be positive")
    seeds = sample_seeds(seed, M, start)
    if workers > 1:
        chunks = np.array_split(seeds, workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_solve_samples, [(model, N, r, tol, c) for c in chunks if len(c)]))
        results = [x for part in parts for x in part]
    else:
        results = _solve_samples((model, N, r, tol, seeds))
    bits = np.array([b for b, _, _ in results], dtype=np.uint8)
    astar = np.array([A for _, A, _ in results])
    its = np.array([i for _, _, i in results])
    batch = SampleBatch(model.eta, N, r, model.d, seeds, bits, astar, its, model.fingerprint())
    return batch.with_surrogates(catalog) if catalog is not None else batch


# -- controlled variables -------------------------------------------------------------


def _control_names(kind: str) -> tuple[str, ...]:
    return {"MC": (), "CV1": ("y1",), "CV2": ("y1", "y2"), "CV3": ("y1", "y2", "c2"),
            "CV3ID": ("y1", "y2_id", "c2_id")}[kind]


def _check_kind(kind: str) -> str:
    kind = kind.upper()
    if kind not in KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
    return kind


def centered_controls(batch: SampleBatch, kind: str) -> np.ndarray:
    """Surrogates minus their exact means, shape ``(M, n_controls, d, d)``."""
    names = _control_names(_check_kind(kind))
    cols = []
    for name in names:
        values = getattr(batch, name)
        if values is None:
            raise ValueError(f"batch lacks surrogate {name!r}; call with_surrogates with a complete catalog")
        cols.append(values - batch.expectations[name])
    if not cols:
        return np.zeros((batch.M, 0, batch.d, batch.d))
    return np.stack(cols, axis=1)


def _rho_array(rho, k: int, d: int) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 0:
        rho = np.full(k, float(rho))
    if rho.shape[0] != k:
        raise ValueError(f"expected {k} control coefficients, got {rho.shape[0]}")
    return np.broadcast_to(rho.reshape((k,) + (1,) * (3 - rho.ndim) if rho.ndim < 3 else rho.shape), (k, d, d))


def controlled_values(batch: SampleBatch, kind: str, rho) -> np.ndarray:
    """``D^m = A*^m - sum_i rho_i (Y_i^m - E[Y_i])`` for every sample, shape ``(M, d, d)``.

    ``rho`` holds one coefficient per control, each a scalar or a ``(d, d)``
    array of per-entry values.
    """
    kind = _check_kind(kind)
    Y = centered_controls(batch, kind)
    if Y.shape[1] == 0:
        return batch.astar.copy()
    r = _rho_array(rho, Y.shape[1], batch.d)
    return batch.astar - np.einsum("mkij,kij->mij", Y, r)


def controlled_value(sample: SampleRecord, kind: str, rho, catalog: DefectCatalog, eta: float) -> np.ndarray:
    """Controlled variable for one sample, with surrogate means from ``catalog``."""
    kind = _check_kind(kind)
    names = _control_names(kind)
    if not names:
        return np.array(sample.astar, dtype=float)
    ex = surrogate_expectations(catalog, eta)
    d = catalog.d
    if kind == "CV3ID":
        ya, yc = degraded_second_order(sample.bits)
        ea, ec = degraded_expectations(catalog.N**d, d, eta)
        values = {"y1": sample.y1, "y2_id": ya, "c2_id": yc}
        ex.update(y2_id=ea, c2_id=ec)
    else:
        values = {"y1": sample.y1, "y2": sample.y2, "c2": sample.c2}
    r = _rho_array(rho, len(names), d)
    out = np.array(sample.astar, dtype=float)
    for i, name in enumerate(names):
        out = out - r[i] * (values[name] - ex[name])
    return out


# -- control coefficients ----------------------------------------------------------


def fit_rho(x: np.ndarray, y_centered: np.ndarray, cond_limit: float = COND_LIMIT,
            centering: str = "exact") -> np.ndarray:
    """Minimize ``sum_m (x_m - mean(x) - rho . y_m)^2`` over ``rho``.

    ``y_centered`` is ``(M, k)`` and already centred with exact means.  With
    ``centering="empirical"`` the controls are re-centred on their sample
    means, which turns the fit into ordinary least squares with intercept.
    A control with zero empirical second moment gets ``rho = 0``; if the
    normalized Gram matrix is worse conditioned than ``cond_limit`` the
    control loading most on the smallest eigenvector is dropped and the
    smaller system re-solved.  Raises :class:`DegenerateControlError` when
    no usable control remains.
    """
    if centering not in ("exact", "empirical"):
        raise ValueError("centering must be 'exact' or 'empirical'")
    x = np.asarray(x, dtype=float)
    Y = np.asarray(y_centered, dtype=float)
    if centering == "empirical":
        Y = Y - Y.mean(axis=0)
    k = Y.shape[1]
    rho = np.zeros(k)
    xc = x - x.mean()
    active = [i for i in range(k) if np.dot(Y[:, i], Y[:, i]) > 0.0]
    if not active:
        raise DegenerateControlError("every control variable has zero empirical variance")
    if len(active) < k:
        warnings.warn(f"dropping {k - len(active)} control(s) with zero variance", CollinearControlWarning,
                      stacklevel=2)
    while active:
        Ya = Y[:, active]
        G = Ya.T @ Ya
        b = Ya.T @ xc
        scale = np.sqrt(np.diag(G))
        R = G / np.outer(scale, scale)
        evals, evecs = np.linalg.eigh(R)
        cond = np.inf if evals[0] <= 0 else evals[-1] / evals[0]
        if cond <= cond_limit:
            rho[active] = np.linalg.solve(R, b / scale) / scale
            return rho
        drop = active[int(np.argmax(np.abs(evecs[:, 0])))]
        warnings.warn(f"control Gram matrix condition {cond:.2e} exceeds {cond_limit:.0e}; dropping control {drop}",
                      CollinearControlWarning, stacklevel=2)
        active.remove(drop)
    return rho


def optimal_rho(batch: SampleBatch, kind: str, entry=(0, 0), centering: str = "exact") -> np.ndarray:
    kind = _check_kind(kind)
    i, j = entry
    Y = centered_controls(batch, kind)[:, :, i, j]
    if Y.shape[1] == 0:
        return np.zeros(0)
    return fit_rho(batch.astar[:, i, j], Y, centering=centering)


def optimal_rho_single(batch: SampleBatch, entry=(0, 0), centering: str = "exact") -> float:
    """Empirical optimal coefficient for the first-order control."""
    if batch.M < 2:
        raise ValueError("need at least two samples")
    return float(optimal_rho(batch, "CV1", entry, centering)[0])


def optimal_rho_triple(batch: SampleBatch, entry=(0, 0), centering: str = "exact") -> np.ndarray:
    """Empirical solution of the 3x3 normal equations for ``(rho_1, rho_2, rho_3)``."""
    if batch.M < 4:
        raise ValueError("need at least four samples")
    return optimal_rho(batch, "CV3", entry, centering)


# -- estimators -----------------------------------------------------------------------


@dataclass
class EstimatorReport:
    kind: str
    entry: tuple
    M: int
    mean: float
    variance: float
    half_width: float
    rho: tuple = ()
    cost_online: int = 0
    cost_offline: int = 0
    degenerate: bool = False

    @property
    def cost(self) -> int:
        return self.cost_online + self.cost_offline

    def to_text(self) -> str:
        rows = [("kind", self.kind), ("entry", f"{self.entry[0] + 1}{self.entry[1] + 1}"), ("M", self.M),
                ("mean", repr(self.mean)), ("variance", repr(self.variance)), ("half_width", repr(self.half_width)),
                ("rho", ",".join(repr(float(v)) for v in self.rho) or "-"), ("cost_online", self.cost_online),
                ("cost_offline", self.cost_offline), ("cost", self.cost), ("degenerate", int(self.degenerate))]
        return "".join(f"{k} = {v}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text: str) -> EstimatorReport:
        kv = dict(line.split(" = ", 1) for line in text.strip().splitlines() if " = " in line)
        e = kv["entry"]
        rho = () if kv["rho"] == "-" else tuple(float(v) for v in kv["rho"].split(","))
        return cls(kv["kind"], (int(e[0]) - 1, int(e[1]) - 1), int(kv["M"]), float(kv["mean"]),
                   float(kv["variance"]), float(kv["half_width"]), rho, int(kv["cost_online"]),
                   int(kv["cost_offline"]), bool(int(kv["degenerate"])))


def half_width(variance: float, M: int) -> float:
    return Z95 * math.sqrt(max(variance, 0.0) / M) if M > 0 else 0.0


def _offline_cost(batch: SampleBatch, kind: str) -> int:
    off = batch.offline
    if kind == "MC":
        return 0
    if kind in ("CV1", "CV3ID"):
        return off.get("one", 1)
    if kind == "CV2":
        return off.get("A", 0)
    return off.get("A", 0) + off.get("C", 0)


def estimate(batch: SampleBatch, kind: str, entry=(0, 0), rho="optimal", centering: str = "exact") -> EstimatorReport:
    """Mean, unbiased variance and 95% half-width of the chosen estimator for one entry.

    ``rho`` is ``"optimal"`` (fitted on the same samples), ``"split"`` (fitted
    on the first half, estimate on the second half) or explicit coefficients.
    A degenerate control falls back to plain Monte Carlo.  ``centering`` is
    passed to :func:`fit_rho`.
    """
    kind = _check_kind(kind)
    if kind == "WEAK":
        raise ValueError("use estimate_weak for the deterministic expansion")
    if batch.M < 2:
        raise ValueError("need at least two samples")
    i, j = entry
    x = batch.astar[:, i, j]
    Y = centered_controls(batch, kind)[:, :, i, j]
    k = Y.shape[1]
    degenerate = False
    eval_idx = np.arange(batch.M)
    if k == 0:
        coeffs = np.zeros(0)
    elif isinstance(rho, str):
        fit_idx = eval_idx
        if rho == "split":
            half = batch.M // 2
            fit_idx, eval_idx = np.arange(half), np.arange(half, batch.M)
        elif rho != "optimal":
            raise ValueError(f"unknown rho policy {rho!r}")
        try:
            coeffs = fit_rho(x[fit_idx], Y[fit_idx], centering=centering)
        except DegenerateControlError:
            coeffs, degenerate = np.zeros(k), True
    else:
        coeffs = np.broadcast_to(np.asarray(rho, dtype=float), (k,)).copy()
    values = x[eval_idx] - Y[eval_idx] @ coeffs
    M = len(values)
    var = float(np.var(values, ddof=1)) if M > 1 else 0.0
    return EstimatorReport(kind, (i, j), M, float(values.mean()), var, half_width(var, M),
                           tuple(float(c) for c in coeffs), batch.M, _offline_cost(batch, kind), degenerate)


def estimate_weak(catalog: DefectCatalog, eta: float, entry=(0, 0), order: int = 2, around: str = "A") -> EstimatorReport:
    value = weakly_stochastic_expectation(catalog, eta, order, around)[entry]
    side = catalog.side(around)
    cost = 1 if order == 1 else side.offline_cost
    return EstimatorReport("WEAK", tuple(entry), 0, float(value), 0.0, 0.0, (), 0, cost)


def variance_ratio(report_mc: EstimatorReport, report_cv: EstimatorReport) -> float:
    """``Var(MC) / Var(CV)``; ``inf`` when the controlled variance vanishes."""
    if report_mc.entry != report_cv.entry:
        raise ValueError("reports refer to different entries")
    if report_cv.variance <= 0.0:
        return math.inf
    return report_mc.variance / report_cv.variance


# -- files ---------------------------------------------------------------------------------


def _sym_entries(d: int):
    return [(0, 0)] if d == 1 else [(0, 0), (0, 1), (1, 1)]


def _sym_names(prefix: str, d: int):
    return [f"{prefix}{i + 1}{j + 1}" for i, j in _sym_entries(d)]


def write_batch_csv(batch: SampleBatch, path) -> None:
    """One row per sample: seed, defect count, then symmetric entries of A*, Y1, Y2, C2."""
    d = batch.d
    ent = _sym_entries(d)
    cols = ["seed", "defect_count"] + _sym_names("a", d)
    arrays = [batch.astar]
    for name in ("y1", "y2", "c2"):
        values = getattr(batch, name)
        if values is not None:
            cols += _sym_names(f"{name}_", d)
            arrays.append(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        counts = batch.counts
        for m in range(batch.M):
            row = [f"{int(batch.seeds[m]):#018x}", int(counts[m])]
            for arr in arrays:
                row += [repr(float(arr[m][e])) for e in ent]
            w.writerow(row)


def read_batch_csv(path, model: MaterialModel, N: int, r: int) -> SampleBatch:
    """Rebuild a batch; fields are regenerated from the stored seeds and checked against the counts."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    d = model.d
    ent = _sym_entries(d)

    def mats(prefix):
        names = _sym_names(prefix, d)
        if names[0] not in rows[0]:
            return None
        out = np.zeros((len(rows), d, d))
        for m, row in enumerate(rows):
            for (i, j), n in zip(ent, names):
                out[m, i, j] = out[m, j, i] = float(row[n])
        return out

    seeds = np.array([int(row["seed"], 16) for row in rows], dtype=np.uint64)
    bits = np.array([sample_defect_field(model, N, int(s)).bits.ravel() for s in seeds], dtype=np.uint8)
    counts = np.array([int(row["defect_count"]) for row in rows])
    if not np.array_equal(bits.sum(axis=1), counts):
        raise ValueError("stored defect counts do not match regenerated fields; wrong model, eta or N?")
    return SampleBatch(model.eta, N, r, d, seeds, bits, mats("a"), np.zeros(len(rows), dtype=int),
                       model.fingerprint(), mats("y1_"), mats("y2_"), mats("c2_"))
