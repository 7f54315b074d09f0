"""Closed-form one-dimensional apparent coefficient and exact enumeration oracles.

In 1D the corrector problem on ``(0, N)`` is explicit: the apparent
coefficient is the harmonic mean of the coefficient, so a realization with
``P`` defects gives ``A* = g(P / N)`` with

    g(b) = 1 / (phi0 + b (phi1 - phi0)),

where ``phi0`` and ``phi1`` integrate ``1 / a`` over one reference and one
defect cell.  Every statistic used by the estimators is a function of ``P``,
so expectations over all ``2^N`` fields reduce to binomial sums over
``P = 0 .. N``.
"""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from defectcv.defect_catalog import DefectCatalog, SideTables
from defectcv.tensor_field import DefectField, MaterialModel, _bernoulli, _philox_words
from defectcv.variance_reduction import CollinearControlWarning, DegenerateControlError, fit_rho

MAX_ENUM_N = 20
STATISTICS = ("astar", "y1", "y2", "c2", "d1", "d2", "d3")
QUAD_TOL = 1e-12


@dataclass(frozen=True)
class OneDModel:
    """Harmonic cell integrals of the two phases."""

    phi0: float
    phi1: float

    def __post_init__(self):
        if not (self.phi0 > 0 and self.phi1 > 0):
            raise ValueError("harmonic integrals must be positive")

    def g(self, b):
        return 1.0 / (self.phi0 + np.asarray(b, dtype=float) * (self.phi1 - self.phi0))

    @property
    def a_per(self) -> float:
        return float(self.g(0.0))

    @property
    def c_per(self) -> float:
        return float(self.g(1.0))

    @classmethod
    def from_material(cls, model: MaterialModel) -> OneDModel:
        if model.d != 1:
            raise ValueError("OneDModel needs a one-dimensional material")
        return cls(float(np.mean(1.0 / model.a_table[:, 0, 0])), float(np.mean(1.0 / model.c_table[:, 0, 0])))

    @classmethod
    def from_functions(cls, a, c) -> OneDModel:
        """Cell coefficients given as callables on ``(0, 1)``; integrals by adaptive quadrature."""
        phi = [integrate.quad(lambda y, f=f: 1.0 / f(y), 0.0, 1.0, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)[0]
               for f in (a, c)]
        return cls(*phi)

    @classmethod
    def constant(cls, alpha: float, beta: float) -> OneDModel:
        return cls(1.0 / alpha, 1.0 / beta)


def apparent_1d(model: OneDModel, field: DefectField | np.ndarray) -> float:
    """``g`` of the defect fraction of ``field``."""
    bits = field.bits if isinstance(field, DefectField) else np.asarray(field)
    if bits.ndim != 1:
        raise ValueError("apparent_1d needs a one-dimensional field")
    return float(model.g(bits.sum() / bits.size))


# -- closed-form catalog ------------------------------------------------------------


@dataclass(frozen=True)
class Marginals1D:
    """Defect marginals of the 1D model at size ``N`` (closed form)."""

    N: int
    one: float
    pair: float
    pair_c: float

    @classmethod
    def of(cls, model: OneDModel, N: int) -> Marginals1D:
        g = model.g
        if N < 2:
            return cls(N, float(g(1.0 / N) - g(0.0)), 0.0, 0.0)
        return cls(N, float(g(1 / N) - g(0)), float(g(2 / N) - 2 * g(1 / N) + g(0)),
                   float(g((N - 2) / N) - 2 * g((N - 1) / N) + g(1)))

    def surrogates(self, P):
        """``(Y1, Y2, C2)`` as functions of the defect count."""
        P = np.asarray(P, dtype=float)
        Z = self.N - P
        return P * self.one, 0.5 * P * (P - 1) * self.pair, 0.5 * Z * (Z - 1) * self.pair_c

    def expectations(self, eta: float):
        pairs = 0.5 * self.N * (self.N - 1)
        return eta * self.N * self.one, eta**2 * pairs * self.pair, (1 - eta) ** 2 * pairs * self.pair_c


def catalog_1d(model: OneDModel, N: int) -> DefectCatalog:
    """Exact 1D catalog built from ``g`` (no solves), usable by the generic estimators."""
    g = lambda b: np.array([[float(model.g(b))]])  # noqa: E731
    offsets = [(l,) for l in range(1, N)]
    a = SideTables("A", N, 0, 1, g(0), g(1 / N), {l: g(2 / N) for l in offsets}, "closed-form", (), 0)
    c = SideTables("C", N, 0, 1, g(1), g((N - 1) / N), {l: g((N - 2) / N) for l in offsets}, "closed-form", (), 0)
    return DefectCatalog(N, 0, 1, a, c)


# -- exact enumeration ------------------------------------------------------------------


def _check_enum(N: int) -> None:
    if N < 1 or N > MAX_ENUM_N:
        raise ValueError(f"enumeration supports 1 <= N <= {MAX_ENUM_N}, got {N}")


def count_weights(N: int, eta: float) -> np.ndarray:
    """Binomial probabilities of ``P = 0 .. N`` defects."""
    return stats.binom.pmf(np.arange(N + 1), N, eta)


def _controls(kind: str) -> tuple[int, ...]:
    return {"d1": (0,), "d2": (0, 1), "d3": (0, 1, 2)}[kind]


def statistic_values(model: OneDModel, N: int, eta: float, statistic: str, rho=None, P=None) -> np.ndarray:
    """Value of ``statistic`` for each defect count ``P`` (default ``0 .. N``).

    ``d1``/``d2``/``d3`` are the controlled variables with coefficients
    ``rho`` (default: all ones); control means are exact.
    """
    if statistic not in STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}; expected one of {STATISTICS}")
    P = np.arange(N + 1) if P is None else np.asarray(P)
    marg = Marginals1D.of(model, N)
    X = model.g(P / N)
    Y = marg.surrogates(P)
    if statistic == "astar":
        return X
    if statistic in ("y1", "y2", "c2"):
        return Y[("y1", "y2", "c2").index(statistic)]
    idx = _controls(statistic)
    ex = marg.expectations(eta)
    rho = np.ones(len(idx)) if rho is None else np.broadcast_to(np.asarray(rho, dtype=float), (len(idx),))
    out = X.copy()
    for c, i in zip(rho, idx):
        out -= c * (Y[i] - ex[i])
    return out


def _moment(values: np.ndarray, weights: np.ndarray, moment: str) -> float:
    mean = float(np.dot(weights, values))
    if moment == "mean":
        return mean
    if moment == "var":
        return float(np.dot(weights, (values - mean) ** 2))
    raise ValueError("moment must be 'mean' or 'var'")


def enumerate_exact_moments(model: OneDModel, N: int, eta: float, statistic: str = "astar", moment: str = "var",
                            rho=None) -> float:
    """Exact mean or variance over all ``2^N`` fields, grouped by defect count."""
    _check_enum(N)
    return _moment(statistic_values(model, N, eta, statistic, rho), count_weights(N, eta), moment)


def enumerate_raw_moments(model: OneDModel, N: int, eta: float, statistic: str = "astar", moment: str = "var",
                          rho=None) -> float:
    """Same as :func:`enumerate_exact_moments` by an explicit loop over all fields (cross-check)."""
    _check_enum(N)
    bits = np.array(list(itertools.product((0, 1), repeat=N)), dtype=np.int64)
    P = bits.sum(axis=1)
    weights = eta**P * (1 - eta) ** (N - P)
    return _moment(statistic_values(model, N, eta, statistic, rho, P=P), weights, moment)


def exact_covariance(model: OneDModel, N: int, eta: float, a: str, b: str) -> float:
    _check_enum(N)
    w = count_weights(N, eta)
    x = statistic_values(model, N, eta, a)
    y = statistic_values(model, N, eta, b)
    return float(np.dot(w, (x - w @ x) * (y - w @ y)))


def exact_optimal_rho(model: OneDModel, N: int, eta: float, kind: str = "d3") -> np.ndarray:
    """Variance-minimizing coefficients (minimum-norm when controls are collinear)."""
    idx = _controls(kind)
    names = [("y1", "y2", "c2")[i] for i in idx]
    G = np.array([[exact_covariance(model, N, eta, u, v) for v in names] for u in names])
    b = np.array([exact_covariance(model, N, eta, u, "astar") for u in names])
    scale = np.abs(G).max()
    if scale == 0.0:
        return np.zeros(len(idx))
    return np.linalg.lstsq(G / scale, b / scale, rcond=1e-10)[0]


def exact_optimal_variance(model: OneDModel, N: int, eta: float, kind: str = "d3") -> float:
    if kind == "mc":
        return enumerate_exact_moments(model, N, eta, "astar")
    return enumerate_exact_moments(model, N, eta, kind, rho=exact_optimal_rho(model, N, eta, kind))


# -- sampling ------------------------------------------------------------------------------


_BULK_STREAM = 0x1D


def sample_counts(N: int, eta: float, M: int, seed: int, chunk: int = 1 << 22) -> np.ndarray:
    """Defect counts of ``M`` Bernoulli fields drawn from one Philox stream.

    Cell ``k`` of sample ``m`` is word ``m N + k`` of the stream keyed by
    ``seed``, so any sample can be regenerated on its own.
    """
    key = (_BULK_STREAM << 64) | (int(seed) & ((1 << 64) - 1))
    out = np.empty(M, dtype=np.int64)
    per = max(1, chunk // N)
    for start in range(0, M, per):
        stop = min(M, start + per)
        bits = _bernoulli(_philox_words(key, start * N, (stop - start) * N), eta)
        out[start:stop] = bits.reshape(stop - start, N).sum(axis=1)
    return out


def sample_bits(N: int, eta: float, m: int, seed: int) -> np.ndarray:
    """The field behind ``sample_counts(...)[m]``."""
    key = (_BULK_STREAM << 64) | (int(seed) & ((1 << 64) - 1))
    return _bernoulli(_philox_words(key, m * N, N), eta)


def _var_with_se(values: np.ndarray) -> tuple[float, float]:
    M = len(values)
    c = values - values.mean()
    s2 = float(np.dot(c, c) / (M - 1))
    m4 = float(np.mean(c**4))
    return s2, math.sqrt(max(m4 - s2 * s2, 0.0) / M)


def sampled_variances(model: OneDModel, N: int, eta: float, M: int, seed: int, counts=None) -> dict:
    """Empirical variances (with standard errors) of MC and of CV1/CV3 with in-sample optimal ``rho``."""
    P = sample_counts(N, eta, M, seed) if counts is None else np.asarray(counts)
    marg = Marginals1D.of(model, N)
    X = model.g(P / N)
    Y = np.column_stack([y - e for y, e in zip(marg.surrogates(P), marg.expectations(eta))])
    out = {"mc": _var_with_se(X)}
    for kind, cols in (("cv1", [0]), ("cv3", [0, 1, 2])):
        try:
            with warnings.catch_warnings():
                # Y1, Y2 and C2 are affinely dependent in 1D; the fallback is expected.
                warnings.simplefilter("ignore", CollinearControlWarning)
                rho = fit_rho(X, Y[:, cols])
        except DegenerateControlError:
            rho = np.zeros(len(cols))
        out[kind] = _var_with_se(X - Y[:, cols] @ rho)
    return out


# -- scaling study --------------------------------------------------------------------------


@dataclass
class ScalingResult:
    Ns: list
    variances: dict
    errors: dict
    methods: list
    slopes: dict = field(default_factory=dict)
    slope_errors: dict = field(default_factory=dict)


def fit_slope(x, y) -> tuple[float, float]:
    """Least-squares slope of ``log y`` against ``log x`` with its standard error."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = y > 0
    if keep.sum() < 2:
        raise ValueError("need at least two positive values to fit a slope")
    res = stats.linregress(np.log(x[keep]), np.log(y[keep]))
    return float(res.slope), float(res.stderr)


def scaling_study(model: OneDModel, eta: float, Ns, kinds=("mc", "cv1", "cv3"), M: int = 100_000,
                  seed: int = 0, enumerate_up_to: int = MAX_ENUM_N) -> ScalingResult:
    """Variance against ``N`` for each estimator; exact for ``N <= enumerate_up_to``, sampled beyond."""
    Ns = [int(n) for n in Ns]
    if len(Ns) < 4 or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("N list must be strictly increasing with at least four points")
    var = {k: [] for k in kinds}
    err = {k: [] for k in kinds}
    methods = []
    for i, N in enumerate(Ns):
        if N <= enumerate_up_to:
            methods.append("enumeration")
            for k in kinds:
                var[k].append(exact_optimal_variance(model, N, eta, {"mc": "mc", "cv1": "d1", "cv3": "d3"}[k]))
                err[k].append(0.0)
        else:
            methods.append("sampling")
            sv = sampled_variances(model, N, eta, M, seed + i)
            for k in kinds:
                var[k].append(sv[k][0])
                err[k].append(sv[k][1])
    result = ScalingResult(Ns, var, err, methods)
    for k in kinds:
        try:
            result.slopes[k], result.slope_errors[k] = fit_slope(Ns, var[k])
        except ValueError:
            result.slopes[k], result.slope_errors[k] = math.nan, math.nan
    return result


def write_scaling_csv(result: ScalingResult, path) -> None:
    kinds = ("mc", "cv1", "cv3")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N"] + [f"var_{k}" for k in kinds] + [f"se_{k}" for k in kinds])
        for i, N in enumerate(result.Ns):
            w.writerow([N] + [repr(result.variances[k][i]) for k in kinds] + [repr(result.errors[k][i]) for k in kinds])
        fh.write("# slopes " + " ".join(f"{k}={result.slopes[k]:.4f}+-{result.slope_errors[k]:.4f}" for k in kinds)
                 + "\n")


# -- centered Bernoulli moments -------------------------------------------------------------


def centered_mean_moment(N: int, p: int, eta: float) -> float:
    """Exact ``E[(N^{-1} sum_k (B_k - eta))^p]`` by enumeration over defect counts."""
    _check_enum(N)
    P = np.arange(N + 1)
    return float(np.dot(count_weights(N, eta), ((P - N * eta) / N) ** p))


# moments below this are cancellation noise (the summands are bounded by 1)
_ROUNDOFF = 1e-15


def _bound_exponent(p: int) -> float:
    return p / 2 if p % 2 == 0 else (p + 1) / 2


def moment_bound_check(N, p: int, eta: float, slack: float = 2.0) -> bool:
    """Check ``|E[mean^p]| <= C_p N^{-k}`` (``k = p/2`` or ``(p+1)/2``) with ``C_p`` fitted at the smallest ``N``."""
    if p < 1 or p > 6:
        raise ValueError("p must lie in 1..6")
    Ns = sorted(np.atleast_1d(N).astype(int).tolist())
    k = _bound_exponent(p)
    m = [abs(centered_mean_moment(n, p, eta)) for n in Ns]
    c_p = m[0] * Ns[0] ** k
    return all(v <= slack * c_p * n ** (-k) + _ROUNDOFF for v, n in zip(m, Ns))


def moment_decay_exponent(Ns, p: int, eta: float) -> float:
    """Fitted ``-d log|E[mean^p]| / d log N``; ``inf`` when the moment vanishes identically."""
    m = [abs(centered_mean_moment(n, p, eta)) for n in Ns]
    if max(m) < _ROUNDOFF:
        return math.inf
    return -fit_slope(Ns, m)[0]
