"""Configuration-driven experiment runners.

Each ``run_*`` function validates its :class:`ExperimentConfig`, performs the
solves, writes CSV data plus a flat ``key = value`` report into
``config.out`` and returns the in-memory result.  Report bodies contain no
timings or timestamps, so an identical config reproduces them byte for byte.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from defectcv import analytic_1d
from defectcv.cell_solver import periodic_tensor
from defectcv.defect_catalog import (DefectCatalog, build_catalog, catalog_path, read_side, write_side)
from defectcv.reduced_basis import build_basis, parse_snapshot_spec, rb_marginal_table
from defectcv.tensor_field import MaterialModel, make_checkerboard_model
from defectcv.variance_reduction import (KINDS, CollinearControlWarning, EstimatorReport, estimate, estimate_weak,
                                         generate_batch, optimal_rho, variance_ratio, write_batch_csv)

log = logging.getLogger(__name__)

EXACT_CATALOG_MAX_N = 20


class ConfigError(ValueError):
    """Invalid experiment configuration (raised before any solve)."""


# -- configuration ---------------------------------------------------------------


def _parse_floats(text: str) -> tuple[float, ...]:
    """``"0.1,0.5"``, ``"0.1 0.5"`` or a range ``"0.1:0.1:0.9"`` (inclusive)."""
    text = text.strip()
    if ":" in text:
        start, step, stop = (float(v) for v in text.split(":"))
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + i * step, 12) for i in range(n))
    return tuple(float(v) for v in text.replace(",", " ").split())


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if ":" in text:
        start, step, stop = (int(v) for v in text.split(":"))
        return tuple(range(start, stop + 1, step))
    return tuple(int(v) for v in text.replace(",", " ").split())


def _parse_words(text: str) -> tuple[str, ...]:
    return tuple(text.replace(",", " ").split()) if ";" not in text else tuple(text.split())


_PARSERS = {
    "alpha": float, "beta": float, "d": int, "eta": _parse_floats, "n": _parse_ints, "m": int, "res": int,
    "seed": int, "estimators": lambda s: tuple(w.upper() for w in _parse_words(s)),
    "rb_snapshots": lambda s: tuple(s.split()), "out": str, "entry": lambda s: tuple(int(v) for v in s.split(",")),
    "full_matrix": lambda s: s.strip().lower() in ("1", "true", "yes"), "n_ref": int, "m_ref": int,
    "ref_seed": lambda s: None if s.strip() in ("", "none") else int(s), "ref_estimator": lambda s: s.upper(),
    "ref_snapshots": str, "catalog": str, "workers": int, "rho": str,
    "tol": lambda s: None if s.strip() in ("", "none") else float(s),
}


@dataclass
class ExperimentConfig:
    """All inputs of a run; ``serialize`` is written into every output for provenance."""

    alpha: float = 3.0
    beta: float = 23.0
    d: int = 2
    eta: tuple = (0.5,)
    n: tuple = (10,)
    m: int = 100
    res: int = 4
    seed: int = 0
    estimators: tuple = ("MC", "CV1", "CV2", "CV3")
    rb_snapshots: tuple = ("4", "8", "12", "20", "all")
    out: str = "out"
    entry: tuple = (1, 1)  # 1-based, as printed
    full_matrix: bool = False
    n_ref: int = 100
    m_ref: int = 100
    ref_seed: int | None = None
    ref_estimator: str = "CV3"
    ref_snapshots: str = "12"
    catalog: str = "auto"  # exact | rb | auto
    workers: int = 1
    rho: str = "optimal"
    tol: float | None = None

    def validate(self) -> ExperimentConfig:
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.d not in (1, 2):
            raise ConfigError("d must be 1 or 2")
        if not self.eta or any(not 0.0 <= e <= 1.0 for e in self.eta):
            raise ConfigError("eta values must lie in [0, 1]")
        if not self.n or any(v < 1 for v in self.n):
            raise ConfigError("N values must be positive")
        if self.m < 2 or self.m_ref < 2:
            raise ConfigError("M must be at least 2")
        if self.res < 1:
            raise ConfigError("res must be positive")
        bad = [k for k in self.estimators if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown estimators {bad}; expected a subset of {KINDS}")
        if len(self.entry) != 2 or not all(1 <= v <= self.d for v in self.entry):
            raise ConfigError(f"entry must be two indices in 1..{self.d}")
        if self.catalog not in ("exact", "rb", "auto"):
            raise ConfigError("catalog must be exact, rb or auto")
        if self.rho not in ("optimal", "split"):
            raise ConfigError("rho must be optimal or split")
        if self.ref_estimator not in ("MC", "CV1", "CV2", "CV3"):
            raise ConfigError("ref_estimator must be MC, CV1, CV2 or CV3")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        return self

    @property
    def entry0(self) -> tuple[int, int]:
        return (self.entry[0] - 1, self.entry[1] - 1)

    def model(self, eta: float | None = None) -> MaterialModel:
        return make_checkerboard_model(self.alpha, self.beta, self.eta[0] if eta is None else eta, self.d)

    def serialize(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
                if f.name == "entry":
                    v = v.replace(" ", ",")
            elif isinstance(v, float):
                v = repr(v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Defaults, then the config file, then explicit overrides (``None`` overrides are ignored)."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def point_seed(seed: int, *parts) -> int:
    """Stable 64-bit seed for one sweep point."""
    digest = hashlib.sha256(":".join([str(seed)] + [repr(p) for p in parts]).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- catalogs ------------------------------------------------------------------------


def catalog_method(cfg: ExperimentConfig, N: int) -> str:
    if cfg.catalog == "auto":
        return "exact" if N <= EXACT_CATALOG_MAX_N else "rb"
    return cfg.catalog


def make_catalog(model: MaterialModel, N: int, r: int, method: str = "exact", snapshots: str = "12", tol=None,
                 workers: int = 1, cache_dir=None) -> DefectCatalog:
    """Exact or reduced-basis catalog for both sides, cached as side files under ``cache_dir``."""
    if method == "exact":
        return build_catalog(model, N, r, tol=tol, workers=workers, cache_dir=cache_dir)
    if method != "rb":
        raise ConfigError(f"unknown catalog method {method!r}")
    snaps = parse_snapshot_spec(str(snapshots), N, model.d)
    tag = "rb-" + hashlib.sha256(repr(snaps).encode()).hexdigest()[:8]
    tables = {}
    for side in ("A", "C"):
        path = None if cache_dir is None else catalog_path(cache_dir, model, N, r, side, tag)
        if path is not None and path.exists():
            tables[side] = read_side(path)
            continue
        tables[side] = rb_marginal_table(build_basis(model, N, r, snaps, side, tol=tol, workers=workers))
        if path is not None:
            write_side(tables[side], path)
    return DefectCatalog(N, r, model.d, tables["A"], tables["C"])


# -- reference value -------------------------------------------------------------------


@dataclass
class ReferenceValue:
    """Large-domain estimate standing in for the exact homogenized tensor."""

    n_ref: int
    m_ref: int
    res: int
    seed: int
    estimator: str
    value: np.ndarray
    half_width: np.ndarray

    def to_text(self) -> str:
        v = " ".join(repr(float(x)) for x in self.value.ravel())
        h = " ".join(repr(float(x)) for x in self.half_width.ravel())
        return (f"n_ref = {self.n_ref}\nm_ref = {self.m_ref}\nres = {self.res}\nseed = {self.seed}\n"
                f"estimator = {self.estimator}\nvalue = {v}\nhalf_width = {h}\n")

    @classmethod
    def from_text(cls, text: str) -> ReferenceValue:
        kv = dict(line.split(" = ", 1) for line in text.strip().splitlines())
        val = np.array([float(x) for x in kv["value"].split()])
        d = int(round(math.sqrt(val.size)))
        hw = np.array([float(x) for x in kv["half_width"].split()]).reshape(d, d)
        return cls(int(kv["n_ref"]), int(kv["m_ref"]), int(kv["res"]), int(kv["seed"]), kv["estimator"],
                   val.reshape(d, d), hw)


def _all_entries(d: int):
    return [(i, j) for i in range(d) for j in range(d)]


def reference_value(cfg: ExperimentConfig, eta: float, cache_dir=None) -> ReferenceValue:
    """Compute (or load from cache) the reference tensor at ``(n_ref, m_ref)``."""
    seed = point_seed(cfg.seed, "reference", eta) if cfg.ref_seed is None else cfg.ref_seed
    model = cfg.model(eta)
    name = f"reference_{model.fingerprint()}_eta{eta!r}_N{cfg.n_ref}_M{cfg.m_ref}_r{cfg.res}_{cfg.ref_estimator}" \
           f"_{cfg.ref_snapshots}_{seed:x}.txt"
    path = None if cache_dir is None else Path(cache_dir) / name
    if path is not None and path.exists():
        return ReferenceValue.from_text(path.read_text())
    catalog = None
    if cfg.ref_estimator != "MC":
        method = catalog_method(cfg, cfg.n_ref)
        catalog = make_catalog(model, cfg.n_ref, cfg.res, method, cfg.ref_snapshots, cfg.tol, cfg.workers, cache_dir)
    batch = generate_batch(model, cfg.n_ref, cfg.m_ref, seed, cfg.res, cfg.tol, catalog, cfg.workers)
    d = cfg.d
    value, hw = np.zeros((d, d)), np.zeros((d, d))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearControlWarning)
        for e in _all_entries(d):
            rep = estimate(batch, cfg.ref_estimator, e)
            value[e], hw[e] = rep.mean, rep.half_width
    ref = ReferenceValue(cfg.n_ref, cfg.m_ref, cfg.res, seed, cfg.ref_estimator, value, hw)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(ref.to_text())
    return ref


# -- report helpers -------------------------------------------------------------------


@dataclass
class RunResult:
    command: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    for row in rows[1:]:
        cols += [c for c in row if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in cols])


def _write_report(path: Path, cfg: ExperimentConfig, command: str, summary: dict, notes=()) -> None:
    lines = [f"# defectcv report: {command}", "# config"]
    lines += [f"config.{ln}" for ln in cfg.serialize().splitlines()]
    lines.append("# results")
    lines += [f"{k} = {_fmt(v)}" for k, v in summary.items()]
    lines += [f"note = {n}" for n in notes]
    path.write_text("\n".join(lines) + "\n")


def _finish(cfg: ExperimentConfig, result: RunResult, notes=()) -> RunResult:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = result.command.replace("-", "_")
    if result.rows:
        _write_csv(out / f"{stem}.csv", result.rows)
        result.files.append(str(out / f"{stem}.csv"))
    _write_report(out / f"{stem}_report.txt", cfg, result.command, result.summary, notes)
    result.files.append(str(out / f"{stem}_report.txt"))
    return result


def _estimates(batch, kinds, entry, rho_policy) -> dict[str, EstimatorReport]:
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearControlWarning)
        for k in kinds:
            if k != "WEAK":
                out[k] = estimate(batch, k, entry, rho_policy)
    return out


def _cache_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "cache"


def _ratio_columns(row: dict, reports: dict, prefix="") -> None:
    mc = reports.get("MC")
    for k, rep in reports.items():
        row[f"{prefix}{k.lower()}_mean"] = rep.mean
        row[f"{prefix}{k.lower()}_hw"] = rep.half_width
        if mc is not None and k != "MC":
            row[f"{prefix}ratio_{k.lower()}"] = variance_ratio(mc, rep)


# -- commands -------------------------------------------------------------------------------


def run_periodic(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    model = cfg.model()
    a = periodic_tensor(model, cfg.res, cfg.tol)
    c = periodic_tensor(model, cfg.res, cfg.tol, defect=True)
    res = RunResult("periodic")
    for name, t in (("a_per", a), ("c_per", c)):
        for i, j in _all_entries(cfg.d):
            res.summary[f"{name}_{i + 1}{j + 1}"] = float(t[i, j])
    res.summary["solves"] = 2
    return _finish(cfg, res)


def run_catalog(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    model = cfg.model()
    res = RunResult("catalog")
    out = Path(cfg.out)
    for N in cfg.n:
        method = catalog_method(cfg, N)
        snaps = cfg.rb_snapshots[0] if cfg.catalog == "rb" else cfg.ref_snapshots
        cat = make_catalog(model, N, cfg.res, method, snaps, cfg.tol, cfg.workers, _cache_dir(cfg))
        for side in ("A", "C"):
            t = cat.side(side)
            path = out / f"catalog_N{N}_{side}.txt"
            out.mkdir(parents=True, exist_ok=True)
            write_side(t, path)
            res.files.append(str(path))
            row = {"N": N, "side": side, "method": t.method, "offline_solves": t.offline_cost}
            for i, j in _all_entries(cfg.d):
                row[f"bar1_{i + 1}{j + 1}"] = float(t.bar1[i, j])
                row[f"bar2_{i + 1}{j + 1}"] = float(t.bar2[i, j])
            res.rows.append(row)
    res.summary["offline_solves"] = sum(r["offline_solves"] for r in res.rows)
    return _finish(cfg, res)


def _sampling_run(cfg: ExperimentConfig, command: str, kinds) -> RunResult:
    res = RunResult(command)
    entries = _all_entries(cfg.d) if cfg.full_matrix else [cfg.entry0]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    online = offline = 0
    for N in cfg.n:
        catalog = None
        if any(k != "MC" for k in kinds):
            catalog = make_catalog(cfg.model(), N, cfg.res, catalog_method(cfg, N), cfg.rb_snapshots[0]
                                   if cfg.catalog == "rb" else cfg.ref_snapshots, cfg.tol, cfg.workers,
                                   _cache_dir(cfg))
            offline += catalog.offline_cost
        for eta in cfg.eta:
            batch = generate_batch(cfg.model(eta), N, cfg.m, point_seed(cfg.seed, eta, N), cfg.res, cfg.tol,
                                   catalog, cfg.workers)
            online += batch.M
            path = out / f"{command}_batch_eta{eta!r}_N{N}.csv"
            write_batch_csv(batch, path)
            res.files.append(str(path))
            for e in entries:
                reports = _estimates(batch, kinds, e, cfg.rho)
                row = {"eta": eta, "N": N, "entry": f"{e[0] + 1}{e[1] + 1}", "M": batch.M}
                _ratio_columns(row, reports)
                for k, rep in reports.items():
                    if rep.rho:
                        row[f"{k.lower()}_rho"] = " ".join(repr(v) for v in rep.rho)
                    row[f"{k.lower()}_cost"] = rep.cost
                res.rows.append(row)
    res.summary.update(online_solves=online, offline_solves=offline, total_solves=online + offline)
    return res


def run_mc(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    return _finish(cfg, _sampling_run(cfg, "mc", ("MC",)))


def run_cv(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    kinds = tuple(k for k in cfg.estimators if k != "WEAK")
    if "MC" not in kinds:
        kinds = ("MC",) + kinds
    return _finish(cfg, _sampling_run(cfg, "cv", kinds))


def run_sweep_eta(cfg: ExperimentConfig) -> RunResult:
    """Per-``eta`` MC mean/CI, weak expansions around both phases and CV variance ratios at one ``N``."""
    cfg.validate()
    if any(e <= 0.0 or e >= 1.0 for e in cfg.eta):
        raise ConfigError("sweep-eta needs eta values strictly inside (0, 1)")
    N = cfg.n[0]
    model = cfg.model()
    catalog = make_catalog(model, N, cfg.res, catalog_method(cfg, N), cfg.ref_snapshots, cfg.tol, cfg.workers,
                           _cache_dir(cfg))
    kinds = tuple(dict.fromkeys(("MC",) + tuple(k for k in cfg.estimators if k != "WEAK")))
    res = RunResult("sweep-eta")
    e = cfg.entry0
    for eta in cfg.eta:
        batch = generate_batch(model.with_eta(eta), N, cfg.m, point_seed(cfg.seed, eta, N), cfg.res, cfg.tol,
                               catalog, cfg.workers)
        row = {"eta": eta, "N": N, "M": batch.M}
        reports = _estimates(batch, kinds, e, cfg.rho)
        _ratio_columns(row, reports)
        for order in (1, 2):
            row[f"weak{order}_a"] = estimate_weak(catalog, eta, e, order, "A").mean
            row[f"weak{order}_c"] = estimate_weak(catalog, eta, e, order, "C").mean
        res.rows.append(row)
    res.summary.update(N=N, online_solves=cfg.m * len(cfg.eta), offline_solves=catalog.offline_cost,
                       total_solves=cfg.m * len(cfg.eta) + catalog.offline_cost)
    return _finish(cfg, res)


def run_sweep_N(cfg: ExperimentConfig, reference: ReferenceValue | None = None) -> RunResult:
    """Per-``N`` ratios, control coefficients, means with CIs and errors against a reference, plus slopes."""
    cfg.validate()
    eta = cfg.eta[0]
    model = cfg.model(eta)
    e = cfg.entry0
    kinds = tuple(dict.fromkeys(("MC",) + tuple(k for k in cfg.estimators if k != "WEAK")))
    ref = reference if reference is not None else reference_value(cfg, eta, _cache_dir(cfg))
    res = RunResult("sweep-n")
    online = offline = 0
    for N in cfg.n:
        catalog = make_catalog(model, N, cfg.res, catalog_method(cfg, N), cfg.ref_snapshots, cfg.tol, cfg.workers,
                               _cache_dir(cfg))
        offline += catalog.offline_cost
        batch = generate_batch(model, N, cfg.m, point_seed(cfg.seed, eta, N), cfg.res, cfg.tol, catalog,
                               cfg.workers)
        online += batch.M
        reports = _estimates(batch, kinds, e, cfg.rho)
        row = {"N": N, "M": batch.M, "catalog": catalog_method(cfg, N)}
        _ratio_columns(row, reports)
        if "CV3" in reports:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CollinearControlWarning)
                rho = optimal_rho(batch, "CV3", e)
            for i, v in enumerate(rho, 1):
                row[f"rho{i}"] = float(v)
        for k, rep in reports.items():
            row[f"err_{k.lower()}"] = abs(rep.mean - ref.value[e])
        res.rows.append(row)
    Ns = [r["N"] for r in res.rows]
    for k in kinds:
        errs = [r[f"err_{k.lower()}"] for r in res.rows]
        if len(Ns) >= 2 and sum(v > 0 for v in errs) >= 2:
            slope, se = analytic_1d.fit_slope(Ns, errs)
            res.summary[f"slope_err_{k.lower()}"] = slope
            res.summary[f"slope_err_{k.lower()}_se"] = se
    res.summary.update(reference=float(ref.value[e]), reference_hw=float(ref.half_width[e]),
                       reference_n=ref.n_ref, reference_m=ref.m_ref, reference_estimator=ref.estimator,
                       online_solves=online, offline_solves=offline, total_solves=online + offline)
    return _finish(cfg, res)


def run_rb_robustness(cfg: ExperimentConfig) -> RunResult:
    """CV3 ratio for each snapshot set against the exact catalog, with CV1 and the identity-marginal control."""
    cfg.validate()
    eta = cfg.eta[0]
    model = cfg.model(eta)
    e = cfg.entry0
    res = RunResult("rb")
    for N in cfg.n:
        batch = generate_batch(model, N, cfg.m, point_seed(cfg.seed, eta, N), cfg.res, cfg.tol, None, cfg.workers)
        exact = make_catalog(model, N, cfg.res, "exact", tol=cfg.tol, workers=cfg.workers, cache_dir=_cache_dir(cfg))
        base = batch.with_surrogates(exact)
        mc = estimate(base, "MC", e)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CollinearControlWarning)
            cv1 = estimate(base, "CV1", e, cfg.rho)
            ident = estimate(base, "CV3ID", e, cfg.rho)
            rows = [("exact", base)]
            for spec in cfg.rb_snapshots:
                cat = make_catalog(model, N, cfg.res, "rb", spec, cfg.tol, cfg.workers, _cache_dir(cfg))
                rows.append((spec, batch.with_surrogates(cat)))
            for name, b in rows:
                cv3 = estimate(b, "CV3", e, cfg.rho)
                res.rows.append({"N": N, "snapshots": name, "card": b.offline["A"] - 1 if name != "exact" else
                                 len(exact.a.pairs), "ratio_cv3": variance_ratio(mc, cv3),
                                 "ratio_cv1": variance_ratio(mc, cv1), "ratio_cv3id": variance_ratio(mc, ident),
                                 "offline_solves": b.offline["A"] + b.offline["C"], "online_solves": batch.M})
    res.summary["rows"] = len(res.rows)
    return _finish(cfg, res)


def run_1d_scaling(cfg: ExperimentConfig) -> RunResult:
    """Variance-vs-``N`` slopes for MC, CV1 and CV3 from the closed-form 1D coefficient."""
    cfg.validate()
    eta = cfg.eta[0]
    res = RunResult("scale-1d")
    if eta in (0.0, 1.0):
        res.summary.update(eta=eta, slope_mc="nan", slope_cv1="nan", slope_cv3="nan")
        return _finish(cfg, res, notes=[f"eta={eta}: every field is deterministic, all variances vanish"])
    model = analytic_1d.OneDModel.constant(cfg.alpha, cfg.beta)
    study = analytic_1d.scaling_study(model, eta, cfg.n, M=cfg.m, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    analytic_1d.write_scaling_csv(study, out / "scale_1d_variances.csv")
    res.files.append(str(out / "scale_1d_variances.csv"))
    for i, N in enumerate(study.Ns):
        res.rows.append({"N": N, "method": study.methods[i],
                         **{f"var_{k}": study.variances[k][i] for k in study.variances},
                         **{f"se_{k}": study.errors[k][i] for k in study.errors}})
    # enumeration against sampling at a common N
    n_check = 16
    sv = analytic_1d.sampled_variances(model, n_check, eta, cfg.m, point_seed(cfg.seed, "check", n_check))
    res.summary["check_N"] = n_check
    for k, kind in (("mc", "mc"), ("cv1", "d1"), ("cv3", "d3")):
        res.summary[f"check_exact_{k}"] = analytic_1d.exact_optimal_variance(model, n_check, eta, kind)
        res.summary[f"check_sampled_{k}"] = sv[k][0]
        res.summary[f"check_se_{k}"] = sv[k][1]
    for k in study.slopes:
        res.summary[f"slope_{k}"] = study.slopes[k]
        res.summary[f"slope_{k}_se"] = study.slope_errors[k]
    return _finish(cfg, res)


COMMANDS = {
    "periodic": run_periodic, "catalog": run_catalog, "mc": run_mc, "cv": run_cv, "sweep-eta": run_sweep_eta,
    "sweep-n": run_sweep_N, "rb": run_rb_robustness, "scale-1d": run_1d_scaling,
}
