from __future__ import annotations

import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectcv.analytic_1d import OneDModel, catalog_1d, count_weights, exact_optimal_rho, sample_counts, Marginals1D
from defectcv.tensor_field import DefectField, make_checkerboard_model, sample_defect_field, sample_seeds
from defectcv.variance_reduction import (CollinearControlWarning, DegenerateControlError, EstimatorReport,
                                         SampleBatch, SampleRecord, controlled_value, controlled_values,
                                         degraded_second_order, estimate, estimate_weak, fit_rho, generate_batch,
                                         optimal_rho_single, optimal_rho_triple, pair_counts, read_batch_csv,
                                         surrogate_expectations, surrogate_first, surrogate_second, variance_ratio,
                                         write_batch_csv, zero_pair_counts)


def brute_second(bits, side):
    """Direct double loop over ordered cell pairs."""
    N, d = bits.shape[0], bits.ndim
    w = bits if side.upper() == "A" else 1 - bits
    cells = list(itertools.product(range(N), repeat=d))
    return [(k, l) for k in cells for l in cells if k != l and w[k] and w[l]]


def brute_surrogate(bits, catalog, side):
    tables = catalog.side(side)
    total = np.zeros((catalog.d, catalog.d))
    for k, l in brute_second(bits, side):
        total += tables.pair_marginal(np.subtract(l, k))
    return 0.5 * total


# -- surrogates --------------------------------------------------------------------


def test_first_surrogate_trivial(catalog4):
    np.testing.assert_array_equal(surrogate_first(np.zeros((4, 4), int), catalog4), np.zeros((2, 2)))
    np.testing.assert_allclose(surrogate_first(np.ones((4, 4), int), catalog4), 16 * catalog4.a.one_marginal)


def test_first_surrogate_mean(catalog6):
    model = make_checkerboard_model(3, 23, 0.5)
    counts = np.array([sample_defect_field(model, 6, s).bits.sum() for s in sample_seeds(3, 10_000)])
    # E[count] = eta |I_N| = 18; binomial sd 3
    assert abs(counts.mean() - 18) < 3 * 3 / math.sqrt(counts.size)
    y = surrogate_first(sample_defect_field(model, 6, 1), catalog6)
    np.testing.assert_allclose(y / catalog6.a.one_marginal[0, 0], y[0, 0] / catalog6.a.one_marginal[0, 0] * np.eye(2),
                               atol=1e-6)


def test_second_surrogate_trivial(catalog4):
    zero = np.zeros((4, 4), int)
    one = zero.copy()
    one[1, 2] = 1
    for b in (zero, one):
        np.testing.assert_array_equal(surrogate_second(b, catalog4, "A"), np.zeros((2, 2)))
    # all-defect field has no defect-free pair on the C side
    np.testing.assert_array_equal(surrogate_second(np.ones((4, 4), int), catalog4, "C"), np.zeros((2, 2)))


@settings(max_examples=25, deadline=None)
@given(bits=st.lists(st.integers(0, 1), min_size=16, max_size=16), side=st.sampled_from(["A", "C"]))
def test_second_surrogate_matches_double_loop_2d(catalog4, bits, side):
    b = np.array(bits).reshape(4, 4)
    np.testing.assert_allclose(surrogate_second(b, catalog4, side), brute_surrogate(b, catalog4, side),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("side", ["A", "C"])
def test_second_surrogate_matches_double_loop_1d(side):
    cat = catalog_1d(OneDModel.constant(3, 23), 4)
    for bits in itertools.product((0, 1), repeat=4):
        b = np.array(bits)
        np.testing.assert_allclose(surrogate_second(b, cat, side), brute_surrogate(b, cat, side), atol=1e-13)


def test_pair_count_complement_identity():
    rng = np.random.default_rng(4)
    b = rng.integers(0, 2, size=(5, 5))
    direct = pair_counts(1 - b)
    np.testing.assert_array_equal(zero_pair_counts(b), direct)
    assert pair_counts(b).sum() == b.sum() * (b.sum() - 1)


def test_pair_counts_blocking_invariant():
    b = np.random.default_rng(5).integers(0, 2, size=(7, 7))
    np.testing.assert_array_equal(pair_counts(b, block=3), pair_counts(b, block=1000))


def test_degraded_second_order_counts():
    a, c = degraded_second_order(np.zeros((4, 4), int))
    np.testing.assert_array_equal(a, np.zeros((2, 2)))
    np.testing.assert_array_equal(c, 0.5 * 16 * 15 * np.eye(2))
    one = np.zeros((4, 4), int)
    one[0, 0] = 1
    a, c = degraded_second_order(one)
    np.testing.assert_array_equal(a, np.zeros((2, 2)))
    np.testing.assert_array_equal(c, 0.5 * 15 * 14 * np.eye(2))


# -- exact 1D enumeration -----------------------------------------------------------


def _enumerated_records(N, eta):
    model = OneDModel.constant(3, 23)
    cat = catalog_1d(model, N)
    out = []
    for bits in itertools.product((0, 1), repeat=N):
        b = np.array(bits)
        P = int(b.sum())
        rec = SampleRecord(0, P, np.array([[float(model.g(P / N))]]), surrogate_first(b, cat),
                           surrogate_second(b, cat, "A"), surrogate_second(b, cat, "C"), bits=b)
        out.append((eta**P * (1 - eta) ** (N - P), rec))
    return cat, out


@pytest.mark.parametrize("rho", [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (2.5, -3.0, 0.7)])
def test_controlled_value_unbiased_by_enumeration(rho):
    cat, records = _enumerated_records(6, 0.5)
    mean_x = sum(w * r.astar for w, r in records)
    for kind, k in (("CV1", 1), ("CV2", 2), ("CV3", 3), ("CV3ID", 3)):
        mean_d = sum(w * controlled_value(r, kind, rho[:k], cat, 0.5) for w, r in records)
        np.testing.assert_allclose(mean_d, mean_x, rtol=1e-13)


def test_controlled_value_rho_zero_is_identity(catalog4):
    model = make_checkerboard_model(3, 23, 0.5)
    batch = generate_batch(model, 4, 3, 9, r=2, catalog=catalog4)
    rec = batch.record(1)
    np.testing.assert_array_equal(controlled_value(rec, "CV3", 0.0, catalog4, 0.5), rec.astar)
    np.testing.assert_array_equal(controlled_values(batch, "CV2", 0.0), batch.astar)


# -- batches ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def batch6(catalog6):
    return generate_batch(make_checkerboard_model(3, 23, 0.5), 6, 40, 2024, r=2, catalog=catalog6)


def test_batch_surrogates_recomputable(batch6, catalog6):
    for m in (0, 17, 39):
        b = batch6.field_bits(m)
        np.testing.assert_array_equal(batch6.y1[m], surrogate_first(b, catalog6))
        np.testing.assert_array_equal(batch6.y2[m], surrogate_second(b, catalog6, "A"))
        np.testing.assert_array_equal(batch6.c2[m], surrogate_second(b, catalog6, "C"))
        np.testing.assert_array_equal(b, sample_defect_field(make_checkerboard_model(3, 23, 0.5), 6,
                                                             int(batch6.seeds[m])).bits)


def test_batch_worker_independence(catalog4):
    model = make_checkerboard_model(3, 23, 0.5)
    a = generate_batch(model, 4, 6, 5, r=2, catalog=catalog4)
    b = generate_batch(model, 4, 6, 5, r=2, catalog=catalog4, workers=2)
    np.testing.assert_array_equal(a.astar, b.astar)
    np.testing.assert_array_equal(a.y2, b.y2)


def test_voigt_reuss_per_realization(batch6):
    for m in range(batch6.M):
        vals = np.where(batch6.bits[m], 23.0, 3.0)
        eig = np.linalg.eigvalsh(batch6.astar[m])
        assert 1 / np.mean(1 / vals) - 1e-8 <= eig.min() and eig.max() <= vals.mean() + 1e-8


def test_batch_csv_roundtrip(tmp_path, batch6):
    path = tmp_path / "batch.csv"
    write_batch_csv(batch6, path)
    header = path.read_text().splitlines()[0]
    assert header.startswith("seed,defect_count,a11,a12,a22,y1_11")
    back = read_batch_csv(path, make_checkerboard_model(3, 23, 0.5), 6, 2)
    np.testing.assert_array_equal(back.bits, batch6.bits)
    np.testing.assert_allclose(back.astar[:, 0, 0], batch6.astar[:, 0, 0], rtol=0)
    np.testing.assert_allclose(back.c2[:, 1, 1], batch6.c2[:, 1, 1], rtol=0)


def test_batch_csv_detects_wrong_model(tmp_path, batch6):
    path = tmp_path / "batch.csv"
    write_batch_csv(batch6, path)
    with pytest.raises(ValueError):
        read_batch_csv(path, make_checkerboard_model(3, 23, 0.2), 6, 2)


# -- control coefficients -----------------------------------------------------------------


def _self_controlled(batch):
    b = SampleBatch(**{**batch.__dict__})
    b.astar = b.y1 - b.expectations["y1"] + 7.0
    return b


def test_self_control_gives_unit_rho(batch6):
    b = _self_controlled(batch6)
    assert optimal_rho_single(b, centering="empirical") == pytest.approx(1.0, abs=1e-12)
    rep = estimate(b, "CV1", centering="empirical")
    assert rep.variance == pytest.approx(0.0, abs=1e-20)
    assert rep.mean == pytest.approx(7.0)


def test_self_control_exact_centering(batch6):
    # Exact-mean centering of Y gives 1 - M (mean(Y) - E[Y])^2 / sum (Y - E[Y])^2.
    b = _self_controlled(batch6)
    y = b.y1[:, 0, 0] - b.expectations["y1"][0, 0]
    expected = 1.0 - y.size * y.mean() ** 2 / np.dot(y, y)
    assert optimal_rho_single(b) == pytest.approx(expected, rel=1e-12)
    shifted = SampleBatch(**{**b.__dict__})
    shifted.expectations = {**b.expectations, "y1": b.y1.mean(axis=0)}
    assert optimal_rho_single(shifted) == pytest.approx(1.0, abs=1e-12)


def test_independent_control_rho_small():
    rng = np.random.default_rng(11)
    M = 10_000
    x = rng.normal(2.0, 3.0, M)
    y = rng.normal(0.0, 0.5, M)
    rho = fit_rho(x, y[:, None])[0]
    assert abs(rho) <= 4 / math.sqrt(M) * math.sqrt(9.0 / 0.25)


def test_uncorrelated_controls_decouple():
    rng = np.random.default_rng(3)
    M = 64
    Y = np.linalg.qr(rng.standard_normal((M, 3)) - 0)[0]
    Y -= Y.mean(axis=0)
    Y = np.linalg.qr(Y)[0]  # orthonormal, zero mean columns
    x = Y @ np.array([2.0, -1.0, 0.5]) + 0.1 * rng.standard_normal(M)
    rho3 = fit_rho(x, Y)
    singles = [fit_rho(x, Y[:, [i]])[0] for i in range(3)]
    np.testing.assert_allclose(rho3, singles, rtol=1e-10)


def test_degenerate_control():
    with pytest.raises(DegenerateControlError):
        fit_rho(np.arange(5.0), np.zeros((5, 1)))


def test_collinear_triple_falls_back():
    rng = np.random.default_rng(1)
    P = rng.binomial(10, 0.5, 500).astype(float)
    Y = np.column_stack([P, P * (P - 1), (10 - P) * (9 - P)])
    Y -= Y.mean(axis=0)
    x = 1.0 / (0.3 + 0.05 * P)
    with pytest.warns(CollinearControlWarning):
        rho = fit_rho(x, Y)
    assert np.count_nonzero(rho) == 2


def test_rho_matches_enumeration_1d():
    """Empirical rho at M=1e5 against the exact optimum (1D, N=6, eta=0.5)."""
    model = OneDModel.constant(3, 23)
    N, eta = 6, 0.5
    P = sample_counts(N, eta, 100_000, 21)
    marg = Marginals1D.of(model, N)
    Y = np.column_stack([y - e for y, e in zip(marg.surrogates(P), marg.expectations(eta))])
    x = model.g(P / N)
    rho1 = fit_rho(x, Y[:, :1])[0]
    assert rho1 == pytest.approx(exact_optimal_rho(model, N, eta, "d1")[0], rel=0.01)
    # the three 1D controls are affinely dependent, so only the fitted combination is identifiable
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearControlWarning)
        rho3 = fit_rho(x, Y)
    grid = np.arange(N + 1)
    Yg = np.column_stack(marg.surrogates(grid))
    fitted, exact = Yg @ rho3, Yg @ exact_optimal_rho(model, N, eta, "d3")
    w = count_weights(N, eta)
    fitted, exact = fitted - w @ fitted, exact - w @ exact
    assert np.sqrt(w @ (fitted - exact) ** 2) <= 0.02 * np.sqrt(w @ exact**2)


def test_rho_optimality(batch6):
    e = (0, 0)
    x = batch6.astar[:, 0, 0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearControlWarning)
        best = estimate(batch6, "CV3", e)
        objective = lambda r: np.mean((controlled_values(batch6, "CV3", r)[:, 0, 0] - x.mean()) ** 2)  # noqa: E731
        rho = np.array(best.rho)
        noise = best.variance * math.sqrt(2.0 / (batch6.M - 1))
        for scale in (0.9, 1.1):
            # the fitted rho minimizes its exact-centred objective exactly ...
            assert objective(rho * scale) >= objective(rho)
            # ... and the reported sample variance up to estimation noise
            other = estimate(batch6, "CV3", e, rho=rho * scale)
            assert other.variance >= best.variance - noise


# -- estimators ---------------------------------------------------------------------------------


def test_constant_samples_zero_variance(catalog4):
    model = make_checkerboard_model(3, 23, 0.0)
    batch = generate_batch(model, 4, 5, 1, r=2, catalog=catalog4)
    mc = estimate(batch, "MC")
    assert mc.variance == 0.0 and mc.half_width == 0.0
    cv1 = estimate(batch, "CV1")
    assert cv1.degenerate and cv1.variance == 0.0
    np.testing.assert_allclose(cv1.mean, catalog4.a.per[0, 0], rtol=1e-9)
    assert variance_ratio(mc, cv1) == math.inf


def test_all_defect_degenerate(catalog4):
    batch = generate_batch(make_checkerboard_model(3, 23, 1.0), 4, 4, 1, r=2, catalog=catalog4)
    rep = estimate(batch, "CV3")
    assert rep.degenerate and rep.variance == 0.0
    np.testing.assert_allclose(rep.mean, catalog4.c.per[0, 0], rtol=1e-9)


def test_cost_accounting(batch6, catalog6):
    cv1 = estimate(batch6, "CV1")
    assert cv1.cost == batch6.M + 1
    cv3 = estimate(batch6, "CV3")
    assert cv3.cost_offline == catalog6.a.offline_cost + catalog6.c.offline_cost
    assert estimate(batch6, "MC").cost == batch6.M


def test_half_width_formula(batch6):
    rep = estimate(batch6, "MC", (1, 1))
    assert rep.half_width == pytest.approx(1.96 * math.sqrt(rep.variance / rep.M))
    assert rep.variance == pytest.approx(np.var(batch6.astar[:, 1, 1], ddof=1))


def test_split_policy(batch6):
    rep = estimate(batch6, "CV1", rho="split")
    assert rep.M == batch6.M - batch6.M // 2


def test_variance_ratio_identity(batch6):
    mc = estimate(batch6, "MC")
    assert variance_ratio(mc, mc) == 1.0
    with pytest.raises(ValueError):
        variance_ratio(mc, estimate(batch6, "MC", (1, 1)))


def test_report_text_roundtrip(batch6):
    rep = estimate(batch6, "CV2", (0, 1))
    back = EstimatorReport.from_text(rep.to_text())
    assert back == rep


def test_weak_estimator(catalog6):
    rep = estimate_weak(catalog6, 0.05, order=1)
    assert rep.variance == 0.0 and rep.cost_offline == 1
    assert rep.mean == pytest.approx(catalog6.a.per[0, 0] + 0.05 * catalog6.a.bar1[0, 0])


def test_mc_mean_1d_against_enumeration():
    model = make_checkerboard_model(3, 23, 0.5, d=1)
    batch = generate_batch(model, 6, 400, 8, r=1)
    exact = float(np.dot(count_weights(6, 0.5), OneDModel.constant(3, 23).g(np.arange(7) / 6)))
    rep = estimate(batch, "MC")
    assert abs(rep.mean - exact) < 4 * math.sqrt(rep.variance / rep.M)


def test_unknown_kind(batch6):
    with pytest.raises(ValueError):
        estimate(batch6, "CV9")
    with pytest.raises(ValueError):
        estimate(batch6, "WEAK")


def test_expectations_from_catalog(catalog6):
    ex = surrogate_expectations(catalog6, 0.3)
    np.testing.assert_allclose(ex["y1"], 0.3 * catalog6.a.bar1)
    np.testing.assert_allclose(ex["c2"], 0.49 * catalog6.c.bar2)
