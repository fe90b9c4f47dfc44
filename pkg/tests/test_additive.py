import itertools
import json

import numpy as np
import pytest

from platform_collusion import ExternalityMatrix
from platform_collusion.additive import (
    BIVARIATE_TERMS,
    FEATURES,
    UNIVARIATE_TERMS,
    AdditiveModel,
    SmootherConfig,
    StepComponent,
    average_over_orders,
    cv_folds_for,
    evaluate,
    fit_sequence,
    fit_univariate_sequence,
    r_squared,
    sample_phi,
    sample_phis,
    tune_term,
    write_component_curves,
)
from platform_collusion.errors import TooFewSamples

FAST = SmootherConfig(n_estimators=40)


def col(name):
    return FEATURES.index(name)


def test_sampled_entries_are_standard_normal():
    draws = sample_phis(np.random.default_rng(0), 100_000)
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
    assert np.all((draws.var(axis=0) > 0.97) & (draws.var(axis=0) < 1.03))
    corr = np.corrcoef(draws.T)
    assert np.all(np.abs(corr[np.triu_indices(4, 1)]) < 0.02)
    assert isinstance(sample_phi(np.random.default_rng(1)), ExternalityMatrix)


def test_sequence_telescopes_exactly():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 4))
    y = np.tanh(X[:, 0]) + 0.3 * X[:, 3] + rng.normal(0, 0.1, 200)
    fit = fit_univariate_sequence(X, y, ("ss", "bb", "sb", "bs"), FAST)
    total = sum(fit.fitted.values()) + fit.residual
    np.testing.assert_allclose(total, y - y.mean(), rtol=0, atol=1e-12)
    assert fit.order == (("ss",), ("bb",), ("sb",), ("bs",))


def test_univariate_recovers_single_effect():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(1000, 4))
    g = 0.3 * np.tanh(2 * X[:, col("bb")])
    model = AdditiveModel(fit_bivariate=False).fit(X, 0.25 + g)
    fitted = model.component("bb", X[:, [col("bb")]])
    assert r_squared(g - g.mean(), fitted) > 0.9
    for name in ("ss", "bs", "sb"):
        assert np.abs(model.component(name, X[:, [col(name)]])).max() < 0.05


def test_zero_variance_response_gives_zero_components():
    X = np.random.default_rng(3).normal(size=(60, 4))
    model = AdditiveModel(n_estimators=30, n_bivariate_perms=3).fit(X, np.full(60, 0.42))
    assert model.delta0_ == pytest.approx(0.42)
    for comp in model.components_.values():
        assert np.abs(comp.table).max() < 1e-12
    np.testing.assert_allclose(model.predict(X), 0.42)


def test_order_invariance_on_orthogonal_data():
    # balanced factorial design: every level of one entry meets every level of the others
    levels = np.linspace(-2, 2, 7)
    X = np.array(list(itertools.product(levels, repeat=4)))
    y = 0.2 * np.tanh(X[:, col("bb")]) - 0.15 * np.tanh(X[:, col("ss")])
    y = y - y.mean()
    cfg = SmootherConfig(n_estimators=100, min_samples_leaf=25)
    a = fit_univariate_sequence(X, y, ("bb", "ss", "bs", "sb"), cfg)
    b = fit_univariate_sequence(X, y, ("sb", "bs", "ss", "bb"), cfg)
    for name in ("bb", "ss", "bs", "sb"):
        assert np.abs(a.fitted[name] - b.fitted[name]).max() < 0.05


def test_prefix_averaging_equals_explicit_average():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 4))
    y = X[:, 0] * X[:, 3] + np.sin(X[:, 1]) + rng.normal(0, 0.2, 120)
    y = y - y.mean()
    terms = BIVARIATE_TERMS[:3]
    orders = list(itertools.permutations(range(3)))
    avg = average_over_orders(X, y, terms, orders, FAST)
    for t in terms:
        name = "_".join(t)
        cols = [col(f) for f in t]
        brute = np.mean([fit_sequence(X, y, [terms[i] for i in o], FAST).fitted[name] for o in orders], axis=0)
        np.testing.assert_allclose(avg[name](X[:, cols]), brute, atol=1e-12)
        probe = rng.normal(size=(50, 2)) * 2
        brute_probe = np.mean([fit_sequence(X, y, [terms[i] for i in o], FAST).components[name].predict(probe)
                               for o in orders], axis=0)
        np.testing.assert_allclose(avg[name](probe), brute_probe, atol=1e-12)


def test_averaged_components_telescope_at_training_points():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(150, 4))
    y = np.tanh(X[:, 0]) - X[:, 2] ** 2 / 4 + rng.normal(0, 0.1, 150)
    y = y - y.mean()
    orders = list(itertools.permutations(range(4)))
    avg = average_over_orders(X, y, UNIVARIATE_TERMS, orders, FAST)
    mean_resid = np.mean([fit_sequence(X, y, [UNIVARIATE_TERMS[i] for i in o], FAST).residual for o in orders],
                         axis=0)
    recon = sum(avg[t[0]](X[:, [col(t[0])]]) for t in UNIVARIATE_TERMS) + mean_resid
    np.testing.assert_allclose(recon, y, rtol=0, atol=1e-12)


def test_order_listing_does_not_matter():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(80, 4))
    y = rng.normal(size=80)
    orders = [(2, 0, 1, 3), (0, 1, 2, 3), (3, 2, 1, 0)]
    a = average_over_orders(X, y, UNIVARIATE_TERMS, orders, FAST)
    b = average_over_orders(X, y, UNIVARIATE_TERMS, orders[::-1], FAST)
    for name in a:
        assert a[name].table.tobytes() == b[name].table.tobytes()


def test_step_component_compression_keeps_values():
    rng = np.random.default_rng(8)
    edges = [np.sort(rng.normal(size=9)), np.sort(rng.normal(size=6))]
    table = np.repeat(np.repeat(rng.normal(size=(5, 7)), 2, axis=0)[:10], 1, axis=1)
    comp = StepComponent(("bb", "ss"), edges, table)
    small = comp.compressed()
    probe = rng.normal(size=(300, 2)) * 2
    np.testing.assert_array_equal(comp(probe), small(probe))
    assert small.table.size <= comp.table.size
    back = StepComponent.from_dict(json.loads(json.dumps(small.to_dict())))
    np.testing.assert_array_equal(back(probe), small(probe))


def test_cross_validation_folds_ignore_row_order():
    rng = np.random.default_rng(9)
    X, y = rng.normal(size=(50, 2)), rng.normal(size=50)
    perm = rng.permutation(50)
    np.testing.assert_array_equal(cv_folds_for(X, y, 5)[perm], cv_folds_for(X[perm], y[perm], 5))


def test_tuning_prefers_few_rounds_on_pure_noise():
    rng = np.random.default_rng(10)
    X, y = rng.normal(size=(400, 4)), rng.normal(size=400)
    leaf, rounds, err = tune_term(X, y, ("bb",), SmootherConfig(n_estimators=100), (10, 50))
    assert rounds < 20
    assert err > 0.9 * y.var()


def test_model_linear_in_components_and_evaluate():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(300, 4))
    y = 0.3 + 0.1 * np.tanh(X[:, 0]) + 0.05 * X[:, 1] * X[:, 3]
    model = AdditiveModel(n_estimators=50, n_univariate_perms=4, n_bivariate_perms=4).fit(X, y)
    assert r_squared(y, model.predict(X)) > 0
    phi = ExternalityMatrix(0.1, -0.2, 0.3, 0.4)
    base = evaluate(model, phi)
    model.components_["ss"] = model.components_["ss"].shifted(0.5)
    assert evaluate(model, phi) == pytest.approx(base + 0.5, abs=1e-12)
    for name in list(model.components_):
        comp = model.components_[name]
        model.components_[name] = StepComponent(comp.term, comp.edges, np.zeros_like(comp.table))
    assert evaluate(model, phi) == model.delta0_


def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    X = rng.normal(size=(200, 4))
    y = np.tanh(X[:, 2]) + rng.normal(0, 0.1, 200)
    model = AdditiveModel(n_estimators=30, n_univariate_perms=3, n_bivariate_perms=5).fit(X, y)
    assert len(model.univariate_orders_) == 3 and len(model.bivariate_orders_) == 5
    model.save(tmp_path / "m.json")
    back = AdditiveModel.load(tmp_path / "m.json")
    probe = rng.normal(size=(40, 4))
    np.testing.assert_array_equal(back.predict(probe), model.predict(probe))
    assert back.tuning_ == model.tuning_
    paths = write_component_curves(model, tmp_path / "curves", n_points=11, n_grid=5)
    assert len(paths) == 10
    assert (tmp_path / "curves" / "component_bb.csv").read_text().startswith("phi_bb,value")


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        AdditiveModel().fit(np.zeros((5, 4)), np.zeros(5))
    with pytest.raises(ValueError):
        fit_univariate_sequence(np.zeros((20, 4)), np.zeros(20), ("bb", "bb", "bs", "sb"))
