import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gwclass.errors import ConfigError
from gwclass.linear import fit_binary_logistic, fit_multinomial_logistic
from gwclass.synth import SynthSpec, field_value, generate, write_ground_truth_csv


def test_bit_reproducible(tmp_path):
    spec = SynthSpec(n_units=120, n_classes=3, n_variables=4, coefficient_field="radial",
                     redundancy_plan=((1, 0.9),), seed=5)
    a, ta = generate(spec)
    b, tb = generate(spec)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.coords, b.coords)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(ta.coefficients, tb.coefficients)
    write_ground_truth_csv(a, ta, tmp_path / "a.csv")
    write_ground_truth_csv(b, tb, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c, _ = generate(SynthSpec(n_units=120, n_classes=3, n_variables=4, seed=6))
    assert not np.array_equal(a.coords, c.coords)


def test_constant_field_global_fit_recovers_signs():
    base = ((0.0, 0.0, 0.0), (1.5, -1.0, 0.8), (-1.2, 0.9, 1.5))
    ds, truth = generate(SynthSpec(n_units=3000, n_classes=3, n_variables=3,
                                   base_coefficients=base, seed=1))
    m = fit_multinomial_logistic(ds.features, ds.labels, l2_lambda=0.0, max_iter=2000)
    true = np.asarray(base) - np.mean(base, axis=0)
    # centred coefficients near zero have no reliable sign
    clear = np.abs(true) > 0.25
    assert np.array_equal(np.sign(m.coefficients[clear]), np.sign(true[clear]))
    np.testing.assert_allclose(m.coefficients, true, atol=0.15)
    assert np.ptp(truth.coefficients[:, :, :3], axis=0).max() == 0


def test_sign_flip_split_sample_slopes():
    ds, _ = generate(SynthSpec(n_units=3000, n_classes=2, n_variables=2,
                               coefficient_field=(("constant", "constant"),
                                                  ("east_west_sign_flip", "constant")),
                               base_coefficients=((0.0, 0.0), (2.0, 0.0)), seed=2))
    west = ds.coords[:, 0] < 5000
    mw = fit_binary_logistic(ds.features[west], ds.labels[west])
    me = fit_binary_logistic(ds.features[~west], ds.labels[~west])
    assert mw.coefficients[0] > 0 > me.coefficients[0]


def test_perfect_clone():
    ds, truth = generate(SynthSpec(n_units=200, n_variables=3, redundancy_plan=((2, 1.0),),
                                   seed=3))
    assert ds.variable_names == ("x0", "x1", "x2", "x3")
    assert np.corrcoef(ds.features[:, 2], ds.features[:, 3])[0, 1] >= 0.999
    assert truth.clones == [("x3", "x2", 1.0)]
    # clones carry no signal
    assert np.all(truth.coefficients[:, :, 3] == 0)


def test_factor_structure_correlations():
    ds, _ = generate(SynthSpec(n_units=20000, n_variables=6, n_latent=2, loading=0.8, seed=4))
    R = np.corrcoef(ds.features.T)
    assert R[0, 2] == pytest.approx(0.64, abs=0.03)   # same block
    assert R[0, 1] == pytest.approx(0.0, abs=0.03)    # different blocks


@pytest.mark.parametrize("seed", range(5))
def test_label_marginals_within_three_se(seed):
    ds, truth = generate(SynthSpec(n_units=2000, n_classes=4, n_variables=3,
                                   coefficient_field="linear_gradient", seed=seed))
    n = ds.n_units
    expected = truth.probabilities.sum(axis=0)
    se = np.sqrt(np.sum(truth.probabilities * (1 - truth.probabilities), axis=0))
    observed = np.bincount(ds.labels, minlength=4)
    assert np.all(np.abs(observed - expected) < 3 * se)
    assert truth.probabilities.shape == (n, 4)


def test_field_values():
    xy = np.array([[0.0, 5000.0], [2500.0, 5000.0], [5000.0, 5000.0], [10000.0, 0.0]])
    np.testing.assert_array_equal(field_value("constant", xy, 1e4), 1.0)
    np.testing.assert_allclose(field_value("linear_gradient", xy, 1e4), [-1, -0.5, 0, 1])
    np.testing.assert_array_equal(field_value("east_west_sign_flip", xy, 1e4), [1, 1, -1, -1])
    r = field_value("radial", xy, 1e4)
    assert r[2] == 1.0 and np.all(np.diff(r[:3]) > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_probabilities_valid(seed):
    _, truth = generate(SynthSpec(n_units=60, n_classes=3, n_variables=2,
                                  coefficient_field="radial", noise_sd=0.5, seed=seed))
    np.testing.assert_allclose(truth.probabilities.sum(axis=1), 1, atol=1e-12)


def test_synthspec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(n_units=10)
    with pytest.raises(ConfigError):
        SynthSpec(n_classes=1)
    with pytest.raises(ConfigError):
        SynthSpec(n_variables=0)
    with pytest.raises(ConfigError):
        SynthSpec(redundancy_plan=((0, 1.5),))
    with pytest.raises(ConfigError):
        SynthSpec(redundancy_plan=((9, 0.5),))
    with pytest.raises(ConfigError):
        SynthSpec(coefficient_field="spiral")
    with pytest.raises(ConfigError):
        SynthSpec(n_classes=2, n_variables=2, coefficient_field=(("constant",),))


def test_ground_truth_csv(tmp_path):
    ds, truth = generate(SynthSpec(n_units=50, n_classes=2, n_variables=2, seed=0))
    path = tmp_path / "gt.csv"
    write_ground_truth_csv(ds, truth, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "unit_id,class,variable,true_coefficient"
    assert len(lines) == 1 + 50 * 2 * 2
