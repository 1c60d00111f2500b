import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caad.confidence import (
    DecisionThresholds,
    anomaly_probability,
    boundary_score,
    confidence,
    confidence_loss,
    make_confidence_head,
    prediction_probability,
)
from caad.exceptions import DataError


def test_prediction_probability_examples():
    assert prediction_probability(0.7, 0.7, 1.0) == 1.0
    assert prediction_probability(1.18, 0.0, 1.0) == pytest.approx(math.exp(-1.3924 / 2), rel=1e-12)
    assert prediction_probability(1.18, 0.0, 1.0) == pytest.approx(0.4985, abs=5e-5)
    assert prediction_probability(10.0, 0.0, 1.0) < 1e-20
    with pytest.raises(ValueError):
        prediction_probability(0.0, 0.0, 0.0)


def test_printed_and_squared_forms_differ_only_when_sigma_is_not_one():
    assert prediction_probability(1.3, 0, 1.0) == prediction_probability(1.3, 0, 1.0, squared_sigma=True)
    assert prediction_probability(1.3, 0, 2.0) == pytest.approx(math.exp(-1.69 / 4))
    assert prediction_probability(1.3, 0, 2.0, squared_sigma=True) == pytest.approx(math.exp(-1.69 / 8))


def test_anomaly_probability_examples():
    assert anomaly_probability(0.9, 0) == 0.9
    assert anomaly_probability(0.3, 1) == pytest.approx(0.7)
    assert anomaly_probability(1.0, 1) == 0.0


def test_confidence_loss_examples():
    assert confidence_loss(0.42, 0.42)[0] == 0.0
    assert confidence_loss(0.0, 1.0)[0] == 1.0
    assert confidence_loss(0.3, 0.8)[0] == pytest.approx(0.25, abs=1e-15)
    assert confidence_loss(0.3, 0.8)[1] == pytest.approx(-1.0)


def test_boundary_score_examples():
    assert boundary_score(0.5, 0.0, 1.0) == pytest.approx(math.sqrt(2 * math.log(2)), abs=1e-15)
    assert round(boundary_score(0.5, 0.0, 1.0), 2) == 1.18
    assert boundary_score(1.0, 0.4, 1.0) == 0.4
    assert boundary_score(0.25, 0.0, 1.0) == pytest.approx(1.6651, abs=5e-5)
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            boundary_score(bad)


@given(st.floats(-5, 5), st.floats(0, 10), st.floats(0.1, 4), st.booleans())
def test_probability_symmetric_and_decreasing(mu, d, sigma, sq):
    up = prediction_probability(mu + d, mu, sigma, sq)
    assert up == pytest.approx(prediction_probability(mu - d, mu, sigma, sq), rel=1e-12, abs=1e-300)
    assert 0.0 <= up <= 1.0
    further = prediction_probability(mu + d + 0.5, mu, sigma, sq)
    assert further <= up
    if up > 1e-300:
        assert further < up


@given(st.floats(-3, 3), st.floats(1e-3, 6), st.floats(0.2, 3), st.booleans())
def test_boundary_inverts_probability_above_mode(mu, d, sigma, sq):
    # closer to the mode than ~1e-3 the probability rounds towards 1 and the
    # inverse is ill-conditioned (error ~ sqrt(machine eps)); checked exactly at the mode below
    nu = mu + d
    p = prediction_probability(nu, mu, sigma, sq)
    assert boundary_score(prediction_probability(mu, mu, sigma, sq), mu, sigma, sq) == mu
    assert boundary_score(p, mu, sigma, sq) == pytest.approx(nu, abs=1e-10, rel=1e-10)


@given(st.floats(-20, 20))
def test_targets_complement_each_other(nu):
    p = prediction_probability(nu)
    g0, g1 = anomaly_probability(p, 0), anomaly_probability(p, 1)
    assert 0 <= g0 <= 1 and 0 <= g1 <= 1
    assert g0 + g1 == pytest.approx(1.0, abs=1e-15)


def test_default_thresholds():
    th = DecisionThresholds.derive()
    assert th.t_ano == pytest.approx(1.1774, abs=5e-4)
    assert th.t_conf == 0.9
    with pytest.raises(ValueError):
        DecisionThresholds(1.0, 1.5)


def test_zero_confidence_head_outputs_half():
    head = make_confidence_head(5, rng=0)
    for p in head.params:
        p[:] = 0.0
    assert confidence(head, np.ones(5)) == 0.5


def test_confidence_head_shape_and_oracle():
    rng = np.random.default_rng(11)
    head = make_confidence_head(4, rng=rng)
    assert [layer.out_dim for layer in head.layers] == [100, 100, 100, 100, 1]
    feats = rng.normal(size=(7, 4))
    a = feats
    for layer in head.layers[:-1]:
        a = np.maximum(a @ layer.weight.T + layer.bias, 0)
    last = head.layers[-1]
    expected = 1 / (1 + np.exp(-(a @ last.weight.T + last.bias)))
    np.testing.assert_allclose(confidence(head, feats), expected[:, 0], atol=1e-12)
    with pytest.raises(DataError):
        confidence(head, np.zeros(3))


def test_confidence_in_unit_interval():
    rng = np.random.default_rng(12)
    head = make_confidence_head(6, rng=rng)
    out = confidence(head, rng.normal(scale=50, size=(1000, 6)))
    assert np.all((out >= 0) & (out <= 1))
