"""Scenario validation, mark laws, serialization."""

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schedfilt import model
from schedfilt.errors import (
    HorizonTooShort,
    NegativeDt,
    NonIncreasingTimes,
    NonPSDCovariance,
    ZeroConditionalMass,
)
from schedfilt.presets import PRESETS, build_preset


def _base_config(**over):
    cfg = PRESETS["ou_kalman"]()
    return dataclasses.replace(cfg, **over)


# ---------------------------------------------------------------------------
# validation

def test_presets_all_validate():
    for name in PRESETS:
        scn = build_preset(name)
        assert scn.m >= 1 and scn.n >= 1
        assert scn.config.preset == name


def test_rejects_negative_dt():
    with pytest.raises(NegativeDt):
        model.validate(_base_config(dt=-0.001))


def test_rejects_nonincreasing_schedule():
    bad = dataclasses.replace(_base_config().schedule, times=(0.5, 0.5, 1.0))
    with pytest.raises(NonIncreasingTimes):
        model.validate(_base_config(schedule=bad))


def test_rejects_horizon_before_first_event():
    with pytest.raises(HorizonTooShort):
        model.validate(_base_config(horizon=0.25))


def test_rejects_non_psd_mark_covariance():
    cfg = _base_config()
    bad_law = dataclasses.replace(cfg.model.jump_law, kind="gaussian_joint", q=None, r=None,
                                  cov=((1.0, 2.0), (2.0, 1.0)))
    with pytest.raises(NonPSDCovariance):
        model.validate(_base_config(model=dataclasses.replace(cfg.model, jump_law=bad_law)))


def test_with_overrides_revalidates():
    scn = build_preset("ou_kalman")
    scn2 = scn.with_overrides(seed=99, n_particles=123)
    assert scn2.seed == 99
    assert scn2.filters.n_particles == 123
    assert scn.seed == 1234  # original untouched


# ---------------------------------------------------------------------------
# mark laws

def test_gaussian_product_moments(rng):
    law = build_preset("ou_kalman").jump_law
    xi, eta = law.sample_marks(rng, 200_000)
    assert abs(float(np.mean(xi)) ) < 3 * 0.2 / np.sqrt(200_000) * 1.5
    assert float(np.var(xi)) == pytest.approx(0.04, rel=0.02)
    assert float(np.var(eta)) == pytest.approx(0.01, rel=0.02)
    assert abs(float(np.mean(xi[:, 0] * eta[:, 0]))) < 3 * np.sqrt(0.04 * 0.01 / 200_000)


def test_joint_conditional_closed_form():
    # cov [[1, .5], [.5, 1]], eta0 = 1: xi | eta ~ N(0.5, 0.75)
    spec = model.JumpLawSpec(kind="gaussian_joint", cov=((1.0, 0.5), (0.5, 1.0)))
    law = model.JumpLaw(spec, m=1, n=1)
    cond = law.conditional_xi(np.array([1.0]))
    assert float(cond.mean[0]) == pytest.approx(0.5, abs=1e-12)
    assert float(cond.cov[0, 0]) == pytest.approx(0.75, abs=1e-12)


def test_joint_conditional_matches_rejection_oracle(rng):
    # brute-force check: keep joint samples with eta within a narrow band
    # around eta0 and compare the surviving xi law to the analytic one
    spec = model.JumpLawSpec(kind="gaussian_joint", cov=((1.0, 0.5), (0.5, 1.0)))
    law = model.JumpLaw(spec, m=1, n=1)
    xi, eta = law.sample_marks(rng, 2_000_000)
    band = np.abs(eta[:, 0] - 1.0) < 0.01
    kept = xi[band, 0]
    assert kept.size > 5000
    se_mean = np.sqrt(0.75 / kept.size)
    assert float(np.mean(kept)) == pytest.approx(0.5, abs=4 * se_mean + 5e-3)
    assert float(np.var(kept)) == pytest.approx(0.75, rel=0.08)


def test_joint_sample_given_eta_distribution(rng):
    spec = model.JumpLawSpec(kind="gaussian_joint", cov=((1.0, 0.5), (0.5, 1.0)))
    law = model.JumpLaw(spec, m=1, n=1)
    eta_hat = np.full((100_000, 1), 1.0)
    draws = law.sample_xi_given_eta(rng, eta_hat)[:, 0]
    assert float(np.mean(draws)) == pytest.approx(0.5, abs=4 * np.sqrt(0.75 / draws.size))
    assert float(np.var(draws)) == pytest.approx(0.75, rel=0.05)


def test_marginal_xi_ks_distance(rng):
    # marginalizing the conditional draw over eta must recover the xi marginal
    spec = model.JumpLawSpec(kind="gaussian_joint", cov=((0.6, 0.3), (0.3, 0.8)))
    law = model.JumpLaw(spec, m=1, n=1)
    _, eta = law.sample_marks(rng, 40_000)
    via_cond = law.sample_xi_given_eta(rng, eta)[:, 0]
    direct, _ = law.sample_marks(rng, 40_000)
    a, b = np.sort(via_cond), np.sort(direct[:, 0])
    grid = np.linspace(-3, 3, 601)
    ks = np.max(np.abs(
        np.searchsorted(a, grid) / a.size - np.searchsorted(b, grid) / b.size
    ))
    assert ks < 0.02


def test_discrete_conditioning_matches_enumeration():
    pts = ((1.0, 0.5), (-1.0, 0.5), (0.0, -0.5))
    probs = (0.2, 0.3, 0.5)
    spec = model.JumpLawSpec(kind="discrete", points=pts, probs=probs)
    law = model.JumpLaw(spec, m=1, n=1)
    cond = law.conditional_xi(np.array([0.5]))
    # atoms 0 and 1 match eta = 0.5; renormalized to (0.4, 0.6)
    np.testing.assert_allclose(np.sort(cond.probs), [0.4, 0.6])
    with pytest.raises(ZeroConditionalMass):
        law.conditional_xi(np.array([2.0]))


def test_discrete_eta_is_log_mass_not_density():
    spec = model.JumpLawSpec(kind="discrete", points=((0.0, 0.1),), probs=(1.0,))
    law = model.JumpLaw(spec, m=1, n=1)
    assert not law.eta_has_density
    vals = law.eta_log_density(np.array([[0.1], [0.7]]))
    assert vals[0] == pytest.approx(0.0, abs=1e-12)  # log mass of the only atom
    assert vals[1] == -np.inf


def test_degenerate_law_xi_is_zero(rng):
    spec = model.JumpLawSpec(kind="degenerate_xi_zero", r=((0.01,),))
    law = model.JumpLaw(spec, m=1, n=1)
    assert law.xi_is_zero()
    xi, eta = law.sample_marks(rng, 1000)
    assert np.all(xi == 0.0)
    assert float(np.var(eta)) == pytest.approx(0.01, rel=0.2)


def test_eta_log_density_is_normal_logpdf():
    law = build_preset("ou_kalman").jump_law
    e = np.array([[0.0], [0.1], [-0.3]])
    expected = -0.5 * e[:, 0] ** 2 / 0.01 - 0.5 * np.log(2 * np.pi * 0.01)
    np.testing.assert_allclose(law.eta_log_density(e), expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# serialization

def test_round_trip_all_presets_bit_exact():
    for name in PRESETS:
        cfg = PRESETS[name]()
        text = model.scenario_to_json(cfg)
        back = model.scenario_from_json(text)
        assert back == cfg
        assert model.scenario_to_json(back) == text


def test_json_full_precision():
    cfg = _base_config(dt=0.1 + 1e-16, horizon=2.0000000000000004)
    back = model.scenario_from_json(model.scenario_to_json(cfg))
    assert back.dt == cfg.dt
    assert back.horizon == cfg.horizon


def test_json_is_plain_data():
    text = model.scenario_to_json(_base_config())
    data = json.loads(text)
    assert set(data) == {"model", "schedule", "horizon", "dt", "seed", "filters", "preset"}


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    dt=st.floats(1e-4, 0.01, allow_nan=False),
    q=st.floats(1e-4, 1.0),
    r=st.floats(1e-4, 1.0),
)
def test_round_trip_random_linear_configs(seed, dt, q, r):
    cfg = _base_config(seed=seed, dt=dt)
    law = dataclasses.replace(cfg.model.jump_law, q=((q,),), r=((r,),))
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, jump_law=law))
    assert model.scenario_from_json(model.scenario_to_json(cfg)) == cfg
