import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from branchrl import sac
from branchrl.bounds import predict_current_error
from branchrl.dynamics import ExactModel, ModelConfig
from branchrl.envs import make_env
from branchrl.probe import (ProbeConfig, fit_slope, gaussian_policy_kl, model_fingerprint, pearson,
                            run_exploitation_probe, run_generalization_probe)

SMALL_SAC = sac.SacConfig(hidden=(16, 16))


def ols_with_se(x, y):
    """Textbook OLS slope and its standard error."""
    x, y = np.asarray(x), np.asarray(y)
    xc = x - x.mean()
    slope = (xc * (y - y.mean())).sum() / (xc * xc).sum()
    intercept = y.mean() - slope * x.mean()
    resid = y - intercept - slope * x
    se = np.sqrt((resid ** 2).sum() / (len(x) - 2) / (xc * xc).sum())
    return slope, intercept, se


def test_fit_slope_exact_line():
    x = np.linspace(0, 1, 7)
    g = fit_slope([(a, 0.05 + 0.2 * a) for a in x])
    assert g.intercept == pytest.approx(0.05, abs=1e-12) and g.slope == pytest.approx(0.2, abs=1e-12)


def test_fit_slope_constant_and_degenerate():
    g = fit_slope([(0.1, 0.3), (0.2, 0.3), (0.5, 0.3)])
    assert g.slope == 0 and g.intercept == 0.3
    with pytest.raises(ValueError):
        fit_slope([(0.1, 1.0), (0.2, 2.0)])
    with pytest.raises(ValueError):
        fit_slope([(0.1, 1.0), (0.1, 2.0), (0.1, 3.0)])
    assert fit_slope([(0, -1.0), (1, 0.0), (2, 1.0)]).intercept == 0.0  # clamped


def test_fit_slope_noisy_line_within_three_se():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 2, 100)
    y = 0.1 + 0.4 * x + rng.normal(0, 0.05, 100)
    g = fit_slope(list(zip(x, y)))
    slope, _, se = ols_with_se(x, y)
    assert g.slope == pytest.approx(slope, abs=1e-12)
    assert abs(g.slope - 0.4) < 3 * se


def test_fit_slope_window():
    pts = [(0.1, 0.1), (0.2, 0.2), (0.3, 0.3), (2.0, 10.0)]
    assert fit_slope(pts, kl_max=0.5).slope == pytest.approx(1.0)
    assert fit_slope(pts[:2] + pts[3:], kl_max=0.5).slope > 1.0  # too few inside: fit everything


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_fit_slope_scale_equivariant(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, 10)
    y = 1.0 + 0.5 * x + rng.normal(0, 0.1, 10)
    a = fit_slope(list(zip(x, y)))
    b = fit_slope(list(zip(x, c * y)))
    assert b.intercept == pytest.approx(c * a.intercept, rel=1e-9)
    assert b.slope == pytest.approx(c * a.slope, rel=1e-9, abs=1e-12)


def test_gaussian_kl():
    rng = np.random.default_rng(1)
    a = sac.SacAgent(2, 1, [-1], [1], SMALL_SAC, rng)
    obs = rng.normal(size=(10, 2))
    assert gaussian_policy_kl(a, a, obs) == 0.0
    b = sac.SacAgent(2, 1, [-1], [1], SMALL_SAC, rng)
    for agent, mu, ls in ((a, 0.0, 0.0), (b, 1.0, np.log(2.0))):
        agent.actor.weights[-1][...] = 0
        agent.actor.biases[-1][...] = [mu, ls]
    # Monte-Carlo oracle on the (soft-clamped) Gaussians actually produced
    (m1, l1), (m2, l2) = [(float(x[0, 0]), float(y[0, 0])) for x, y in (a.gaussian_params(obs), b.gaussian_params(obs))]
    z = np.random.default_rng(2).normal(m1, np.exp(l1), 400_000)
    ratio = stats.norm.logpdf(z, m1, np.exp(l1)) - stats.norm.logpdf(z, m2, np.exp(l2))
    assert abs(gaussian_policy_kl(a, b, obs) - ratio.mean()) < 3 * ratio.std() / np.sqrt(z.size)
    assert gaussian_policy_kl(a, b, obs) > 0.4


def test_pearson_degenerate():
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    assert pearson([1, 2, 3], [2, 4, 6.5]) == pytest.approx(np.corrcoef([1, 2, 3], [2, 4, 6.5])[0, 1])


def test_exploitation_exact_model_is_perfectly_correlated():
    env = make_env("pendulum")
    agent = sac.SacAgent(3, 1, [-2], [2], SMALL_SAC, np.random.default_rng(2))
    before = model_fingerprint(agent)
    rep = run_exploitation_probe(env, ExactModel(env), agent, 6, np.random.default_rng(3))
    assert rep.pearson_r == pytest.approx(1.0, abs=1e-9)
    assert abs(rep.mean_gap) < 1e-6 and len(rep.pairs) == 6
    assert model_fingerprint(agent) == before
    with pytest.raises(ValueError):
        run_exploitation_probe(env, ExactModel(env), agent, 1, np.random.default_rng(3))


def test_exploitation_constant_returns_flag_undefined():
    env = make_env("pointmass", horizon=5)
    agent = sac.SacAgent(4, 2, [-1, -1], [1, 1], SMALL_SAC, np.random.default_rng(4))

    class Frozen:
        """Model that keeps the state at the origin with zero reward."""
        def sample_step(self, obs, act, rng):
            return np.zeros_like(obs), np.zeros(len(obs))
    rep = run_exploitation_probe(env, Frozen(), agent, 5, np.random.default_rng(5))
    assert rep.pearson_r is None and not rep.correlation_defined


def test_generalization_zero_steps_gives_intercept():
    env = make_env("lingauss", dim=1)
    cfg = ProbeConfig(train_set_sizes=(200,), pretrain_steps=50, probe_steps=0, eval_episodes=1)
    curve = run_generalization_probe(env, cfg, seed=0, sac_config=SMALL_SAC,
                                     model_config=ModelConfig(hidden=(16,), max_epochs=20), ensemble_size=2)
    assert len(curve.points) == 1
    kl, err, size = curve.points[0]
    assert kl == pytest.approx(0.0, abs=1e-12) and size == 200
    assert predict_current_error(curve.fitted, 0.0) == pytest.approx(err)


def test_generalization_exact_model_slope_near_zero():
    env = make_env("lingauss", dim=1)
    cfg = ProbeConfig(train_set_sizes=(200,), pretrain_steps=50, probe_steps=300, record_every=25,
                      eval_episodes=2, kl_window=1e9)
    curve = run_generalization_probe(env, cfg, seed=1, sac_config=sac.SacConfig(hidden=(16, 16), actor_lr=3e-3),
                                     frozen_model=ExactModel(env))
    kl = np.array([p[0] for p in curve.points])
    err = np.array([p[1] for p in curve.points])
    assert np.all(kl >= 0) and np.ptp(kl) > 0
    slope, _, se = ols_with_se(kl, err)
    assert curve.fitted.slope == pytest.approx(slope, abs=1e-9)
    assert abs(slope) < 2 * se
    assert np.all(np.abs(err - 0.01) < 0.003)  # MSE of the exact mean is the noise variance


def test_probe_config_validation():
    for bad in (dict(train_set_sizes=()), dict(record_every=0), dict(error_metric="mae")):
        with pytest.raises(ValueError):
            ProbeConfig(**bad)
