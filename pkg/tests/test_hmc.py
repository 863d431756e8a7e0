import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

import egp.hmc as hmc_module
from egp.errors import NumericalError
from egp.gp import fit_laplace, fit_regression, predict, predict_prob
from egp.hmc import (
    GammaPrior,
    HmcConfig,
    LogPosterior,
    chain_predict,
    experiment_defaults,
    hmc_sample,
    leapfrog,
    length_transform,
    map_estimate,
)
from egp.kernels import INTRINSIC, MATERN, SQEXP
from egp.manifolds import Sphere
from egp.simgen import gen_sphere_regression

from conftest import sample

PRIOR_ONLY = HmcConfig(n_iter=10, burn_in=0, sampled=("magnitude", "lengthscale"),
                       priors={"magnitude": GammaPrior(10, 10),
                               "lengthscale": GammaPrior(10, 10)},
                       fixed={"noise_var": 0.1})


def _gaussian(q):
    return -0.5 * float(q @ q), -q


def _regression_target(n=20, seed=0, family=SQEXP, nu=None, **cfg):
    pts = sample(Sphere(2), n, seed=seed)
    y = np.array([math.sin(2 * p.coords[0]) + 0.1 * p.coords[1] for p in pts])
    return LogPosterior(pts, y, "regression", family, HmcConfig(**cfg), nu=nu)


def test_gamma_prior_validation_and_density():
    with pytest.raises(ValueError):
        GammaPrior(0, 1)
    g = GammaPrior(2.5, 2)
    x = np.linspace(0.1, 5, 7)
    np.testing.assert_allclose(g.logpdf(x), stats.gamma(2.5, scale=0.5).logpdf(x), atol=1e-12)
    np.testing.assert_allclose(g.cdf(x), stats.gamma(2.5, scale=0.5).cdf(x), atol=1e-12)
    assert g.mean == 1.25


def test_jacobian_change_of_variables():
    g = GammaPrior(10, 10)
    for eta in np.linspace(-2, 1.5, 30):
        v, _ = g.log_density_log(eta)
        assert v == pytest.approx(float(g.logpdf(math.exp(eta))) + eta, abs=1e-10)


@pytest.mark.parametrize("power, scale", [(1, 1.0), (3, 1.0), (-0.5, 1 / math.sqrt(2)), (-1, 1.0)])
def test_transformed_prior_is_normalised(power, scale):
    g = GammaPrior(2.5, 2)
    total, _ = integrate.quad(lambda e: math.exp(g.log_density_log(e, power, scale)[0]), -60, 60,
                              limit=400)
    assert total == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("power, scale", [(1, 1.0), (2, 1.0), (-0.5, 0.7)])
def test_prior_gradient(power, scale):
    g = GammaPrior(0.5, 2)
    h = 1e-6
    for eta in (-1.0, 0.2, 1.1):
        _, d = g.log_density_log(eta, power, scale)
        fd = (g.log_density_log(eta + h, power, scale)[0]
              - g.log_density_log(eta - h, power, scale)[0]) / (2 * h)
        assert d == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_flat_data_mode_at_prior_ratio():
    for a, b in ((10, 10), (2.5, 2), (50, 1)):
        cfg = HmcConfig(n_iter=2, burn_in=0, sampled=("magnitude",),
                        priors={"magnitude": GammaPrior(a, b)})
        target = LogPosterior([], [], "regression", SQEXP, cfg)
        grid = np.linspace(math.log(a / b) - 1, math.log(a / b) + 1, 20001)
        vals = [target(np.array([e]))[0] for e in grid]
        assert math.exp(grid[int(np.argmax(vals))]) == pytest.approx(a / b, rel=1e-3)
        assert map_estimate(target)[0] == pytest.approx(a / b, rel=1e-6)


def test_length_transform():
    assert length_transform(SQEXP) == (1 / math.sqrt(2), -0.5)
    assert length_transform(INTRINSIC) == (1.0, -1.0)
    assert length_transform(MATERN) == (1.0, 1.0)
    # with the prior on l = 1/sqrt(2 beta) the prior mode of l is at a/b
    cfg = HmcConfig(n_iter=2, burn_in=0, sampled=("lengthscale",),
                    priors={"lengthscale": GammaPrior(4, 2)}, lengthscale_prior_on="length")
    target = LogPosterior([], [], "regression", SQEXP, cfg)
    beta = map_estimate(target)[0]
    assert 1 / math.sqrt(2 * beta) == pytest.approx(2.0, rel=1e-6)
    with pytest.raises(ValueError):
        HmcConfig(beta_power_d=2, lengthscale_prior_on="length")


@pytest.mark.parametrize("family, nu", [(SQEXP, None), (MATERN, 2.5), (INTRINSIC, None)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_log_posterior_gradient(family, nu, seed):
    target = _regression_target(seed=seed, family=family, nu=nu, beta_power_d=None)
    rng = np.random.default_rng(seed)
    eta = target.initial() + 0.3 * rng.standard_normal(3)
    _, g = target(eta)
    h = 1e-6
    fd = np.array([(target(eta + h * e)[0] - target(eta - h * e)[0]) / (2 * h) for e in np.eye(3)])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


def test_beta_power_prior_gradient():
    target = _regression_target(beta_power_d=2)
    eta = target.initial()
    _, g = target(eta)
    h = 1e-6
    fd = np.array([(target(eta + h * e)[0] - target(eta - h * e)[0]) / (2 * h) for e in np.eye(3)])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


def test_classification_gradient_is_finite_difference():
    pts = sample(Sphere(2), 15, seed=3)
    lab = (np.array([p.coords[0] for p in pts]) > 0).astype(float)
    cfg = experiment_defaults("spd_classification")
    target = LogPosterior(pts, lab, "classification", SQEXP, cfg)
    assert target.gradient_method == "finite-difference"
    v, g = target(np.array([0.0, 0.0]))
    assert math.isfinite(v) and g.shape == (2,)
    with pytest.raises(ValueError):
        LogPosterior(pts, lab, "classification", SQEXP, HmcConfig())


def test_failure_is_minus_infinity(monkeypatch):
    pts = sample(Sphere(2), 2)
    cfg = HmcConfig(sampled=("magnitude", "lengthscale"), fixed={"noise_var": 0.1})
    with pytest.raises(ValueError):
        LogPosterior(pts, [0.0, np.nan], "regression", SQEXP, cfg)
    target = LogPosterior(pts, [0.0, 1.0], "regression", SQEXP, cfg)

    def singular(*args, **kwargs):
        raise NumericalError("kernel matrix numerically singular")

    monkeypatch.setattr(hmc_module, "lml_from_sqdist", singular)
    v, g = target(np.zeros(2))
    assert v == -math.inf and np.all(g == 0)
    monkeypatch.undo()
    chain = hmc_sample(target, cfg.replace(n_iter=5, burn_in=0))
    assert np.all(np.isfinite(chain.samples))
    assert target(np.array([800.0, 0.0]))[0] == -math.inf


def test_config_validation():
    with pytest.raises(ValueError):
        HmcConfig(n_iter=10, burn_in=10)
    with pytest.raises(ValueError):
        HmcConfig(step_size=0)
    with pytest.raises(ValueError):
        HmcConfig(sampled=("magnitude", "alpha"))
    with pytest.raises(ValueError):
        HmcConfig(sampled=("magnitude",), priors={})
    cfg = experiment_defaults("grassmann_regression")
    assert (cfg.n_iter, cfg.burn_in) == (6000, 1000)
    assert HmcConfig.from_dict(cfg.to_dict()) == cfg
    assert experiment_defaults("sphere_regression").n_iter == 10000
    assert experiment_defaults("shape_classification").burn_in == 3000


def test_tiny_step_always_accepts():
    cfg = HmcConfig(step_size=1e-9, leapfrog_steps=1, n_iter=300, burn_in=0, adapt=False)
    chain = hmc_sample(_gaussian, cfg, init=np.array([0.5]))
    assert chain.acceptance_rate == 1.0


def test_gaussian_target_moments():
    cfg = HmcConfig(step_size=0.1, leapfrog_steps=20, n_iter=20000, burn_in=0, adapt=False, seed=1)
    chain = hmc_sample(_gaussian, cfg, init=np.array([0.0]))
    # samples are stored as exp(q); recover q
    q = np.log(chain.samples[:, 0])
    assert abs(q.mean()) < 0.05
    assert abs(q.var() - 1.0) < 0.1


@pytest.mark.slow
def test_prior_recovery_ks():
    cfg = PRIOR_ONLY.replace(n_iter=21000, burn_in=1000, seed=7)
    target = LogPosterior([], [], "regression", SQEXP, cfg)
    chain = hmc_sample(target, cfg)
    assert len(chain) == 20000
    cdf = GammaPrior(10, 10).cdf
    for j in range(2):
        assert stats.kstest(chain.samples[:, j], cdf).statistic < 0.03


def test_leapfrog_reversibility():
    q0, p0 = np.array([0.7]), np.array([-0.4])
    q1, p1, _, _ = leapfrog(q0, p0, _gaussian, 0.1, 25)
    q2, p2, _, _ = leapfrog(q1, -p1, _gaussian, 0.1, 25)
    assert np.max(np.abs(q2 - q0)) < 1e-8
    assert np.max(np.abs(-p2 - p0)) < 1e-8


@settings(max_examples=25)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_energy_error_is_second_order(q0, p0):
    def energy_error(eps):
        steps = int(round(1.0 / eps))
        q, p, lp, _ = leapfrog(np.array([q0]), np.array([p0]), _gaussian, eps, steps)
        return abs((-lp + 0.5 * p @ p) - (0.5 * q0 ** 2 + 0.5 * p0 ** 2))

    e1, e2 = energy_error(0.1), energy_error(0.05)
    assert e1 <= 0.01 * (q0 ** 2 + p0 ** 2) + 1e-12
    assert e2 <= e1 / 3 + 1e-12


def test_seed_determinism():
    target = _regression_target()
    cfg = experiment_defaults("sphere_regression").replace(n_iter=60, burn_in=20, seed=5)
    a = hmc_sample(target, cfg)
    b = hmc_sample(target, cfg)
    assert np.array_equal(a.samples, b.samples)
    assert a.trace_csv() == b.trace_csv()
    c = hmc_sample(target, cfg.replace(seed=6))
    assert not np.array_equal(a.samples, c.samples)


def test_chain_invariants_and_summary():
    target = _regression_target()
    cfg = experiment_defaults("sphere_regression").replace(n_iter=80, burn_in=30, seed=2)
    chain = hmc_sample(target, cfg)
    assert chain.samples.shape == (50, 3)
    assert np.all(chain.samples > 0) and np.all(np.isfinite(chain.samples))
    assert chain.acceptance_rate == pytest.approx(chain.accepted.mean())
    s = chain.summary()
    assert set(s["parameters"]) == {"magnitude", "lengthscale", "noise_var"}
    q = s["parameters"]["magnitude"]
    assert q["q2.5"] <= q["q50"] <= q["q97.5"]
    lines = chain.trace_csv().splitlines()
    assert lines[0] == "magnitude,lengthscale,noise_var,log_posterior,accepted"
    assert len(lines) == 51


def _constant_chain(target, theta, n=5):
    cfg = HmcConfig(n_iter=2, burn_in=0, sampled=target.names, priors=target.priors)
    chain = hmc_sample(target, cfg)
    chain.samples = np.tile(theta, (n, 1))
    return chain


def test_single_sample_chain_equals_plugin():
    target = _regression_target(n=15)
    theta = np.array([1.1, 0.9, 0.05])
    chain = _constant_chain(target, theta)
    test = sample(Sphere(2), 6, seed=10)
    pred = chain_predict(chain, target.points, target.response, test)
    m, v = predict(fit_regression(target.points, target.response,
                                  *chain.params_at(theta)), test)
    np.testing.assert_allclose(pred.mean, m, atol=1e-12)
    np.testing.assert_allclose(pred.var, v, atol=1e-12)
    plug = chain_predict(chain, target.points, target.response, test, mode="plugin")
    np.testing.assert_allclose(plug.mean, m, atol=1e-12)


def test_classification_average_within_draws():
    pts = sample(Sphere(2), 20, seed=4)
    lab = (np.array([p.coords[2] for p in pts]) > 0).astype(float)
    cfg = HmcConfig(n_iter=2, burn_in=0, sampled=("magnitude", "lengthscale"),
                    priors={"magnitude": GammaPrior(2.5, 2), "lengthscale": GammaPrior(0.5, 2)})
    target = LogPosterior(pts, lab, "classification", SQEXP, cfg)
    chain = hmc_sample(target, cfg)
    rng = np.random.default_rng(0)
    chain.samples = np.exp(rng.normal(0, 0.5, size=(12, 2)))
    test = sample(Sphere(2), 7, seed=5)
    pred = chain_predict(chain, pts, lab, test, n_draws=12)
    assert pred.n_used == 12
    assert np.all(pred.prob >= pred.per_draw.min(axis=0) - 1e-15)
    assert np.all(pred.prob <= pred.per_draw.max(axis=0) + 1e-15)
    one = chain_predict(_constant_chain(target, chain.samples[0]), pts, lab, test)
    ref = predict_prob(fit_laplace(pts, lab, chain.params_at(chain.samples[0])[0]), test)
    np.testing.assert_allclose(one.prob, ref, atol=1e-12)


def test_failed_draws_are_skipped():
    p = sample(Sphere(2), 1)[0]
    cfg = HmcConfig(n_iter=2, burn_in=0, sampled=("magnitude", "lengthscale", "noise_var"))
    target = LogPosterior([p], [0.3], "regression", SQEXP, cfg)
    chain = hmc_sample(target, cfg)
    chain.samples = np.array([[1.0, 1.0, 0.1], [1.0, 1.0, 0.2]])
    pred = chain_predict(chain, [p, p], [0.0, 1.0], [p])
    assert pred.n_used == 2
    chain.samples[:, 2] = 1e-300
    with pytest.raises(NumericalError):
        chain_predict(chain, [p, p], [0.0, 1.0], [p])
    with pytest.raises(ValueError):
        chain_predict(chain, [p], [0.3], [p], mode="median")


@pytest.mark.slow
def test_chain_average_close_to_plugin_on_sphere_simulation():
    ds = gen_sphere_regression(400, 26.0, seed=0)
    train, test = ds.split(100)
    cfg = experiment_defaults("sphere_regression").replace(n_iter=600, burn_in=200,
                                                           leapfrog_steps=10, seed=0)
    target = LogPosterior(train.points, train.y, "regression", SQEXP, cfg)
    chain = hmc_sample(target, cfg)
    avg = chain_predict(chain, train.points, train.y, test.points, n_draws=50)
    plug = chain_predict(chain, train.points, train.y, test.points, mode="plugin")
    rmse_avg = math.sqrt(np.mean((avg.mean - test.y) ** 2))
    rmse_plug = math.sqrt(np.mean((plug.mean - test.y) ** 2))
    assert abs(rmse_avg - rmse_plug) <= 0.1 * rmse_plug
    lo, hi = 0.6, 0.95
    assert lo <= chain.acceptance_rate <= hi
