"""Hamiltonian Monte Carlo over log-transformed kernel hyperparameters.

Positive hyperparameters (magnitude, lengthscale, noise variance) are
sampled as ``eta = log(theta)`` under gamma priors, with the Jacobian of the
exponential map added to the target density. Regression uses the exact log
marginal likelihood; classification uses the Laplace evidence with a
central finite-difference gradient.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, gammainc

from .errors import KernelError, NumericalError
from .gp import (
    fit_laplace,
    fit_regression,
    laplace_mode,
    latent_predict,
    lml_from_sqdist,
    predict,
    probit_predictive,
)
from .kernels import (
    INTRINSIC,
    SQEXP,
    KernelSpec,
    check_compatible,
    gram_from_sqdist,
    sqdist_matrix,
)
from .manifolds import ManifoldPoint, embed_all

__all__ = [
    "PARAM_NAMES",
    "GammaPrior",
    "HmcConfig",
    "HmcChain",
    "LogPosterior",
    "log_posterior",
    "leapfrog",
    "hmc_sample",
    "ChainPrediction",
    "chain_predict",
    "experiment_defaults",
    "length_transform",
    "map_estimate",
]

log = logging.getLogger(__name__)

PARAM_NAMES = ("magnitude", "lengthscale", "noise_var")
ACCEPT_BAND = (0.6, 0.95)
FD_STEP = 1e-5
PRIOR_TARGETS = ("rate", "length")


def length_transform(family: str) -> tuple[float, float]:
    """(scale, power) with length = scale * theta**power for the kernel parameter.

    sqexp uses beta = 1 / (2 l^2), the intrinsic exponential beta = 1 / l and
    Matern's kappa is already a length.
    """
    if family == SQEXP:
        return 1.0 / math.sqrt(2.0), -0.5
    if family == INTRINSIC:
        return 1.0, -1.0
    return 1.0, 1.0


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate) with density proportional to x^(shape-1) exp(-rate x)."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"gamma parameters must be positive: {self}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return (self.shape * math.log(self.rate) - gammaln(self.shape)
                + (self.shape - 1.0) * np.log(x) - self.rate * x)

    def cdf(self, x):
        return gammainc(self.shape, self.rate * np.asarray(x, dtype=float))

    def log_density_log(self, eta: float, power: float = 1,
                        scale: float = 1.0) -> tuple[float, float]:
        """Log density of eta = log(theta) when scale * theta**power has this prior.

        Returns the value and its derivative in eta; the Jacobian of
        eta -> scale * theta**power is included. ``power`` may be negative.
        """
        log_t = math.log(scale) + power * eta
        t = math.exp(log_t)
        value = (self.shape * math.log(self.rate) - gammaln(self.shape)
                 + self.shape * log_t - self.rate * t + math.log(abs(power)))
        return value, power * (self.shape - self.rate * t)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "rate": self.rate}


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.1
    leapfrog_steps: int = 20
    n_iter: int = 10000
    burn_in: int = 1000
    seed: int = 0
    sampled: tuple = PARAM_NAMES
    priors: dict = field(default_factory=lambda: {
        "magnitude": GammaPrior(10, 10),
        "lengthscale": GammaPrior(10, 10),
        "noise_var": GammaPrior(1, 10),
    })
    fixed: dict = field(default_factory=dict)
    beta_power_d: int | None = None
    lengthscale_prior_on: str = "rate"
    adapt: bool = True
    target_accept: float = 0.8

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError(f"need 0 <= burn_in < n_iter, got {self.burn_in}, {self.n_iter}")
        if self.lengthscale_prior_on not in PRIOR_TARGETS:
            raise ValueError(f"lengthscale_prior_on must be one of {PRIOR_TARGETS}")
        if self.beta_power_d is not None and self.lengthscale_prior_on != "rate":
            raise ValueError("beta_power_d applies only to a prior on the rate")
        unknown = set(self.sampled) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown hyperparameters {sorted(unknown)}")
        for name in self.sampled:
            if name not in self.priors:
                raise ValueError(f"no prior for sampled parameter {name!r}")

    def replace(self, **changes) -> "HmcConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "step_size": self.step_size, "leapfrog_steps": self.leapfrog_steps,
            "n_iter": self.n_iter, "burn_in": self.burn_in, "seed": self.seed,
            "sampled": list(self.sampled),
            "priors": {k: v.to_dict() for k, v in self.priors.items()},
            "fixed": dict(self.fixed), "beta_power_d": self.beta_power_d,
            "lengthscale_prior_on": self.lengthscale_prior_on,
            "adapt": self.adapt, "target_accept": self.target_accept,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmcConfig":
        d = dict(d)
        if "priors" in d:
            d["priors"] = {k: GammaPrior(**v) for k, v in d["priors"].items()}
        if "sampled" in d:
            d["sampled"] = tuple(d["sampled"])
        return cls(**d)


def experiment_defaults(experiment: str) -> HmcConfig:
    """Priors and iteration counts used for each of the reference experiments."""
    noise = GammaPrior(1, 10)
    if experiment == "sphere_regression":
        return HmcConfig(n_iter=10000, burn_in=1000, priors={
            "magnitude": GammaPrior(10, 10), "lengthscale": GammaPrior(10, 10),
            "noise_var": noise})
    if experiment == "grassmann_regression":
        return HmcConfig(n_iter=6000, burn_in=1000, priors={
            "magnitude": GammaPrior(20, 1), "lengthscale": GammaPrior(2.5, 2),
            "noise_var": noise})
    if experiment == "shape_classification":
        return HmcConfig(n_iter=10000, burn_in=3000, sampled=("magnitude", "lengthscale"),
                         priors={"magnitude": GammaPrior(50, 1),
                                 "lengthscale": GammaPrior(0.5, 2)})
    if experiment == "spd_classification":
        return HmcConfig(n_iter=10000, burn_in=3000, sampled=("magnitude", "lengthscale"),
                         priors={"magnitude": GammaPrior(2.5, 2),
                                 "lengthscale": GammaPrior(0.5, 2)})
    raise ValueError(f"unknown experiment {experiment!r}")


class LogPosterior:
    """Log posterior density over log-hyperparameters, with gradient.

    ``model_kind`` is ``"regression"`` or ``"classification"``. Setting
    ``likelihood_weight=0`` leaves only the priors (and Jacobian).
    """

    def __init__(self, points: Sequence[ManifoldPoint], response, model_kind: str,
                 family: str, config: HmcConfig, nu: float | None = None,
                 likelihood_weight: float = 1.0):
        if model_kind not in ("regression", "classification"):
            raise ValueError(f"unknown model kind {model_kind!r}")
        self.model_kind = model_kind
        self.family = family
        self.nu = nu
        self.names = tuple(config.sampled)
        if model_kind == "classification" and "noise_var" in self.names:
            raise ValueError("classification has no noise variance to sample")
        self.priors = {k: config.priors[k] for k in self.names}
        self.fixed = dict(config.fixed)
        self.beta_power_d = config.beta_power_d
        self._ls_scale, self._ls_power = 1.0, 1.0
        if config.beta_power_d:
            self._ls_power = float(config.beta_power_d)
        elif config.lengthscale_prior_on == "length":
            self._ls_scale, self._ls_power = length_transform(family)
        self.likelihood_weight = float(likelihood_weight)
        self.points = tuple(points)
        self.response = np.asarray(response, dtype=float).ravel()
        if not np.all(np.isfinite(self.response)):
            raise ValueError("responses must be finite")
        if self.points:
            check_compatible(KernelSpec(family, nu=nu), self.points[0].kind)
        self.sq = sqdist_matrix(embed_all(self.points)) if self.points else np.zeros((0, 0))
        self.gradient_method = "analytic" if model_kind == "regression" else "finite-difference"

    @property
    def dim(self) -> int:
        return len(self.names)

    def values(self, eta) -> dict[str, float]:
        vals = {"magnitude": 1.0, "lengthscale": 1.0, "noise_var": 0.0}
        vals.update(self.fixed)
        for name, e in zip(self.names, eta):
            vals[name] = math.exp(e)
        return vals

    def spec_and_noise(self, eta) -> tuple[KernelSpec, float]:
        v = self.values(eta)
        return KernelSpec(self.family, v["magnitude"], v["lengthscale"], self.nu), v["noise_var"]

    def initial(self) -> np.ndarray:
        """Log of the prior means (on theta**d for the lengthscale when enabled)."""
        out = []
        for name in self.names:
            m = math.log(self.priors[name].mean)
            if name == "lengthscale":
                m = (m - math.log(self._ls_scale)) / self._ls_power
            out.append(m)
        return np.array(out)

    def log_prior(self, eta) -> tuple[float, np.ndarray]:
        value, grad = 0.0, np.zeros(self.dim)
        for i, name in enumerate(self.names):
            if name == "lengthscale":
                v, g = self.priors[name].log_density_log(
                    float(eta[i]), self._ls_power, self._ls_scale)
            else:
                v, g = self.priors[name].log_density_log(float(eta[i]))
            value += v
            grad[i] = g
        return value, grad

    def _laplace_evidence(self, eta) -> float:
        spec, _ = self.spec_and_noise(eta)
        kmat = gram_from_sqdist(spec, self.sq)
        return laplace_mode(kmat, self.response).log_evidence

    def log_likelihood(self, eta) -> tuple[float, np.ndarray]:
        if self.response.size == 0 or self.likelihood_weight == 0:
            return 0.0, np.zeros(self.dim)
        if self.model_kind == "regression":
            spec, noise = self.spec_and_noise(eta)
            value, full = lml_from_sqdist(self.sq, self.response, spec, noise)
            idx = [PARAM_NAMES.index(n) for n in self.names]
            return value, full[idx]
        value = self._laplace_evidence(eta)
        grad = np.zeros(self.dim)
        for i in range(self.dim):
            e = np.array(eta, dtype=float)
            e[i] += FD_STEP
            up = self._laplace_evidence(e)
            e[i] -= 2 * FD_STEP
            down = self._laplace_evidence(e)
            grad[i] = (up - down) / (2 * FD_STEP)
        return value, grad

    def __call__(self, eta) -> tuple[float, np.ndarray]:
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)) or np.any(np.abs(eta) > 700):
            return -math.inf, np.zeros(self.dim)
        try:
            lp, gp = self.log_prior(eta)
            ll, gl = self.log_likelihood(eta)
        except (NumericalError, KernelError, np.linalg.LinAlgError, FloatingPointError,
                OverflowError):
            return -math.inf, np.zeros(self.dim)
        value = lp + self.likelihood_weight * ll
        grad = gp + self.likelihood_weight * gl
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            return -math.inf, np.zeros(self.dim)
        return value, grad


def map_estimate(target: LogPosterior) -> np.ndarray:
    """Posterior mode by L-BFGS-B over log-hyperparameters (positive space out)."""
    def neg(eta):
        v, g = target(eta)
        if not math.isfinite(v):
            return 1e300, np.zeros_like(eta)
        return -v, -g
    res = minimize(neg, target.initial(), jac=True, method="L-BFGS-B")
    return np.exp(res.x)


def log_posterior(params_log, target: LogPosterior) -> tuple[float, np.ndarray]:
    return target(params_log)


def leapfrog(q, p, target: Callable, step_size: float, n_steps: int, grad=None):
    """Leapfrog integration; returns (q, p, log density, gradient).

    Stops early (returning -inf density) once the density leaves the finite
    region.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    if grad is None:
        _, grad = target(q)
    p = p + 0.5 * step_size * grad
    logp = -math.inf
    for i in range(n_steps):
        q = q + step_size * p
        logp, grad = target(q)
        if not math.isfinite(logp):
            return q, p, -math.inf, grad
        if i < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return q, p, logp, grad


@dataclass
class HmcChain:
    names: tuple
    samples: np.ndarray
    log_post: np.ndarray
    accepted: np.ndarray
    step_size: float
    fixed: dict
    family: str
    nu: float | None = None
    model_kind: str = "regression"
    gradient_method: str = "analytic"
    burn_in_accept: float = float("nan")

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else float("nan")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def summaries(self) -> dict[str, dict]:
        out = {}
        for j, name in enumerate(self.names):
            s = self.samples[:, j]
            q = np.quantile(s, [0.025, 0.5, 0.975])
            out[name] = {"mean": float(s.mean()), "sd": float(s.std(ddof=1)) if s.size > 1 else 0.0,
                         "q2.5": float(q[0]), "q50": float(q[1]), "q97.5": float(q[2])}
        return out

    def median(self) -> np.ndarray:
        return np.median(self.samples, axis=0)

    def params_at(self, theta) -> tuple[KernelSpec, float]:
        vals = {"magnitude": 1.0, "lengthscale": 1.0, "noise_var": 0.0}
        vals.update(self.fixed)
        vals.update(zip(self.names, (float(t) for t in theta)))
        return KernelSpec(self.family, vals["magnitude"], vals["lengthscale"], self.nu), vals["noise_var"]

    def summary(self) -> dict:
        return {
            "parameters": self.summaries(),
            "acceptance_rate": self.acceptance_rate,
            "burn_in_acceptance_rate": self.burn_in_accept,
            "step_size": self.step_size,
            "n_samples": len(self),
            "fixed": dict(self.fixed),
            "family": self.family,
            "nu": self.nu,
            "model_kind": self.model_kind,
            "gradient_method": self.gradient_method,
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(self.names) + ["log_posterior", "accepted"])
        for row, lp, acc in zip(self.samples, self.log_post, self.accepted):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(lp)), int(acc)])
        return buf.getvalue()


def hmc_sample(target: LogPosterior | Callable, config: HmcConfig, init=None) -> HmcChain:
    """Run HMC with an identity mass matrix.

    With ``config.adapt`` the step size is tuned by dual averaging during
    burn-in only and frozen afterwards.
    """
    rng = np.random.default_rng(config.seed)
    if init is None:
        if not hasattr(target, "initial"):
            raise ValueError("init is required for a plain callable target")
        init = target.initial()
    q = np.array(init, dtype=float)
    dim = q.size
    logp, grad = target(q)
    if not math.isfinite(logp):
        raise NumericalError("log posterior is not finite at the initial point")

    eps = config.step_size
    # dual averaging state
    mu = math.log(10.0 * eps)
    h_bar, log_eps_bar = 0.0, 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    n_keep = config.n_iter - config.burn_in
    samples = np.empty((n_keep, dim))
    log_post = np.empty(n_keep)
    accepted = np.zeros(n_keep, dtype=bool)
    burn_acc = []

    for it in range(config.n_iter):
        p0 = rng.standard_normal(dim)
        log_u = math.log(rng.uniform())
        q1, p1, logp1, grad1 = leapfrog(q, p0, target, eps, config.leapfrog_steps, grad)
        if math.isfinite(logp1) and np.all(np.abs(p1) < 1e100):
            log_ratio = (logp1 - 0.5 * p1 @ p1) - (logp - 0.5 * p0 @ p0)
            log_accept = min(0.0, log_ratio) if math.isfinite(log_ratio) else -math.inf
        else:
            log_accept = -math.inf
        accept = log_u < log_accept
        if accept:
            q, logp, grad = q1, logp1, grad1

        if it < config.burn_in:
            a_prob = math.exp(log_accept)
            burn_acc.append(a_prob)
            if config.adapt:
                m = it + 1
                h_bar = (1 - 1 / (m + t0)) * h_bar + (config.target_accept - a_prob) / (m + t0)
                log_eps = mu - math.sqrt(m) / gamma * h_bar
                w = m ** (-kappa)
                log_eps_bar = w * log_eps + (1 - w) * log_eps_bar
                eps = math.exp(log_eps)
                if it == config.burn_in - 1:
                    eps = math.exp(log_eps_bar)
                    log.info("step size adapted to %.4g after %d burn-in iterations",
                             eps, config.burn_in)
        else:
            j = it - config.burn_in
            samples[j] = np.exp(q)
            log_post[j] = logp
            accepted[j] = accept

    chain = HmcChain(
        names=tuple(getattr(target, "names", [f"theta{i}" for i in range(dim)])),
        samples=samples, log_post=log_post, accepted=accepted, step_size=eps,
        fixed=dict(getattr(target, "fixed", {})),
        family=getattr(target, "family", ""), nu=getattr(target, "nu", None),
        model_kind=getattr(target, "model_kind", "regression"),
        gradient_method=getattr(target, "gradient_method", "analytic"),
        burn_in_accept=float(np.mean(burn_acc)) if burn_acc else float("nan"),
    )
    lo, hi = ACCEPT_BAND
    if n_keep and not lo <= chain.acceptance_rate <= hi:
        log.warning("acceptance rate %.3f outside [%.2f, %.2f] with step size %.4g",
                    chain.acceptance_rate, lo, hi, eps)
    return chain


@dataclass
class ChainPrediction:
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    prob: np.ndarray | None = None
    n_used: int = 0
    n_failed: int = 0
    per_draw: np.ndarray | None = field(default=None, repr=False)


def _thin_indices(n: int, n_draws: int) -> np.ndarray:
    if n_draws >= n:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, n_draws).round().astype(int))


def chain_predict(chain: HmcChain, points: Sequence[ManifoldPoint], response,
                  test_points: Sequence[ManifoldPoint], model_kind: str | None = None,
                  n_draws: int = 200, mode: str = "average") -> ChainPrediction:
    """Predict by refitting at thinned chain draws (``average``) or at the
    posterior median (``plugin``)."""
    model_kind = model_kind or chain.model_kind
    if len(chain) == 0:
        raise ValueError("empty chain")
    if mode == "plugin":
        thetas = chain.median()[None, :]
    elif mode == "average":
        thetas = chain.samples[_thin_indices(len(chain), n_draws)]
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")

    means, variances, failed = [], [], 0
    for theta in thetas:
        spec, noise = chain.params_at(theta)
        try:
            if model_kind == "regression":
                model = fit_regression(points, response, spec, noise)
                m, v = predict(model, test_points)
            else:
                model = fit_laplace(points, response, spec)
                m, v = latent_predict(model, test_points)
        except (NumericalError, np.linalg.LinAlgError):
            failed += 1
            continue
        means.append(m)
        variances.append(v)
    if not means:
        raise NumericalError(f"all {failed} chain draws failed to fit")
    means = np.array(means)
    variances = np.array(variances)
    if model_kind == "regression":
        mean = means.mean(axis=0)
        var = variances.mean(axis=0) + means.var(axis=0)
        return ChainPrediction(mean=mean, var=var, n_used=len(means), n_failed=failed,
                               per_draw=means)
    probs = probit_predictive(means, variances)
    return ChainPrediction(prob=probs.mean(axis=0), n_used=len(means), n_failed=failed,
                           per_draw=probs)
