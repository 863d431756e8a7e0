"""Exact GP regression and probit GP classification with the Laplace method.

The prior mean is zero throughout. Both model types take manifold points and
work internally on their embedded images, so any manifold/kernel pair from
:mod:`egp.kernels` can be plugged in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.special import log_ndtr, ndtr

from .errors import ManifoldError, NumericalError
from .kernels import (
    KernelSpec,
    check_compatible,
    grad_log_from_sqdist,
    gram_from_sqdist,
    sqdist_cross,
    sqdist_matrix,
)
from .manifolds import ManifoldKind, ManifoldPoint, embed_all, kind_from_dict

__all__ = [
    "RegressionModel",
    "ClassificationModel",
    "fit_regression",
    "predict",
    "log_marginal_likelihood",
    "lml_from_sqdist",
    "fit_laplace",
    "laplace_mode",
    "latent_predict",
    "predict_prob",
    "probit_predictive",
    "model_to_dict",
    "model_from_dict",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-4
RESIDUAL_TOL = 1e-6
LAPLACE_MAX_ITER = 100
LAPLACE_OBJ_TOL = 1e-10
LAPLACE_GRAD_TOL = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


def _cholesky(a: np.ndarray) -> np.ndarray | None:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def _chol_inverse(chol: np.ndarray) -> np.ndarray:
    """Inverse of L L' from its lower Cholesky factor."""
    inv, info = lapack.dpotri(chol, lower=1)
    if info != 0:
        raise NumericalError(f"dpotri failed with info={info}")
    lower = np.tril(inv)
    return lower + np.tril(inv, -1).T


def _factor(kmat: np.ndarray, noise_var: float) -> tuple[np.ndarray, float]:
    """Cholesky of K + noise*I, escalating a diagonal jitter on failure."""
    n = kmat.shape[0]
    a = kmat + noise_var * np.eye(n)
    chol = _cholesky(a)
    if chol is not None:
        return chol, 0.0
    scale = float(np.mean(np.diag(kmat))) if n else 1.0
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        chol = _cholesky(a + jitter * np.eye(n))
        if chol is not None:
            return chol, jitter
        jitter *= 10.0
    raise NumericalError("kernel matrix numerically singular")


def _prepare(points: Sequence[ManifoldPoint], spec: KernelSpec) -> tuple[ManifoldKind, np.ndarray]:
    if len(points) == 0:
        raise ValueError("need at least one training point")
    emb = embed_all(points)
    kind = points[0].kind
    check_compatible(spec, kind)
    return kind, emb


@dataclass(frozen=True, eq=False)
class RegressionModel:
    kind: ManifoldKind
    train_points: tuple
    train_emb: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    spec: KernelSpec
    noise_var: float
    chol: np.ndarray = field(repr=False)
    dual_weights: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.y.size


def fit_regression(points: Sequence[ManifoldPoint], y, spec: KernelSpec,
                   noise_var: float) -> RegressionModel:
    """Factorise K + noise*I and solve for the dual weights."""
    kind, emb = _prepare(points, spec)
    y = np.asarray(y, dtype=float).ravel()
    if y.size != emb.shape[0]:
        raise ValueError(f"{emb.shape[0]} points but {y.size} responses")
    if not np.all(np.isfinite(y)):
        raise ValueError("responses must be finite")
    if noise_var < 0:
        raise ValueError(f"noise_var must be >= 0, got {noise_var}")
    kmat = gram_from_sqdist(spec, sqdist_matrix(emb))
    chol, jitter = _factor(kmat, noise_var)
    w = cho_solve((chol, True), y)
    # jitter, or a factorisation that only succeeded through rounding, may
    # absorb round-off but not genuine rank deficiency
    resid = kmat @ w + noise_var * w - y
    if np.linalg.norm(resid) > RESIDUAL_TOL * max(np.linalg.norm(y), 1e-300):
        raise NumericalError("kernel matrix numerically singular")
    return RegressionModel(kind, tuple(points), emb, y, spec, float(noise_var),
                           chol, w, jitter)


def _check_kind(kind: ManifoldKind, test_points: Sequence[ManifoldPoint]) -> np.ndarray:
    if len(test_points) and test_points[0].kind != kind:
        raise ManifoldError(f"kind mismatch: model on {kind}, test on {test_points[0].kind}")
    return embed_all(test_points, kind)


def predict(model: RegressionModel, test_points: Sequence[ManifoldPoint]):
    """Posterior predictive mean and variance of the latent function."""
    test = _check_kind(model.kind, test_points)
    ks = gram_from_sqdist(model.spec, sqdist_cross(model.train_emb, test))
    mean = ks.T @ model.dual_weights
    v = solve_triangular(model.chol, ks, lower=True)
    var = model.spec.magnitude - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def lml_from_sqdist(sq: np.ndarray, y: np.ndarray, spec: KernelSpec,
                    noise_var: float, with_grad: bool = True):
    """Log marginal likelihood from a squared-distance matrix.

    The gradient is taken with respect to (log magnitude, log lengthscale,
    log noise_var).
    """
    n = y.size
    if n == 0:
        return (0.0, np.zeros(3)) if with_grad else 0.0
    kmat = gram_from_sqdist(spec, sq)
    chol, _ = _factor(kmat, noise_var)
    alpha = cho_solve((chol, True), y)
    value = (-0.5 * y @ alpha - np.sum(np.log(np.diag(chol)))
             - 0.5 * n * _LOG_2PI)
    if not with_grad:
        return float(value)
    kinv = _chol_inverse(chol)
    q = np.outer(alpha, alpha) - kinv
    dk = grad_log_from_sqdist(spec, sq)
    grad = np.array([
        0.5 * np.sum(q * dk["magnitude"]),
        0.5 * np.sum(q * dk["lengthscale"]),
        0.5 * noise_var * np.trace(q),
    ])
    return float(value), grad


def log_marginal_likelihood(points: Sequence[ManifoldPoint], y, spec: KernelSpec,
                            noise_var: float, with_grad: bool = True):
    if len(points) == 0:
        return (0.0, np.zeros(3)) if with_grad else 0.0
    _, emb = _prepare(points, spec)
    return lml_from_sqdist(sqdist_matrix(emb), np.asarray(y, dtype=float).ravel(),
                           spec, noise_var, with_grad)


# --- probit classification -------------------------------------------------

def _probit_terms(f: np.ndarray, ys: np.ndarray):
    """log p(y|f), its gradient and W = -d^2 log p / df^2 for the probit link."""
    z = ys * f
    logcdf = log_ndtr(z)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(-0.5 * z * z - 0.5 * _LOG_2PI - logcdf)
        w = ratio * ratio + z * ratio
    grad = ys * ratio
    return float(np.sum(logcdf)), grad, np.maximum(w, 0.0)


@dataclass(frozen=True)
class _Mode:
    f: np.ndarray
    a: np.ndarray
    grad: np.ndarray
    sqrt_w: np.ndarray
    chol_b: np.ndarray
    log_evidence: float
    n_iter: int


def laplace_mode(kmat: np.ndarray, labels: np.ndarray, f0: np.ndarray | None = None,
                 max_iter: int = LAPLACE_MAX_ITER) -> _Mode:
    """Newton iteration for the posterior mode of the latent vector.

    Uses the B = I + W^1/2 K W^1/2 formulation with step halving on the
    objective -a'Ka/2 + log p(y|f).
    """
    n = labels.size
    ys = 2.0 * np.asarray(labels, dtype=float) - 1.0
    if not np.all(np.isfinite(kmat)):
        raise NumericalError("Laplace: kernel matrix has non-finite entries")
    eye = np.eye(n)
    if f0 is None:
        f = np.zeros(n)
        a = np.zeros(n)
        loglik, _, _ = _probit_terms(f, ys)
        obj = loglik
    else:
        f = np.asarray(f0, dtype=float).copy()
        a = None
        obj = -np.inf
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        _, grad, w = _probit_terms(f, ys)
        sw = np.sqrt(w)
        chol = _cholesky(eye + sw[:, None] * kmat * sw[None, :])
        if chol is None:
            raise NumericalError("Laplace: B matrix not positive definite")
        b = w * f + grad
        if not np.all(np.isfinite(b)):
            raise NumericalError("Laplace: non-finite Newton iterate")
        c = cho_solve((chol, True), sw * (kmat @ b))
        a_new = b - sw * c
        step = 1.0
        while True:
            a_try = a_new if a is None else a + step * (a_new - a)
            f_try = kmat @ a_try
            loglik, _, _ = _probit_terms(f_try, ys)
            obj_try = -0.5 * a_try @ f_try + loglik
            if not np.isfinite(obj_try):
                obj_try = -np.inf
            if obj_try >= obj - 1e-12 * abs(obj) or step < 1e-10:
                break
            step *= 0.5
        change = obj_try - obj
        a, f, obj = a_try, f_try, obj_try
        _, grad, _ = _probit_terms(f, ys)
        gnorm = float(np.max(np.abs(grad - a))) if n else 0.0
        if abs(change) < LAPLACE_OBJ_TOL and gnorm < LAPLACE_GRAD_TOL:
            break
    else:
        raise NumericalError(
            f"Laplace iteration did not converge in {max_iter} iterations "
            f"(gradient norm {gnorm:.3g})"
        )
    loglik, grad, w = _probit_terms(f, ys)
    sw = np.sqrt(w)
    chol = _cholesky(eye + sw[:, None] * kmat * sw[None, :])
    if chol is None:
        raise NumericalError("Laplace: B matrix not positive definite")
    log_ev = -0.5 * a @ f + loglik - np.sum(np.log(np.diag(chol)))
    return _Mode(f, a, grad, sw, chol, float(log_ev), it)


@dataclass(frozen=True, eq=False)
class ClassificationModel:
    kind: ManifoldKind
    train_points: tuple
    train_emb: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    spec: KernelSpec
    latent_mode: np.ndarray = field(repr=False)
    loglik_grad: np.ndarray = field(repr=False)
    sqrt_w: np.ndarray = field(repr=False)
    chol_b: np.ndarray = field(repr=False)
    log_evidence: float = 0.0
    n_iter: int = 0

    @property
    def w(self) -> np.ndarray:
        return self.sqrt_w ** 2


def _labels(labels) -> np.ndarray:
    lab = np.asarray(labels).ravel()
    if not np.all(np.isin(lab, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return lab.astype(float)


def fit_laplace(points: Sequence[ManifoldPoint], labels, spec: KernelSpec,
                f0=None) -> ClassificationModel:
    kind, emb = _prepare(points, spec)
    lab = _labels(labels)
    if lab.size != emb.shape[0]:
        raise ValueError(f"{emb.shape[0]} points but {lab.size} labels")
    kmat = gram_from_sqdist(spec, sqdist_matrix(emb))
    mode = laplace_mode(kmat, lab, f0)
    return ClassificationModel(kind, tuple(points), emb, lab, spec, mode.f, mode.grad,
                               mode.sqrt_w, mode.chol_b, mode.log_evidence, mode.n_iter)


def probit_predictive(mean, var):
    """E[Phi(f)] for f ~ N(mean, var), in closed form."""
    return ndtr(np.asarray(mean) / np.sqrt(1.0 + np.asarray(var)))


def latent_predict(model: ClassificationModel, test_points: Sequence[ManifoldPoint]):
    """Laplace latent predictive mean and variance."""
    test = _check_kind(model.kind, test_points)
    ks = gram_from_sqdist(model.spec, sqdist_cross(model.train_emb, test))
    mean = ks.T @ model.loglik_grad
    v = solve_triangular(model.chol_b, model.sqrt_w[:, None] * ks, lower=True)
    var = model.spec.magnitude - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def predict_prob(model: ClassificationModel, test_points: Sequence[ManifoldPoint]) -> np.ndarray:
    return probit_predictive(*latent_predict(model, test_points))


# --- serialisation ----------------------------------------------------------

def model_to_dict(model: RegressionModel | ClassificationModel, data_path: str | None = None) -> dict:
    """JSON-ready description sufficient to rebuild the model exactly."""
    kind = model.kind
    d = {
        "kind": kind.to_dict(),
        "spec": model.spec.to_dict(),
        "data_path": data_path,
        "train_points": [kind.to_flat(p.coords).tolist() for p in model.train_points],
    }
    if isinstance(model, RegressionModel):
        d.update(type="regression", noise_var=model.noise_var, y=model.y.tolist(),
                 jitter=model.jitter, dual_weights=model.dual_weights.tolist())
    else:
        d.update(type="classification", labels=model.labels.astype(int).tolist(),
                 latent_mode=model.latent_mode.tolist(),
                 log_evidence=model.log_evidence)
    return d


def model_from_dict(d: dict) -> RegressionModel | ClassificationModel:
    kind = kind_from_dict(d["kind"])
    spec = KernelSpec.from_dict(d["spec"])
    points = [ManifoldPoint(kind, kind.from_flat(np.asarray(row))) for row in d["train_points"]]
    if d["type"] == "regression":
        model = fit_regression(points, d["y"], spec, float(d["noise_var"]))
        stored = np.asarray(d["dual_weights"])
        if not np.allclose(stored, model.dual_weights, rtol=1e-8, atol=1e-12):
            raise NumericalError("stored dual weights disagree with refit")
        return model
    if d["type"] == "classification":
        return fit_laplace(points, d["labels"], spec)
    raise ValueError(f"unknown model type {d['type']!r}")
