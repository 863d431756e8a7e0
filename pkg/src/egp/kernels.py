"""Covariance kernels built on the extrinsic distance.

All kernels here are functions of a distance between embedded points. The
Gram helpers work on matrices of *squared* extrinsic distances so that a
distance matrix can be computed once and reused while hyperparameters
change (as in HMC).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.special import gamma as gamma_fn
from scipy.special import kve

from .errors import KernelError
from .manifolds import ManifoldKind, ManifoldPoint, Sphere, chord_to_arc, embed_all

__all__ = [
    "SQEXP",
    "MATERN",
    "INTRINSIC",
    "FAMILIES",
    "KernelSpec",
    "check_compatible",
    "sqdist_matrix",
    "sqdist_cross",
    "gram_from_sqdist",
    "grad_log_from_sqdist",
    "kernel_eval",
    "gram",
    "gram_cross",
    "gram_grad_log",
    "matern_bessel",
    "matern_closed_form",
    "psd_violation",
    "increment_variance",
    "great_circle_path",
    "scaling_exponent",
]

SQEXP = "sqexp"
MATERN = "matern"
INTRINSIC = "intrinsic_sphere_exp"
FAMILIES = (SQEXP, MATERN, INTRINSIC)

HALF_INTEGER_NUS = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    ``magnitude`` is the prior variance (alpha / sigma^2). ``lengthscale`` is
    family-specific: the rate beta multiplying rho^2 for ``sqexp``, the rate
    beta multiplying the geodesic distance for ``intrinsic_sphere_exp``, and
    the length kappa for ``matern``.
    """

    family: str = SQEXP
    magnitude: float = 1.0
    lengthscale: float = 1.0
    nu: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        if not (np.isfinite(self.magnitude) and self.magnitude > 0):
            raise KernelError(f"magnitude must be positive, got {self.magnitude}")
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise KernelError(f"lengthscale must be positive, got {self.lengthscale}")
        if self.family == MATERN:
            if self.nu is None or not self.nu > 0:
                raise KernelError(f"Matern order nu must be positive, got {self.nu}")
            object.__setattr__(self, "nu", float(self.nu))
        elif self.nu is not None:
            raise KernelError("nu is only meaningful for the Matern family")
        object.__setattr__(self, "magnitude", float(self.magnitude))
        object.__setattr__(self, "lengthscale", float(self.lengthscale))

    def replace(self, **changes) -> "KernelSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {"family": self.family, "magnitude": self.magnitude,
             "lengthscale": self.lengthscale}
        if self.nu is not None:
            d["nu"] = self.nu
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["family"], float(d["magnitude"]), float(d["lengthscale"]),
                   None if d.get("nu") is None else float(d["nu"]))


def check_compatible(spec: KernelSpec, kind: ManifoldKind | None) -> None:
    if spec.family == INTRINSIC and kind is not None and not isinstance(kind, Sphere):
        raise KernelError(
            f"{INTRINSIC} kernel is only valid on spheres, not {kind.name}"
        )


def sqdist_matrix(emb: np.ndarray) -> np.ndarray:
    """Squared distances between rows, each unordered pair computed once."""
    n = emb.shape[0]
    if n < 2:
        return np.zeros((n, n))
    return squareform(pdist(emb, "sqeuclidean"))


def sqdist_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return cdist(a, b, "sqeuclidean")


def matern_bessel(rho, nu: float, magnitude: float = 1.0, kappa: float = 1.0):
    """General Matern kernel via the modified Bessel function K_nu.

    The rho -> 0 limit is returned as ``magnitude``.
    """
    rho = np.asarray(rho, dtype=float)
    x = np.sqrt(2.0 * nu) * rho / kappa
    out = np.full(x.shape, float(magnitude))
    pos = x > 1e-12
    xp = x[pos]
    # kve(nu, x) = K_nu(x) * exp(x)
    out[pos] = magnitude * (xp ** nu) * kve(nu, xp) * np.exp(-xp) / (
        gamma_fn(nu) * 2.0 ** (nu - 1.0)
    )
    return out if out.ndim else float(out)


def matern_closed_form(rho, nu: float, magnitude: float = 1.0, kappa: float = 1.0):
    """Closed forms for nu in {1/2, 3/2, 5/2}."""
    rho = np.asarray(rho, dtype=float)
    r = np.sqrt(2.0 * nu) * rho / kappa
    if nu == 0.5:
        poly = 1.0
    elif nu == 1.5:
        poly = 1.0 + r
    elif nu == 2.5:
        poly = 1.0 + r + r * r / 3.0
    else:
        raise KernelError(f"no closed form for nu={nu}")
    out = magnitude * poly * np.exp(-r)
    return out if np.ndim(out) else float(out)


def _matern(rho, spec: KernelSpec):
    if spec.nu in HALF_INTEGER_NUS:
        return matern_closed_form(rho, spec.nu, spec.magnitude, spec.lengthscale)
    return matern_bessel(rho, spec.nu, spec.magnitude, spec.lengthscale)


def gram_from_sqdist(spec: KernelSpec, sq: np.ndarray) -> np.ndarray:
    """Kernel values from squared extrinsic distances (elementwise)."""
    sq = np.maximum(sq, 0.0)
    if spec.family == SQEXP:
        return spec.magnitude * np.exp(-spec.lengthscale * sq)
    if spec.family == INTRINSIC:
        return spec.magnitude * np.exp(-spec.lengthscale * chord_to_arc(np.sqrt(sq)))
    return np.asarray(_matern(np.sqrt(sq), spec))


def grad_log_from_sqdist(spec: KernelSpec, sq: np.ndarray) -> dict[str, np.ndarray]:
    """d K / d log(theta) for theta in (magnitude, lengthscale)."""
    sq = np.maximum(sq, 0.0)
    k = gram_from_sqdist(spec, sq)
    if spec.family == SQEXP:
        dl = -spec.lengthscale * sq * k
    elif spec.family == INTRINSIC:
        dl = -spec.lengthscale * chord_to_arc(np.sqrt(sq)) * k
    else:
        if spec.nu not in HALF_INTEGER_NUS:
            raise KernelError(
                f"Matern gradients are only available for nu in {HALF_INTEGER_NUS}"
            )
        r = np.sqrt(2.0 * spec.nu) * np.sqrt(sq) / spec.lengthscale
        e = spec.magnitude * np.exp(-r)
        # dK/dlog(kappa) = -r dK/dr
        if spec.nu == 0.5:
            dl = e * r
        elif spec.nu == 1.5:
            dl = e * r * r
        else:
            dl = e * r * r * (1.0 + r) / 3.0
    return {"magnitude": k, "lengthscale": dl}


def _embedded(points: Sequence[ManifoldPoint], spec: KernelSpec) -> np.ndarray:
    emb = embed_all(points)
    if len(points):
        check_compatible(spec, points[0].kind)
    return emb


def kernel_eval(spec: KernelSpec, p1: ManifoldPoint, p2: ManifoldPoint) -> float:
    a = _embedded([p1, p2], spec)
    sq = float(np.sum((a[0] - a[1]) ** 2))
    return float(gram_from_sqdist(spec, np.array(sq)))


def gram(spec: KernelSpec, points: Sequence[ManifoldPoint]) -> np.ndarray:
    return gram_from_sqdist(spec, sqdist_matrix(_embedded(points, spec)))


def gram_cross(spec: KernelSpec, a: Sequence[ManifoldPoint],
               b: Sequence[ManifoldPoint]) -> np.ndarray:
    ea, eb = _embedded(a, spec), _embedded(b, spec)
    if len(a) and len(b) and a[0].kind != b[0].kind:
        raise KernelError(f"kind mismatch: {a[0].kind} vs {b[0].kind}")
    if ea.shape[0] == 0 or eb.shape[0] == 0:
        return np.zeros((ea.shape[0], eb.shape[0]))
    return gram_from_sqdist(spec, sqdist_cross(ea, eb))


def gram_grad_log(spec: KernelSpec, points: Sequence[ManifoldPoint]) -> dict[str, np.ndarray]:
    return grad_log_from_sqdist(spec, sqdist_matrix(_embedded(points, spec)))


def psd_violation(g: np.ndarray) -> float:
    """How far the Gram matrix falls below the PSD bound (<= 0 means fine)."""
    lam = np.linalg.eigvalsh(g)
    return float(-lam[0] - 1e-8 * max(1.0, lam[-1]))


def increment_variance(spec: KernelSpec, x: ManifoldPoint,
                       path: Sequence[ManifoldPoint]) -> np.ndarray:
    """Mean-square increments E[(w(gamma(a)) - w(x))^2] along a path."""
    kxx = kernel_eval(spec, x, x)
    return np.array([
        kernel_eval(spec, q, q) - 2.0 * kernel_eval(spec, x, q) + kxx for q in path
    ])


def great_circle_path(x: ManifoldPoint, offsets, direction=None) -> list[ManifoldPoint]:
    """Points at arc length ``a`` from x along a great circle."""
    xv = np.asarray(x.coords, dtype=float)
    if direction is None:
        direction = np.eye(xv.size)[np.argmin(np.abs(xv))]
    v = np.asarray(direction, dtype=float)
    v = v - (v @ xv) * xv
    v /= np.linalg.norm(v)
    return [ManifoldPoint(x.kind, np.cos(a) * xv + np.sin(a) * v) for a in offsets]


def scaling_exponent(offsets, variances) -> float:
    """Least-squares slope of log V(a) against log |a|."""
    la = np.log(np.abs(np.asarray(offsets, dtype=float)))
    lv = np.log(np.asarray(variances, dtype=float))
    slope, _ = np.polyfit(la, lv, 1)
    return float(slope)
