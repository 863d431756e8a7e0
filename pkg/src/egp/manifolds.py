"""Points on the supported manifolds and their equivariant embeddings.

Each manifold kind knows how to validate a raw point, embed it into a flat
real vector, and draw random points. Matrix-valued embeddings are flattened
so that the Euclidean norm of the vector equals the Frobenius norm of the
matrix, which makes the extrinsic distance exact under flat storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, Sequence

import numpy as np

from .errors import ManifoldError

__all__ = [
    "ManifoldKind",
    "Sphere",
    "PlanarShape",
    "Spd",
    "Grassmann",
    "Stiefel",
    "ManifoldPoint",
    "ValidationReport",
    "validate",
    "preshape",
    "embed",
    "embed_all",
    "extrinsic_distance",
    "intrinsic_sphere_distance",
    "sample_uniform",
    "kind_from_dict",
    "hermitian_to_vec",
    "symmetric_to_vec",
]

SPHERE_TOL = 1e-10
PRESHAPE_TOL = 1e-10
SYMMETRY_TOL = 1e-10
ORTHONORMAL_TOL = 1e-8
SPD_FLOOR = 1e-10  # relative to the largest eigenvalue
SPD_SAMPLE_EPS = 0.1
DEGENERATE_NORM = 1e-12

_SQRT2 = np.sqrt(2.0)


def symmetric_to_vec(a: np.ndarray) -> np.ndarray:
    """Upper triangle of a real symmetric matrix, off-diagonals scaled by sqrt(2)."""
    n = a.shape[0]
    iu = np.triu_indices(n, 1)
    return np.concatenate([np.diag(a), _SQRT2 * a[iu]])


def hermitian_to_vec(h: np.ndarray) -> np.ndarray:
    """Real coordinates of a Hermitian matrix with ``||vec(H)|| = ||H||_F``."""
    n = h.shape[0]
    iu = np.triu_indices(n, 1)
    upper = h[iu]
    return np.concatenate(
        [np.diag(h).real, _SQRT2 * upper.real, _SQRT2 * upper.imag]
    )


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    invariant: str | None = None
    residual: float = 0.0

    def __bool__(self) -> bool:
        return self.ok


_OK = ValidationReport(True)


class ManifoldKind:
    """Base class for a manifold family with fixed dimension parameters."""

    name: ClassVar[str] = ""

    @property
    def embedding_dim(self) -> int:
        raise NotImplementedError

    @property
    def intrinsic_dim(self) -> int:
        raise NotImplementedError

    @property
    def raw_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    @property
    def raw_size(self) -> int:
        return int(np.prod(self.raw_shape))

    def params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"manifold": self.name, "params": self.params()}

    def check(self, coords: np.ndarray) -> ValidationReport:
        raise NotImplementedError

    def embed_coords(self, coords: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_coords(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    # flat raw storage used by the dataset files
    def to_flat(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=float).ravel(order="F")

    def from_flat(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.raw_size:
            raise ManifoldError(
                f"{self.name} expects {self.raw_size} raw values, got {flat.size}"
            )
        return flat.reshape(self.raw_shape, order="F")

    def _check_shape(self, coords: np.ndarray) -> ValidationReport | None:
        if coords.shape != self.raw_shape:
            return ValidationReport(
                False, f"shape {coords.shape} != {self.raw_shape}", float("inf")
            )
        if not np.all(np.isfinite(coords)):
            return ValidationReport(False, "non-finite coordinates", float("inf"))
        return None


@dataclass(frozen=True)
class Sphere(ManifoldKind):
    """Unit sphere S^d in R^(d+1), embedded by inclusion."""

    d: int
    name: ClassVar[str] = "sphere"

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ManifoldError(f"sphere dimension must be a positive integer, got {self.d}")

    @property
    def embedding_dim(self) -> int:
        return self.d + 1

    @property
    def intrinsic_dim(self) -> int:
        return self.d

    @property
    def raw_shape(self) -> tuple[int, ...]:
        return (self.d + 1,)

    def params(self) -> dict:
        return {"d": self.d}

    def check(self, coords):
        bad = self._check_shape(coords)
        if bad is not None:
            return bad
        resid = abs(np.linalg.norm(coords) - 1.0)
        if resid > SPHERE_TOL:
            return ValidationReport(False, "unit norm", float(resid))
        return _OK

    def embed_coords(self, coords):
        return np.array(coords, dtype=float)

    def sample_coords(self, rng):
        x = rng.standard_normal(self.d + 1)
        return x / np.linalg.norm(x)


@dataclass(frozen=True)
class PlanarShape(ManifoldKind):
    """Kendall planar shapes of k landmarks, stored as complex preshapes.

    The Veronese-Whitney embedding ``u -> u u*`` removes the remaining
    rotation. Its Hermitian image is stored with k^2 real coordinates.
    """

    k: int
    name: ClassVar[str] = "planar_shape"

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 3:
            raise ManifoldError(f"planar shapes need k >= 3 landmarks, got {self.k}")

    @property
    def embedding_dim(self) -> int:
        return self.k * self.k

    @property
    def intrinsic_dim(self) -> int:
        return 2 * self.k - 4

    @property
    def raw_shape(self) -> tuple[int, ...]:
        return (self.k,)

    @property
    def raw_size(self) -> int:
        return 2 * self.k

    def params(self) -> dict:
        return {"k": self.k}

    def to_flat(self, coords):
        coords = np.asarray(coords, dtype=complex)
        out = np.empty(2 * self.k)
        out[0::2] = coords.real
        out[1::2] = coords.imag
        return out

    def from_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != 2 * self.k:
            raise ManifoldError(
                f"{self.name} expects {2 * self.k} raw values, got {flat.size}"
            )
        return flat[0::2] + 1j * flat[1::2]

    def check(self, coords):
        bad = self._check_shape(coords)
        if bad is not None:
            return bad
        centre = abs(coords.mean())
        if centre > PRESHAPE_TOL:
            return ValidationReport(False, "centred landmarks", float(centre))
        resid = abs(np.linalg.norm(coords) - 1.0)
        if resid > PRESHAPE_TOL:
            return ValidationReport(False, "unit norm", float(resid))
        return _OK

    def embed_coords(self, coords):
        u = np.asarray(coords, dtype=complex)
        return hermitian_to_vec(np.outer(u, u.conj()))

    def sample_coords(self, rng):
        z = rng.standard_normal(self.k) + 1j * rng.standard_normal(self.k)
        return preshape(z).coords


@dataclass(frozen=True)
class Spd(ManifoldKind):
    """Symmetric positive-definite n x n matrices, embedded by the matrix log."""

    n: int = 3
    name: ClassVar[str] = "spd"

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ManifoldError(f"SPD size must be a positive integer, got {self.n}")

    @property
    def embedding_dim(self) -> int:
        return self.n * (self.n + 1) // 2

    @property
    def intrinsic_dim(self) -> int:
        return self.embedding_dim

    @property
    def raw_shape(self) -> tuple[int, ...]:
        return (self.n, self.n)

    def params(self) -> dict:
        return {"n": self.n}

    def check(self, coords):
        bad = self._check_shape(coords)
        if bad is not None:
            return bad
        asym = float(np.max(np.abs(coords - coords.T)))
        if asym > SYMMETRY_TOL:
            return ValidationReport(False, "symmetric", asym)
        lam = np.linalg.eigvalsh(coords)
        if lam[0] <= 0:
            return ValidationReport(False, "not positive definite", float(-lam[0]))
        if lam[0] < SPD_FLOOR * lam[-1]:
            return ValidationReport(
                False, "near-singular SPD matrix", float(lam[0] / lam[-1])
            )
        return _OK

    def embed_coords(self, coords):
        try:
            lam, u = np.linalg.eigh(coords)
        except np.linalg.LinAlgError as exc:
            raise ManifoldError(f"spectral decomposition failed: {exc}") from exc
        if lam[0] <= 0 or lam[0] < SPD_FLOOR * lam[-1]:
            raise ManifoldError("near-singular SPD matrix")
        return symmetric_to_vec((u * np.log(lam)) @ u.T)

    def sample_coords(self, rng):
        g = rng.standard_normal((self.n, self.n))
        a = g @ g.T + SPD_SAMPLE_EPS * np.eye(self.n)
        return 0.5 * (a + a.T)


@dataclass(frozen=True)
class _Frames(ManifoldKind):
    m: int
    k: int

    def __post_init__(self):
        for v in (self.m, self.k):
            if int(v) != v or v < 1:
                raise ManifoldError(f"{self.name} dimensions must be positive integers")
        if self.m < self.k:
            raise ManifoldError(f"{self.name} needs m >= k, got m={self.m}, k={self.k}")

    @property
    def raw_shape(self) -> tuple[int, ...]:
        return (self.m, self.k)

    def params(self) -> dict:
        return {"m": self.m, "k": self.k}

    def check(self, coords):
        bad = self._check_shape(coords)
        if bad is not None:
            return bad
        resid = float(np.max(np.abs(coords.T @ coords - np.eye(self.k))))
        if resid > ORTHONORMAL_TOL:
            return ValidationReport(False, "orthonormal columns", resid)
        return _OK

    def sample_coords(self, rng):
        q, r = np.linalg.qr(rng.standard_normal((self.m, self.k)))
        # sign fix makes Q Haar-distributed on the Stiefel manifold
        return q * np.where(np.diag(r) < 0, -1.0, 1.0)


@dataclass(frozen=True)
class Grassmann(_Frames):
    """k-planes in R^m, represented by an orthonormal basis X, embedded as XX'."""

    name: ClassVar[str] = "grassmann"

    @property
    def embedding_dim(self) -> int:
        return self.m * self.m

    @property
    def intrinsic_dim(self) -> int:
        return self.k * (self.m - self.k)

    def embed_coords(self, coords):
        return (coords @ coords.T).ravel()


@dataclass(frozen=True)
class Stiefel(_Frames):
    """Orthonormal k-frames in R^m with the inclusion embedding."""

    name: ClassVar[str] = "stiefel"

    @property
    def embedding_dim(self) -> int:
        return self.m * self.k

    @property
    def intrinsic_dim(self) -> int:
        return self.m * self.k - self.k * (self.k + 1) // 2

    def embed_coords(self, coords):
        return np.asarray(coords, dtype=float).ravel(order="F")


_KINDS = {cls.name: cls for cls in (Sphere, PlanarShape, Spd, Grassmann, Stiefel)}


def kind_from_dict(d: dict) -> ManifoldKind:
    """Inverse of ``ManifoldKind.to_dict``."""
    try:
        cls = _KINDS[d["manifold"]]
    except KeyError:
        raise ManifoldError(f"unknown manifold {d.get('manifold')!r}") from None
    return cls(**{k: int(v) for k, v in d.get("params", {}).items()})


@dataclass(frozen=True, eq=False)
class ManifoldPoint:
    """An immutable point on ``kind`` in its raw representation."""

    kind: ManifoldKind
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        dtype = complex if isinstance(self.kind, PlanarShape) else float
        c = np.array(self.coords, dtype=dtype)
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @classmethod
    def checked(cls, kind: ManifoldKind, coords) -> "ManifoldPoint":
        p = cls(kind, coords)
        report = validate(p)
        if not report:
            raise ManifoldError(
                f"invalid {kind.name} point: {report.invariant} "
                f"(residual {report.residual:.3g})"
            )
        return p


def validate(p: ManifoldPoint) -> ValidationReport:
    """Check the point against its manifold's invariants."""
    return p.kind.check(p.coords)


def preshape(landmarks: Sequence[complex] | np.ndarray) -> ManifoldPoint:
    """Centre and scale k complex landmarks to a unit-norm preshape."""
    z = np.asarray(landmarks)
    if z.ndim == 2 and z.shape[1] == 2 and not np.iscomplexobj(z):
        z = z[:, 0] + 1j * z[:, 1]
    z = z.astype(complex).ravel()
    if z.size < 3:
        raise ManifoldError(f"planar shapes need k >= 3 landmarks, got {z.size}")
    zc = z - z.mean()
    norm = np.linalg.norm(zc)
    if norm < DEGENERATE_NORM:
        raise ManifoldError("degenerate landmark configuration")
    return ManifoldPoint(PlanarShape(z.size), zc / norm)


def embed(p: ManifoldPoint) -> np.ndarray:
    """Flat real image J(p); raises on invalid input."""
    report = validate(p)
    if not report:
        if report.invariant in ("not positive definite", "near-singular SPD matrix"):
            raise ManifoldError("near-singular SPD matrix")
        raise ManifoldError(
            f"cannot embed invalid {p.kind.name} point: {report.invariant}"
        )
    out = p.kind.embed_coords(p.coords)
    if not np.all(np.isfinite(out)):
        raise ManifoldError("embedding produced non-finite values")
    return out


def _common_kind(points: Sequence[ManifoldPoint]) -> ManifoldKind | None:
    if not points:
        return None
    kind = points[0].kind
    for p in points[1:]:
        if p.kind != kind:
            raise ManifoldError(f"kind mismatch: {kind} vs {p.kind}")
    return kind


def embed_all(points: Sequence[ManifoldPoint], kind: ManifoldKind | None = None) -> np.ndarray:
    """Stack embeddings into an (n, D) array; all points must share a kind."""
    found = _common_kind(points)
    if found is None:
        return np.empty((0, kind.embedding_dim if kind is not None else 0))
    if kind is not None and found != kind:
        raise ManifoldError(f"kind mismatch: expected {kind}, got {found}")
    return np.stack([embed(p) for p in points])


def extrinsic_distance(p1: ManifoldPoint, p2: ManifoldPoint) -> float:
    if p1.kind != p2.kind:
        raise ManifoldError(f"kind mismatch: {p1.kind} vs {p2.kind}")
    return float(np.linalg.norm(embed(p1) - embed(p2)))


def chord_to_arc(chord):
    """Great-circle distance from the chord length on the unit sphere."""
    return 2.0 * np.arcsin(np.clip(0.5 * np.asarray(chord), 0.0, 1.0))


def intrinsic_sphere_distance(x1: ManifoldPoint, x2: ManifoldPoint) -> float:
    if not isinstance(x1.kind, Sphere) or x1.kind != x2.kind:
        raise ManifoldError("intrinsic distance needs two points on the same sphere")
    return float(chord_to_arc(extrinsic_distance(x1, x2)))


def sample_uniform(kind: ManifoldKind, rng: np.random.Generator) -> ManifoldPoint:
    return ManifoldPoint(kind, kind.sample_coords(rng))
