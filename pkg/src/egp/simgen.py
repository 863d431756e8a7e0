"""Simulation datasets and the benchmark grid runner.

Regression generators reproduce the sphere and Grassmann simulations;
classification generators are synthetic stand-ins for landmark-shape and
diffusion-tensor data. ``run_benchmark`` fits every grid cell and replication
and scores held-out predictions.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EgpError
from .gp import fit_laplace, fit_regression, predict, predict_prob
from .hmc import (
    HmcChain,
    HmcConfig,
    LogPosterior,
    chain_predict,
    experiment_defaults,
    hmc_sample,
    map_estimate,
)
from .kernels import INTRINSIC, MATERN, SQEXP
from .manifolds import (
    Grassmann,
    ManifoldKind,
    ManifoldPoint,
    PlanarShape,
    Spd,
    Sphere,
    preshape,
    sample_uniform,
    symmetric_to_vec,
)

__all__ = [
    "EXPERIMENTS",
    "NAIVE",
    "Dataset",
    "snr_to_noise_sd",
    "realized_snr_db",
    "gen_sphere_regression",
    "gen_grassmann_regression",
    "gen_shape_classification",
    "gen_spd_classification",
    "raw_preshape_points",
    "ExperimentConfig",
    "BenchmarkReport",
    "fit_and_score",
    "run_benchmark",
]

log = logging.getLogger(__name__)

EXPERIMENTS = ("sphere_regression", "grassmann_regression",
               "shape_classification", "spd_classification")
# SqExp on raw (un-embedded) preshape coordinates, the naive baseline for shapes
NAIVE = "naive_sqexp"

SHAPE_NOISE_SD = 0.01
SHAPE_SEPARATION = 0.05
SPD_SEPARATION = 2.0
SPD_NOISE_SD = 0.3


@dataclass
class Dataset:
    kind: ManifoldKind
    points: list
    y: np.ndarray
    f: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def is_classification(self) -> bool:
        task = self.meta.get("task")
        if task is not None:
            return task == "classification"
        return self.f is None

    def __len__(self) -> int:
        return len(self.points)

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        def part(sl):
            return Dataset(self.kind, self.points[sl], self.y[sl],
                           None if self.f is None else self.f[sl], dict(self.meta))
        return part(slice(0, n_train)), part(slice(n_train, None))


def snr_to_noise_sd(signal, snr_db: float) -> float:
    """Noise sd giving ``10 log10(var(signal) / sd^2) = snr_db``."""
    signal = np.asarray(signal, dtype=float)
    sd = float(np.std(signal))
    if signal.size < 2 or sd == 0.0:
        raise ValueError("signal is constant; SNR is undefined")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return sd / 10.0 ** (snr_db / 20.0)


def realized_snr_db(signal, noise) -> float:
    return 10.0 * math.log10(np.var(signal) / np.var(noise))


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _add_noise(f: np.ndarray, snr_db: float, rng: np.random.Generator):
    sd = snr_to_noise_sd(f, snr_db)
    eps = rng.standard_normal(f.size)
    return f + sd * eps, sd


def gen_sphere_regression(n: int, snr_db: float = 26.0, seed=0) -> Dataset:
    """Uniform points on S^2 with F(x) = x1 + x2 + x3."""
    if n < 2:
        raise ValueError("need n >= 2")
    rng = _rng(seed)
    kind = Sphere(2)
    points = [sample_uniform(kind, rng) for _ in range(n)]
    f = np.array([p.coords.sum() for p in points])
    y, sd = _add_noise(f, snr_db, rng)
    return Dataset(kind, points, y, f, {"seed": _seed_repr(seed), "snr_db": snr_db,
                                        "noise_sd": sd})


def draw_beta(m: int, seed, norm: float | None = None) -> np.ndarray:
    """Fixed regression vector for the Grassmann model: a uniform random
    direction scaled to ``norm`` (default sqrt(m))."""
    v = _rng(seed).standard_normal(m)
    return v / np.linalg.norm(v) * (math.sqrt(m) if norm is None else norm)


def gen_grassmann_regression(n: int, m: int = 10, k: int = 5, snr_db: float = 20.0,
                             seed=0, beta: np.ndarray | None = None,
                             beta_norm: float | None = None) -> Dataset:
    """Subspaces X in Gr_k(R^m) with F(X) = beta' X X' beta."""
    kind = Grassmann(m, k)
    if beta is None:
        beta = draw_beta(m, [*_seed_list(seed), 0xBE7A], beta_norm)
    beta = np.asarray(beta, dtype=float)
    rng = _rng(seed)
    points = [sample_uniform(kind, rng) for _ in range(n)]
    f = np.array([float(np.sum((p.coords.T @ beta) ** 2)) for p in points])
    y, sd = _add_noise(f, snr_db, rng)
    return Dataset(kind, points, y, f, {"seed": _seed_repr(seed), "snr_db": snr_db,
                                        "noise_sd": sd, "beta": beta.tolist()})


def _shape_templates(k: int, separation: float, rng: np.random.Generator):
    base = preshape(rng.standard_normal(k) + 1j * rng.standard_normal(k)).coords
    # perturbation orthogonal to translation, scaling and rotation of the base
    d = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    nuisance = [np.ones(k, complex), 1j * np.ones(k, complex), base, 1j * base]
    basis = []
    for v in nuisance:
        for b in basis:
            v = v - np.real(np.vdot(b, v)) * b
        basis.append(v / np.linalg.norm(v))
    for b in basis:
        d = d - np.real(np.vdot(b, d)) * b
    d /= np.linalg.norm(d)
    return base - 0.5 * separation * d, base + 0.5 * separation * d


def gen_shape_classification(n: int, k_landmarks: int = 8,
                             separation: float = SHAPE_SEPARATION,
                             seed=0, noise_sd: float = SHAPE_NOISE_SD,
                             nuisance: bool = True) -> Dataset:
    """Two-class planar shapes observed under random similarity transforms.

    Each sample is a class template plus isotropic landmark noise, then
    rotated, rescaled and translated at random (skipped when ``nuisance`` is
    false, with the random stream consumed identically) and preshaped.
    """
    if k_landmarks < 3:
        raise ValueError("need k >= 3 landmarks")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = _rng(seed)
    templates = _shape_templates(k_landmarks, separation, rng)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    points = []
    for lab in labels:
        z = templates[lab] + noise_sd * (rng.standard_normal(k_landmarks)
                                         + 1j * rng.standard_normal(k_landmarks))
        theta = rng.uniform(0, 2 * math.pi)
        scale = rng.uniform(0.5, 2.0)
        shift = 5.0 * (rng.standard_normal() + 1j * rng.standard_normal())
        if nuisance:
            z = scale * np.exp(1j * theta) * z + shift
        points.append(preshape(z))
    return Dataset(PlanarShape(k_landmarks), points, labels.astype(float), None,
                   {"seed": _seed_repr(seed), "separation": separation,
                    "noise_sd": noise_sd})


def _sym_from_vec(v: np.ndarray, n: int) -> np.ndarray:
    a = np.zeros((n, n))
    a[np.diag_indices(n)] = v[:n]
    iu = np.triu_indices(n, 1)
    a[iu] = v[n:] / math.sqrt(2.0)
    return a + np.triu(a, 1).T


def _sym_exp(a: np.ndarray) -> np.ndarray:
    lam, u = np.linalg.eigh(a)
    out = (u * np.exp(lam)) @ u.T
    return 0.5 * (out + out.T)


def gen_spd_classification(n: int, separation: float = SPD_SEPARATION, seed=0,
                           noise_sd: float = SPD_NOISE_SD, size: int = 3) -> Dataset:
    """Class 0: exp(S); class 1: exp(M + S), with ||M||_F = separation and S
    symmetric Gaussian noise (iid N(0, noise_sd^2) in log-Frobenius coordinates)."""
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = _rng(seed)
    dim = size * (size + 1) // 2
    direction = rng.standard_normal(dim)
    shift = _sym_from_vec(separation * direction / np.linalg.norm(direction), size)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    kind = Spd(size)
    points = []
    for lab in labels:
        s = _sym_from_vec(noise_sd * rng.standard_normal(dim), size)
        points.append(ManifoldPoint(kind, _sym_exp(s + lab * shift)))
    return Dataset(kind, points, labels.astype(float), None,
                   {"seed": _seed_repr(seed), "separation": separation,
                    "noise_sd": noise_sd, "shift": symmetric_to_vec(shift).tolist()})


def raw_preshape_points(points: Sequence[ManifoldPoint]) -> list[ManifoldPoint]:
    """Reinterpret preshapes as plain unit vectors in R^(2k) (no embedding)."""
    out = []
    for p in points:
        u = np.asarray(p.coords)
        out.append(ManifoldPoint(Sphere(2 * u.size - 1), np.concatenate([u.real, u.imag])))
    return out


# --- benchmark ---------------------------------------------------------------

def _seed_list(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def _seed_repr(seed):
    return _seed_list(seed) if isinstance(seed, (list, tuple)) else int(seed)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    experiment: str = "sphere_regression"
    n_train: tuple = (100,)
    n_test: int = 100
    snr_db: tuple = (26.0,)
    separation: tuple | None = None
    kernels: tuple = (SQEXP,)
    nu: float | None = None
    inference: str = "hmc"
    hmc: HmcConfig | None = None
    n_draws: int = 200
    predict_mode: str = "average"
    seed: int = 0
    replications: int = 10
    m: int = 10
    k: int = 5
    beta_norm: float | None = None
    k_landmarks: int = 8
    noise_sd: float | None = None
    threads: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        self.n_train = tuple(int(v) for v in np.atleast_1d(self.n_train))
        self.snr_db = tuple(float(v) for v in np.atleast_1d(self.snr_db))
        if self.separation is None:
            self.separation = (SPD_SEPARATION if self.experiment == "spd_classification"
                               else SHAPE_SEPARATION,)
        self.separation = tuple(float(v) for v in np.atleast_1d(self.separation))
        self.kernels = tuple(np.atleast_1d(self.kernels).tolist())
        if any(v < 1 for v in self.n_train) or self.n_test < 1:
            raise ValueError("sizes must be positive")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not all(math.isfinite(v) for v in self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.inference not in ("hmc", "map"):
            raise ValueError(f"unknown inference {self.inference!r}")
        for kern in self.kernels:
            if kern not in (SQEXP, MATERN, INTRINSIC, NAIVE):
                raise ValueError(f"unknown kernel {kern!r}")
            if kern == MATERN and self.nu is None:
                raise ValueError("Matern kernel needs nu")
            if kern == INTRINSIC and self.experiment != "sphere_regression":
                raise ValueError("intrinsic kernel is only defined on the sphere")
            if kern == NAIVE and self.experiment != "shape_classification":
                raise ValueError("naive baseline is only defined for shapes")

    @property
    def is_classification(self) -> bool:
        return self.experiment.endswith("classification")

    @property
    def levels(self) -> tuple:
        return self.separation if self.is_classification else self.snr_db

    def hmc_config(self) -> HmcConfig:
        return self.hmc if self.hmc is not None else experiment_defaults(self.experiment)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hmc"] = self.hmc_config().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("hmc") is not None and not isinstance(d["hmc"], HmcConfig):
            d["hmc"] = HmcConfig.from_dict(d["hmc"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment fields {sorted(unknown)}")
        return cls(**d)


def generate(config: ExperimentConfig, n_total: int, level: float, seed) -> Dataset:
    exp = config.experiment
    if exp == "sphere_regression":
        return gen_sphere_regression(n_total, level, seed)
    if exp == "grassmann_regression":
        beta = draw_beta(config.m, [_seed_list(seed)[0], 0xBE7A], config.beta_norm)
        return gen_grassmann_regression(n_total, config.m, config.k, level, seed, beta=beta)
    if exp == "shape_classification":
        kw = {} if config.noise_sd is None else {"noise_sd": config.noise_sd}
        return gen_shape_classification(n_total, config.k_landmarks, level, seed, **kw)
    kw = {} if config.noise_sd is None else {"noise_sd": config.noise_sd}
    return gen_spd_classification(n_total, level, seed, **kw)


def fit_and_score(config: ExperimentConfig, train: Dataset, test: Dataset,
                  kernel: str, hmc_seed: int) -> dict:
    """Fit one model on ``train`` and score it on ``test``."""
    model_kind = "classification" if config.is_classification else "regression"
    tr_pts, te_pts = train.points, test.points
    family = kernel
    if kernel == NAIVE:
        tr_pts, te_pts = raw_preshape_points(tr_pts), raw_preshape_points(te_pts)
        family = SQEXP
    hcfg = config.hmc_config().replace(seed=hmc_seed)
    if model_kind == "classification" and "noise_var" in hcfg.sampled:
        hcfg = hcfg.replace(sampled=tuple(s for s in hcfg.sampled if s != "noise_var"))
    nu = config.nu if family == MATERN else None
    target = LogPosterior(tr_pts, train.y, model_kind, family, hcfg, nu=nu)
    out = {}
    if config.inference == "hmc":
        chain = hmc_sample(target, hcfg)
        pred = chain_predict(chain, tr_pts, train.y, te_pts, model_kind,
                             n_draws=config.n_draws, mode=config.predict_mode)
        out.update(acceptance_rate=chain.acceptance_rate, step_size=chain.step_size,
                   n_failed_draws=pred.n_failed,
                   posterior_median=dict(zip(chain.names, chain.median().tolist())))
        mean, prob = pred.mean, pred.prob
    else:
        theta = map_estimate(target)
        holder = HmcChain(target.names, theta[None, :], np.zeros(1), np.ones(1, bool), 0.0,
                          target.fixed, family, nu, model_kind)
        spec, noise = holder.params_at(theta)
        out.update(posterior_mode=dict(zip(target.names, theta.tolist())))
        if model_kind == "regression":
            mean, _ = predict(fit_regression(tr_pts, train.y, spec, noise), te_pts)
            prob = None
        else:
            prob = predict_prob(fit_laplace(tr_pts, train.y, spec), te_pts)
            mean = None
    if model_kind == "regression":
        out["rmse"] = float(np.sqrt(np.mean((mean - test.y) ** 2)))
        out["rmse_f"] = float(np.sqrt(np.mean((mean - test.f) ** 2)))
    else:
        out["accuracy"] = float(np.mean((prob > 0.5) == (test.y > 0.5)))
        out["mean_abs_margin"] = float(np.mean(np.abs(prob - 0.5)))
    return out


def _task(args):
    config, cell_index, n, level, kernel, rep = args
    t0 = time.perf_counter()
    row = {"cell": cell_index, "n_train": n, "level": level, "kernel": kernel,
           "replication": rep, "failed": False, "error": ""}
    try:
        data_seed = [config.seed + rep, n, _level_code(level)]
        data = generate(config, n + config.n_test, level, data_seed)
        train, test = data.split(n)
        hmc_seed = _derive_seed(config.seed + rep, n, _level_code(level),
                                config.kernels.index(kernel))
        row.update(fit_and_score(config, train, test, kernel, hmc_seed))
    except (EgpError, ValueError, np.linalg.LinAlgError) as exc:
        row.update(failed=True, error=f"{type(exc).__name__}: {exc}")
    row["runtime_s"] = time.perf_counter() - t0
    return row


def _level_code(level: float) -> int:
    return int(round(level * 1000))


@dataclass
class BenchmarkReport:
    config: dict
    rows: list
    partial: bool = False

    @property
    def metric(self) -> str:
        return "accuracy" if self.config["experiment"].endswith("classification") else "rmse"

    def cells(self) -> list[dict]:
        out = []
        keys = []
        for r in self.rows:
            key = (r["cell"], r["n_train"], r["level"], r["kernel"])
            if key not in keys:
                keys.append(key)
        for cell, n, level, kernel in keys:
            rows = [r for r in self.rows if r["cell"] == cell]
            ok = [r for r in rows if not r["failed"]]
            entry = {"cell": cell, "n_train": n, "level": level, "kernel": kernel,
                     "n_ok": len(ok), "n_failed": len(rows) - len(ok),
                     "runtime_s": float(sum(r.get("runtime_s", 0.0) for r in rows))}
            metrics = ("rmse", "rmse_f") if self.metric == "rmse" else ("accuracy", "mean_abs_margin")
            for name in metrics:
                vals = np.array([r[name] for r in ok if name in r], dtype=float)
                if vals.size:
                    entry[name] = {"mean": float(vals.mean()),
                                   "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                                   "median": float(np.median(vals))}
                else:
                    entry[name] = None
            out.append(entry)
        return out

    def median(self, n_train: int, level: float, kernel: str, metric: str | None = None) -> float:
        metric = metric or self.metric
        for c in self.cells():
            if c["n_train"] == n_train and c["level"] == level and c["kernel"] == kernel:
                return float("nan") if c[metric] is None else c[metric]["median"]
        raise KeyError((n_train, level, kernel))

    def grid(self, kernel: str, metric: str | None = None) -> np.ndarray:
        """Medians as an (n_train x level) array."""
        ns, levels = self.config["n_train"], self.config["levels"]
        return np.array([[self.median(n, lv, kernel, metric) for lv in levels] for n in ns])

    @property
    def any_failed(self) -> bool:
        return self.partial or any(r["failed"] for r in self.rows)

    def to_dict(self) -> dict:
        return {"config": self.config, "partial": self.partial, "cells": self.cells(),
                "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def to_csv(self) -> str:
        fields = ["cell", "n_train", "level", "kernel", "replication", "failed",
                  "rmse", "rmse_f", "accuracy", "mean_abs_margin", "acceptance_rate",
                  "error"]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in r.items()})
        return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def run_benchmark(config: ExperimentConfig) -> BenchmarkReport:
    """Run every (n_train, level, kernel) cell for each replication.

    Each task draws its data and HMC seeds from (seed + replication, cell
    coordinates), so results do not depend on execution order. An interrupt
    marks the unfinished tasks as failed and returns a partial report.
    """
    tasks = []
    cell = 0
    for n in config.n_train:
        for level in config.levels:
            for kernel in config.kernels:
                for rep in range(config.replications):
                    tasks.append((config, cell, n, level, kernel, rep))
                cell += 1
    rows: list = [None] * len(tasks)
    partial = False
    try:
        if config.threads > 1:
            with ProcessPoolExecutor(max_workers=config.threads) as pool:
                for i, row in enumerate(pool.map(_task, tasks)):
                    rows[i] = row
        else:
            for i, t in enumerate(tasks):
                rows[i] = _task(t)
                log.info("cell %d n=%d level=%s kernel=%s rep=%d done", t[1], t[2], t[3],
                         t[4], t[5])
    except KeyboardInterrupt:
        partial = True
        for i, t in enumerate(tasks):
            if rows[i] is None:
                rows[i] = {"cell": t[1], "n_train": t[2], "level": t[3], "kernel": t[4],
                           "replication": t[5], "failed": True, "error": "interrupted"}
    cfg = config.to_dict()
    cfg["levels"] = list(config.levels)
    return BenchmarkReport(cfg, rows, partial)
