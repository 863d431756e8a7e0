"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 contract mismatch between
data, model and kernel, 4 numerical failure, 5 partial benchmark.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from .errors import KernelError, ManifoldError, NumericalError
from .gp import (
    RegressionModel,
    fit_laplace,
    fit_regression,
    model_from_dict,
    model_to_dict,
    predict,
    predict_prob,
)
from .hmc import (
    HmcChain,
    HmcConfig,
    LogPosterior,
    chain_predict,
    experiment_defaults,
    hmc_sample,
    map_estimate,
)
from .io import atomic_write, dataset_to_csv, read_dataset, read_json, write_json
from .kernels import (
    FAMILIES,
    KernelSpec,
    check_compatible,
    great_circle_path,
    increment_variance,
    scaling_exponent,
)
from .manifolds import ManifoldPoint, Sphere, kind_from_dict
from .simgen import (
    EXPERIMENTS,
    NAIVE,
    ExperimentConfig,
    gen_grassmann_regression,
    gen_shape_classification,
    gen_sphere_regression,
    gen_spd_classification,
    realized_snr_db,
    run_benchmark,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_NUMERICAL = 4
EXIT_PARTIAL = 5

THREADS_ENV = "EGP_THREADS"
SMOOTHNESS_OFFSETS = 2.0 ** -np.arange(4, 10)

log = logging.getLogger("egp")

SIMULATIONS = {
    "sphere-regression": "sphere_regression",
    "grassmann-regression": "grassmann_regression",
    "shape-classification": "shape_classification",
    "spd-classification": "spd_classification",
}


class ConfigError(Exception):
    pass


class ContractError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# --- configuration merging ---------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    return d


def _merge(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """flag > file > defaults; flags left at None do not override."""
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


HMC_FLAGS = ("n_iter", "burn_in", "step_size", "leapfrog_steps", "lengthscale_prior_on",
             "beta_power_d")


def _hmc_config(args, file_cfg: dict, experiment: str | None, seed: int) -> HmcConfig:
    base = (experiment_defaults(experiment) if experiment else HmcConfig()).to_dict()
    flags = {k: getattr(args, k, None) for k in HMC_FLAGS}
    merged = _merge(base, file_cfg.get("hmc") or {}, flags)
    merged["seed"] = seed
    try:
        return HmcConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid HMC configuration: {exc}") from None


def _threads(args, file_cfg: dict) -> int:
    """--threads wins; otherwise the config value, capped by the environment."""
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        n = file_cfg.get("threads")
        cap = os.environ.get(THREADS_ENV)
        if cap:
            try:
                cap = int(cap)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
            n = cap if n is None else min(int(n), cap)
        n = 1 if n is None else int(n)
    if n < 1:
        raise ConfigError("threads must be >= 1")
    return n


def _seed(args, file_cfg: dict) -> int:
    return int(args.seed if args.seed is not None else file_cfg.get("seed", 0))


# --- helpers ---------------------------------------------------------------

def _read_data(path):
    if not os.path.exists(path):
        raise ConfigError(f"no such file: {path}")
    try:
        return read_dataset(path)
    except ManifoldError as exc:
        raise ContractError(f"{path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _task(args, data) -> str:
    task = getattr(args, "task", None)
    if task in (None, "auto"):
        return "classification" if data.is_classification else "regression"
    return task


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ContractError("classification needs labels in {0, 1}")
    return y


def _kernel_spec(args, file_cfg: dict) -> KernelSpec:
    k = _merge({"family": "sqexp", "magnitude": 1.0, "lengthscale": 1.0, "nu": None},
               file_cfg.get("kernel") or {},
               {"family": args.kernel, "magnitude": args.magnitude,
                "lengthscale": args.lengthscale, "nu": args.nu})
    try:
        return KernelSpec(k["family"], k["magnitude"], k["lengthscale"], k.get("nu"))
    except KernelError as exc:
        raise ConfigError(str(exc)) from None


def _write(path, text: str) -> None:
    try:
        atomic_write(path, text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None


def _dump(path, obj) -> None:
    try:
        write_json(path, obj)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None


# --- subcommands -----------------------------------------------------------

def cmd_simulate(args) -> int:
    file_cfg = _load_config(args.config)
    seed = _seed(args, file_cfg)
    exp = SIMULATIONS[args.experiment]
    defaults = {"snr_db": 26.0 if exp == "sphere_regression" else 20.0,
                "m": 10, "k": 5, "k_landmarks": 8, "separation": None, "noise_sd": None,
                "beta_norm": None}
    flags = {"n": args.n, "snr_db": args.snr_db, "m": args.m, "k": args.k,
             "k_landmarks": args.k_landmarks, "separation": args.separation,
             "noise_sd": args.noise_sd, "beta_norm": args.beta_norm}
    c = _merge(defaults, {k: v for k, v in file_cfg.items() if k in flags}, flags)
    if c.get("n") is None:
        args.parser.error("the following arguments are required: --n")
    try:
        if exp == "sphere_regression":
            ds = gen_sphere_regression(int(c["n"]), float(c["snr_db"]), seed)
        elif exp == "grassmann_regression":
            ds = gen_grassmann_regression(int(c["n"]), int(c["m"]), int(c["k"]),
                                          float(c["snr_db"]), seed, beta_norm=c["beta_norm"])
        elif exp == "shape_classification":
            kw = {k: c[k] for k in ("separation", "noise_sd") if c[k] is not None}
            ds = gen_shape_classification(int(c["n"]), int(c["k_landmarks"]), seed=seed, **kw)
        else:
            kw = {k: c[k] for k in ("separation", "noise_sd") if c[k] is not None}
            ds = gen_spd_classification(int(c["n"]), seed=seed, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = args.out or f"{args.experiment}.csv"
    _write(out, dataset_to_csv(ds))
    msg = f"wrote {len(ds)} rows of {ds.kind!r} to {out} (seed {seed})"
    if ds.f is not None:
        msg += f"; realized SNR {realized_snr_db(ds.f, ds.y - ds.f):.2f} dB"
    print(msg)
    return EXIT_OK


def _target(data, task, family, nu, hcfg):
    hcfg = hcfg.replace(sampled=tuple(s for s in hcfg.sampled
                                      if not (task == "classification" and s == "noise_var")))
    return LogPosterior(data.points, data.y, task, family, hcfg, nu=nu), hcfg


def cmd_fit(args) -> int:
    file_cfg = _load_config(args.config)
    seed = _seed(args, file_cfg)
    data = _read_data(args.data)
    task = _task(args, data)
    spec = _kernel_spec(args, file_cfg)
    try:
        check_compatible(spec, data.kind)
    except KernelError as exc:
        raise ContractError(str(exc)) from None
    if task == "classification":
        _labels(data.y)
    mode = args.mode or file_cfg.get("mode", "plugin")
    noise = args.noise_var if args.noise_var is not None else float(file_cfg.get("noise_var", 0.01))
    if mode == "hmc" or args.optimize:
        hcfg = _hmc_config(args, file_cfg, args.experiment, seed)
        target, hcfg = _target(data, task, spec.family, spec.nu, hcfg)
    if mode == "hmc":
        chain = hmc_sample(target, hcfg)
        doc = {
            "type": task, "mode": "hmc", "kind": data.kind.to_dict(),
            "family": spec.family, "nu": spec.nu,
            "data_path": os.path.abspath(args.data),
            "train_points": [data.kind.to_flat(p.coords).tolist() for p in data.points],
            "response": data.y.tolist(),
            "n_draws": int(args.n_draws or file_cfg.get("n_draws", 200)),
            "predict_mode": args.predict_mode or file_cfg.get("predict_mode", "average"),
            "chain": {"names": list(chain.names), "samples": chain.samples.tolist(),
                      "fixed": chain.fixed, "step_size": chain.step_size,
                      "acceptance_rate": chain.acceptance_rate},
            "hmc": hcfg.to_dict(),
        }
        _dump(args.model, doc)
        if args.trace:
            _write(args.trace, chain.trace_csv())
        if args.summary:
            _dump(args.summary, chain.summary())
        print(f"HMC: {len(chain)} draws, acceptance {chain.acceptance_rate:.3f}, "
              f"step size {chain.step_size:.4g}")
        return EXIT_OK
    if args.optimize:
        theta = map_estimate(target)
        vals = dict(zip(target.names, theta.tolist()))
        spec = spec.replace(magnitude=vals.get("magnitude", spec.magnitude),
                            lengthscale=vals.get("lengthscale", spec.lengthscale))
        noise = vals.get("noise_var", noise)
    if task == "regression":
        model = fit_regression(data.points, data.y, spec, noise)
    else:
        model = fit_laplace(data.points, data.y, spec)
    doc = model_to_dict(model, os.path.abspath(args.data))
    doc["mode"] = "plugin"
    _dump(args.model, doc)
    if args.summary:
        _dump(args.summary, {"spec": spec.to_dict(), "noise_var": noise, "type": task})
    print(f"fitted {task} model with {spec.to_dict()}")
    return EXIT_OK


def _load_model(path):
    if not os.path.exists(path):
        raise ConfigError(f"no such file: {path}")
    doc = _load_config(path)
    try:
        if doc.get("mode") == "hmc":
            return doc, None
        return doc, model_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed model file {path}: {exc}") from None


def _predict_doc(doc, model, points):
    """(mean, var, prob) from either a plug-in or a chain model."""
    if model is not None:
        if isinstance(model, RegressionModel):
            mean, var = predict(model, points)
            return mean, var, None
        return None, None, predict_prob(model, points)
    kind = kind_from_dict(doc["kind"])
    train = [ManifoldPoint(kind, kind.from_flat(np.asarray(r))) for r in doc["train_points"]]
    c = doc["chain"]
    samples = np.asarray(c["samples"], dtype=float).reshape(-1, len(c["names"]))
    chain = HmcChain(tuple(c["names"]), samples, np.zeros(len(samples)),
                     np.ones(len(samples), bool), float(c["step_size"]), dict(c["fixed"]),
                     doc["family"], doc["nu"], doc["type"])
    pred = chain_predict(chain, train, doc["response"], points, doc["type"],
                         n_draws=doc["n_draws"], mode=doc["predict_mode"])
    if pred.n_used == 0:
        raise NumericalError("every chain draw failed to refit")
    return pred.mean, pred.var, pred.prob


def _check_kind(doc, data):
    kind = kind_from_dict(doc["kind"])
    if kind != data.kind:
        raise ContractError(f"model is for {kind!r} but data is {data.kind!r}")


def cmd_predict(args, classify: bool = False) -> int:
    doc, model = _load_model(args.model)
    data = _read_data(args.data)
    _check_kind(doc, data)
    if classify and doc["type"] != "classification":
        raise ContractError("classify needs a classification model")
    mean, var, prob = _predict_doc(doc, model, data.points)
    summary = {"n": len(data), "type": doc["type"]}
    lines = []
    if prob is None:
        lines.append("mean,var")
        lines += [f"{m!r},{v!r}" for m, v in zip(mean.tolist(), var.tolist())]
        if data.y.size:
            summary["rmse"] = float(np.sqrt(np.mean((mean - data.y) ** 2)))
        if data.f is not None:
            summary["rmse_f"] = float(np.sqrt(np.mean((mean - data.f) ** 2)))
    else:
        lines.append("prob,label")
        lines += [f"{p!r},{int(p > 0.5)}" for p in prob.tolist()]
        if data.y.size:
            y = _labels(data.y)
            summary["accuracy"] = float(np.mean((prob > 0.5) == (y == 1)))
            summary["mean_abs_margin"] = float(np.mean(np.abs(prob - 0.5)))
    _write(args.out, "\n".join(lines) + "\n")
    if args.summary:
        _dump(args.summary, summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_classify(args) -> int:
    return cmd_predict(args, classify=True)


def cmd_hmc(args) -> int:
    file_cfg = _load_config(args.config)
    seed = _seed(args, file_cfg)
    data = _read_data(args.data)
    task = _task(args, data)
    spec = _kernel_spec(args, file_cfg)
    try:
        check_compatible(spec, data.kind)
    except KernelError as exc:
        raise ContractError(str(exc)) from None
    if task == "classification":
        _labels(data.y)
    hcfg = _hmc_config(args, file_cfg, args.experiment, seed)
    target, hcfg = _target(data, task, spec.family, spec.nu, hcfg)
    chain = hmc_sample(target, hcfg)
    if args.trace:
        _write(args.trace, chain.trace_csv())
    summary = chain.summary()
    summary["config"] = hcfg.to_dict()
    if args.summary:
        _dump(args.summary, summary)
    print(json.dumps({"acceptance_rate": chain.acceptance_rate, "step_size": chain.step_size,
                      "medians": dict(zip(chain.names, chain.median().tolist()))},
                     sort_keys=True))
    return EXIT_OK


BENCH_FLAGS = ("experiment", "n_train", "n_test", "snr_db", "separation", "kernels", "nu",
               "inference", "n_draws", "predict_mode", "replications", "m", "k",
               "beta_norm", "k_landmarks", "noise_sd")


def cmd_benchmark(args) -> int:
    file_cfg = _load_config(args.config)
    seed = _seed(args, file_cfg)
    flags = {k: getattr(args, k) for k in BENCH_FLAGS}
    merged = _merge({}, {k: v for k, v in file_cfg.items() if k != "hmc"}, flags)
    experiment = merged.get("experiment")
    if experiment is None:
        args.parser.error("the following arguments are required: --experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    merged["seed"] = seed
    merged["threads"] = _threads(args, file_cfg)
    merged["hmc"] = _hmc_config(args, file_cfg, experiment, seed)
    try:
        config = ExperimentConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid benchmark configuration: {exc}") from None
    report = run_benchmark(config)
    if args.out_json:
        _write(args.out_json, report.to_json() + "\n")
    if args.out_csv:
        _write(args.out_csv, report.to_csv())
    metric = report.metric
    for c in report.cells():
        v = c[metric]
        shown = "failed" if v is None else f"{v['median']:.4f}"
        print(f"cell {c['cell']}: n={c['n_train']} level={c['level']:g} "
              f"kernel={c['kernel']} median {metric}={shown} ok={c['n_ok']}")
    if report.any_failed:
        print("benchmark incomplete: some cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def smoothness_exponent(spec: KernelSpec, dim: int = 2) -> float:
    """Fitted slope of log increment variance against log offset on S^dim."""
    kind = Sphere(dim)
    x = ManifoldPoint(kind, np.ones(dim + 1) / math.sqrt(dim + 1))
    path = great_circle_path(x, SMOOTHNESS_OFFSETS)
    return scaling_exponent(SMOOTHNESS_OFFSETS, increment_variance(spec, x, path))


def cmd_smoothness(args) -> int:
    if args.manifold != "sphere":
        raise ContractError("the smoothness diagnostic is defined on spheres only")
    spec = _kernel_spec(args, _load_config(args.config))
    exponent = smoothness_exponent(spec, args.dim)
    verdict = "MS differentiable" if exponent > 1.5 else "not MS differentiable"
    result = {"kernel": spec.to_dict(), "dim": args.dim, "exponent": exponent,
              "verdict": verdict, "offsets": SMOOTHNESS_OFFSETS.tolist()}
    if args.out:
        _dump(args.out, result)
    print(f"exponent {exponent:.4f}: {verdict}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",")]


def _kernel_flags(p):
    p.add_argument("--kernel", choices=FAMILIES, help="kernel family (default sqexp)")
    p.add_argument("--nu", type=float, help="Matern order")
    p.add_argument("--magnitude", type=float)
    p.add_argument("--lengthscale", type=float,
                   help="beta for sqexp and the intrinsic kernel, kappa for matern")


def _hmc_flags(p):
    p.add_argument("--experiment", choices=EXPERIMENTS,
                   help="take priors and iteration counts from this experiment")
    p.add_argument("--n-iter", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--leapfrog-steps", type=int)
    p.add_argument("--lengthscale-prior-on", choices=("rate", "length"))
    p.add_argument("--beta-power-d", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egp", description="Extrinsic Gaussian processes on manifolds.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON file; command-line flags take precedence")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("experiment", choices=sorted(SIMULATIONS))
    common(p)
    p.add_argument("--n", type=int, help="number of points")
    p.add_argument("--snr-db", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--beta-norm", type=float)
    p.add_argument("--k-landmarks", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--out", help="output CSV (default: <experiment>.csv)")
    p.set_defaults(func=cmd_simulate, parser=p)

    p = sub.add_parser("fit", help="fit a regression or classification model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="output model JSON")
    p.add_argument("--task", choices=("auto", "regression", "classification"), default="auto")
    p.add_argument("--mode", choices=("plugin", "hmc"))
    p.add_argument("--optimize", action="store_true",
                   help="plug in the posterior mode instead of the given hyperparameters")
    p.add_argument("--noise-var", type=float)
    p.add_argument("--n-draws", type=int)
    p.add_argument("--predict-mode", choices=("average", "plugin"))
    p.add_argument("--trace")
    p.add_argument("--summary")
    _kernel_flags(p)
    _hmc_flags(p)
    p.set_defaults(func=cmd_fit)

    for name, func in (("predict", cmd_predict), ("classify", cmd_classify)):
        p = sub.add_parser(name, help=f"{name} with a fitted model")
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--summary")
        p.set_defaults(func=func)

    p = sub.add_parser("hmc", aliases=["sample"], help="sample kernel hyperparameters")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("auto", "regression", "classification"), default="auto")
    p.add_argument("--trace")
    p.add_argument("--summary")
    _kernel_flags(p)
    _hmc_flags(p)
    p.set_defaults(func=cmd_hmc)

    p = sub.add_parser("benchmark", help="run a replicated simulation grid")
    common(p)
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--n-train", type=_ints)
    p.add_argument("--n-test", type=int)
    p.add_argument("--snr-db", type=_floats)
    p.add_argument("--separation", type=_floats)
    p.add_argument("--kernels", type=_strs, help=f"comma list from {FAMILIES + (NAIVE,)}")
    p.add_argument("--nu", type=float)
    p.add_argument("--inference", choices=("hmc", "map"))
    p.add_argument("--n-draws", type=int)
    p.add_argument("--predict-mode", choices=("average", "plugin"))
    p.add_argument("--replications", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--beta-norm", type=float)
    p.add_argument("--k-landmarks", type=int)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--threads", type=int, help=f"worker processes (overrides {THREADS_ENV})")
    p.add_argument("--n-iter", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--leapfrog-steps", type=int)
    p.add_argument("--lengthscale-prior-on", choices=("rate", "length"))
    p.add_argument("--beta-power-d", type=int)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_benchmark, parser=p)

    p = sub.add_parser("smoothness", help="mean-square smoothness diagnostic on a sphere")
    p.add_argument("--config")
    p.add_argument("--manifold", default="sphere")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--out")
    _kernel_flags(p)
    p.set_defaults(func=cmd_smoothness)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, KernelError, ManifoldError) as exc:
        print(f"contract mismatch: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
