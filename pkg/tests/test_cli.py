import json
import subprocess
import sys

import numpy as np
import pytest

import egp.simgen as simgen
from egp.cli import (
    EXIT_CONFIG,
    EXIT_CONTRACT,
    EXIT_NUMERICAL,
    EXIT_PARTIAL,
    main,
    smoothness_exponent,
)
from egp.gp import predict
from egp.io import read_dataset, write_dataset
from egp.kernels import INTRINSIC, MATERN, SQEXP, KernelSpec
from egp.manifolds import Sphere
from egp.simgen import Dataset

from conftest import sample

FAST_HMC = ["--n-iter", "40", "--burn-in", "15", "--leapfrog-steps", "5"]


def _header(path):
    with open(path) as fh:
        return json.loads(fh.readline()[1:])


def _rows(path):
    with open(path) as fh:
        return len(fh.read().splitlines()) - 2


def test_simulate_sphere(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["simulate", "sphere-regression", "--n", "100", "--snr-db", "26",
                 "--seed", "7", "--out", str(out)]) == 0
    assert _rows(out) == 100
    h = _header(out)
    assert h["manifold"] == "sphere" and h["params"] == {"d": 2}
    printed = capsys.readouterr().out
    assert "seed 7" in printed and "realized SNR" in printed


def test_simulate_grassmann(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["simulate", "grassmann-regression", "--n", "300", "--snr-db", "30",
                 "--out", str(out)]) == 0
    assert _rows(out) == 300
    assert _header(out)["params"] == {"m": 10, "k": 5}


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        main(["simulate", "spd-classification", "--n", "20", "--seed", "3", "--out", str(p)])
    assert a.read_bytes() == b.read_bytes()


def test_missing_flag_exits_2_with_usage(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "sphere-regression", "--out", str(tmp_path / "x.csv")])
    assert exc.value.code == EXIT_CONFIG
    assert "usage:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--model", "m.json"])
    assert exc.value.code == EXIT_CONFIG


def test_bad_config_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["simulate", "sphere-regression", "--n", "5", "--config", str(bad),
                 "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert main(["fit", "--data", str(tmp_path / "missing.csv"),
                 "--model", str(tmp_path / "m.json")]) == EXIT_CONFIG


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 12, "seed": 5}))
    out = tmp_path / "a.csv"
    assert main(["simulate", "sphere-regression", "--config", str(cfg),
                 "--out", str(out)]) == 0
    assert _rows(out) == 12
    assert main(["simulate", "sphere-regression", "--config", str(cfg), "--n", "9",
                 "--out", str(out)]) == 0
    assert _rows(out) == 9
    ref = tmp_path / "ref.csv"
    main(["simulate", "sphere-regression", "--n", "9", "--seed", "5", "--out", str(ref)])
    assert ref.read_bytes() == out.read_bytes()


def test_fit_predict_interpolates(tmp_path, capsys):
    data = tmp_path / "d.csv"
    main(["simulate", "sphere-regression", "--n", "30", "--seed", "1", "--out", str(data)])
    model = tmp_path / "m.json"
    assert main(["fit", "--data", str(data), "--model", str(model), "--noise-var", "0",
                 "--lengthscale", "2"]) == 0
    summary = tmp_path / "s.json"
    out = tmp_path / "p.csv"
    assert main(["predict", "--model", str(model), "--data", str(data), "--out", str(out),
                 "--summary", str(summary)]) == 0
    s = json.loads(summary.read_text())
    assert s["rmse"] < 1e-6
    assert out.read_text().splitlines()[0] == "mean,var"


def test_model_round_trip_bit_identical(tmp_path):
    data = tmp_path / "d.csv"
    main(["simulate", "sphere-regression", "--n", "25", "--seed", "2", "--out", str(data)])
    model = tmp_path / "m.json"
    main(["fit", "--data", str(data), "--model", str(model), "--noise-var", "0.01"])
    out = tmp_path / "p.csv"
    main(["predict", "--model", str(model), "--data", str(data), "--out", str(out)])
    from egp.gp import fit_regression

    ds = read_dataset(data)
    mean, var = predict(fit_regression(ds.points, ds.y, KernelSpec(SQEXP), 0.01), ds.points)
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    assert [float(r[0]) for r in rows] == mean.tolist()
    assert [float(r[1]) for r in rows] == var.tolist()


def _sphere_labels(tmp_path, n=24):
    pts = sample(Sphere(2), n, seed=3)
    lab = (np.array([p.coords[2] for p in pts]) > 0).astype(float)
    ds = Dataset(Sphere(2), pts, lab, None, {"task": "classification"})
    path = tmp_path / "c.csv"
    write_dataset(path, ds)
    return path


def test_intrinsic_kernel_contract(tmp_path):
    data = _sphere_labels(tmp_path)
    model = tmp_path / "m.json"
    assert main(["fit", "--data", str(data), "--model", str(model), "--kernel", INTRINSIC]) == 0
    assert main(["classify", "--model", str(model), "--data", str(data),
                 "--out", str(tmp_path / "p.csv")]) == 0
    grass = tmp_path / "g.csv"
    main(["simulate", "grassmann-regression", "--n", "10", "--out", str(grass)])
    assert main(["fit", "--data", str(grass), "--model", str(model),
                 "--kernel", INTRINSIC]) == EXIT_CONTRACT


def test_classify_contracts(tmp_path):
    reg = tmp_path / "r.csv"
    main(["simulate", "sphere-regression", "--n", "10", "--out", str(reg)])
    model = tmp_path / "m.json"
    main(["fit", "--data", str(reg), "--model", str(model)])
    assert main(["classify", "--model", str(model), "--data", str(reg),
                 "--out", str(tmp_path / "p.csv")]) == EXIT_CONTRACT
    other = tmp_path / "o.csv"
    main(["simulate", "spd-classification", "--n", "10", "--out", str(other)])
    assert main(["predict", "--model", str(model), "--data", str(other),
                 "--out", str(tmp_path / "p.csv")]) == EXIT_CONTRACT


def test_shape_classification_pipeline(tmp_path):
    train, test = tmp_path / "tr.csv", tmp_path / "te.csv"
    main(["simulate", "shape-classification", "--n", "60", "--seed", "1", "--out", str(train)])
    main(["simulate", "shape-classification", "--n", "40", "--seed", "1", "--out", str(test)])
    model = tmp_path / "m.json"
    assert main(["fit", "--data", str(train), "--model", str(model), "--optimize",
                 "--experiment", "shape_classification"]) == 0
    summary = tmp_path / "s.json"
    assert main(["classify", "--model", str(model), "--data", str(test),
                 "--out", str(tmp_path / "p.csv"), "--summary", str(summary)]) == 0
    assert json.loads(summary.read_text())["accuracy"] >= 0.9


def test_numerical_failure_exit_4(tmp_path):
    pts = sample(Sphere(2), 1) * 2
    ds = Dataset(Sphere(2), pts, np.array([0.0, 1.0]), None, {"task": "regression"})
    data = tmp_path / "dup.csv"
    write_dataset(data, ds)
    assert main(["fit", "--data", str(data), "--model", str(tmp_path / "m.json"),
                 "--noise-var", "0"]) == EXIT_NUMERICAL


def test_hmc_mode_fit_and_predict(tmp_path):
    data = tmp_path / "d.csv"
    main(["simulate", "sphere-regression", "--n", "20", "--seed", "4", "--out", str(data)])
    model, trace, summ = tmp_path / "m.json", tmp_path / "t.csv", tmp_path / "s.json"
    args = ["fit", "--data", str(data), "--model", str(model), "--mode", "hmc",
            "--trace", str(trace), "--summary", str(summ), "--n-draws", "5", "--seed", "3",
            *FAST_HMC]
    assert main(args) == 0
    assert trace.read_text().splitlines()[0] == \
        "magnitude,lengthscale,noise_var,log_posterior,accepted"
    assert _rows(trace) == 24
    s = json.loads(summ.read_text())
    assert {"parameters", "acceptance_rate", "step_size"} <= set(s)
    first = model.read_bytes()
    assert main(args) == 0
    assert model.read_bytes() == first
    out = tmp_path / "p.csv"
    assert main(["predict", "--model", str(model), "--data", str(data), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 21


def test_hmc_subcommand(tmp_path, capsys):
    data = tmp_path / "d.csv"
    main(["simulate", "spd-classification", "--n", "16", "--out", str(data)])
    capsys.readouterr()
    assert main(["sample", "--data", str(data), "--experiment", "spd_classification",
                 *FAST_HMC]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out["medians"]) == {"magnitude", "lengthscale"}


def _bench(tmp_path, name, *extra):
    csv = tmp_path / f"{name}.csv"
    code = main(["benchmark", "--experiment", "sphere_regression", "--n-train", "15",
                 "--n-test", "5", "--replications", "1", "--seed", "42", "--inference",
                 "map", "--kernels", f"sqexp,{INTRINSIC}", "--out-csv", str(csv),
                 "--out-json", str(tmp_path / f"{name}.json"), *extra])
    return code, csv


def test_benchmark_byte_identical(tmp_path):
    c1, a = _bench(tmp_path, "a")
    c2, b = _bench(tmp_path, "b")
    assert c1 == c2 == 0
    assert a.read_bytes() == b.read_bytes()
    report = json.loads((tmp_path / "a.json").read_text())
    assert len(report["cells"]) == 2


def test_benchmark_interrupt_is_partial(tmp_path, monkeypatch):
    calls = []
    real = simgen._task

    def flaky(args):
        if calls:
            raise KeyboardInterrupt
        calls.append(1)
        return real(args)

    monkeypatch.setattr(simgen, "_task", flaky)
    code, csv = _bench(tmp_path, "p")
    assert code == EXIT_PARTIAL
    assert "interrupted" in csv.read_text()


def test_benchmark_config_errors(tmp_path, monkeypatch):
    code, _ = _bench(tmp_path, "x", "--threads", "0")
    assert code == EXIT_CONFIG
    monkeypatch.setenv("EGP_THREADS", "many")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"threads": 2}))
    code, _ = _bench(tmp_path, "y", "--config", str(cfg))
    assert code == EXIT_CONFIG
    assert main(["benchmark", "--experiment", "grassmann_regression", "--kernels",
                 "intrinsic"]) == EXIT_CONFIG


@pytest.mark.parametrize("flags, expected, verdict", [
    ([], 2.0, "MS differentiable"),
    (["--kernel", INTRINSIC], 1.0, "not MS differentiable"),
    (["--kernel", MATERN, "--nu", "2.5"], 2.0, "MS differentiable"),
])
def test_smoothness(flags, expected, verdict, capsys, tmp_path):
    out = tmp_path / "s.json"
    assert main(["smoothness", *flags, "--out", str(out)]) == 0
    r = json.loads(out.read_text())
    assert abs(r["exponent"] - expected) < 0.05
    assert r["verdict"] == verdict
    assert verdict in capsys.readouterr().out


def test_smoothness_non_sphere_exit_3():
    assert main(["smoothness", "--manifold", "grassmann"]) == EXIT_CONTRACT


def test_smoothness_exponent_helper():
    assert abs(smoothness_exponent(KernelSpec(SQEXP), 3) - 2.0) < 0.05


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "egp.cli", "smoothness"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "MS differentiable" in r.stdout
    r = subprocess.run([sys.executable, "-m", "egp.cli", "simulate", "sphere-regression"],
                       capture_output=True, text=True, cwd=tmp_path)
    assert r.returncode == EXIT_CONFIG and "usage" in r.stderr
