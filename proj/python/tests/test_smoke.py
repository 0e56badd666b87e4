import math

import numpy as np
import pytest

import ontraffic as ot


@pytest.fixture(scope="module")
def data():
    return ot.generate_dataset({"scenario_count": 3, "n_cells": 25, "seed": 5})


def test_generation_is_deterministic(data):
    again = ot.generate_dataset({"scenario_count": 3, "n_cells": 25, "seed": 5})
    assert len(data) == 3
    s, t = data.scenario(1), again.scenario(1)
    assert np.array_equal(s["rho"], t["rho"])
    assert s["rho"].shape == (len(s["t"]), len(s["x"]))
    assert s["probes"].shape[1] == 5
    assert np.all((s["rho"] >= 0) & (s["rho"] <= 1))


def test_dataset_round_trip(data, tmp_path):
    path = tmp_path / "d.ontd"
    data.save(path)
    loaded = ot.load_dataset(path)
    assert len(loaded) == len(data)
    assert np.array_equal(loaded.scenario(2)["v"], data.scenario(2)["v"])
    with pytest.raises(ot.DatasetError):
        ot.load_dataset(tmp_path / "missing.ontd")


def test_bad_config_raises():
    with pytest.raises(ot.ConfigError):
        ot.generate_dataset({"scenario_count": 2, "n_cells": 1})
    with pytest.raises(ot.ConfigError):
        ot.generate_dataset({"no_such_key": 1})


def test_predict_shapes_and_permutation(data):
    model = ot.Model.init(ot.tiny_model_config(), seed=2)
    w = data.window(0, 3.0)
    out = model.predict(w["coords"], w["values"], w["queries"])
    n = len(w["queries"])
    for key in ("rho", "v", "sigma_rho", "sigma_v"):
        assert out[key].shape == (n,)
        assert np.all(np.isfinite(out[key]))
    assert np.all(out["sigma_rho"] > 0)
    perm = np.random.default_rng(0).permutation(len(w["coords"]))
    shuffled = model.predict(w["coords"][perm], w["values"][perm], w["queries"])
    assert np.allclose(shuffled["rho"], out["rho"], atol=1e-9)
    with pytest.raises(ValueError):
        model.predict(w["coords"][:, :2], w["values"], w["queries"])


def test_default_model_size():
    assert ot.Model.init(None, 0).parameter_count == 183875


def test_train_save_load_evaluate(data, tmp_path):
    seen = []
    cfg = dict(ot.default_train_config(), epochs=3, n_queries=64, val_queries=64, batch_size=2)
    model, history = ot.train(data, ot.tiny_model_config(), cfg, on_epoch=seen.append)
    assert [r["epoch"] for r in history] == [0, 1, 2]
    assert len(seen) == 3
    assert all(math.isfinite(r["train_mse"]) for r in history)
    path = tmp_path / "m.ontc"
    model.save(path)
    loaded = ot.Model.load(path)
    assert loaded.parameter_count == model.parameter_count
    assert loaded.meta["train_config"]["epochs"] == 3
    a, b = ot.evaluate(model, data, seed=1), ot.evaluate(loaded, data, seed=1)
    # weights are stored in single precision
    assert a["mse"] == pytest.approx(b["mse"], rel=1e-5)
    assert a["per_scenario_mse"].shape == (3,)


def test_coverage_helpers():
    assert abs(ot.expected_coverage(1.0) - 0.682689492137086) < 1e-12
    rng = np.random.default_rng(3)
    sigma = rng.uniform(0.01, 0.2, 50000)
    truth = 0.4 + sigma * rng.standard_normal(sigma.size)
    c = ot.coverage(np.full(sigma.size, 0.4), sigma, truth, [0.5, 1.0, 2.0])
    assert c["n"] == sigma.size
    assert np.max(np.abs(c["observed"] - c["expected"])) < 0.02
