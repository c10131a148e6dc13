import numpy as np
import pytest

from flowrecover import benchmarks as bm
from flowrecover.ode import Trajectory


def test_lv_shape_and_positivity(lv_data):
    assert lv_data.n_samples == 201 and lv_data.n_states == 2 and lv_data.n_inputs == 1
    assert lv_data.dt == 1.0
    assert np.all(lv_data.states > 0)
    assert np.all(lv_data.inputs == 1.0)


def test_lorenz_bounded():
    ds = bm.generate(bm.default_spec("lorenz"))
    assert ds.n_samples == 4001
    assert np.max(np.abs(ds.states)) < 60.0


@pytest.mark.parametrize("system", ["lotka_volterra", "f8_cruiser", "pathogen"])
def test_resolution_independence(system):
    coarse = bm.generate(bm.default_spec(system, duration=20.0, substeps=100))
    fine = bm.generate(bm.default_spec(system, duration=20.0, substeps=1000))
    scale = np.maximum(np.abs(fine.states), 1e-3)
    assert np.max(np.abs(coarse.states - fine.states) / scale) <= 1e-6


def test_noise_bound_and_determinism():
    spec = bm.default_spec("lotka_volterra", noise=0.1, seed=3)
    a, b = bm.generate(spec), bm.generate(spec)
    clean = bm.generate(bm.default_spec("lotka_volterra"))
    assert np.array_equal(a.states, b.states)
    dev = np.abs(a.states - clean.states)
    assert dev.max() <= 6 * 0.1 and dev.max() > 0
    assert not np.array_equal(a.states, bm.generate(bm.default_spec("lotka_volterra", noise=0.1, seed=4)).states)


def test_noiseless_repeat_identical():
    spec = bm.default_spec("lotka_volterra")
    assert np.array_equal(bm.generate(spec).states, bm.generate(spec).states)


def test_csv_round_trip(tmp_path, lv_data):
    p = tmp_path / "lv.csv"
    bm.save_csv(lv_data, p)
    back = bm.load_csv(p)
    assert back.n_samples == 201 and back.n_states == 2 and back.n_inputs == 1
    assert np.array_equal(back.states, lv_data.states)
    assert np.array_equal(back.times, lv_data.times)
    assert np.array_equal(back.inputs, lv_data.inputs)


def test_csv_gap_names_row(tmp_path):
    t = np.arange(10.0)
    t[6:] += 1.0
    ds = Trajectory(np.arange(10.0), np.zeros((10, 1)), np.zeros((10, 0)))
    p = tmp_path / "gap.csv"
    bm.save_csv(ds, p)
    lines = p.read_text().splitlines()
    lines = [lines[0]] + [f"{float(t[i])!r},0.0" for i in range(10)]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(bm.CSVFormatError, match="row 8"):
        bm.load_csv(p)


def test_csv_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("time,x1\n0,1\n")
    with pytest.raises(bm.CSVFormatError):
        bm.load_csv(p)


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        bm.BenchmarkSpec("pendulum", [0.0])
    with pytest.raises(ValueError):
        bm.default_spec("lotka_volterra", substeps=10)
    with pytest.raises(ValueError):
        bm.default_spec("lotka_volterra", duration=10.5)
    p = tmp_path / "s.json"
    p.write_text("{not json")
    with pytest.raises(ValueError):
        bm.BenchmarkSpec.load(p)
    p.write_text(bm.default_spec("lorenz").to_json())
    assert bm.BenchmarkSpec.load(p) == bm.default_spec("lorenz")


def test_divergence_reported():
    with pytest.raises(bm.GenerationError):
        bm.generate(bm.default_spec("lotka_volterra", params={"a": 5.0, "b": 0.5}))


def test_truth_models(lv_truth):
    names = lv_truth.library.names
    assert names == ["u", "x1", "x2", "x1^2", "x1*x2", "x2^2"]
    assert [sorted(s) for s in lv_truth.support_terms()] == [["x1", "x1*x2"], ["u", "x1*x2", "x2"]]
    assert bm.lorenz_model().support_size == 7
