import json

import numpy as np
import pytest

from hessfem.bakeoff import (RunManifest, relative_l2_error, replay, run_optimizer_bakeoff,
                             run_single)
from hessfem.bench import b_ref, make_benchmark, observation
from hessfem.fem import interpolate_to_quad, read_field
from hessfem.implicit import objective
from hessfem.optimize import OptimizeSettings

# Measured on the converged 32x32 newton-cg-ad run (about 4.1%), frozen with margin.
SOURCE_RECOVERY_BOUND = 0.05


def test_sizes():
    p, spec = make_benchmark("source-id", 64)
    assert (p.n_param, p.n_state) == (16384, 4225)


def test_unknown_benchmark():
    with pytest.raises(ValueError):
        make_benchmark("shape-opt", 4)
    with pytest.raises(ValueError):
        run_single("source-id", "adam", nx=4)


def test_reference_fields():
    _, spec = make_benchmark("model-nonlinear-id", 4)
    assert np.all(spec.theta_ref == 1.0)
    _, spec = make_benchmark("source-id", 4)
    np.testing.assert_array_equal(spec.theta_ref, interpolate_to_quad(spec.mesh, b_ref))


def test_observation_shared_and_read_only():
    _, a = make_benchmark("source-id", 8)
    _, b = make_benchmark("source-id", 8, alpha=1e-3)
    assert a.y_obs is b.y_obs and a.obs_digest == b.obs_digest
    assert not a.y_obs.flags.writeable
    assert observation("source-id", 8, 8)[1] == a.obs_digest
    assert observation("model-nonlinear-id", 8, 8)[1] != a.obs_digest


def test_objective_vanishes_at_reference_without_regularization():
    p, spec = make_benchmark("model-nonlinear-id", 8, alpha=0.0)
    assert objective(p, spec.theta_ref) <= 1e-28


def test_initial_guesses():
    _, spec = make_benchmark("source-id", 4)
    assert np.all(spec.initial_guess(3) == 0)
    _, spec = make_benchmark("model-nonlinear-id", 4)
    a, b = spec.initial_guess(0), spec.initial_guess(0)
    assert np.array_equal(a, b) and not np.array_equal(a, spec.initial_guess(1))
    assert abs(a.mean() - 1.0) < 0.1


def test_bakeoff_outputs_and_replay(tmp_path):
    s = OptimizeSettings(max_iter=20, grad_tol=1e-12, record_time=False)
    runs = run_optimizer_bakeoff("source-id", settings=s, out_path=tmp_path / "a", nx=6)
    assert [m.optimizer for m in runs] == ["lbfgs", "newton-cg-ad", "newton-cg-fd"]
    for m in runs:
        assert m.status in ("converged", "failed")
        for key in ("mesh", "observed", "log_jsonl", "log_csv", "theta", "predicted"):
            assert (tmp_path / "a").joinpath(m.outputs[key].split("/")[-1]).exists()
        assert read_field(m.outputs["theta"]).size == 6 * 6 * 4
    stored = json.loads((tmp_path / "a" / "manifest.json").read_text())
    again = replay(RunManifest.from_dict(stored[1]), tmp_path / "b")
    for key in ("log_jsonl", "log_csv", "theta", "predicted"):
        with open(runs[1].outputs[key], "rb") as f1, open(again.outputs[key], "rb") as f2:
            assert f1.read() == f2.read()


def test_bakeoff_records_failures_instead_of_raising(tmp_path):
    m = run_single("model-nonlinear-id", "newton-cg-ad", OptimizeSettings(max_iter=1), nx=4)
    assert m.status == "failed" and "max-iter" in m.detail


def test_source_recovery(tmp_path):
    m = run_single("source-id", "newton-cg-ad", nx=32, out_path=tmp_path)
    assert m.status == "converged"
    assert m.final_objective <= 1e-3 * m.initial_objective
    _, spec = make_benchmark("source-id", 32)
    theta = read_field(m.outputs["theta"])
    assert relative_l2_error(spec.mesh, theta, b_ref, corner_radius=0.1) <= SOURCE_RECOVERY_BOUND
