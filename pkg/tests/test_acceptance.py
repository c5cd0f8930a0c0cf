"""Acceptance criteria.

Each test prints one line ``[criterion N] PASS|FAIL: ...`` with the measured
quantities and then asserts the same condition.  Run on its own with

    python3 -m pytest tests/test_acceptance.py -v -s
"""
import time

import numpy as np
import pytest

from hessfem import ad
from hessfem.bakeoff import run_optimizer_bakeoff
from hessfem.bench import make_benchmark
from hessfem.fem import FemResidual, WeakForm, build_unit_square_mesh
from hessfem.implicit import (ImplicitProblem, full_hessian, gradient, hvp, newton_solve,
                              objective)
from hessfem.verify import (run_fd_comparison, run_mode_agreement, run_symmetry_check,
                            run_taylor_test, summarize_fd)

SEED = 0


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def test_criterion_1_taylor_orders(report):
    t0 = time.perf_counter()
    p, _ = make_benchmark("model-nonlinear-id", 32, newton_tol=1e-14, newton_max_iter=40)
    theta, dtheta = np.random.default_rng(SEED).standard_normal((2, p.n_param))
    rep = run_taylor_test(p, theta, dtheta, eps=(1e-4, 1e-3, 1e-2, 1e-1))
    elapsed = time.perf_counter() - t0
    s = rep.slopes
    ok = (abs(s["r_zeroth"] - 1) <= 0.1 and abs(s["r_first"] - 2) <= 0.1
          and abs(s["r_second"] - 3) <= 0.1 and elapsed <= 30)
    report(1, ok, f"slopes=({s['r_zeroth']:.3f}, {s['r_first']:.3f}, {s['r_second']:.3f}) "
                  f"target (1, 2, 3) +-0.1, {elapsed:.1f}s <= 30s")
    assert ok


@pytest.fixture(scope="module")
def fd_run():
    t0 = time.perf_counter()
    p, _ = make_benchmark("model-nonlinear-id", 32)
    records = run_fd_comparison(p, (1e-1, 1e-2, 1e-3, 1e-4), n_samples=100, seed=SEED)
    return summarize_fd(records), time.perf_counter() - t0, records


def test_criterion_2_hvp_vs_fd(report, fd_run):
    summary, elapsed, _ = fd_run
    med = [summary[h]["median_e_v"] for h in (1e-1, 1e-2, 1e-3)]
    s = summary[1e-1]
    ok = (s["n"] == 100 and s["max_e_v"] <= 2e-3 and med[0] > med[1] > med[2] and elapsed <= 300)
    report(2, ok, f"max e_v(h=0.1)={s['max_e_v']:.3e} <= 2e-3 over n={s['n']}; "
                  f"median e_v {med[0]:.2e} > {med[1]:.2e} > {med[2]:.2e}; {elapsed:.0f}s <= 300s")
    assert ok


def test_criterion_3_scalar_metric(report, fd_run):
    summary, _, records = fd_run
    s = summary[1e-1]
    e_s = np.sort([r["e_s"] for r in records if r["h"] == 1e-1 and not r["skipped"]])
    ok = s["n"] == 100 and s["max_e_s"] <= 4e-2
    report(3, ok, f"max e_s(h=0.1)={s['max_e_s']:.3e} <= 4e-2 over n={s['n']} "
                  f"({int(np.sum(e_s > 4e-2))} above; second largest {e_s[-2]:.3e})")
    assert ok


def test_criterion_4_mode_agreement(report):
    p, _ = make_benchmark("model-nonlinear-id", 32)
    rows = run_mode_agreement(p, n_samples=20, seed=SEED)
    worst = max(r["max"] for r in rows)
    ok = len(rows) == 20 and worst <= 1e-10
    report(4, ok, f"max pairwise relative difference {worst:.2e} <= 1e-10 over {len(rows)} samples")
    assert ok


def test_criterion_5_symmetry(report):
    p, _ = make_benchmark("model-nonlinear-id", 32)
    rows = run_symmetry_check(p, n_samples=50, seed=SEED)
    worst = max(r["rel_asym"] for r in rows)
    ok = len(rows) == 50 and worst <= 1e-10
    report(5, ok, f"max |t~.H t^ - t^.H t~| / |t~.H t^| = {worst:.2e} <= 1e-10 over {len(rows)} triples")
    assert ok


def test_criterion_6_oracle_equivalence(report):
    p, _ = make_benchmark("model-nonlinear-id", 2)
    theta = np.random.default_rng(SEED).standard_normal(p.n_param)
    M = p.n_param

    H = full_hessian(p, theta)
    h = 1e-4
    E = np.eye(M) * h
    H_fd = np.empty((M, M))
    for i in range(M):
        for j in range(M):
            H_fd[i, j] = (objective(p, theta + E[i] + E[j]) - objective(p, theta + E[i] - E[j])
                          - objective(p, theta - E[i] + E[j]) + objective(p, theta - E[i] - E[j])) / (4 * h * h)
    h_err = np.max(np.abs(H - H_fd)) / np.max(np.abs(H_fd))

    g = gradient(p, theta)
    h = 1e-6
    E = np.eye(M) * h
    g_fd = np.array([(objective(p, theta + E[i]) - objective(p, theta - E[i])) / (2 * h) for i in range(M)])
    g_err = np.max(np.abs(g - g_fd) / np.abs(g_fd))

    ok = h_err <= 1e-4 and g_err <= 1e-5
    report(6, ok, f"Hessian vs nested FD {h_err:.2e} <= 1e-4 (relative to max entry); "
                  f"gradient vs FD {g_err:.2e} <= 1e-5 (per component), M={M}")
    assert ok


def test_criterion_7_optimizer_bakeoff(report, tmp_path):
    runs = {m.optimizer: m for m in run_optimizer_bakeoff("source-id", nx=32, out_path=tmp_path)}
    ratio = {k: m.final_objective / m.initial_objective for k, m in runs.items()}
    iters = {k: m.n_iter for k, m in runs.items()}
    fd = runs["newton-cg-fd"]
    ok = (ratio["lbfgs"] <= 1e-3 and iters["lbfgs"] <= 100
          and ratio["newton-cg-ad"] <= 1e-3 and iters["newton-cg-ad"] <= 100
          and runs["newton-cg-ad"].status == "converged"
          and fd.status in ("converged", "failed") and (tmp_path / "newton-cg-fd.jsonl").exists())
    report(7, ok, f"g*/g0 lbfgs={ratio['lbfgs']:.2e} ({iters['lbfgs']} it), "
                  f"newton-cg-ad={ratio['newton-cg-ad']:.2e} ({iters['newton-cg-ad']} it, "
                  f"{runs['newton-cg-ad'].status}); newton-cg-fd status={fd.status} ({fd.detail})")
    assert ok


def test_criterion_8_forward_solver(report):
    m = build_unit_square_mesh(8, dirichlet=("left", "right", "bottom", "top"), neumann=(),
                               u_D=lambda x1, x2: x1)
    patch = ImplicitProblem(FemResidual(m, WeakForm(lambda u, gu, th, x: gu)), None)
    patch_err = np.max(np.abs(newton_solve(patch, np.zeros(m.n_params)).y - m.nodes[:, 0]))

    lin, spec = make_benchmark("source-id", 32)
    lin_steps = newton_solve(lin, spec.theta_ref).n_iter

    nl, spec = make_benchmark("model-nonlinear-id", 64)
    nl_steps = newton_solve(nl, spec.theta_ref).n_iter

    ok = patch_err <= 1e-10 and lin_steps == 1 and nl_steps <= 10
    report(8, ok, f"patch test error {patch_err:.1e} <= 1e-10; linear Poisson {lin_steps} Newton step; "
                  f"nonlinear 64x64 at theta=1 {nl_steps} steps <= 10")
    assert ok
