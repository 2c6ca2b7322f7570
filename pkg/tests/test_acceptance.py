"""Acceptance suite: one printed PASS/FAIL line per criterion, each at its stated tolerance.

The 100-trial driving batches come from the session fixtures in conftest.py.
"""

import contextlib
import io as stdio

import numpy as np
import pytest

from jetpose.geometry import fundamental_matrix, point_line_distances
from jetpose.image import gaussian_kernel, patch_systems
from jetpose.jet import build_residuals
from jetpose.solver import SolverOptions, solve_nlls
from jetpose.tracking import jacobian_f, lk_step_constrained, regularize
from jetpose.harness import cli, io
from jetpose.harness.experiment import preset, run_experiment

from oracles import (
    K_TEST, constrained_instance, initial_pose_errors, line_sweep_minimum, linear_problem, random_pose, rosenbrock_problem,
    smooth_image, stencil5,
)


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {n} ({title}) failed: {detail}"
    return emit


def _rho(result, method, prior):
    return result.summary[(method, prior)]["rho_mean"]


def test_criterion_01_jet_beats_rpe_on_rotation(driving_off, report):
    j, r = _rho(driving_off, "JET", False), _rho(driving_off, "RPE", False)
    failed = driving_off.summary[("JET", False)]["failed"] + driving_off.summary[("RPE", False)]["failed"]
    ok = j < r and j <= 0.5 * r and j <= 0.3 and failed == 0
    report(1, "JET beats RPE on rotation", ok,
           f"mean rho JET {j:.4f} deg, RPE {r:.4f} deg, ratio {j / r:.3f} (need <= 0.5), failed trials {failed}")


def test_criterion_02_prior_helps_jet(driving_off, driving_on, report):
    off, on = _rho(driving_off, "JET", False), _rho(driving_on, "JET", True)
    report(2, "prior helps JET rotation", on <= 0.8 * off,
           f"mean rho JET with prior {on:.4f} deg, without {off:.4f} deg, ratio {on / off:.3f} (need <= 0.8)")


def test_criterion_03_input_noise_calibration(report):
    rho, omega = initial_pose_errors(1000)
    ok = abs(rho.mean() - 0.96) <= 0.05 and abs(omega.mean() - 7.6) <= 0.3
    report(3, "input-noise calibration", ok,
           f"rho_in mean {rho.mean():.4f} deg (0.96 +- 0.05), omega_in mean {omega.mean():.4f} deg (7.6 +- 0.3)")


def test_criterion_04_photometric_dominance(driving_off, report):
    jet = [r for r in driving_off.records if r.method == "JET"]
    rpe = [r for r in driving_off.records if r.method == "RPE"]
    med_jet = np.median([r.ssd for r in jet])
    med_gt = np.median([r.ssd_gt for r in jet])
    frac = np.mean([a.ssd < b.ssd for a, b in zip(jet, rpe)])
    report(4, "photometric dominance", med_jet <= med_gt and frac >= 0.9,
           f"median SSD JET {med_jet:.3f} vs ground truth {med_gt:.3f}; JET < RPE in {100 * frac:.0f}% of trials")


def test_criterion_05_epipolar_conformity(driving_off, report):
    worst = {"JET": 0.0, "RPE": 0.0}
    for o in driving_off.outcomes:
        for m, res in (("JET", o.jet), ("RPE", o.rpe)):
            act = res.active
            d = point_line_distances(res.ys[act], o.xs[act], fundamental_matrix(res.p_opt, o.K))
            worst[m] = max(worst[m], float(np.max(np.abs(d), initial=0.0)))
    ok = worst["JET"] <= 1e-6 and worst["RPE"] <= 1e-9
    report(5, "epipolar conformity", ok, f"max line distance JET {worst['JET']:.2e} px (<= 1e-6), "
                                         f"RPE {worst['RPE']:.2e} px (<= 1e-9)")


def test_criterion_06_monotone_exact_loss(driving_off, report):
    bad, n_acc, worst_ssd = 0, 0, 0.0
    jet_records = {r.seed: r for r in driving_off.records if r.method == "JET"}
    for o in driving_off.outcomes:
        res = o.jet
        acc = [r for r in res.records if r.accepted]
        n_acc += len(acc)
        bad += sum(not (r.loss < r.reference_loss) for r in acc[1:])
        bad += int(np.any(np.diff(res.losses) >= 0))
        # the loss the optimizer reports must match an independent wssd evaluation at its output
        worst_ssd = max(worst_ssd, abs(jet_records[o.seed].ssd - res.losses[-1]))
    ok = bad == 0 and worst_ssd <= 1e-9
    report(6, "monotone exact-loss gating", ok,
           f"{n_acc} accepted iterations, {bad} non-decreasing; final loss vs recomputed SSD {worst_ssd:.1e}")


def test_criterion_07_kkt_oracle_suite(report):
    rng = np.random.default_rng(20240607)
    worst_kkt = worst_feas = worst_gap = 0.0
    for _ in range(1000):
        A, b, x, y, F = constrained_instance(rng)
        s = lk_step_constrained(A, b, x, y, F)
        l = F @ np.append(x, 1.0)
        worst_kkt = max(worst_kkt, np.linalg.norm(A @ s.v + b + s.lam * l[:2]) / (np.linalg.norm(b) + 1))
        worst_feas = max(worst_feas, abs(np.append(y + s.v, 1.0) @ l))
        q_min, _ = line_sweep_minimum(A, b, x, y, F)
        q = s.v @ A @ s.v + 2 * s.v @ b
        worst_gap = max(worst_gap, (q - q_min) / (1 + abs(q_min)))
    ok = worst_kkt <= 1e-8 and worst_feas <= 1e-9 and worst_gap <= 1e-9
    report(7, "KKT / oracle suite", ok, f"1000 instances: stationarity {worst_kkt:.1e}, feasibility {worst_feas:.1e}, "
                                        f"excess over line sweep {worst_gap:.1e}")


def test_criterion_08_numerical_derivatives(report):
    kernel = gaussian_kernel(9, 2.0)
    worst_f = worst_q = 0.0
    for seed in range(100):
        rng = np.random.default_rng([seed, 8])
        I, J = smooth_image(rng), smooth_image(rng)
        xs = rng.uniform([30, 30], [130, 90], (10, 2))
        ys = xs + rng.uniform(-2, 2, (10, 2))
        S = patch_systems(I, J, xs, ys, kernel)
        p = random_pose(rng)
        ps = S[0]
        ps.A = regularize(ps.A)
        Jf = jacobian_f(p, K_TEST, ps, xs[0], ys[0])
        J5 = stencil5(lambda q: lk_step_constrained(ps.A, ps.b, xs[0], ys[0], fundamental_matrix(q, K_TEST)).v,
                      p.as_array())
        worst_f = max(worst_f, np.linalg.norm(Jf - J5) / np.linalg.norm(J5))
        problem, _ = build_residuals(p, S, xs, ys, K_TEST)
        Jq = problem.jacobian(p.as_array())
        Jq5 = stencil5(problem.residual, p.as_array())
        worst_q = max(worst_q, np.linalg.norm(Jq - Jq5) / np.linalg.norm(Jq5))
    report(8, "numerical-derivative suite", worst_f <= 1e-4 and worst_q <= 1e-4,
           f"100 instances: worst relative error f_k {worst_f:.1e}, residual blocks {worst_q:.1e} (<= 1e-4)")


def test_criterion_09_solver_sanity(report):
    mu = SolverOptions().initial_damping
    worst, steps = 0.0, set()
    for seed in range(20):
        prob, sol = linear_problem(seed, consistent=True)
        rep = solve_nlls(prob, np.zeros(4), SolverOptions(max_iters=1))
        steps.add(rep.iterations)
        # one damped Gauss-Newton step leaves an error of order mu relative to the solution
        worst = max(worst, np.linalg.norm(rep.p_opt - sol) / (mu * np.linalg.norm(sol)))
    ros = solve_nlls(rosenbrock_problem(), [-1.2, 1.0], SolverOptions(max_iters=200))
    err = float(np.max(np.abs(ros.p_opt - 1.0)))
    report(9, "solver sanity", steps == {1} and worst <= 10 and err <= 1e-6,
           f"linear: one accepted step, error {worst:.2f} mu x |solution|; Rosenbrock max error {err:.1e}")


def test_criterion_10_throughput(report):
    buf = stdio.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = cli.main(["bench", "--repeats", "20"])
    vals = dict(line.split(" = ") for line in buf.getvalue().splitlines() if " = " in line)
    rate = float(vals["pairs_per_second"])
    report(10, "throughput", rc == 0 and rate >= 10.0,
           f"{rate:.1f} pairs/s with {vals['features']} features, {vals['patch']}x{vals['patch']} patches, one thread")


def test_criterion_11_determinism(driving_off, report):
    again = run_experiment(preset("driving", trials=100, prior=False))
    a, b = io.results_csv(driving_off.records), io.results_csv(again.records)
    report(11, "determinism", a == b, f"rerun CSV {'byte-identical' if a == b else 'differs'} ({len(a)} bytes)")
