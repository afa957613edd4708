"""Acceptance suite: the eight release criteria for the toolkit.

Each test prints a single PASS/FAIL line (bypassing capture) so the
acceptance status is visible in the plain pytest output.  The two slow
criteria (3 and 4-6) run real registrations at reduced scale and take
several minutes each on one CPU core.
"""

import csv
import math
import os
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from inrreg import autodiff as ad
from inrreg import cli
from inrreg import evaluate as ev
from inrreg import losses
from inrreg import nets
from inrreg import synth
from inrreg import train
from inrreg import tune
from inrreg import volume as vol
from inrreg.nets import PointDerivatives

from conftest import rel_err, tiny_nets


def report(capsys, num, name, ok, detail=""):
    line = f"[acceptance {num}] {name}: {'PASS' if ok else 'FAIL'}  {detail}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# shared scaled-down experiment artifacts

COND_WIDTHS = (3, 64, 64, 64, 3)


@pytest.fixture(scope="module")
def bench():
    """The default 48^3 synthetic registration problem."""
    return synth.generate(synth.SynthSpec())


@pytest.fixture(scope="module")
def fixed_mask(bench):
    """Ground-truth warped mask: the Dice target for alpha tuning."""
    return ev.warp_volume(bench.mask, bench.truth_field, iters=20,
                          binarize=True)


@pytest.fixture(scope="module")
def conditioned_run(bench, tmp_path_factory):
    """One conditioned-mode training run (5000 epochs) shared by the
    conditioning, tuning-cost, and grid-search criteria."""
    out = str(tmp_path_factory.mktemp("cond_run"))
    cfg = train.TrainConfig(epochs=5000, batch_points=2000,
                            learning_rate=1e-4, mode="conditioned",
                            reg="bending", seed=0, main_widths=COND_WIDTHS,
                            checkpoint_every=0)
    res = train.train(bench.moving, bench.fixed, bench.mask, cfg,
                      out_dir=out, log_every=10)
    return res, out


# ---------------------------------------------------------------------------
# criterion 1: derivative exactness on random tiny networks


def _total_loss(pts, moving, fixed, alpha, reg, main, harm):
    act = nets.harmonize(alpha, harm)
    derivs = nets.forward_with_derivs(pts, act, main,
                                      need_hessian=(reg == "bending"))
    phi = ad.add(ad.tensor(pts), derivs.u)
    m_vals = ad.tensor(vol.trilinear_sample_np(moving, pts)[0])
    f_vals = vol.trilinear_sample(fixed, phi)
    sim = losses.ncc_loss(m_vals, f_vals)
    if reg == "bending":
        r = losses.bending_penalty(derivs)
    elif reg == "jacobian":
        r = losses.jacobian_penalty(derivs)
    else:
        r = losses.hyperelastic_penalty(derivs, losses.HyperelasticWeights())
    return losses.combined_loss(sim, r, alpha, mode="conditioned"), derivs


def _multilinear_volume(rng, dims=(8, 8, 8)):
    """A globally multilinear image: trilinear interpolation reproduces it
    smoothly everywhere, so the similarity path has no cell-boundary kinks."""
    c = rng.uniform(-1, 1, 8)
    ii, jj, kk = np.meshgrid(*[np.linspace(0, 1, n) for n in dims],
                             indexing="ij")
    f = (c[0] + c[1] * ii + c[2] * jj + c[3] * kk + c[4] * ii * jj
         + c[5] * ii * kk + c[6] * jj * kk + c[7] * ii * jj * kk)
    return vol.Volume(dims, (1, 1, 1), (0, 0, 0),
                      f.transpose(2, 1, 0).reshape(-1))


def _kink_safe(derivs, pts):
    """True when no sampled point sits on a non-smooth locus of the losses:
    |det-1| and the area response away from their kinks, phi inside the cube."""
    jac = derivs.jac_np()
    gphi = np.eye(3) + jac
    det = np.linalg.det(gphi)
    if np.min(np.abs(det - 1.0)) < 1e-3:
        return False
    cof = np.linalg.inv(gphi).transpose(0, 2, 1) * det[:, None, None]
    colsq = np.sum(cof ** 2, axis=1)
    if np.min(np.abs(colsq - 1.0)) < 1e-3:
        return False
    # clamped sampling is fine for FD as long as no component sits on the
    # cube-face kink at |phi| = 1 itself
    phi = pts + derivs.u.data
    return np.min(np.abs(np.abs(phi) - 1.0)) > 1e-3


def test_criterion_1_derivative_exactness(capsys):
    t0 = time.time()
    n_seeds = 100
    worst_param = worst_jac = worst_hess = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        main, harm = tiny_nets(seed=seed, width=8 + 8 * (seed % 2))
        moving = _multilinear_volume(rng)
        fixed = _multilinear_volume(rng)
        alpha = float(rng.uniform(0.05, 0.95))
        for attempt in range(20):
            pts = rng.uniform(-0.6, 0.6, (10, 3))
            derivs = nets.forward_with_derivs(pts, nets.harmonize(alpha, harm),
                                              main, need_hessian=False)
            if _kink_safe(derivs, pts):
                break
        else:
            pytest.fail(f"seed {seed}: no kink-safe batch found")

        # input Jacobian / Hessian vs central differences
        d = nets.forward_with_derivs(pts[:4], nets.harmonize(alpha, harm), main)
        for k in range(3):
            xp, xm = pts[:4].copy(), pts[:4].copy()
            xp[:, k] += 1e-4
            xm[:, k] -= 1e-4
            act = nets.harmonize(alpha, harm)
            jfd = (nets.forward(xp, act, main).data
                   - nets.forward(xm, act, main).data) / 2e-4
            worst_jac = max(worst_jac, float(np.max(
                rel_err(d.jac_np()[:, :, k], jfd, floor=1e-5))))
            xp, xm = pts[:4].copy(), pts[:4].copy()
            xp[:, k] += 5e-4
            xm[:, k] -= 5e-4
            hfd = (nets.forward_with_derivs(xp, act, main).jac_np()
                   - nets.forward_with_derivs(xm, act, main).jac_np()) / 1e-3
            worst_hess = max(worst_hess, float(np.max(
                rel_err(d.hess_np()[:, :, :, k], hfd, floor=1e-4))))

        # parameter gradients of the total loss, all three regularizers
        for reg in ("bending", "jacobian", "hyperelastic"):
            total, _ = _total_loss(pts, moving, fixed, alpha, reg, main, harm)
            params = [main.layers[0][0], main.layers[-1][0],
                      harm.hidden[0][0], harm.out[0]]
            for p in params:
                p.zero_grad()
            grads = ad.backward(total, params)
            h = 1e-5
            for p in params:
                idx = np.unravel_index(
                    int(np.argmax(np.abs(grads[p.id]))), p.data.shape)
                orig = p.data[idx]
                p.data[idx] = orig + h
                fp = _total_loss(pts, moving, fixed, alpha, reg, main,
                                 harm)[0].item()
                p.data[idx] = orig - h
                fm = _total_loss(pts, moving, fixed, alpha, reg, main,
                                 harm)[0].item()
                p.data[idx] = orig
                worst_param = max(worst_param, float(
                    rel_err(grads[p.id][idx], (fp - fm) / (2 * h),
                            floor=1e-7)))
    wall = time.time() - t0
    ok = worst_param < 1e-3 and worst_jac < 1e-4 and worst_hess < 1e-3 \
        and wall < 120
    report(capsys, 1, "derivative exactness", ok,
           f"param {worst_param:.2e} jac {worst_jac:.2e} "
           f"hess {worst_hess:.2e} in {wall:.0f}s over {n_seeds} seeds")


# ---------------------------------------------------------------------------
# criterion 2: regularizer values against analytic oracles


def _stratified_points(n_per_axis, rng):
    edges = np.linspace(-1, 1, n_per_axis + 1)
    lo = edges[:-1]
    w = 2.0 / n_per_axis
    gx, gy, gz = np.meshgrid(lo, lo, lo, indexing="ij")
    base = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return base + rng.uniform(0, w, base.shape)


def test_criterion_2_regularizer_oracles(capsys):
    rng = np.random.default_rng(0)
    checks = []

    # bending of an affine field is exactly zero
    n = 1000
    d = PointDerivatives.from_arrays(np.zeros((n, 3)),
                                     hess=np.zeros((n, 3, 3, 3)))
    checks.append(("affine bending", losses.bending_penalty(d).item() == 0.0))

    # u_x = x^2 has the single constant second derivative u_x,xx = 2
    pts = _stratified_points(10, rng)
    hess = np.zeros((pts.shape[0], 3, 3, 3))
    hess[:, 0, 0, 0] = 2.0
    val = losses.bending_penalty(
        PointDerivatives.from_arrays(np.zeros((pts.shape[0], 3)),
                                     hess=hess)).item()
    checks.append(("quadratic bending = 4", abs(val - 4.0) < 1e-3))

    # sinusoid field vs its closed-form bending energy, 1e5 uniform samples
    spec = synth.SynthSpec(kind="sinusoid", amplitude=0.15)
    pts = rng.uniform(-1, 1, (100000, 3))
    hess = np.zeros((pts.shape[0], 3, 3, 3))
    hess[:, 0, 0, 0] = -spec.amplitude * math.pi ** 2 \
        * np.sin(math.pi * pts[:, 0])
    val = losses.bending_penalty(
        PointDerivatives.from_arrays(np.zeros((pts.shape[0], 3)),
                                     hess=hess)).item()
    ref = synth.analytic_bending(spec)
    checks.append(("sinusoid bending vs analytic",
                   rel_err(val, ref) < 0.02))

    # phi = 2x, i.e. u = x: det(grad phi) = 8, penalty |8 - 1| = 7 exactly
    d = PointDerivatives.from_arrays(
        np.zeros((50, 3)), np.broadcast_to(np.eye(3), (50, 3, 3)).copy())
    checks.append(("jacobian penalty of phi=2x",
                   losses.jacobian_penalty(d).item() == 7.0))

    # hyperelastic penalty of the identity map is exactly zero
    d = PointDerivatives.from_arrays(np.zeros((50, 3)),
                                     np.zeros((50, 3, 3)))
    checks.append(("hyperelastic identity",
                   losses.hyperelastic_penalty(
                       d, losses.HyperelasticWeights()).item() == 0.0))

    failed = [name for name, ok in checks if not ok]
    report(capsys, 2, "regularizer oracles", not failed,
           "all analytic values matched" if not failed
           else f"failed: {failed}")


# ---------------------------------------------------------------------------
# criterion 3: baseline synthetic registration quality

# regression bound pinned from the first successful run (see decisions
# ledger); the spec-level requirement is the looser <= 0.5
PINNED_TRE_RATIO = 0.45


def test_criterion_3_baseline_registration(bench, capsys):
    t0 = time.time()
    cfg = train.TrainConfig(epochs=2000, batch_points=5000,
                            learning_rate=1e-4, mode="baseline",
                            baseline_alpha=0.05, reg="bending", seed=0,
                            main_widths=(3, 128, 128, 128, 3),
                            checkpoint_every=0)
    res = train.train(bench.moving, bench.fixed, bench.mask, cfg,
                      log_every=50)
    act = ev.resolve_activation(res.main, None, "baseline", 0.0)
    mean_tre, _, _ = ev.tre(bench.landmarks_exact, res.main, act,
                            bench.moving)
    init_tre, _, _ = ev.initial_tre(bench.landmarks_exact,
                                    bench.moving.spacing)
    ratio = mean_tre / init_tre
    pts, _ = vol.sample_mask_points(bench.mask, 20000,
                                    np.random.default_rng(0))
    frac_neg, min_det, _ = ev.jacobian_stats(
        res.main, act, vol.normalize_coords(bench.moving, pts))
    wall = time.time() - t0
    ok = ratio <= 0.5 and ratio <= PINNED_TRE_RATIO and frac_neg <= 0.01 \
        and wall < 1800
    report(capsys, 3, "baseline synthetic registration", ok,
           f"TRE {init_tre:.2f} -> {mean_tre:.2f} mm (ratio {ratio:.3f}, "
           f"pinned bound {PINNED_TRE_RATIO}), frac det<=0 {frac_neg:.4f}, "
           f"min det {min_det:.3f}, {wall:.0f}s")


# ---------------------------------------------------------------------------
# criterion 4: the conditioning pathway steers the regularization trade-off


def test_criterion_4_conditioning(bench, conditioned_run, capsys):
    res, _ = conditioned_run
    moving = train.normalize_intensities(bench.moving)
    fixed = train.normalize_intensities(bench.fixed)
    pts, _ = vol.sample_mask_points(bench.mask, 4000,
                                    np.random.default_rng(123))
    x = vol.normalize_coords(bench.moving, pts).astype(res.main.dtype)
    alphas = tune.default_grid(11)
    bend_vals, sim_vals = [], []
    for a in alphas:
        act = ev.resolve_activation(res.main, res.harm, "conditioned",
                                    float(a))
        derivs = nets.forward_with_derivs(x, act, res.main)
        bend_vals.append(losses.bending_penalty(derivs).item())
        phi = x.astype(np.float64) + derivs.u.data
        m_vals = vol.trilinear_sample_np(moving, x)[0]
        f_vals = vol.trilinear_sample_np(fixed, phi)[0]
        sim_vals.append(losses.ncc_loss(ad.tensor(m_vals),
                                        ad.tensor(f_vals)).item())
    rho_bend = float(spearmanr(alphas, bend_vals).statistic)
    rho_sim = float(spearmanr(alphas, sim_vals).statistic)
    ok = rho_bend <= -0.5 and rho_sim >= 0.3
    report(capsys, 4, "conditioning steers the trade-off", ok,
           f"spearman(alpha, bending) {rho_bend:.2f} (need <= -0.5), "
           f"spearman(alpha, sim) {rho_sim:.2f} (need >= 0.3)")


# ---------------------------------------------------------------------------
# criteria 5 + 6: tuning cost asymmetry and grid-search correctness


def test_criterion_5_tuning_cost(bench, fixed_mask, conditioned_run,
                                 tmp_path, capsys):
    res, run_dir = conditioned_run
    t0 = time.time()
    counters = {}
    alpha_star, table = tune.grid_search_alpha(res.main, res.harm,
                                               bench.mask, fixed_mask,
                                               counters=counters)
    grid_secs = time.time() - t0

    # the retraining alternative: each objective call is a fresh baseline
    # run at a 1/10-scale epoch budget (500 of the 5000 conditioned epochs)
    def retrain_objective(a):
        cfg = train.TrainConfig(epochs=500, batch_points=2000,
                                learning_rate=1e-4, mode="baseline",
                                baseline_alpha=float(a), reg="bending",
                                seed=0, main_widths=COND_WIDTHS,
                                checkpoint_every=0)
        r = train.train(bench.moving, bench.fixed, bench.mask, cfg,
                        log_every=100)
        act = ev.resolve_activation(r.main, None, "baseline", float(a))
        f = ev.dense_field(r.main, act, bench.mask.dims, alpha=float(a))
        return tune.dice(ev.warp_volume(bench.mask, f, binarize=True),
                         fixed_mask)

    t0 = time.time()
    tune.bo_optimize(retrain_objective, budget=3, seed=0)
    bo_secs = time.time() - t0

    with open(os.path.join(run_dir, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "wall_seconds"])
        w.writerow(["grid_search", repr(grid_secs)])
        w.writerow(["bo_retraining", repr(bo_secs)])
    with open(os.path.join(run_dir, "tune_report.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "dice"])
        for a, d in table:
            w.writerow([repr(a), repr(d)])
        w.writerow(["alpha_star", repr(alpha_star)])
    out = str(tmp_path / "report")
    assert cli.main(["report", "--run", run_dir, "--out", out]) == 0
    summary = open(os.path.join(out, "summary.txt")).read()
    ratio = bo_secs / grid_secs
    ok = (grid_secs < 60 and counters == {"field_evals": 11}
          and ratio >= 10 and "tuning_cost_ratio" in summary)
    report(capsys, 5, "tuning cost asymmetry", ok,
           f"grid {grid_secs:.1f}s ({counters.get('field_evals')} field "
           f"evals, 0 training steps), BO retraining {bo_secs:.1f}s, "
           f"ratio {ratio:.1f} (need >= 10)")


def test_criterion_6_grid_search_correctness(bench, fixed_mask,
                                             conditioned_run, monkeypatch,
                                             capsys):
    res, _ = conditioned_run
    alpha_star, table = tune.grid_search_alpha(
        res.main, res.harm, bench.mask, fixed_mask,
        grid=tune.default_grid(5), invert_iters=5)
    argmax = max(table, key=lambda row: (row[1], row[0]))[0]
    ok_argmax = alpha_star == argmax

    # constructed tie: every alpha scores the same, largest must win
    monkeypatch.setattr(tune, "dice", lambda a, b: 0.5)
    tie_star, _ = tune.grid_search_alpha(
        res.main, res.harm, bench.mask, fixed_mask,
        grid=np.array([0.1, 0.4, 0.7]), invert_iters=1)
    ok = ok_argmax and tie_star == 0.7
    report(capsys, 6, "grid search correctness", ok,
           f"alpha_star {alpha_star} == argmax {argmax}; "
           f"tie resolved to {tie_star}")


# ---------------------------------------------------------------------------
# criterion 7: Bayesian-optimization sanity


def test_criterion_7_bo_sanity(capsys):
    errs = []
    for seed in range(20):
        best, history = tune.bo_optimize(lambda x: -(x - 0.3) ** 2,
                                         budget=15, seed=seed)
        assert len(history) <= 15
        errs.append(abs(best - 0.3))
    worst = max(errs)
    report(capsys, 7, "BO sanity", worst < 0.05,
           f"worst |best - 0.3| = {worst:.4f} over 20 seeds "
           f"(<= 15 evaluations each)")


# ---------------------------------------------------------------------------
# criterion 8: bit-exact round-trips and run determinism


def test_criterion_8_roundtrips(tmp_path, capsys):
    checks = []
    rng = np.random.default_rng(0)
    v = vol.Volume((9, 8, 7), (0.97, 1.16, 2.5), (0, 0, 0),
                   rng.uniform(0, 1, 504).astype(np.float32))
    vol.save_volume(v, str(tmp_path / "v"))
    v2 = vol.load_volume(str(tmp_path / "v"))
    checks.append(("volume", np.array_equal(v.data, v2.data)
                   and v2.dims == v.dims and v2.spacing == v.spacing))

    main, harm = nets.init(5, (3, 16, 16, 3), (1, 8, 8, 8, 4))
    nets.save_checkpoint(str(tmp_path / "c.ckpt"), main, harm,
                         mode="conditioned")
    m2, h2, _ = nets.load_checkpoint(str(tmp_path / "c.ckpt"))
    checks.append(("checkpoint", all(
        np.array_equal(a.data, b.data)
        for a, b in zip(harm.parameters() + main.parameters(),
                        h2.parameters() + m2.parameters()))))

    b = synth.generate(synth.SynthSpec(dims=(16, 16, 16), seed=2,
                                       n_landmarks=5))
    logs = []
    for i in range(2):
        out = str(tmp_path / f"run{i}")
        cfg = train.TrainConfig(epochs=30, batch_points=128,
                                mode="baseline", baseline_alpha=0.1,
                                reg="jacobian", seed=9,
                                main_widths=(3, 16, 16, 3),
                                checkpoint_every=0)
        train.train(b.moving, b.fixed, b.mask, cfg, out_dir=out)
        logs.append(open(os.path.join(out, "loss_log.csv"), "rb").read())
    checks.append(("seeded loss log", logs[0] == logs[1]))

    failed = [name for name, ok in checks if not ok]
    report(capsys, 8, "round-trips and determinism", not failed,
           "volume, checkpoint, and seeded loss logs bit-exact"
           if not failed else f"failed: {failed}")
