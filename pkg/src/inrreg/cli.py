"""Command-line surface: synth, train, tune, warp, eval, report."""

import os


def _cap_threads():
    n = os.environ.get("INRREG_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()

import argparse
import csv
import hashlib
import sys

import numpy as np

from . import config as cfgmod
from . import evaluate as ev
from . import nets
from . import synth
from . import train as trainmod
from . import tune
from . import volume as vol

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, msg, code=EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_files(pairs):
    missing = []
    for label, path in pairs:
        if not path:
            missing.append(f"missing required path: {label}")
        elif not (os.path.exists(path) or os.path.exists(path + ".vh")):
            missing.append(f"{label}: no such file '{path}'")
    if missing:
        raise CliError("\n".join(missing))


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    try:
        spec = synth.SynthSpec(dims=(args.dims,) * 3, kind=args.kind,
                               amplitude=args.amplitude, seed=args.seed,
                               n_landmarks=args.landmarks)
        result = synth.generate(spec)
    except synth.SynthError as e:
        raise CliError(str(e)) from e
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    def emit(name, writer):
        path = os.path.join(args.out, name)
        writer(path)
        outputs.append(name)

    emit("moving", lambda p: vol.save_volume(result.moving, p))
    emit("fixed", lambda p: vol.save_volume(result.fixed, p))
    emit("mask", lambda p: vol.save_volume(result.mask, p))
    emit("landmarks.csv", lambda p: vol.save_landmarks(result.landmarks, p))
    emit("landmarks_exact.csv",
         lambda p: vol.save_landmarks(result.landmarks_exact, p))
    emit("truth.field", lambda p: ev.save_field(result.truth_field, p))

    files = sorted(
        f for f in os.listdir(args.out)
        if any(f == o or f.startswith(o + ".") for o in outputs))
    with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
        fh.write(f"synth dims={args.dims} kind={args.kind} seed={args.seed} "
                 f"amplitude={args.amplitude!r} landmarks={args.landmarks}\n")
        for f in files:
            fh.write(f"{_sha256(os.path.join(args.out, f))}  {f}\n")
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def _overrides(sets):
    out = {}
    for item in sets or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got '{item}'")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args):
    over = _overrides(args.set)
    if args.mode:
        over["train.mode"] = args.mode
    if args.alpha is not None:
        over["train.baseline_alpha"] = str(args.alpha)
    if args.reg:
        over["train.reg"] = args.reg
    if args.out:
        over["paths.out"] = args.out
    cfg = cfgmod.build(over, file_path=args.config)
    if cfg["train.mode"] == "conditioned" and args.alpha is not None \
            and not 0.0 <= args.alpha <= 1.0:
        raise CliError(f"conditioned mode trains over alpha in [0, 1]; "
                       f"--alpha {args.alpha} is out of range")
    _require_files([("paths.moving", cfg["paths.moving"]),
                    ("paths.fixed", cfg["paths.fixed"]),
                    ("paths.mask", cfg["paths.mask"])])
    tc = cfgmod.train_config(cfg)
    moving = vol.load_volume(cfg["paths.moving"])
    fixed = vol.load_volume(cfg["paths.fixed"])
    mask = vol.make_mask(vol.load_volume(cfg["paths.mask"]))
    out_dir = cfg["paths.out"]
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.write(cfg, os.path.join(out_dir, "run_config.txt"))
    result = trainmod.train(moving, fixed, mask, tc, out_dir=out_dir,
                            log_every=cfg["train.log_every"],
                            progress=args.progress)
    print(f"trained {tc.epochs} epochs in {result.wall_seconds:.1f}s; "
          f"outputs in {out_dir}")
    return EXIT_OK


def _load_ckpt(path):
    _require_files([("checkpoint", path)])
    try:
        return nets.load_checkpoint(path)
    except nets.NetError as e:
        raise CliError(str(e)) from e


def cmd_tune(args):
    main, harm, meta = _load_ckpt(args.ckpt)
    if meta.get("mode") != "conditioned":
        raise CliError("tune needs a conditioned checkpoint; this one was "
                       f"trained in mode '{meta.get('mode')}'")
    _require_files([("moving mask", args.moving_mask),
                    ("fixed mask", args.fixed_mask)])
    mmask = vol.make_mask(vol.load_volume(args.moving_mask))
    fmask = vol.make_mask(vol.load_volume(args.fixed_mask))
    grid = tune.default_grid(args.grid_points)
    alpha_star, table = tune.grid_search_alpha(
        main, harm, mmask, fmask, grid, invert_iters=args.invert_iters)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "dice"])
        for a, d in table:
            w.writerow([repr(a), repr(d)])
        w.writerow(["alpha_star", repr(alpha_star)])
    print(f"alpha_star = {alpha_star}")
    return EXIT_OK


def cmd_warp(args):
    main, harm, meta = _load_ckpt(args.ckpt)
    _require_files([("moving volume", args.moving)])
    moving = vol.load_volume(args.moving)
    act = ev.resolve_activation(main, harm, meta.get("mode", "baseline"),
                                args.alpha)
    f = ev.dense_field(main, act, moving.dims, alpha=args.alpha)
    moved = ev.warp_volume(moving, f, iters=args.invert_iters,
                           binarize=args.mask)
    vol.save_volume(moved, args.out)
    print(f"wrote {args.out}.vh/.raw")
    return EXIT_OK


def cmd_eval(args):
    main, harm, meta = _load_ckpt(args.ckpt)
    _require_files([("reference volume", args.ref),
                    ("landmarks", args.landmarks)])
    ref = vol.load_volume(args.ref)
    lms = vol.load_landmarks(args.landmarks, one_based=args.one_based)
    lms.check_in_range(ref.dims)
    act = ev.resolve_activation(main, harm, meta.get("mode", "baseline"),
                                args.alpha)
    mean_tre, std_tre, per = ev.tre(lms, main, act, ref)
    init_mean, init_std, _ = ev.initial_tre(lms, ref.spacing)
    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(-1.0, 1.0, size=(args.jac_samples, 3))
    frac_neg, min_det, mean_dev = ev.jacobian_stats(main, act, pts)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "tre_per_landmark.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "tre_mm"])
        for i, v in enumerate(per):
            w.writerow([i, repr(float(v))])
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(f"alpha {args.alpha!r}\n")
        fh.write(f"tre_mean_mm {mean_tre!r}\ntre_std_mm {std_tre!r}\n")
        fh.write(f"initial_tre_mean_mm {init_mean!r}\n"
                 f"initial_tre_std_mm {init_std!r}\n")
        fh.write(f"jac_frac_nonpos {frac_neg!r}\njac_min_det {min_det!r}\n"
                 f"jac_mean_abs_dev {mean_dev!r}\n")
    print(f"mean TRE {mean_tre:.3f} mm (initial {init_mean:.3f} mm)")
    return EXIT_OK


def cmd_report(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run, out = args.run, args.out or args.run
    os.makedirs(out, exist_ok=True)
    lines = []

    loss_path = os.path.join(run, "loss_log.csv")
    if os.path.exists(loss_path):
        rows = trainmod.read_loss_log(loss_path)
        ep = [r[0] for r in rows]
        fig, ax = plt.subplots(figsize=(7, 4))
        for idx, label in ((2, "similarity"), (3, "regularizer"), (4, "total")):
            ax.plot(ep, [r[idx] for r in rows], label=label, lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.savefig(os.path.join(out, "loss_curves.png"), dpi=120)
        plt.close(fig)
        lines.append(f"final_total_loss {rows[-1][4]!r}")

    tune_path = os.path.join(run, "tune_report.csv")
    if os.path.exists(tune_path):
        alphas, dices, alpha_star = _read_tune_report(tune_path)
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(alphas, dices, "o-")
        ax.set_xlabel("alpha")
        ax.set_ylabel("dice")
        fig.savefig(os.path.join(out, "alpha_vs_dice.png"), dpi=120)
        plt.close(fig)
        lines.append(f"alpha_star {alpha_star!r}")

    bend_path = os.path.join(run, "alpha_bending.csv")
    if os.path.exists(bend_path):
        with open(bend_path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        av = [(float(a), float(b)) for a, b in rows]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot([a for a, _ in av], [b for _, b in av], "o-")
        ax.set_xlabel("alpha")
        ax.set_ylabel("bending penalty")
        fig.savefig(os.path.join(out, "alpha_vs_bending.png"), dpi=120)
        plt.close(fig)

    timing_path = os.path.join(run, "timing.csv")
    if os.path.exists(timing_path):
        with open(timing_path, newline="") as fh:
            rows = {r[0]: float(r[1]) for r in csv.reader(fh)
                    if r and r[0] != "method"}
        for k, v in sorted(rows.items()):
            lines.append(f"wall_seconds.{k} {v!r}")
        if "grid_search" in rows and "bo_retraining" in rows:
            lines.append("tuning_cost_ratio "
                         f"{rows['bo_retraining'] / rows['grid_search']!r}")

    if not lines:
        raise CliError(f"no report inputs found in {run}")
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _read_tune_report(path):
    alphas, dices, alpha_star = [], [], None
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "alpha":
                continue
            if row[0] == "alpha_star":
                alpha_star = float(row[1])
            else:
                alphas.append(float(row[0]))
                dices.append(float(row[1]))
    return alphas, dices, alpha_star


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="inrreg",
        description="Conditioned implicit-representation deformable "
                    "registration toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic benchmark pair")
    ps.add_argument("--dims", type=int, default=48)
    ps.add_argument("--kind", default="gaussian_bump",
                    choices=["gaussian_bump", "sinusoid", "affine"])
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--amplitude", type=float, default=0.2)
    ps.add_argument("--landmarks", type=int, default=50)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_synth)

    pt = sub.add_parser("train", help="train a registration model")
    pt.add_argument("--config")
    pt.add_argument("--set", action="append", metavar="KEY=VALUE")
    pt.add_argument("--mode", choices=["conditioned", "baseline"])
    pt.add_argument("--alpha", type=float,
                    help="fixed regularization weight (baseline mode)")
    pt.add_argument("--reg", choices=list(trainmod.REG_CHOICES))
    pt.add_argument("--out")
    pt.add_argument("--progress", type=int, default=0,
                    help="print a progress line every N epochs")
    pt.set_defaults(func=cmd_train)

    pu = sub.add_parser("tune", help="grid-search alpha on a conditioned "
                                     "checkpoint")
    pu.add_argument("--ckpt", required=True)
    pu.add_argument("--moving-mask", required=True)
    pu.add_argument("--fixed-mask", required=True)
    pu.add_argument("--grid-points", type=int, default=11)
    pu.add_argument("--invert-iters", type=int, default=10)
    pu.add_argument("--out", default="tune_report.csv")
    pu.set_defaults(func=cmd_tune)

    pw = sub.add_parser("warp", help="warp a volume with a trained field")
    pw.add_argument("--ckpt", required=True)
    pw.add_argument("--alpha", type=float, default=0.5)
    pw.add_argument("--moving", required=True)
    pw.add_argument("--mask", action="store_true",
                    help="binarize the warped output")
    pw.add_argument("--invert-iters", type=int, default=10)
    pw.add_argument("--out", required=True)
    pw.set_defaults(func=cmd_warp)

    pe = sub.add_parser("eval", help="landmark TRE and Jacobian statistics")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--alpha", type=float, default=0.5)
    pe.add_argument("--ref", required=True,
                    help="reference volume defining grid and spacing")
    pe.add_argument("--landmarks", required=True)
    pe.add_argument("--one-based", action="store_true")
    pe.add_argument("--jac-samples", type=int, default=10000)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_eval)

    pr = sub.add_parser("report", help="aggregate run CSVs into plots and a "
                                       "summary")
    pr.add_argument("--run", required=True)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (cfgmod.ConfigError, vol.VolumeError, synth.SynthError,
            tune.TuneError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainmod.TrainError, ev.EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
