"""Training loops: conditioned (harmonized) and baseline (fixed activation).

Each epoch draws one regularization weight (uniform on [0,1] in conditioned
mode, the configured constant in baseline mode), samples a fresh batch of
points from the moving-image mask, evaluates similarity and the configured
regularizer at those points, and takes one Adam step.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import kernels
from . import losses
from . import nets
from . import volume as vol


class TrainError(Exception):
    pass


REG_CHOICES = ("jacobian", "hyperelastic", "bending")


@dataclass
class TrainConfig:
    epochs: int = 50000
    batch_points: int = 10000
    learning_rate: float = 1e-4
    mode: str = "conditioned"             # conditioned | baseline
    baseline_alpha: float = 10.0
    reg: str = "bending"
    hyper: losses.HyperelasticWeights = field(
        default_factory=losses.HyperelasticWeights)
    seed: int = 0
    main_widths: tuple = (3, 256, 256, 256, 3)
    harm_widths: tuple = (1, 128, 64, 32, 4)
    omega0: float = 30.0
    checkpoint_every: int = 1000
    float64: bool = False
    grad_clip: float = 0.0                # 0 disables clipping
    jitter: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_points < 2:
            raise TrainError(f"batch_points must be >= 2, got {self.batch_points}")
        if self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.mode not in ("conditioned", "baseline"):
            raise TrainError(f"unknown mode '{self.mode}'")
        if self.reg not in REG_CHOICES:
            raise TrainError(f"reg must be one of {REG_CHOICES}, got '{self.reg}'")
        if self.mode == "baseline" and self.baseline_alpha < 0:
            raise TrainError("baseline_alpha must be >= 0")

    @property
    def dtype(self):
        return np.float64 if self.float64 else np.float32


class Adam:
    """Bias-corrected Adam over a list of parameter tensors."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params):
        self.params = list(params)
        self.m = {p.id: np.zeros_like(p.data) for p in self.params}
        self.v = {p.id: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr, grad_clip=0.0):
        self.t += 1
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient for parameter "
                                 f"'{p.name or p.id}' at step {self.t}")
            if grad_clip > 0.0:
                norm = float(np.sqrt(np.sum(g.astype(np.float64) ** 2)))
                if norm > grad_clip:
                    g = g * (grad_clip / norm)
            flat_p = p.data.reshape(-1)
            kernels.adam_update(flat_p, np.ascontiguousarray(g.reshape(-1)),
                                self.m[p.id].reshape(-1),
                                self.v[p.id].reshape(-1),
                                self.t, lr, self.BETA1, self.BETA2, self.EPS)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def regularizer(cfg: TrainConfig, derivs):
    if cfg.reg == "jacobian":
        return losses.jacobian_penalty(derivs)
    if cfg.reg == "hyperelastic":
        return losses.hyperelastic_penalty(derivs, cfg.hyper)
    return losses.bending_penalty(derivs)


def normalize_intensities(v: vol.Volume) -> vol.Volume:
    """Min-max rescale to [0, 1]; NCC is affine-invariant so this only
    stabilizes magnitudes."""
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi <= lo:
        return v.copy(np.zeros_like(v.data))
    return v.copy(((v.data - lo) / (hi - lo)).astype(v.data.dtype))


@dataclass
class TrainResult:
    main: nets.MainNet
    harm: nets.Harmonizer
    log: list                 # rows (epoch, alpha, sim, reg, total)
    wall_seconds: float


def train(moving: vol.Volume, fixed: vol.Volume, mask: vol.Volume,
          cfg: TrainConfig, out_dir=None, log_every=1,
          progress=None) -> TrainResult:
    """Run the full loop; optionally write checkpoints/logs under out_dir."""
    vol.check_same_grid(moving, fixed)
    vol.check_same_grid(moving, mask)
    if not np.any(mask.data > 0.5):
        raise TrainError("mask has no active voxels")

    moving = normalize_intensities(moving)
    fixed = normalize_intensities(fixed)

    dtype = cfg.dtype
    main, harm = nets.init(cfg.seed, cfg.main_widths, cfg.harm_widths,
                           cfg.omega0, dtype=dtype)
    if cfg.mode == "conditioned":
        params = harm.parameters() + main.parameters()
        const_act = None
    else:
        params = main.parameters()
        const_act = nets.standard_activation(cfg.omega0, dtype=dtype)
    opt = Adam(params)
    rng = np.random.default_rng(cfg.seed + 1)
    need_hessian = cfg.reg == "bending"

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log_rows = []
    t0 = time.time()

    for epoch in range(cfg.epochs):
        alpha = float(rng.uniform()) if cfg.mode == "conditioned" \
            else cfg.baseline_alpha
        pts_vox, _ = vol.sample_mask_points(mask, cfg.batch_points, rng,
                                            jitter=cfg.jitter)
        x_norm = vol.normalize_coords(moving, pts_vox).astype(dtype)

        act = nets.harmonize(alpha, harm) if cfg.mode == "conditioned" \
            else const_act
        derivs = nets.forward_with_derivs(x_norm, act, main,
                                          need_hessian=need_hessian)
        phi = ad.add(ad.tensor(x_norm), derivs.u)
        m_vals = ad.tensor(vol.trilinear_sample_np(moving, x_norm,
                                                   dtype=dtype)[0])
        f_vals = vol.trilinear_sample(fixed, phi)
        try:
            sim = losses.ncc_loss(m_vals, f_vals)
            reg = regularizer(cfg, derivs)
            total = losses.combined_loss(sim, reg, alpha, mode=cfg.mode)
            opt.zero_grad()
            ad.backward(total)
        except ad.NonFiniteError as e:
            raise TrainError(
                f"non-finite loss at epoch {epoch} (alpha={alpha:.4f}): {e}"
            ) from e
        opt.step(cfg.learning_rate, cfg.grad_clip)
        row = (epoch, alpha, float(sim.data), float(reg.data),
               float(total.data))
        if epoch % log_every == 0 or epoch == cfg.epochs - 1:
            log_rows.append(row)
        ad.free_graph(total)
        if progress and epoch % progress == 0:
            print(f"epoch {epoch}: alpha={alpha:.3f} sim={row[2]:.5f} "
                  f"reg={row[3]:.5f} total={row[4]:.5f}", flush=True)
        if out_dir and cfg.checkpoint_every > 0 and \
                (epoch + 1) % cfg.checkpoint_every == 0:
            nets.save_checkpoint(os.path.join(out_dir, "latest.ckpt"),
                                 main, harm, mode=cfg.mode)

    wall = time.time() - t0
    if out_dir:
        nets.save_checkpoint(os.path.join(out_dir, "final.ckpt"),
                             main, harm, mode=cfg.mode)
        write_loss_log(os.path.join(out_dir, "loss_log.csv"), log_rows)
        write_metadata(os.path.join(out_dir, "run_metadata.txt"), cfg, wall)
    return TrainResult(main, harm, log_rows, wall)


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "alpha", "sim", "reg", "total"])
        for r in rows:
            w.writerow([r[0]] + [repr(x) for x in r[1:]])


def read_loss_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(r[0]), *(float(x) for x in r[1:])) for r in rows[1:]]


def write_metadata(path, cfg: TrainConfig, wall_seconds):
    with open(path, "w") as fh:
        fh.write("format inrreg-run v1\n")
        fh.write(f"checkpoint_format {nets.CKPT_FORMAT} v{nets.CKPT_VERSION}\n")
        fh.write(f"kernel_backend {kernels.BACKEND}\n")
        fh.write(f"wall_seconds {wall_seconds!r}\n")
        for k, v in asdict(cfg).items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    fh.write(f"cfg.{k}.{kk} {vv!r}\n")
            else:
                fh.write(f"cfg.{k} {v!r}\n")
