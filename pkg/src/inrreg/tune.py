"""Post-training selection of the regularization weight.

Grid search on a conditioned checkpoint: each candidate weight costs one
dense-field evaluation plus a mask warp and a Dice score, never a training
step.  The retraining-based alternative is a 1-D Bayesian optimizer with a
Gaussian-process surrogate and expected improvement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

from . import evaluate as ev
from . import volume as vol


class TuneError(Exception):
    pass


def default_grid(n=11):
    """Ascending weights 0..1 inclusive."""
    return np.linspace(0.0, 1.0, n)


def dice(a: vol.Volume, b: vol.Volume):
    """2|A.B| / (|A|+|B|); two empty masks count as perfect overlap."""
    if a.dims != b.dims:
        raise TuneError(f"mask dims differ: {a.dims} vs {b.dims}")
    sa = a.data > 0.5
    sb = b.data > 0.5
    denom = sa.sum() + sb.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(sa, sb).sum() / denom)


def grid_search_alpha(main, harm, moving_mask: vol.Volume,
                      fixed_mask: vol.Volume, grid=None, invert_iters=10,
                      counters=None):
    """Best weight by warped-mask Dice; ties go to the larger weight.

    Returns (alpha_star, table) with table rows (alpha, dice).
    """
    if grid is None:
        grid = default_grid()
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise TuneError("empty alpha grid")
    if np.any(np.diff(grid) <= 0) or grid.min() < 0 or grid.max() > 1:
        raise TuneError("grid must be strictly ascending within [0, 1]")
    if moving_mask.dims != fixed_mask.dims:
        raise TuneError(f"mask dims differ: {moving_mask.dims} vs "
                        f"{fixed_mask.dims}")
    table = []
    for alpha in grid:
        act = ev.resolve_activation(main, harm, "conditioned", float(alpha))
        f = ev.dense_field(main, act, moving_mask.dims, alpha=float(alpha))
        warped = ev.warp_volume(moving_mask, f, iters=invert_iters,
                                binarize=True)
        table.append((float(alpha), dice(warped, fixed_mask)))
        if counters is not None:
            counters["field_evals"] = counters.get("field_evals", 0) + 1
    best = max(table, key=lambda row: (row[1], row[0]))
    return best[0], table


# ---------------------------------------------------------------------------
# Gaussian-process surrogate (squared-exponential kernel, fixed
# hyperparameters) and expected improvement

@dataclass
class GPModel:
    length_scale: float = 0.2
    signal_var: float = 1.0
    noise_var: float = 1e-4
    x: np.ndarray = field(default_factory=lambda: np.empty(0))
    y: np.ndarray = field(default_factory=lambda: np.empty(0))
    _chol: object = None
    _alpha_vec: object = None

    def kernel(self, a, b):
        d = np.subtract.outer(np.asarray(a, dtype=np.float64),
                              np.asarray(b, dtype=np.float64))
        return self.signal_var * np.exp(-0.5 * (d / self.length_scale) ** 2)

    def add(self, x, y):
        self.x = np.append(self.x, float(x))
        self.y = np.append(self.y, float(y))
        self._chol = None


def gp_fit(model: GPModel):
    """Factor the kernel matrix; escalates jitter before giving up."""
    if model.x.size == 0:
        raise TuneError("GP fit needs at least one observation")
    k = model.kernel(model.x, model.x)
    jitter = 0.0
    for _ in range(6):
        try:
            c = cho_factor(k + (model.noise_var + jitter) * np.eye(model.x.size),
                           lower=True)
            model._chol = c
            model._alpha_vec = cho_solve(c, model.y)
            return model
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 100.0
    raise TuneError("kernel matrix is not positive definite even after "
                    "jitter escalation")


def gp_predict(model: GPModel, xq):
    """Posterior mean and variance at query points (zero prior mean)."""
    xq = np.atleast_1d(np.asarray(xq, dtype=np.float64))
    if model._chol is None:
        gp_fit(model)
    ks = model.kernel(xq, model.x)
    mean = ks @ model._alpha_vec
    v = cho_solve(model._chol, ks.T)
    var = model.signal_var - np.einsum("ij,ji->i", ks, v)
    return mean, np.maximum(var, 0.0)


def expected_improvement(model: GPModel, xq, best_y, xi=0.0):
    mean, var = gp_predict(model, xq)
    sd = np.sqrt(var)
    out = np.zeros_like(mean)
    pos = sd > 0
    z = (mean[pos] - best_y - xi) / sd[pos]
    out[pos] = (mean[pos] - best_y - xi) * norm.cdf(z) + sd[pos] * norm.pdf(z)
    imp = mean[~pos] - best_y - xi
    out[~pos] = np.maximum(imp, 0.0)
    return np.maximum(out, 0.0)


def bo_optimize(objective, budget, seed=0, bounds=(0.0, 1.0),
                n_init=3, lattice=1001, gp=None):
    """Maximize a scalar objective over a 1-D interval.

    Sobol-initialized, then expected-improvement maximization over a dense
    lattice per iteration.  Returns (best_x, history) where history rows
    are (iteration, x, objective).
    """
    if budget < 3:
        raise TuneError(f"budget must be >= 3, got {budget}")
    lo, hi = bounds
    model = gp if gp is not None else GPModel()
    sob = qmc.Sobol(d=1, scramble=True, seed=seed)
    # draw a power-of-two batch (Sobol balance) and keep the first n_init
    draw = 1 << max(1, int(np.ceil(np.log2(n_init))))
    init = lo + (hi - lo) * sob.random(draw)[:n_init, 0]
    history = []

    def observe(i, x):
        y = float(objective(float(x)))
        if not np.isfinite(y):
            raise TuneError(f"objective returned non-finite value at "
                            f"alpha={float(x):.6f}")
        model.add(x, y)
        history.append((i, float(x), y))

    for i, x in enumerate(init[:min(n_init, budget)]):
        observe(i, x)
    xs = np.linspace(lo, hi, lattice)
    while len(history) < budget:
        gp_fit(model)
        best_y = model.y.max()
        ei = expected_improvement(model, xs, best_y)
        observe(len(history), xs[int(np.argmax(ei))])
    best_i = int(np.argmax(model.y))
    return float(model.x[best_i]), history
