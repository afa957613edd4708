"""Similarity and regularization terms, combined into the training objective.

Every penalty is a Monte-Carlo estimate over the sampled batch: with points
drawn uniformly, the sample mean is the (volume-normalized) integral
estimator, so the weighting between similarity and regularization does not
depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import HESS_PAIRS, PointDerivatives

NCC_EPS = 1e-8
PSI_EPS = 1e-3


class LossError(Exception):
    pass


@dataclass
class HyperelasticWeights:
    alpha_l: float = 1.0
    alpha_a: float = 1.0
    alpha_v: float = 1.0

    def __post_init__(self):
        for name in ("alpha_l", "alpha_a", "alpha_v"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise LossError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    sim: float
    reg: float
    total: float
    alpha: float


def ncc_loss(moving_vals, fixed_vals):
    """1 - NCC of two sample batches; in [0, 2], 0 at perfect correlation.

    Population statistics with variance stabilized by a small epsilon, so
    near-constant batches degrade gracefully instead of dividing by zero.
    """
    u, v = moving_vals, fixed_vals
    if u.data.size < 2 or v.data.size < 2:
        raise LossError(f"NCC needs batches of >= 2 values, got "
                        f"{u.data.size} and {v.data.size}")
    uc = ad.sub(u, ad.mean(u))
    vc = ad.sub(v, ad.mean(v))
    cov = ad.mean(ad.mul(uc, vc))
    su = ad.sqrt(ad.add(ad.mean(ad.square(uc)), NCC_EPS))
    sv = ad.sqrt(ad.add(ad.mean(ad.square(vc)), NCC_EPS))
    ncc = ad.div(cov, ad.mul(su, sv))
    return ad.sub(1.0, ncc)


def _phi_entries(derivs: PointDerivatives):
    """Entries of grad(phi) = I + grad(u) as (N,) channels, m[i][k]."""
    m = [[None] * 3 for _ in range(3)]
    for k in range(3):
        colk = derivs.jac[k]
        for i in range(3):
            e = ad.col(colk, i)
            m[i][k] = ad.add(e, 1.0) if i == k else e
    return m


def jacobian_penalty(derivs: PointDerivatives):
    """Mean |det grad(phi) - 1| over the batch."""
    _require_jac(derivs)
    det = ad.det3_from_entries(_phi_entries(derivs))
    return ad.mean(ad.absval(ad.sub(det, 1.0)))


def _cofactor_entries(m):
    """cof(A)[i][j] from the nine channels of A (adjugate transpose)."""
    def minor(r, c):
        rs = [i for i in range(3) if i != r]
        cs = [j for j in range(3) if j != c]
        return ad.sub(ad.mul(m[rs[0]][cs[0]], m[rs[1]][cs[1]]),
                      ad.mul(m[rs[0]][cs[1]], m[rs[1]][cs[0]]))

    return [[ad.mul(minor(i, j), float((-1) ** (i + j))) for j in range(3)]
            for i in range(3)]


def hyperelastic_penalty(derivs: PointDerivatives, w: HyperelasticWeights):
    """Length/area/volume control of the deformation.

    length: 0.5 * alpha_l * ||grad u||_F^2
    area:   alpha_a * sum_j (max(||cof(grad phi) e_j||^2 - 1, 0))^2
    volume: alpha_v * ((v - 1)^2 / max(v, eps))^2 with v = det grad phi

    The area and volume response functions vanish at the identity and grow
    toward area expansion / folding.
    """
    _require_jac(derivs)
    m = _phi_entries(derivs)
    terms = []
    if w.alpha_l != 0.0:
        frob = None
        for k in range(3):
            q = ad.summation(ad.square(derivs.jac[k]), axis=1)
            frob = q if frob is None else ad.add(frob, q)
        terms.append(ad.mul(0.5 * w.alpha_l, ad.mean(frob)))
    if w.alpha_a != 0.0:
        cof = _cofactor_entries(m)
        area = None
        for j in range(3):
            colsq = ad.add(ad.add(ad.square(cof[0][j]), ad.square(cof[1][j])),
                           ad.square(cof[2][j]))
            t = ad.square(ad.max_with_constant(ad.sub(colsq, 1.0), 0.0))
            area = t if area is None else ad.add(area, t)
        terms.append(ad.mul(w.alpha_a, ad.mean(area)))
    if w.alpha_v != 0.0:
        det = ad.det3_from_entries(m)
        psi = ad.square(ad.div(ad.square(ad.sub(det, 1.0)),
                               ad.max_with_constant(det, PSI_EPS)))
        terms.append(ad.mul(w.alpha_v, ad.mean(psi)))
    if not terms:
        return ad.tensor(np.zeros((), dtype=derivs.u.dtype))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def bending_penalty(derivs: PointDerivatives):
    """Mean squared second derivatives, mixed terms counted twice.

    The continuous penalty averages over the normalized cube (the 1/8
    prefactor of the integral), which uniform sampling estimates without
    bias by the plain sample mean.
    """
    if derivs.hess is None:
        raise LossError("bending penalty needs Hessians; call "
                        "forward_with_derivs with need_hessian=True")
    n = derivs.n
    total = None
    for (k, l) in HESS_PAIRS:
        q = ad.summation(ad.square(derivs.hess[(k, l)]))
        if k != l:
            q = ad.mul(q, 2.0)
        total = q if total is None else ad.add(total, q)
    return ad.div(total, float(n))


def combined_loss(sim, reg, alpha, mode="conditioned") -> "ad.Tensor":
    """Total objective.

    conditioned: (1 - alpha) * sim + alpha * reg, alpha in [0, 1]
    baseline:    sim + alpha * reg, alpha >= 0 (affine weighting)
    """
    alpha = float(alpha)
    if mode == "conditioned":
        if not 0.0 <= alpha <= 1.0:
            raise LossError(f"conditioned mode needs alpha in [0, 1], got {alpha}")
        if alpha == 0.0:
            return sim
        if alpha == 1.0:
            return reg
        return ad.add(ad.mul(1.0 - alpha, sim), ad.mul(alpha, reg))
    if mode == "baseline":
        if alpha < 0.0:
            raise LossError(f"baseline mode needs alpha >= 0, got {alpha}")
        return ad.add(sim, ad.mul(alpha, reg))
    raise LossError(f"unknown loss mode '{mode}'")


def breakdown(sim, reg, total, alpha) -> LossBreakdown:
    return LossBreakdown(float(sim.data), float(reg.data), float(total.data),
                         float(alpha))


def _require_jac(derivs):
    if derivs.jac is None:
        raise LossError("this penalty needs the displacement Jacobian")
