"""Coordinate MLP with parameterized sine activations, plus the harmonizer
network that maps the regularization weight onto the activation parameters.

The displacement net evaluates u(x) for x in the normalized cube; the full
map is phi(x) = x + u(x).  `forward_with_derivs` additionally propagates
exact first and second derivatives of u with respect to the input
coordinates through every layer, expressed as ordinary graph operations so
that losses built on those derivatives stay trainable by a single reverse
pass.

Propagation rules for a layer z = act(W y + beta):
    J_t = J_y W,            H_t = H_y W          (linear part)
    J_z = act'(t) * J_t
    H_z = act''(t) * J_t[k] * J_t[l] + act'(t) * H_t[k,l]
with act(t) = a*sin(b*t + c) + d, act' = a*b*cos(b*t + c),
act'' = -a*b^2*sin(b*t + c).
"""

from __future__ import annotations

import logging
import math

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

HESS_PAIRS = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


class NetError(Exception):
    pass


class ActivationParams:
    """The (a, b, c, d) quadruple shaping every hidden sine activation."""

    def __init__(self, a, b, c, d):
        self.a, self.b, self.c, self.d = a, b, c, d

    @classmethod
    def constant(cls, a, b, c, d, dtype=np.float32):
        mk = lambda v: ad.tensor(np.full(1, v, dtype=dtype))
        return cls(mk(a), mk(b), mk(c), mk(d))

    def as_array(self):
        return np.array([float(t.data.reshape(-1)[0])
                         for t in (self.a, self.b, self.c, self.d)])


def standard_activation(omega0, dtype=np.float32):
    """The unconditioned sine-INR activation: sin(omega0 * x)."""
    return ActivationParams.constant(1.0, omega0, 0.0, 0.0, dtype=dtype)


class MainNet:
    """MLP 3 -> hidden... -> 3 with shared parameterized sine activations.

    `activation="identity"` turns every hidden activation into the identity
    (a pure linear network); used by derivative tests.
    """

    def __init__(self, layers, widths, omega0, activation="sine"):
        self.layers = layers  # list of (W (in,out), b (out,)) Tensors
        self.widths = tuple(widths)
        self.omega0 = float(omega0)
        self.activation = activation

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def parameters(self):
        return [t for pair in self.layers for t in pair]


class Harmonizer:
    """MLP alpha -> (a, b, c, d); hidden layers are linear -> layer norm ->
    SiLU, output layer linear."""

    def __init__(self, hidden, out, widths):
        self.hidden = hidden  # list of (W, b, gain, beta)
        self.out = out        # (W, b)
        self.widths = tuple(widths)

    @property
    def dtype(self):
        return self.out[0].dtype

    def parameters(self):
        ps = [t for group in self.hidden for t in group]
        ps.extend(self.out)
        return ps


def init(seed, main_widths=(3, 256, 256, 256, 3),
         harm_widths=(1, 128, 64, 32, 4), omega0=30.0, dtype=np.float32):
    """Seeded initialization of both networks.

    Main net follows the sine-INR convention: first layer U(+-1/fan_in),
    deeper layers U(+-sqrt(6/fan_in)/omega0), so preactivations scaled by a
    frequency near omega0 stay well distributed.  The harmonizer output
    layer starts with small weights and bias (1, omega0, 0, 0), so training
    begins at a standard sine activation for every alpha.
    """
    rng = np.random.default_rng(seed)
    if main_widths[0] != 3 or main_widths[-1] != 3:
        raise NetError(f"main net must map 3 -> 3, got widths {main_widths}")
    if harm_widths[0] != 1 or harm_widths[-1] != 4:
        raise NetError(f"harmonizer must map 1 -> 4, got widths {harm_widths}")

    def uniform(shape, bound):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    layers = []
    for li, (fan_in, fan_out) in enumerate(zip(main_widths[:-1], main_widths[1:])):
        wb = 1.0 / fan_in if li == 0 else math.sqrt(6.0 / fan_in) / omega0
        layers.append((ad.parameter(uniform((fan_in, fan_out), wb),
                                    name=f"main.{li}.W"),
                       ad.parameter(uniform(fan_out, 1.0 / math.sqrt(fan_in)),
                                    name=f"main.{li}.b")))
    main = MainNet(layers, main_widths, omega0)

    hidden = []
    for li, (fan_in, fan_out) in enumerate(zip(harm_widths[:-2], harm_widths[1:-1])):
        hidden.append((
            ad.parameter(uniform((fan_in, fan_out), math.sqrt(6.0 / fan_in)),
                         name=f"harm.{li}.W"),
            ad.parameter(uniform(fan_out, 1.0 / math.sqrt(fan_in)),
                         name=f"harm.{li}.b"),
            ad.parameter(np.ones(fan_out, dtype=dtype), name=f"harm.{li}.gain"),
            ad.parameter(np.zeros(fan_out, dtype=dtype), name=f"harm.{li}.beta"),
        ))
    fan_in = harm_widths[-2]
    # small output weights: a fresh harmonizer emits approximately the
    # standard activation regardless of alpha
    w_out = ad.parameter(uniform((fan_in, 4), 0.1 * math.sqrt(6.0 / fan_in)),
                         name="harm.out.W")
    b_out = ad.parameter(np.array([1.0, omega0, 0.0, 0.0], dtype=dtype),
                         name="harm.out.b")
    harm = Harmonizer(hidden, (w_out, b_out), harm_widths)
    return main, harm


def harmonize(alpha, harm: Harmonizer) -> ActivationParams:
    """Map the regularization weight onto activation parameters (on-graph)."""
    if isinstance(alpha, ad.Tensor):
        x = alpha
        aval = float(x.data.reshape(-1)[0])
    else:
        aval = float(alpha)
        if not math.isfinite(aval):
            raise NetError(f"alpha must be finite, got {aval}")
        x = ad.tensor(np.full((1, 1), aval, dtype=harm.dtype))
    if not math.isfinite(aval):
        raise NetError(f"alpha must be finite, got {aval}")
    if not 0.0 <= aval <= 1.0:
        log.warning("alpha=%g outside the training range [0, 1]", aval)
    if x.data.shape != (1, 1):
        src = x

        def bwd(out):
            if src.requires_grad:
                src.accumulate(out.grad.reshape(src.data.shape))

        x = ad.Tensor(x.data.reshape(1, 1).copy(), (src,), bwd, op="reshape")
    h = x
    for W, b, gain, beta in harm.hidden:
        h = ad.silu(ad.layer_norm(ad.add(ad.matmul(h, W), b), gain, beta))
    out = ad.add(ad.matmul(h, harm.out[0]), harm.out[1])
    return ActivationParams(*(ad.col(out, i) for i in range(4)))


def _as_points_tensor(points, dtype):
    if isinstance(points, ad.Tensor):
        pts = points
    else:
        pts = ad.tensor(np.asarray(points, dtype=dtype))
    if pts.data.ndim != 2 or pts.data.shape[1] != 3:
        raise NetError(f"points must be (N, 3), got {pts.data.shape}")
    if pts.data.shape[0] == 0:
        raise NetError("empty point batch")
    return pts


def _linear(y, W, b):
    return ad.add(ad.matmul(y, W), b)


def forward(points, act: ActivationParams, net: MainNet) -> ad.Tensor:
    """Displacement u at normalized points; phi(x) = x + u(x)."""
    y = _as_points_tensor(points, net.dtype)
    for W, b in net.layers[:-1]:
        t = _linear(y, W, b)
        if net.activation == "identity":
            y = t
        else:
            s = ad.sin(ad.add(ad.mul(t, act.b), act.c))
            y = ad.add(ad.mul(act.a, s), act.d)
    return _linear(y, *net.layers[-1])


class PointDerivatives:
    """Displacement plus exact input-derivatives at a batch of points.

    jac[k] is the column d u / d x_k, shape (N, 3); hess[(k, l)] holds
    d^2 u / (d x_k d x_l) for k <= l, shape (N, 3).  All entries live on
    the gradient graph when produced by `forward_with_derivs`.
    """

    def __init__(self, u, jac=None, hess=None):
        self.u = u
        self.jac = jac
        self.hess = hess

    @property
    def n(self):
        return self.u.data.shape[0]

    def u_np(self):
        return self.u.data

    def jac_np(self):
        """(N, 3, 3) with [n, i, k] = d u_i / d x_k."""
        return np.stack([j.data for j in self.jac], axis=2)

    def hess_np(self):
        """(N, 3, 3, 3) with [n, i, k, l]; symmetric in (k, l)."""
        n = self.n
        out = np.zeros((n, 3, 3, 3), dtype=self.u.dtype)
        for (k, l) in HESS_PAIRS:
            h = self.hess[(k, l)].data
            out[:, :, k, l] = h
            out[:, :, l, k] = h
        return out

    @classmethod
    def from_arrays(cls, u, jac=None, hess=None, dtype=np.float64):
        """Wrap plain arrays (u (N,3), jac (N,3,3), hess (N,3,3,3)) as a
        constant batch; used to feed analytic fields into the losses."""
        u_t = ad.tensor(np.asarray(u, dtype=dtype))
        jac_t = hess_t = None
        if jac is not None:
            jac = np.asarray(jac, dtype=dtype)
            jac_t = [ad.tensor(jac[:, :, k]) for k in range(3)]
        if hess is not None:
            hess = np.asarray(hess, dtype=dtype)
            hess_t = {(k, l): ad.tensor(hess[:, :, k, l]) for k, l in HESS_PAIRS}
        return cls(u_t, jac_t, hess_t)


def forward_with_derivs(points, act: ActivationParams, net: MainNet,
                        need_hessian=True) -> PointDerivatives:
    """Evaluate u together with its exact Jacobian (and Hessians).

    The derivative propagation is itself a graph computation, so parameter
    gradients of any scalar built from u, jac, or hess come from one
    reverse pass.
    """
    y = _as_points_tensor(points, net.dtype)
    n = y.data.shape[0]
    dtype = net.dtype
    eye = np.eye(3, dtype=dtype)
    jy = [ad.tensor(np.broadcast_to(eye[k], (n, 3)).copy()) for k in range(3)]
    hy = {pair: None for pair in HESS_PAIRS}

    for W, b in net.layers[:-1]:
        t = _linear(y, W, b)
        jt = [ad.matmul(jy[k], W) for k in range(3)]
        ht = {p: (ad.matmul(hy[p], W) if hy[p] is not None else None)
              for p in HESS_PAIRS}
        if net.activation == "identity":
            y, jy, hy = t, jt, ht
            continue
        bt_c = ad.add(ad.mul(t, act.b), act.c)
        s = ad.sin(bt_c)
        y = ad.add(ad.mul(act.a, s), act.d)
        sp = ad.mul(ad.mul(act.a, act.b), ad.cos(bt_c))
        jy = [ad.mul(sp, jt[k]) for k in range(3)]
        if need_hessian:
            spp = ad.mul(ad.mul(ad.mul(act.a, act.b), act.b), ad.mul(s, -1.0))
            for (k, l) in HESS_PAIRS:
                term = ad.mul(spp, ad.mul(jt[k], jt[l]))
                hy[(k, l)] = (term if ht[(k, l)] is None
                              else ad.add(term, ad.mul(sp, ht[(k, l)])))
        else:
            hy = {p: None for p in HESS_PAIRS}

    W, b = net.layers[-1]
    u = _linear(y, W, b)
    ju = [ad.matmul(jy[k], W) for k in range(3)]
    hu = None
    if need_hessian:
        zero = None
        hu = {}
        for p in HESS_PAIRS:
            if hy[p] is not None:
                hu[p] = ad.matmul(hy[p], W)
            else:
                if zero is None:
                    zero = ad.tensor(np.zeros((n, 3), dtype=dtype))
                hu[p] = zero
    return PointDerivatives(u, ju, hu)


# ---------------------------------------------------------------------------
# checkpoint format: one text header line, then little-endian f32 parameters

CKPT_FORMAT = "cidir-ckpt"
CKPT_VERSION = 1


def save_checkpoint(path, main: MainNet, harm: Harmonizer, mode="conditioned",
                    extra=None):
    params = harm.parameters() + main.parameters()
    n_params = sum(p.data.size for p in params)
    fields = {
        "mode": mode,
        "main": ",".join(str(w) for w in main.widths),
        "harm": ",".join(str(w) for w in harm.widths),
        "omega0": repr(main.omega0),
        "shared_act": "1",
        "n_params": str(n_params),
    }
    if extra:
        fields.update(extra)
    header = f"{CKPT_FORMAT} v{CKPT_VERSION} " + " ".join(
        f"{k}={v}" for k, v in fields.items()) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for p in params:
            fh.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (main, harm, meta dict).  Bit-exact for f32 parameters."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        blob = fh.read()
    if header[:2] != [CKPT_FORMAT, f"v{CKPT_VERSION}"]:
        raise NetError(f"unrecognized checkpoint header: {header[:2]}")
    meta = dict(kv.split("=", 1) for kv in header[2:])
    main_widths = tuple(int(w) for w in meta["main"].split(","))
    harm_widths = tuple(int(w) for w in meta["harm"].split(","))
    omega0 = float(meta["omega0"])
    if meta.get("shared_act") != "1":
        raise NetError("per-layer activation quadruples are not supported")
    n_params = int(meta["n_params"])
    flat = np.frombuffer(blob, dtype="<f4")
    if flat.size != n_params:
        raise NetError(f"checkpoint holds {flat.size} parameters, header "
                       f"declares {n_params}")
    main, harm = init(0, main_widths, harm_widths, omega0, dtype=np.float32)
    pos = 0
    for p in harm.parameters() + main.parameters():
        k = p.data.size
        p.data = flat[pos:pos + k].reshape(p.data.shape).copy()
        pos += k
    if pos != n_params:
        raise NetError("parameter count mismatch while loading checkpoint")
    return main, harm, meta
