"""Finite-difference gradient oracle.

Central differences in float64 against analytic backward passes recomputed
in float64.  Inputs that land too close to a ReLU zero or a pooling tie are
re-drawn so the oracle stays valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import CBAMBlock, GateKind, SEBlock
from .backbone import Backbone, build_design
from .tensor import KinkTrace, Tensor4

__all__ = [
    "GradReport",
    "fd_gradient",
    "rel_err",
    "check_sites",
    "check_op_suite",
    "check_attention",
    "check_backbone",
    "run_full_suite",
    "format_reports",
    "DEFAULT_EPS",
    "DEFAULT_TOL",
    "DEFAULT_FLOOR",
]

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
DEFAULT_FLOOR = 1e-7
KINK_MARGIN = 1e-3


@dataclass
class GradReport:
    op_name: str
    param_site: str
    max_rel_err: float
    max_abs_err: float
    passed: bool


def fd_gradient(f, theta: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. theta (perturbed in place)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros_like(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_sites(op_name, loss_fn, sites, analytic, eps=DEFAULT_EPS,
                tol=DEFAULT_TOL, floor=DEFAULT_FLOOR):
    """Compare analytic gradients against finite differences per site.

    ``sites`` maps site name -> array perturbed in place; ``analytic`` maps
    site name -> analytic gradient (already computed).
    """
    reports = []
    for name, theta in sites.items():
        fd = fd_gradient(loss_fn, theta, eps)
        an = np.asarray(analytic[name], dtype=np.float64)
        abs_err = np.abs(an - fd)
        rel = rel_err(an, fd)
        ok = (rel < tol) | (abs_err < floor)
        reports.append(GradReport(
            op_name=op_name, param_site=name,
            max_rel_err=float(rel.max()) if rel.size else 0.0,
            max_abs_err=float(abs_err.max()) if abs_err.size else 0.0,
            passed=bool(ok.all()),
        ))
    return reports


def _draw(rng, shape):
    return rng.standard_normal(shape).astype(np.float64)


def _draw_safe(make_loss, rng, max_tries=50):
    """Redraw until no recorded kink margin is below KINK_MARGIN.

    ``make_loss`` draws fresh tensors from rng and returns (loss_fn, sites,
    analytic_fn); loss_fn is probed once under a KinkTrace.
    """
    for _ in range(max_tries):
        loss_fn, sites, analytic = make_loss(rng)
        with KinkTrace() as trace:
            loss_fn()
        if trace.min_margin >= KINK_MARGIN:
            return loss_fn, sites, analytic
    raise RuntimeError("could not draw a kink-free configuration")


# ---------------------------------------------------------------------------
# primitive operator checks
# ---------------------------------------------------------------------------

def _weighted_sum(out_values, weights):
    return float((out_values * weights).sum())


def check_op_suite(seed: int = 0, shapes=((1, 3, 4, 4), (2, 1, 5, 2), (1, 16, 2, 5))):
    """Gradcheck every primitive operator over a set of shapes."""
    rng = np.random.default_rng(seed)
    reports = []

    def simple(op_name, shape, forward, n_inputs=1):
        """forward(xs) -> (out, backward); backward(g) -> grads per input."""
        xs = [_draw(rng, shape) for _ in range(n_inputs)]
        out, _ = forward([Tensor4(x) for x in xs])
        w = _draw(rng, out.shape)

        def loss():
            o, _ = forward([Tensor4(x) for x in xs])
            return _weighted_sum(o.values, w)

        out, bwd = forward([Tensor4(x) for x in xs])
        grads = bwd(w)
        sites = {f"x{i}": xs[i] for i in range(n_inputs)}
        analytic = {f"x{i}": grads[i] for i in range(n_inputs)}
        reports.extend(check_sites(op_name, loss, sites, analytic))

    for shape in shapes:
        n, c, h, w4 = shape
        simple("global_avg_pool", shape, lambda xs: T.global_avg_pool(xs[0]))
        simple("channel_reduce_avg", shape, lambda xs: T.channel_reduce_avg(xs[0]))
        simple("sigmoid", shape, lambda xs: T.sigmoid(xs[0]))
        simple("tanh_act", shape, lambda xs: T.tanh_act(xs[0]))
        simple("silu", shape, lambda xs: T.silu(xs[0]))
        simple("add", shape, lambda xs: T.add(xs[0], xs[1]), n_inputs=2)

        # relu: redraw inputs that sit within the kink margin of zero
        def make_relu(r):
            x = _draw(r, shape)
            wgt = _draw(r, shape)

            def loss():
                o, _ = T.relu(Tensor4(x))
                return _weighted_sum(o.values, wgt)

            def analytic():
                o, bwd = T.relu(Tensor4(x))
                return {"x": bwd(wgt)[0]}

            return loss, {"x": x}, analytic

        loss, sites, analytic = _draw_safe(make_relu, rng)
        reports.extend(check_sites("relu", loss, sites, analytic()))

        # max reductions: redraw near-ties handled via KinkTrace
        def make_maxpool(r):
            x = _draw(r, shape)
            wgt = _draw(r, (n, c, 1, 1))

            def loss():
                o, _ = T.global_max_pool(Tensor4(x))
                return _weighted_sum(o.values, wgt)

            def analytic():
                o, bwd = T.global_max_pool(Tensor4(x))
                return {"x": bwd(wgt)[0]}

            return loss, {"x": x}, analytic

        loss, sites, analytic = _draw_safe(make_maxpool, rng)
        reports.extend(check_sites("global_max_pool", loss, sites, analytic()))

        if c > 1:
            def make_cmax(r):
                x = _draw(r, shape)
                wgt = _draw(r, (n, 1, h, w4))

                def loss():
                    o, _ = T.channel_reduce_max(Tensor4(x))
                    return _weighted_sum(o.values, wgt)

                def analytic():
                    o, bwd = T.channel_reduce_max(Tensor4(x))
                    return {"x": bwd(wgt)[0]}

                return loss, {"x": x}, analytic

            loss, sites, analytic = _draw_safe(make_cmax, rng)
            reports.extend(check_sites("channel_reduce_max", loss, sites, analytic()))

    # fc
    n, cin, cout = 2, 5, 3
    x = _draw(rng, (n, cin, 1, 1))
    W = _draw(rng, (cout, cin))
    b = _draw(rng, (cout,))
    wgt = _draw(rng, (n, cout, 1, 1))

    def fc_loss():
        o, _ = T.fc(Tensor4(x), W, b)
        return _weighted_sum(o.values, wgt)

    _, bwd = T.fc(Tensor4(x), W, b)
    gx, gW, gb = bwd(wgt)
    reports.extend(check_sites("fc", fc_loss, {"x": x, "W": W, "b": b},
                               {"x": gx, "W": gW, "b": gb}))

    # conv2d over a few geometries
    for (cin, cout, k, stride, pad, hw) in [(2, 1, 3, 1, 1, 5), (3, 4, 3, 2, 1, 6),
                                            (1, 2, 1, 1, 0, 4)]:
        x = _draw(rng, (1, cin, hw, hw))
        kern = _draw(rng, (cout, cin, k, k))
        b = _draw(rng, (cout,))
        out, bwd = T.conv2d(Tensor4(x), kern, b, stride, pad)
        wgt = _draw(rng, out.shape)

        def conv_loss():
            o, _ = T.conv2d(Tensor4(x), kern, b, stride, pad)
            return _weighted_sum(o.values, wgt)

        gx, gk, gb = bwd(wgt)
        reports.extend(check_sites(f"conv2d(k={k},s={stride},p={pad})", conv_loss,
                                   {"x": x, "kernel": kern, "b": b},
                                   {"x": gx, "kernel": gk, "b": gb}))

    # broadcast_mul, both gate shapes
    for gshape in [(2, 3, 1, 1), (2, 1, 4, 4)]:
        x = _draw(rng, (2, 3, 4, 4))
        gt = _draw(rng, gshape)
        wgt = _draw(rng, (2, 3, 4, 4))

        def bm_loss():
            o, _ = T.broadcast_mul(Tensor4(x), Tensor4(gt))
            return _weighted_sum(o.values, wgt)

        _, bwd = T.broadcast_mul(Tensor4(x), Tensor4(gt))
        gx, gg = bwd(wgt)
        reports.extend(check_sites(f"broadcast_mul{gshape}", bm_loss,
                                   {"x": x, "gate": gt}, {"x": gx, "gate": gg}))

    # concat / split
    a = _draw(rng, (1, 2, 3, 3))
    b2 = _draw(rng, (1, 4, 3, 3))
    wgt = _draw(rng, (1, 6, 3, 3))

    def cat_loss():
        o, _ = T.concat_channels(Tensor4(a), Tensor4(b2))
        return _weighted_sum(o.values, wgt)

    _, bwd = T.concat_channels(Tensor4(a), Tensor4(b2))
    ga, gb = bwd(wgt)
    reports.extend(check_sites("concat_channels", cat_loss, {"a": a, "b": b2},
                               {"a": ga, "b": gb}))

    x = _draw(rng, (1, 6, 2, 2))
    wa = _draw(rng, (1, 2, 2, 2))
    wb = _draw(rng, (1, 4, 2, 2))

    def split_loss():
        pa, pb, _ = T.split_channels(Tensor4(x), 2)
        return _weighted_sum(pa.values, wa) + _weighted_sum(pb.values, wb)

    _, _, bwd = T.split_channels(Tensor4(x), 2)
    (gx,) = bwd(wa, wb)
    reports.extend(check_sites("split_channels", split_loss, {"x": x}, {"x": gx}))

    # batchnorm (training mode)
    x = _draw(rng, (2, 3, 4, 4))
    gamma = 1.0 + 0.1 * _draw(rng, (3,))
    beta = 0.1 * _draw(rng, (3,))
    wgt = _draw(rng, (2, 3, 4, 4))

    def bn_loss():
        o, _ = T.batchnorm(Tensor4(x), gamma, beta)
        return _weighted_sum(o.values, wgt)

    _, bwd = T.batchnorm(Tensor4(x), gamma, beta)
    gx, gg, gb = bwd(wgt)
    reports.extend(check_sites("batchnorm", bn_loss, {"x": x, "gamma": gamma, "beta": beta},
                               {"x": gx, "gamma": gg, "beta": gb}))

    return reports


# ---------------------------------------------------------------------------
# module checks
# ---------------------------------------------------------------------------

def _randomize_params(module, rng, scale=0.5):
    for p in module.parameters():
        p.value[...] = scale * rng.standard_normal(p.value.shape)


def _check_module(name, module, input_shape, rng, tol=DEFAULT_TOL):
    """FD-check every parameter of a module plus its input."""
    def make(r):
        x = _draw(r, input_shape)
        out = module.forward(Tensor4(x), training=True)
        wgt = _draw(r, out.shape)

        def loss():
            o = module.forward(Tensor4(x), training=True)
            return _weighted_sum(o.values, wgt)

        sites = {"input": x}
        sites.update({p.name: p.value for p in module.parameters()})

        def analytic():
            module.zero_grad()
            o = module.forward(Tensor4(x), training=True)
            gx = module.backward(wgt)
            grads = {"input": gx}
            grads.update({p.name: p.grad.copy() for p in module.parameters()})
            return grads

        return loss, sites, analytic

    loss, sites, analytic = _draw_safe(make, rng)
    return check_sites(name, loss, sites, analytic(), tol=tol)


def check_attention(kind: str, input_shape, gate: GateKind, seed: int = 0,
                    reduction: int = 4, kernel_size: int = 3):
    """Gradcheck an SE or CBAM block with random (non-identity) parameters."""
    rng = np.random.default_rng(seed)
    c = input_shape[1]
    if kind == "se":
        module = SEBlock(c, reduction, gate, rng=rng, dtype=np.float64)
    elif kind == "cbam":
        module = CBAMBlock(c, reduction, kernel_size, gate, rng=rng, dtype=np.float64)
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    _randomize_params(module, rng)
    return _check_module(f"{kind}[{gate.value}]", module, input_shape, rng)


def check_backbone(input_shape=(1, 3, 8, 8), seed: int = 0, n_stages: int = 2):
    """Gradcheck a truncated backbone (narrow channels for tractability)."""
    rng = np.random.default_rng(seed)
    design = build_design(5, gate=GateKind.RESIDUAL_TANH, ladder=(16, 32, 64, 128, 256),
                         width_multiplier=0.25, reduction=4, spatial_kernel=3)
    design.stages = design.stages[:n_stages]
    bb = Backbone(design, seed=seed, dtype=np.float64)
    # perturb every parameter away from the identity-safe zeros so all
    # gradient paths (attention projections included) are active
    for p in bb.parameters():
        p.value[...] = p.value + 0.05 * rng.standard_normal(p.value.shape)

    class Wrapper:
        def parameters(self):
            return bb.parameters()

        def zero_grad(self):
            bb.zero_grad()

        def forward(self, x, training=True):
            self._outs = bb.forward(x, training)
            flat = np.concatenate([o.values.reshape(-1) for o in self._outs])
            return Tensor4(flat.reshape(1, 1, 1, -1))

        def backward(self, g):
            gf = g.reshape(-1)
            grads, at = [], 0
            for o in self._outs:
                grads.append(gf[at:at + o.values.size].reshape(o.shape))
                at += o.values.size
            return bb.backward(grads)

    return _check_module(f"backbone[{n_stages}-stage]", Wrapper(), input_shape, rng)


def run_full_suite(seed: int = 0):
    """The CLI gradcheck entry point: all operators, both attention blocks
    under both gates, and a 2-stage backbone."""
    reports = check_op_suite(seed)
    for gate in (GateKind.RESIDUAL_TANH, GateKind.SIGMOID_ORIGINAL):
        reports += check_attention("se", (1, 3, 4, 4), gate, seed=seed + 1)
        reports += check_attention("cbam", (1, 8, 5, 5), gate, seed=seed + 2)
    reports += check_backbone(seed=seed + 3)
    return reports


def format_reports(reports) -> str:
    lines = [f"{'op':32s} {'site':34s} {'max_rel':>10s} {'max_abs':>10s}  result"]
    for r in reports:
        lines.append(f"{r.op_name:32s} {r.param_site:34s} "
                     f"{r.max_rel_err:10.2e} {r.max_abs_err:10.2e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in reports)
    lines.append(f"{len(reports)} sites checked, {n_fail} failures")
    return "\n".join(lines)
